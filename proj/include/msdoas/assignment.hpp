// assignment.hpp - minimum-cost bipartite assignment
//
// O(n^3) Kuhn-Munkres with row/column potentials over a square matrix,
// wrapped for rectangular inputs and forbidden pairs. Forbidden and padded
// cells carry a cost large enough that any allowed match beats leaving the
// pair unmatched, so the solver maximises cardinality first and cost second.
#pragma once

#include <Eigen/Dense>

#include <limits>
#include <utility>
#include <vector>

#include "msdoas/common.hpp"

namespace msdoas {

using AllowedMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct AssignmentResult {
  std::vector<std::pair<int, int>> matches;  // (row, col)
  std::vector<int> unmatched_rows;
  std::vector<int> unmatched_cols;
  double total_cost = 0.0;
};

namespace detail {

constexpr double kForbiddenCost = 1e9;

// row -> assigned column over a square cost matrix
inline std::vector<int> solve_square(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);

  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = std::numeric_limits<double>::infinity();
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j]) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace detail

inline AssignmentResult solve_assignment(const Eigen::MatrixXd& cost,
                                         const AllowedMask& allowed) {
  const int rows = static_cast<int>(cost.rows());
  const int cols = static_cast<int>(cost.cols());
  if (allowed.rows() != rows || allowed.cols() != cols)
    throw DataError("solve_assignment: allowed mask shape mismatch");

  AssignmentResult result;
  if (rows == 0 || cols == 0) {
    for (int i = 0; i < rows; ++i) result.unmatched_rows.push_back(i);
    for (int j = 0; j < cols; ++j) result.unmatched_cols.push_back(j);
    return result;
  }

  const int n = std::max(rows, cols);
  Eigen::MatrixXd padded =
      Eigen::MatrixXd::Constant(n, n, detail::kForbiddenCost);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      if (allowed(i, j)) padded(i, j) = cost(i, j);

  const std::vector<int> row_to_col = detail::solve_square(padded);

  std::vector<char> col_matched(cols, 0);
  for (int i = 0; i < rows; ++i) {
    const int j = row_to_col[i];
    if (j >= 0 && j < cols && allowed(i, j)) {
      result.matches.push_back({i, j});
      result.total_cost += cost(i, j);
      col_matched[j] = 1;
    } else {
      result.unmatched_rows.push_back(i);
    }
  }
  for (int j = 0; j < cols; ++j)
    if (!col_matched[j]) result.unmatched_cols.push_back(j);
  return result;
}

inline AssignmentResult solve_assignment(const Eigen::MatrixXd& cost) {
  return solve_assignment(
      cost, AllowedMask::Constant(cost.rows(), cost.cols(), true));
}

}  // namespace msdoas
