// embedding.hpp - appearance feature space
//
// Features are plain n-dimensional arrays. Two interchangeable sources are
// provided: a deterministic synthetic world (per-identity cluster centres
// with isotropic noise and optional drift) and a text feature file produced
// offline. The VGG11 shape plan documents the convolutional embedder the
// feature files are expected to come from; it is arithmetic only, no
// convolutions are executed here.
#pragma once

#include <Eigen/Dense>

#include <fstream>
#include <string>
#include <vector>

#include "msdoas/common.hpp"

namespace msdoas {

using FeatureVector = Eigen::VectorXd;

struct ObservationMeta {
  int identity = 0;
  int frame = 0;
  std::string sequence;
};

struct Observation {
  ObservationMeta meta;
  FeatureVector feature;
};

// ---------------------------------------------------------------------------
// VGG11 shape plan
// ---------------------------------------------------------------------------

enum class LayerKind { conv, pool, fully_connected };

struct TensorShape {
  int rows = 0;
  int cols = 0;
  int channels = 0;
  bool operator==(const TensorShape&) const = default;
};

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  TensorShape input;
  TensorShape output;
  // conv/pool kernels are rows x cols x filters; stride applies to pools
  int kernel_rows = 0;
  int kernel_cols = 0;
  int kernel_filters = 0;
  int stride = 1;
  int outputs = 0;  // fully-connected layers only
};

// 16-layer progression of the VGG11 embedder (final SoftMax removed, so the
// network ends in the 1000-wide FC feature output). Spatial dims must be
// divisible by 32: the five 2x2/stride-2 poolings each halve them.
inline std::vector<LayerSpec> vgg11_shape_plan(TensorShape input) {
  if (input.rows <= 0 || input.cols <= 0 || input.channels <= 0)
    throw DataError("vgg11_shape_plan: input dimensions must be positive");
  if (input.rows % 32 != 0 || input.cols % 32 != 0)
    throw DataError("vgg11_shape_plan: spatial size " +
                    std::to_string(input.rows) + "x" +
                    std::to_string(input.cols) +
                    " not divisible by 32 (five 2x pool stages)");

  std::vector<LayerSpec> plan;
  TensorShape shape = input;

  const auto conv = [&](const std::string& name, int filters) {
    LayerSpec layer;
    layer.name = name;
    layer.kind = LayerKind::conv;
    layer.input = shape;
    layer.kernel_rows = 3;
    layer.kernel_cols = 3;
    layer.kernel_filters = shape.channels;
    shape.channels = filters;  // 3x3 kernels with padding keep rows/cols
    layer.output = shape;
    plan.push_back(layer);
  };
  const auto pool = [&](const std::string& name) {
    LayerSpec layer;
    layer.name = name;
    layer.kind = LayerKind::pool;
    layer.input = shape;
    layer.kernel_rows = 2;
    layer.kernel_cols = 2;
    layer.kernel_filters = shape.channels;
    layer.stride = 2;
    shape.rows /= 2;
    shape.cols /= 2;
    layer.output = shape;
    plan.push_back(layer);
  };
  const auto fc = [&](const std::string& name, int outputs) {
    LayerSpec layer;
    layer.name = name;
    layer.kind = LayerKind::fully_connected;
    layer.input = shape;
    layer.outputs = outputs;
    shape = TensorShape{1, 1, outputs};
    layer.output = shape;
    plan.push_back(layer);
  };

  conv("Conv-1-1", 64);
  pool("Pool-1");
  conv("Conv-2-1", 128);
  pool("Pool-2");
  conv("Conv-3-1", 256);
  conv("Conv-3-2", 256);
  pool("Pool-3");
  conv("Conv-4-1", 512);
  conv("Conv-4-2", 512);
  pool("Pool-4");
  conv("Conv-5-1", 512);
  conv("Conv-5-2", 512);
  pool("Pool-5");
  fc("FC-6", 4096);
  fc("FC-7", 4096);
  fc("FC-8", 1000);
  return plan;
}

// ---------------------------------------------------------------------------
// Synthetic feature source
// ---------------------------------------------------------------------------

// Desk-scale stand-in for the convolutional embedder. Identity k lives at a
// cluster centre (separation/sqrt(2)) * e_k, so every pair of centres is
// exactly `separation` apart. noise_scale is the RMS norm of the
// per-observation perturbation; drift_per_frame moves the centre along a
// fixed per-identity direction.
struct SyntheticWorldConfig {
  int identity_count = 8;
  double separation = 10.0;
  double noise_scale = 1.0;
  double drift_per_frame = 0.0;
  int feature_dim = 1000;
  int identity_offset = 0;  // first identity id, for pooling several worlds
  std::uint64_t seed = 0;

  void validate() const {
    if (identity_count <= 0)
      throw UsageError("synthetic world: identity count must be >= 1");
    if (separation <= 0.0)
      throw UsageError("synthetic world: separation must be > 0");
    if (noise_scale <= 0.0)
      throw UsageError("synthetic world: noise scale must be > 0");
    if (drift_per_frame < 0.0)
      throw UsageError("synthetic world: drift must be >= 0");
    if (feature_dim <= 0)
      throw UsageError("synthetic world: feature dimension must be >= 1");
    if (identity_offset < 0)
      throw UsageError("synthetic world: identity offset must be >= 0");
    if (identity_offset + identity_count > feature_dim)
      throw UsageError(
          "synthetic world: identity ids must fit the feature dimension "
          "(identity_offset + identity_count <= n)");
  }
};

namespace detail {
constexpr std::uint64_t kNoiseStream = 0x5e6f7a8b9cadbecfull;
constexpr std::uint64_t kDriftStream = 0x1f2e3d4c5b6a7988ull;
}  // namespace detail

// Pure function of (identity, frame, config). Same inputs, same vector.
inline FeatureVector synth_feature(int identity, int frame,
                                   const SyntheticWorldConfig& cfg) {
  cfg.validate();
  if (identity < cfg.identity_offset ||
      identity >= cfg.identity_offset + cfg.identity_count)
    throw DataError("synth_feature: unknown identity " +
                    std::to_string(identity));
  if (frame < 0) throw DataError("synth_feature: frame must be >= 0");

  const int n = cfg.feature_dim;
  FeatureVector v = FeatureVector::Zero(n);
  v[identity] = cfg.separation / std::sqrt(2.0);

  if (cfg.drift_per_frame > 0.0 && frame > 0) {
    Rng dir_rng(mix_seed(cfg.seed, detail::kDriftStream,
                         static_cast<std::uint64_t>(identity)));
    FeatureVector dir(n);
    for (int j = 0; j < n; ++j) dir[j] = dir_rng.normal();
    const double norm = dir.norm();
    if (norm > 0.0) v += (cfg.drift_per_frame * frame / norm) * dir;
  }

  Rng noise_rng(mix_seed(mix_seed(cfg.seed, detail::kNoiseStream),
                         static_cast<std::uint64_t>(identity),
                         static_cast<std::uint64_t>(frame)));
  const double sigma = cfg.noise_scale / std::sqrt(static_cast<double>(n));
  for (int j = 0; j < n; ++j) v[j] += sigma * noise_rng.normal();
  return v;
}

// Full observation pool for a synthetic sequence: every identity observed at
// every frame in [1, frame_count].
inline std::vector<Observation> synth_pool(const SyntheticWorldConfig& cfg,
                                           int frame_count,
                                           const std::string& sequence) {
  cfg.validate();
  if (frame_count <= 0) throw UsageError("synth_pool: frame count must be >= 1");
  std::vector<Observation> pool;
  pool.reserve(static_cast<std::size_t>(cfg.identity_count) * frame_count);
  for (int id = cfg.identity_offset; id < cfg.identity_offset + cfg.identity_count;
       ++id) {
    for (int frame = 1; frame <= frame_count; ++frame) {
      pool.push_back(Observation{ObservationMeta{id, frame, sequence},
                                 synth_feature(id, frame, cfg)});
    }
  }
  return pool;
}

// ---------------------------------------------------------------------------
// Distances
// ---------------------------------------------------------------------------

// Plain L2; the single-shot baseline compares feature pairs with this.
inline double euclidean_distance(const FeatureVector& a,
                                 const FeatureVector& b) {
  if (a.size() != b.size())
    throw DataError("euclidean_distance: dimension mismatch " +
                    std::to_string(a.size()) + " vs " +
                    std::to_string(b.size()));
  return (a - b).norm();
}

// ---------------------------------------------------------------------------
// Feature file format
// ---------------------------------------------------------------------------
// UTF-8 text. Header line `n=<dim>`, then one record per line:
//   sequence,frame,id,v0,v1,...,v{n-1}
// Values are printed at 9 significant digits.

inline std::vector<Observation> load_features(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open feature file: " + path);

  std::string line;
  if (!std::getline(in, line))
    throw DataError(path + ": empty file, expected 'n=<dim>' header");
  const std::string_view header = trim(line);
  if (!header.starts_with("n="))
    throw DataError(path + ":1: expected 'n=<dim>' header, got '" + line + "'");
  const std::int64_t n = parse_int(header.substr(2), path + ":1: header");
  if (n < 0) throw DataError(path + ":1: feature dimension must be >= 0");

  std::vector<Observation> records;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string ctx = path + ":" + std::to_string(line_no);
    const auto fields = split(line, ',');
    if (static_cast<std::int64_t>(fields.size()) != 3 + n)
      throw DataError(ctx + ": expected " + std::to_string(3 + n) +
                      " fields for n=" + std::to_string(n) + ", got " +
                      std::to_string(fields.size()));
    Observation obs;
    obs.meta.sequence = std::string(trim(fields[0]));
    obs.meta.frame = static_cast<int>(parse_int(fields[1], ctx + ": frame"));
    obs.meta.identity = static_cast<int>(parse_int(fields[2], ctx + ": id"));
    if (obs.meta.frame < 0 || obs.meta.identity < 0)
      throw DataError(ctx + ": frame and id must be non-negative");
    obs.feature.resize(n);
    for (std::int64_t j = 0; j < n; ++j) {
      const double v = parse_real(fields[3 + j], ctx + ": value " +
                                                     std::to_string(j));
      if (!std::isfinite(v)) throw DataError(ctx + ": non-finite value");
      obs.feature[j] = v;
    }
    records.push_back(std::move(obs));
  }
  return records;
}

inline void store_features(const std::vector<Observation>& records,
                           const std::string& path) {
  std::int64_t n = records.empty() ? 0 : records.front().feature.size();
  std::string out;
  out += "n=" + std::to_string(n) + "\n";
  for (const Observation& obs : records) {
    if (obs.feature.size() != n)
      throw DataError("store_features: mixed feature dimensions");
    if (obs.meta.sequence.find(',') != std::string::npos)
      throw DataError("store_features: sequence tag must not contain ','");
    out += obs.meta.sequence;
    out += ',' + std::to_string(obs.meta.frame);
    out += ',' + std::to_string(obs.meta.identity);
    for (std::int64_t j = 0; j < n; ++j) {
      if (!std::isfinite(obs.feature[j]))
        throw DataError("store_features: non-finite value");
      out += ',';
      out += format_g9(obs.feature[j]);
    }
    out += '\n';
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << out;
  if (!f) throw DataError("write failed: " + path);
}

}  // namespace msdoas
