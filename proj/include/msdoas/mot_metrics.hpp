// mot_metrics.hpp - CLEAR-MOT scoring of hypothesis files against ground truth
//
// Per-frame matching with persistence: pairings from the previous frame are
// kept while their IoU stays above the admission threshold, the remainder is
// matched by minimum-cost (1 - IoU) assignment. False positives, misses and
// identity switches accumulate into MOTA; identity-level pairing yields IDF1;
// per-trajectory coverage yields MT/ML.
#pragma once

#include <Eigen/Dense>

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "msdoas/assignment.hpp"
#include "msdoas/common.hpp"
#include "msdoas/tracker.hpp"

namespace msdoas {

struct GtEntry {
  int frame = 0;
  int id = 0;
  Bbox bbox;
  int flag = 1;  // 0 = do not evaluate
  int cls = 1;
  double visibility = 1.0;
};

struct HypEntry {
  int frame = 0;
  int id = 0;
  Bbox bbox;
  double confidence = 1.0;
};

struct MetricsConfig {
  double iou_threshold = 0.5;
  bool exclude_flagged = true;  // drop GT rows with flag 0
};

struct FrameCounts {
  int frame = 0;
  int gt_count = 0;
  int matches = 0;
  int fn = 0;
  int fp = 0;
  int idsw = 0;
};

struct ClearMatchResult {
  std::vector<FrameCounts> frames;
  long gt_total = 0;
  long matches = 0;
  long fn = 0;
  long fp = 0;
  long idsw = 0;
  std::map<int, int> gt_lifespan;  // gt id -> frames present
  std::map<int, int> gt_covered;   // gt id -> frames matched
};

// ---------------------------------------------------------------------------
// File parsing
// ---------------------------------------------------------------------------
// gt.txt:  frame,id,bb_left,bb_top,bb_width,bb_height,flag,class,visibility
// hyp:     frame,id,bb_left,bb_top,bb_width,bb_height,conf,...
// Short rows get defaults for the trailing columns.

inline std::vector<GtEntry> parse_gt_file(const std::string& path,
                                          const MetricsConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open ground-truth file: " + path);
  std::vector<GtEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string ctx = path + ":" + std::to_string(line_no);
    const auto fields = split(line, ',');
    if (fields.size() < 6)
      throw DataError(ctx + ": expected at least 6 comma-separated fields");
    GtEntry e;
    e.frame = static_cast<int>(parse_int(fields[0], ctx + ": frame"));
    e.id = static_cast<int>(parse_int(fields[1], ctx + ": id"));
    e.bbox.left = parse_real(fields[2], ctx + ": bb_left");
    e.bbox.top = parse_real(fields[3], ctx + ": bb_top");
    e.bbox.width = parse_real(fields[4], ctx + ": bb_width");
    e.bbox.height = parse_real(fields[5], ctx + ": bb_height");
    if (fields.size() > 6)
      e.flag = static_cast<int>(parse_real(fields[6], ctx + ": flag"));
    if (fields.size() > 7)
      e.cls = static_cast<int>(parse_real(fields[7], ctx + ": class"));
    if (fields.size() > 8)
      e.visibility = parse_real(fields[8], ctx + ": visibility");
    if (e.frame < 1) throw DataError(ctx + ": frame must be >= 1");
    if (e.bbox.width <= 0.0 || e.bbox.height <= 0.0)
      throw DataError(ctx + ": box sizes must be positive");
    if (cfg.exclude_flagged && e.flag == 0) continue;
    entries.push_back(e);
  }
  return entries;
}

inline std::vector<HypEntry> parse_hyp_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open hypothesis file: " + path);
  std::vector<HypEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string ctx = path + ":" + std::to_string(line_no);
    const auto fields = split(line, ',');
    if (fields.size() < 6)
      throw DataError(ctx + ": expected at least 6 comma-separated fields");
    HypEntry e;
    e.frame = static_cast<int>(parse_int(fields[0], ctx + ": frame"));
    e.id = static_cast<int>(parse_int(fields[1], ctx + ": id"));
    e.bbox.left = parse_real(fields[2], ctx + ": bb_left");
    e.bbox.top = parse_real(fields[3], ctx + ": bb_top");
    e.bbox.width = parse_real(fields[4], ctx + ": bb_width");
    e.bbox.height = parse_real(fields[5], ctx + ": bb_height");
    if (fields.size() > 6)
      e.confidence = parse_real(fields[6], ctx + ": conf");
    if (e.frame < 1) throw DataError(ctx + ": frame must be >= 1");
    if (e.bbox.width <= 0.0 || e.bbox.height <= 0.0)
      throw DataError(ctx + ": box sizes must be positive");
    entries.push_back(e);
  }
  return entries;
}

// ---------------------------------------------------------------------------
// CLEAR matching
// ---------------------------------------------------------------------------

inline ClearMatchResult clear_match(const std::vector<GtEntry>& gt,
                                    const std::vector<HypEntry>& hyp,
                                    double iou_threshold) {
  std::map<int, std::vector<const GtEntry*>> gt_by_frame;
  std::map<int, std::vector<const HypEntry*>> hyp_by_frame;
  std::set<int> frames;
  for (const GtEntry& e : gt) {
    gt_by_frame[e.frame].push_back(&e);
    frames.insert(e.frame);
  }
  for (const HypEntry& e : hyp) {
    hyp_by_frame[e.frame].push_back(&e);
    frames.insert(e.frame);
  }

  ClearMatchResult result;
  std::map<int, int> active_pairs;  // gt id -> hyp id carried from last frame
  std::map<int, int> last_hyp;      // gt id -> most recent matched hyp id

  for (int frame : frames) {
    auto gts = gt_by_frame.count(frame) ? gt_by_frame[frame]
                                        : std::vector<const GtEntry*>{};
    auto hyps = hyp_by_frame.count(frame) ? hyp_by_frame[frame]
                                          : std::vector<const HypEntry*>{};
    // deterministic order: lowest gt id first, then lowest hyp id
    std::sort(gts.begin(), gts.end(),
              [](const GtEntry* a, const GtEntry* b) { return a->id < b->id; });
    std::sort(hyps.begin(), hyps.end(), [](const HypEntry* a, const HypEntry* b) {
      return a->id < b->id;
    });

    std::vector<char> gt_done(gts.size(), 0), hyp_done(hyps.size(), 0);
    std::vector<std::pair<int, int>> pairs;  // (gt index, hyp index)

    // persistence: keep last frame's pairings that still overlap enough
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      const auto it = active_pairs.find(gts[gi]->id);
      if (it == active_pairs.end()) continue;
      for (std::size_t hj = 0; hj < hyps.size(); ++hj) {
        if (hyp_done[hj] || hyps[hj]->id != it->second) continue;
        if (iou(gts[gi]->bbox, hyps[hj]->bbox) >= iou_threshold) {
          pairs.push_back({static_cast<int>(gi), static_cast<int>(hj)});
          gt_done[gi] = 1;
          hyp_done[hj] = 1;
        }
        break;
      }
    }

    // fresh minimum-cost matching over the remainder
    std::vector<int> free_gt, free_hyp;
    for (std::size_t gi = 0; gi < gts.size(); ++gi)
      if (!gt_done[gi]) free_gt.push_back(static_cast<int>(gi));
    for (std::size_t hj = 0; hj < hyps.size(); ++hj)
      if (!hyp_done[hj]) free_hyp.push_back(static_cast<int>(hj));
    if (!free_gt.empty() && !free_hyp.empty()) {
      Eigen::MatrixXd cost(free_gt.size(), free_hyp.size());
      AllowedMask allowed =
          AllowedMask::Constant(free_gt.size(), free_hyp.size(), false);
      for (std::size_t r = 0; r < free_gt.size(); ++r) {
        for (std::size_t c = 0; c < free_hyp.size(); ++c) {
          const double overlap =
              iou(gts[free_gt[r]]->bbox, hyps[free_hyp[c]]->bbox);
          cost(r, c) = 1.0 - overlap;
          allowed(r, c) = overlap >= iou_threshold;
        }
      }
      const AssignmentResult assignment = solve_assignment(cost, allowed);
      for (const auto& [r, c] : assignment.matches)
        pairs.push_back({free_gt[r], free_hyp[c]});
    }

    FrameCounts fc;
    fc.frame = frame;
    fc.gt_count = static_cast<int>(gts.size());
    fc.matches = static_cast<int>(pairs.size());
    fc.fn = static_cast<int>(gts.size() - pairs.size());
    fc.fp = static_cast<int>(hyps.size() - pairs.size());

    std::map<int, int> new_active;
    for (const auto& [gi, hj] : pairs) {
      const int gt_id = gts[gi]->id;
      const int hyp_id = hyps[hj]->id;
      const auto prev = last_hyp.find(gt_id);
      if (prev != last_hyp.end() && prev->second != hyp_id) ++fc.idsw;
      last_hyp[gt_id] = hyp_id;
      new_active[gt_id] = hyp_id;
      ++result.gt_covered[gt_id];
    }
    active_pairs = std::move(new_active);

    for (const GtEntry* g : gts) ++result.gt_lifespan[g->id];

    result.frames.push_back(fc);
    result.gt_total += fc.gt_count;
    result.matches += fc.matches;
    result.fn += fc.fn;
    result.fp += fc.fp;
    result.idsw += fc.idsw;
  }
  return result;
}

// 1 - (FN + FP + IDsw) / total ground-truth objects; at most 1, may go
// negative.
inline double mota(const ClearMatchResult& counts) {
  if (counts.gt_total <= 0)
    throw DataError("mota: no ground-truth objects to score against");
  return 1.0 - static_cast<double>(counts.fn + counts.fp + counts.idsw) /
                   static_cast<double>(counts.gt_total);
}

// ---------------------------------------------------------------------------
// IDF1
// ---------------------------------------------------------------------------

struct IdCounts {
  long idtp = 0, idfp = 0, idfn = 0;
  double idf1() const {
    const long denom = 2 * idtp + idfp + idfn;
    return denom > 0 ? 2.0 * static_cast<double>(idtp) / denom : 0.0;
  }
};

// Optimal global pairing of ground-truth identities with hypothesis
// identities: overlap(g, h) counts frames where both appear with IoU above
// the threshold; the pairing maximising total overlap defines IDTP.
inline IdCounts id_counts(const std::vector<GtEntry>& gt,
                          const std::vector<HypEntry>& hyp,
                          double iou_threshold) {
  std::map<int, long> gt_len, hyp_len;
  for (const GtEntry& e : gt) ++gt_len[e.id];
  for (const HypEntry& e : hyp) ++hyp_len[e.id];

  std::map<int, std::vector<const GtEntry*>> gt_by_frame;
  for (const GtEntry& e : gt) gt_by_frame[e.frame].push_back(&e);
  std::map<std::pair<int, int>, long> overlap;  // (gt id, hyp id) -> frames
  {
    std::map<int, std::vector<const HypEntry*>> hyp_by_frame;
    for (const HypEntry& e : hyp) hyp_by_frame[e.frame].push_back(&e);
    for (const auto& [frame, gts] : gt_by_frame) {
      const auto it = hyp_by_frame.find(frame);
      if (it == hyp_by_frame.end()) continue;
      for (const GtEntry* g : gts)
        for (const HypEntry* h : it->second)
          if (iou(g->bbox, h->bbox) >= iou_threshold) ++overlap[{g->id, h->id}];
    }
  }

  std::vector<int> gt_ids, hyp_ids;
  for (const auto& [id, len] : gt_len) gt_ids.push_back(id);
  for (const auto& [id, len] : hyp_len) hyp_ids.push_back(id);
  const int ng = static_cast<int>(gt_ids.size());
  const int nh = static_cast<int>(hyp_ids.size());

  long total_gt = 0, total_hyp = 0;
  for (const auto& [id, len] : gt_len) total_gt += len;
  for (const auto& [id, len] : hyp_len) total_hyp += len;

  IdCounts counts;
  if (ng == 0 || nh == 0) {
    counts.idfn = total_gt;
    counts.idfp = total_hyp;
    return counts;
  }

  // square (ng+nh) matrix: real cell cost = misses + spurious frames under
  // that pairing; the dummy row/column prices leaving an identity unpaired
  const int n = ng + nh;
  Eigen::MatrixXd cost = Eigen::MatrixXd::Zero(n, n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      if (r < ng && c < nh) {
        const auto it = overlap.find({gt_ids[r], hyp_ids[c]});
        const long o = it != overlap.end() ? it->second : 0;
        cost(r, c) = static_cast<double>(gt_len[gt_ids[r]] - o) +
                     static_cast<double>(hyp_len[hyp_ids[c]] - o);
      } else if (r < ng) {
        cost(r, c) = static_cast<double>(gt_len[gt_ids[r]]);
      } else if (c < nh) {
        cost(r, c) = static_cast<double>(hyp_len[hyp_ids[c]]);
      }
    }
  }
  const std::vector<int> assignment = detail::solve_square(cost);

  long idtp = 0;
  for (int r = 0; r < ng; ++r) {
    const int c = assignment[r];
    if (c >= 0 && c < nh) {
      const auto it = overlap.find({gt_ids[r], hyp_ids[c]});
      if (it != overlap.end()) idtp += it->second;
    }
  }
  counts.idtp = idtp;
  counts.idfn = total_gt - idtp;
  counts.idfp = total_hyp - idtp;
  return counts;
}

inline double idf1(const std::vector<GtEntry>& gt,
                   const std::vector<HypEntry>& hyp, double iou_threshold) {
  return id_counts(gt, hyp, iou_threshold).idf1();
}

// ---------------------------------------------------------------------------
// Trajectory coverage and precision/recall
// ---------------------------------------------------------------------------

struct TrajectoryCoverage {
  int trajectories = 0;
  int mostly_tracked = 0;  // coverage >= 0.8
  int mostly_lost = 0;     // coverage <= 0.2
};

inline TrajectoryCoverage trajectory_coverage(const ClearMatchResult& m) {
  TrajectoryCoverage out;
  for (const auto& [gt_id, lifespan] : m.gt_lifespan) {
    ++out.trajectories;
    const auto it = m.gt_covered.find(gt_id);
    const double coverage =
        lifespan > 0
            ? static_cast<double>(it != m.gt_covered.end() ? it->second : 0) /
                  lifespan
            : 0.0;
    if (coverage >= 0.8) ++out.mostly_tracked;
    if (coverage <= 0.2) ++out.mostly_lost;
  }
  return out;
}

// (MT ratio, ML ratio) over ground-truth trajectories
inline std::pair<double, double> mt_ml(const ClearMatchResult& m) {
  const TrajectoryCoverage c = trajectory_coverage(m);
  if (c.trajectories == 0) return {0.0, 0.0};
  return {static_cast<double>(c.mostly_tracked) / c.trajectories,
          static_cast<double>(c.mostly_lost) / c.trajectories};
}

// P = matches/(matches+FP), R = matches/(matches+FN); empty denominators
// give 0
inline std::pair<double, double> precision_recall(const ClearMatchResult& m) {
  const double p =
      (m.matches + m.fp) > 0
          ? static_cast<double>(m.matches) / static_cast<double>(m.matches + m.fp)
          : 0.0;
  const double r =
      (m.matches + m.fn) > 0
          ? static_cast<double>(m.matches) / static_cast<double>(m.matches + m.fn)
          : 0.0;
  return {p, r};
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct SequenceScore {
  std::string sequence;
  double mota = 0.0;
  long fp = 0, fn = 0, idsw = 0;
  double idf1 = 0.0;
  double mt = 0.0, ml = 0.0;
  double precision = 0.0, recall = 0.0;
  long gt_total = 0, matches = 0;
  IdCounts ids;
  TrajectoryCoverage coverage;
};

struct MotReport {
  std::vector<SequenceScore> sequences;
  SequenceScore global;  // pooled counts, not averaged ratios
};

inline SequenceScore score_sequence(const std::string& name,
                                    const std::vector<GtEntry>& gt,
                                    const std::vector<HypEntry>& hyp,
                                    const MetricsConfig& cfg) {
  const ClearMatchResult m = clear_match(gt, hyp, cfg.iou_threshold);
  SequenceScore s;
  s.sequence = name;
  s.mota = mota(m);
  s.fp = m.fp;
  s.fn = m.fn;
  s.idsw = m.idsw;
  s.gt_total = m.gt_total;
  s.matches = m.matches;
  s.ids = id_counts(gt, hyp, cfg.iou_threshold);
  s.idf1 = s.ids.idf1();
  s.coverage = trajectory_coverage(m);
  const auto [mt_ratio, ml_ratio] = mt_ml(m);
  s.mt = mt_ratio;
  s.ml = ml_ratio;
  const auto [p, r] = precision_recall(m);
  s.precision = p;
  s.recall = r;
  return s;
}

struct SequenceInput {
  std::string name;
  std::vector<GtEntry> gt;
  std::vector<HypEntry> hyp;
};

inline MotReport score(const std::vector<SequenceInput>& sequences,
                       const MetricsConfig& cfg) {
  if (sequences.empty()) throw DataError("score: no sequences given");
  MotReport report;
  SequenceScore& g = report.global;
  g.sequence = "GLOBAL";
  for (const SequenceInput& seq : sequences) {
    SequenceScore s = score_sequence(seq.name, seq.gt, seq.hyp, cfg);
    g.fp += s.fp;
    g.fn += s.fn;
    g.idsw += s.idsw;
    g.gt_total += s.gt_total;
    g.matches += s.matches;
    g.ids.idtp += s.ids.idtp;
    g.ids.idfp += s.ids.idfp;
    g.ids.idfn += s.ids.idfn;
    g.coverage.trajectories += s.coverage.trajectories;
    g.coverage.mostly_tracked += s.coverage.mostly_tracked;
    g.coverage.mostly_lost += s.coverage.mostly_lost;
    report.sequences.push_back(std::move(s));
  }
  if (g.gt_total <= 0) throw DataError("score: empty pooled ground truth");
  g.mota = 1.0 - static_cast<double>(g.fn + g.fp + g.idsw) /
                     static_cast<double>(g.gt_total);
  g.idf1 = g.ids.idf1();
  if (g.coverage.trajectories > 0) {
    g.mt = static_cast<double>(g.coverage.mostly_tracked) /
           g.coverage.trajectories;
    g.ml =
        static_cast<double>(g.coverage.mostly_lost) / g.coverage.trajectories;
  }
  g.precision = (g.matches + g.fp) > 0
                    ? static_cast<double>(g.matches) / (g.matches + g.fp)
                    : 0.0;
  g.recall = (g.matches + g.fn) > 0
                 ? static_cast<double>(g.matches) / (g.matches + g.fn)
                 : 0.0;
  return report;
}

inline void write_report_csv(const MotReport& report, const std::string& path) {
  std::string out = "sequence,MOTA,FP,FN,IDsw,IDF1,MT,ML\n";
  const auto row = [&](const SequenceScore& s) {
    out += s.sequence;
    out += ',' + format_fixed(s.mota, 6);
    out += ',' + std::to_string(s.fp);
    out += ',' + std::to_string(s.fn);
    out += ',' + std::to_string(s.idsw);
    out += ',' + format_fixed(s.idf1, 6);
    out += ',' + format_fixed(s.mt, 6);
    out += ',' + format_fixed(s.ml, 6);
    out += '\n';
  };
  for (const SequenceScore& s : report.sequences) row(s);
  row(report.global);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << out;
  if (!f) throw DataError("write failed: " + path);
}

}  // namespace msdoas
