// tracker.hpp - online tracking by detection
//
// Frame-by-frame association of detections to tracked agents. The pairwise
// cost blends the learned appearance score with a constant-velocity IoU
// motion cue; assignment is solved optimally per frame, and a pair is
// admissible when either cue passes its gate. Confirmed tracks accumulate up
// to T history features (newest first); frames with no match append nothing,
// which is exactly the gap pattern the scorer was trained on.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <deque>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "msdoas/assignment.hpp"
#include "msdoas/common.hpp"
#include "msdoas/embedding.hpp"
#include "msdoas/model.hpp"

namespace msdoas {

struct Bbox {
  double left = 0.0, top = 0.0, width = 0.0, height = 0.0;
  double right() const { return left + width; }
  double bottom() const { return top + height; }
};

struct Detection {
  int frame = 0;
  Bbox bbox;
  double confidence = 1.0;
  FeatureVector feature;
};

enum class TrackStatus { tentative, active, lost };

struct Track {
  int id = 0;
  TrackStatus status = TrackStatus::tentative;
  std::deque<std::pair<FeatureVector, int>> history;  // (feature, frame), newest first
  Bbox last_bbox;
  int last_frame = 0;
  double last_confidence = 1.0;
  double velocity_x = 0.0, velocity_y = 0.0;  // pixels per frame
  int missed = 0;
  int consecutive_hits = 0;
};

struct TrackerConfig {
  int memory = 5;                      // T, must equal the model's memory
  double appearance_weight = 0.7;      // lambda
  double association_threshold = 0.5;  // appearance gate
  double iou_gate = 0.1;               // motion gate
  int max_age = 30;                    // missed frames before deletion
  int confirm_hits = 3;                // consecutive hits before tentative -> active
  double confidence_floor = 0.3;

  void validate() const {
    if (memory < 1) throw UsageError("tracker: T must be >= 1");
    if (appearance_weight < 0.0 || appearance_weight > 1.0)
      throw UsageError("tracker: appearance weight must lie in [0, 1]");
    if (max_age < 1) throw UsageError("tracker: max_age must be >= 1");
    if (confirm_hits < 1) throw UsageError("tracker: confirm_hits must be >= 1");
  }
};

struct ResultRow {
  int frame = 0;
  int id = 0;
  Bbox bbox;
  double confidence = 1.0;
};

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

inline double iou(const Bbox& a, const Bbox& b) {
  const double ix = std::max(
      0.0, std::min(a.right(), b.right()) - std::max(a.left, b.left));
  const double iy = std::max(
      0.0, std::min(a.bottom(), b.bottom()) - std::max(a.top, b.top));
  const double inter = ix * iy;
  const double uni = a.width * a.height + b.width * b.height - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Last box translated by velocity x frame gap; a single observation predicts
// in place.
inline Bbox predict_bbox(const Track& track, int frame) {
  const int gap = frame - track.last_frame;
  Bbox b = track.last_bbox;
  b.left += track.velocity_x * gap;
  b.top += track.velocity_y * gap;
  return b;
}

// ---------------------------------------------------------------------------
// Cost matrix
// ---------------------------------------------------------------------------

struct CostMatrix {
  Eigen::MatrixXd cost;  // tracks x detections
  AllowedMask allowed;
};

namespace detail {

inline std::vector<FeatureVector> track_history_features(const Track& t) {
  std::vector<FeatureVector> h;
  h.reserve(t.history.size());
  for (const auto& [feature, frame] : t.history) h.push_back(feature);
  return h;
}

inline CostMatrix cost_matrix_subset(const std::vector<Track>& tracks,
                                     const std::vector<int>& track_idx,
                                     const std::vector<Detection>& dets,
                                     const MsDoasModel& model,
                                     const TrackerConfig& cfg) {
  CostMatrix m;
  const int rows = static_cast<int>(track_idx.size());
  const int cols = static_cast<int>(dets.size());
  m.cost.resize(rows, cols);
  m.allowed = AllowedMask::Constant(rows, cols, false);
  for (int i = 0; i < rows; ++i) {
    const Track& track = tracks[track_idx[i]];
    const std::vector<FeatureVector> history = track_history_features(track);
    for (int j = 0; j < cols; ++j) {
      const Bbox predicted = predict_bbox(track, dets[j].frame);
      const double overlap = iou(predicted, dets[j].bbox);
      const double similarity = msdoas(model, dets[j].feature, history);
      m.cost(i, j) = cfg.appearance_weight * (1.0 - similarity) +
                     (1.0 - cfg.appearance_weight) * (1.0 - overlap);
      // either cue may admit the pair
      m.allowed(i, j) = similarity >= cfg.association_threshold ||
                        overlap >= cfg.iou_gate;
    }
  }
  return m;
}

}  // namespace detail

inline CostMatrix cost_matrix(const std::vector<Track>& tracks,
                              const std::vector<Detection>& dets,
                              const MsDoasModel& model,
                              const TrackerConfig& cfg) {
  cfg.validate();
  if (model.config.memory != cfg.memory)
    throw UsageError("cost_matrix: model T and tracker T differ");
  std::vector<int> all(tracks.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return detail::cost_matrix_subset(tracks, all, dets, model, cfg);
}

// ---------------------------------------------------------------------------
// Per-frame step
// ---------------------------------------------------------------------------

struct TrackerState {
  std::vector<Track> tracks;
  int next_id = 1;  // ids are never reused within a sequence
};

// One frame of association and lifecycle. Detections must share a frame and
// already be confidence-filtered. Confirmed tracks matched this frame are
// emitted.
inline std::vector<ResultRow> step(TrackerState& state,
                                   const std::vector<Detection>& dets,
                                   const MsDoasModel& model,
                                   const TrackerConfig& cfg) {
  cfg.validate();
  if (model.config.memory != cfg.memory)
    throw UsageError("step: model T and tracker T differ");
  if (dets.empty() && state.tracks.empty()) return {};
  int frame = dets.empty() ? 0 : dets.front().frame;
  for (const Detection& d : dets)
    if (d.frame != frame) throw DataError("step: detections from mixed frames");

  std::vector<char> track_matched(state.tracks.size(), 0);
  std::vector<int> det_track(dets.size(), -1);  // matched track index per det

  // pass 1: confirmed (active + lost) tracks; pass 2: tentative tracks over
  // what is left, so newborn tracks never steal a confirmed identity
  for (const bool tentative_pass : {false, true}) {
    std::vector<int> track_idx;
    for (std::size_t i = 0; i < state.tracks.size(); ++i) {
      const bool is_tentative =
          state.tracks[i].status == TrackStatus::tentative;
      if (is_tentative == tentative_pass) track_idx.push_back(static_cast<int>(i));
    }
    std::vector<int> det_idx;
    for (std::size_t j = 0; j < dets.size(); ++j)
      if (det_track[j] < 0) det_idx.push_back(static_cast<int>(j));
    if (track_idx.empty() || det_idx.empty()) continue;

    std::vector<Detection> subset;
    subset.reserve(det_idx.size());
    for (int j : det_idx) subset.push_back(dets[j]);
    const CostMatrix m =
        detail::cost_matrix_subset(state.tracks, track_idx, subset, model, cfg);
    const AssignmentResult assignment = solve_assignment(m.cost, m.allowed);
    for (const auto& [r, c] : assignment.matches) {
      track_matched[track_idx[r]] = 1;
      det_track[det_idx[c]] = track_idx[r];
    }
  }

  // lifecycle updates
  for (std::size_t j = 0; j < dets.size(); ++j) {
    if (det_track[j] < 0) continue;
    Track& track = state.tracks[det_track[j]];
    const Detection& det = dets[j];
    const int gap = det.frame - track.last_frame;
    if (gap > 0) {
      track.velocity_x = (det.bbox.left - track.last_bbox.left) / gap;
      track.velocity_y = (det.bbox.top - track.last_bbox.top) / gap;
    }
    track.history.emplace_front(det.feature, det.frame);
    while (static_cast<int>(track.history.size()) > cfg.memory)
      track.history.pop_back();
    track.last_bbox = det.bbox;
    track.last_frame = det.frame;
    track.last_confidence = det.confidence;
    track.missed = 0;
    ++track.consecutive_hits;
    if (track.status == TrackStatus::lost) track.status = TrackStatus::active;
    if (track.status == TrackStatus::tentative &&
        track.consecutive_hits >= cfg.confirm_hits)
      track.status = TrackStatus::active;
  }

  std::vector<Track> survivors;
  survivors.reserve(state.tracks.size());
  for (std::size_t i = 0; i < state.tracks.size(); ++i) {
    Track& track = state.tracks[i];
    if (!track_matched[i]) {
      if (track.status == TrackStatus::tentative) continue;  // dies unconfirmed
      ++track.missed;
      track.consecutive_hits = 0;
      track.status = TrackStatus::lost;
      if (track.missed > cfg.max_age) continue;
    }
    survivors.push_back(std::move(track));
  }
  state.tracks = std::move(survivors);

  // spawn tentative tracks for leftover detections
  for (std::size_t j = 0; j < dets.size(); ++j) {
    if (det_track[j] >= 0) continue;
    const Detection& det = dets[j];
    Track track;
    track.id = state.next_id++;
    track.status =
        cfg.confirm_hits <= 1 ? TrackStatus::active : TrackStatus::tentative;
    track.history.emplace_front(det.feature, det.frame);
    track.last_bbox = det.bbox;
    track.last_frame = det.frame;
    track.last_confidence = det.confidence;
    track.consecutive_hits = 1;
    state.tracks.push_back(std::move(track));
  }

  std::vector<ResultRow> rows;
  for (const Track& track : state.tracks) {
    if (track.status != TrackStatus::active || track.last_frame != frame ||
        track.missed != 0)
      continue;
    rows.push_back(
        ResultRow{frame, track.id, track.last_bbox, track.last_confidence});
  }
  std::sort(rows.begin(), rows.end(),
            [](const ResultRow& a, const ResultRow& b) { return a.id < b.id; });
  return rows;
}

// ---------------------------------------------------------------------------
// Sequence driver and MOTChallenge file formats
// ---------------------------------------------------------------------------

// Raw detection-file row: frame,id,left,top,width,height,conf,x,y,z.
// The id column is ignored for tracking; the synthetic feature mode reads it
// as the ground-truth identity.
struct DetRow {
  int frame = 0;
  int id = -1;
  Bbox bbox;
  double confidence = 1.0;
};

struct DetFile {
  std::vector<DetRow> rows;
  int skipped = 0;  // malformed lines
};

inline DetFile parse_det_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open detection file: " + path);
  DetFile result;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto fields = split(line, ',');
    if (fields.size() < 7) {
      ++result.skipped;
      continue;
    }
    try {
      DetRow row;
      row.frame = static_cast<int>(parse_int(fields[0], "frame"));
      row.id = static_cast<int>(parse_int(fields[1], "id"));
      row.bbox.left = parse_real(fields[2], "bb_left");
      row.bbox.top = parse_real(fields[3], "bb_top");
      row.bbox.width = parse_real(fields[4], "bb_width");
      row.bbox.height = parse_real(fields[5], "bb_height");
      row.confidence = parse_real(fields[6], "conf");
      if (row.frame < 1 || row.bbox.width <= 0.0 || row.bbox.height <= 0.0) {
        ++result.skipped;
        continue;
      }
      result.rows.push_back(row);
    } catch (const DataError&) {
      ++result.skipped;
    }
  }
  return result;
}

// Pairs each detection with the feature record of the same frame at the same
// within-frame position (file order on both sides).
inline std::vector<Detection> attach_features_from_file(
    const std::vector<DetRow>& rows, const std::vector<Observation>& records) {
  std::map<int, std::vector<const Observation*>> by_frame;
  for (const Observation& obs : records)
    by_frame[obs.meta.frame].push_back(&obs);
  std::map<int, int> cursor;
  std::vector<Detection> dets;
  dets.reserve(rows.size());
  for (const DetRow& row : rows) {
    auto it = by_frame.find(row.frame);
    const int used = cursor[row.frame]++;
    if (it == by_frame.end() || used >= static_cast<int>(it->second.size()))
      throw DataError("feature file has no record for frame " +
                      std::to_string(row.frame) + ", detection " +
                      std::to_string(used));
    dets.push_back(
        Detection{row.frame, row.bbox, row.confidence, it->second[used]->feature});
  }
  return dets;
}

// Synthesises each detection's feature from the det row's id column.
inline std::vector<Detection> attach_synthetic_features(
    const std::vector<DetRow>& rows, const SyntheticWorldConfig& world) {
  std::vector<Detection> dets;
  dets.reserve(rows.size());
  for (const DetRow& row : rows) {
    if (row.id < 0)
      throw DataError("synthetic feature mode needs the id column set");
    dets.push_back(Detection{row.frame, row.bbox, row.confidence,
                             synth_feature(row.id, row.frame, world)});
  }
  return dets;
}

// Runs the tracker over a full sequence: frames ascending, detections below
// the confidence floor dropped.
inline std::vector<ResultRow> run_sequence(const std::vector<Detection>& dets,
                                           const MsDoasModel& model,
                                           const TrackerConfig& cfg) {
  cfg.validate();
  std::map<int, std::vector<Detection>> by_frame;
  for (const Detection& d : dets) {
    if (d.confidence < cfg.confidence_floor) continue;
    by_frame[d.frame].push_back(d);
  }
  TrackerState state;
  std::vector<ResultRow> rows;
  if (by_frame.empty()) return rows;
  const int first = by_frame.begin()->first;
  const int last = by_frame.rbegin()->first;
  const std::vector<Detection> none;
  for (int frame = first; frame <= last; ++frame) {
    // empty frames still age the tracks
    const auto it = by_frame.find(frame);
    const std::vector<Detection>& frame_dets =
        it != by_frame.end() ? it->second : none;
    std::vector<ResultRow> emitted = step(state, frame_dets, model, cfg);
    rows.insert(rows.end(), emitted.begin(), emitted.end());
  }
  return rows;
}

// Submission format: frame,id,bb_left,bb_top,bb_width,bb_height,conf,-1,-1,-1
inline void write_result_rows(const std::vector<ResultRow>& rows,
                              const std::string& path) {
  std::string out;
  for (const ResultRow& r : rows) {
    out += std::to_string(r.frame);
    out += ',' + std::to_string(r.id);
    out += ',' + format_fixed(r.bbox.left, 2);
    out += ',' + format_fixed(r.bbox.top, 2);
    out += ',' + format_fixed(r.bbox.width, 2);
    out += ',' + format_fixed(r.bbox.height, 2);
    out += ',' + format_fixed(r.confidence, 2);
    out += ",-1,-1,-1\n";
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << out;
  if (!f) throw DataError("write failed: " + path);
}

}  // namespace msdoas
