// model.hpp - the multi-shot appearance-similarity scorer
//
// An LSTM cell consumes the agent's history features (most recent first) and
// its final hidden state is concatenated with the query detection's feature.
// A two-output fully connected head plus softmax turns that into
// (NZ_0, NZ_1): the probabilities that the pair is a mismatch or a match.
// NZ_1 is the similarity score. Training minimises the class-0 cross-entropy
// over balanced tracklet batches with Adagrad, gradients computed exactly by
// backpropagation through time.
#pragma once

#include <Eigen/Dense>

#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "msdoas/common.hpp"
#include "msdoas/tracklet.hpp"

namespace msdoas {

struct ModelConfig {
  int feature_dim = 0;   // n
  int hidden_size = 0;   // H
  int memory = 0;        // T
  static constexpr int class_count = 2;

  void validate() const {
    if (feature_dim < 1 || hidden_size < 1 || memory < 1)
      throw UsageError("model config: n, H and T must all be >= 1");
  }
};

// One weight matrix per input, one per recurrent state, one bias - for each
// of the input/forget/output/candidate gates.
struct LstmParams {
  Eigen::MatrixXd wx_input, wx_forget, wx_output, wx_candidate;  // H x n
  Eigen::MatrixXd wh_input, wh_forget, wh_output, wh_candidate;  // H x H
  Eigen::VectorXd b_input, b_forget, b_output, b_candidate;      // H
};

struct FcParams {
  Eigen::MatrixXd w;  // 2 x (n + H)
  Eigen::VectorXd b;  // 2
};

struct ModelParams {
  LstmParams lstm;
  FcParams fc;
};

struct MsDoasModel {
  ModelConfig config;
  ModelParams params;
};

using Gradients = ModelParams;  // same tensor layout as the parameters

// Visits every tensor in a fixed, serialisation-defining order.
template <class Params, class Fn>
void for_each_tensor(Params&& p, Fn&& fn) {
  fn(p.lstm.wx_input);
  fn(p.lstm.wx_forget);
  fn(p.lstm.wx_output);
  fn(p.lstm.wx_candidate);
  fn(p.lstm.wh_input);
  fn(p.lstm.wh_forget);
  fn(p.lstm.wh_output);
  fn(p.lstm.wh_candidate);
  fn(p.lstm.b_input);
  fn(p.lstm.b_forget);
  fn(p.lstm.b_output);
  fn(p.lstm.b_candidate);
  fn(p.fc.w);
  fn(p.fc.b);
}

template <class A, class B, class C, class Fn>
void zip_tensors(A&& a, B&& b, C&& c, Fn&& fn) {
  fn(a.lstm.wx_input, b.lstm.wx_input, c.lstm.wx_input);
  fn(a.lstm.wx_forget, b.lstm.wx_forget, c.lstm.wx_forget);
  fn(a.lstm.wx_output, b.lstm.wx_output, c.lstm.wx_output);
  fn(a.lstm.wx_candidate, b.lstm.wx_candidate, c.lstm.wx_candidate);
  fn(a.lstm.wh_input, b.lstm.wh_input, c.lstm.wh_input);
  fn(a.lstm.wh_forget, b.lstm.wh_forget, c.lstm.wh_forget);
  fn(a.lstm.wh_output, b.lstm.wh_output, c.lstm.wh_output);
  fn(a.lstm.wh_candidate, b.lstm.wh_candidate, c.lstm.wh_candidate);
  fn(a.lstm.b_input, b.lstm.b_input, c.lstm.b_input);
  fn(a.lstm.b_forget, b.lstm.b_forget, c.lstm.b_forget);
  fn(a.lstm.b_output, b.lstm.b_output, c.lstm.b_output);
  fn(a.lstm.b_candidate, b.lstm.b_candidate, c.lstm.b_candidate);
  fn(a.fc.w, b.fc.w, c.fc.w);
  fn(a.fc.b, b.fc.b, c.fc.b);
}

inline ModelParams zero_params(const ModelConfig& cfg) {
  const int n = cfg.feature_dim, h = cfg.hidden_size;
  ModelParams p;
  for (Eigen::MatrixXd* m : {&p.lstm.wx_input, &p.lstm.wx_forget,
                             &p.lstm.wx_output, &p.lstm.wx_candidate})
    *m = Eigen::MatrixXd::Zero(h, n);
  for (Eigen::MatrixXd* m : {&p.lstm.wh_input, &p.lstm.wh_forget,
                             &p.lstm.wh_output, &p.lstm.wh_candidate})
    *m = Eigen::MatrixXd::Zero(h, h);
  for (Eigen::VectorXd* v : {&p.lstm.b_input, &p.lstm.b_forget,
                             &p.lstm.b_output, &p.lstm.b_candidate})
    *v = Eigen::VectorXd::Zero(h);
  p.fc.w = Eigen::MatrixXd::Zero(2, n + h);
  p.fc.b = Eigen::VectorXd::Zero(2);
  return p;
}

// Uniform [-s, s] with s = 1/sqrt(fan-in) unless an explicit scale is given.
// The forget-gate bias starts at 1 so early cell state survives.
inline MsDoasModel init_model(const ModelConfig& cfg, std::uint64_t seed,
                              double init_scale = 0.0) {
  cfg.validate();
  MsDoasModel model;
  model.config = cfg;
  model.params = zero_params(cfg);
  Rng rng(mix_seed(seed, 0x1477e9a2b3c4d5e6ull));
  const auto fill = [&](Eigen::MatrixXd& m, int fan_in) {
    const double s = init_scale > 0.0 ? init_scale
                                      : 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        m(i, j) = (2.0 * rng.uniform() - 1.0) * s;
  };
  LstmParams& l = model.params.lstm;
  fill(l.wx_input, cfg.feature_dim);
  fill(l.wx_forget, cfg.feature_dim);
  fill(l.wx_output, cfg.feature_dim);
  fill(l.wx_candidate, cfg.feature_dim);
  fill(l.wh_input, cfg.hidden_size);
  fill(l.wh_forget, cfg.hidden_size);
  fill(l.wh_output, cfg.hidden_size);
  fill(l.wh_candidate, cfg.hidden_size);
  l.b_forget.setOnes();
  fill(model.params.fc.w, cfg.feature_dim + cfg.hidden_size);
  return model;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Eigen::VectorXd sigmoid(const Eigen::VectorXd& v) {
  return v.unaryExpr([](double x) { return sigmoid(x); });
}

}  // namespace detail

struct LstmStepCache {
  Eigen::VectorXd x;       // input feature
  Eigen::VectorXd gate_i, gate_f, gate_o, gate_g;
  Eigen::VectorXd c, tanh_c;
  Eigen::VectorXd h_prev, c_prev;
};

struct LstmCache {
  std::vector<LstmStepCache> steps;
  Eigen::VectorXd h_final;
};

// Standard LSTM recurrence with zero initial hidden/cell state. The history
// is consumed in stored order, i.e. most recent observation first.
inline Eigen::VectorXd lstm_forward(const LstmParams& params,
                                    std::span<const FeatureVector> history,
                                    LstmCache* cache = nullptr) {
  if (history.empty()) throw DataError("lstm_forward: empty history");
  const Eigen::Index h_size = params.b_input.size();
  const Eigen::Index n = params.wx_input.cols();

  Eigen::VectorXd h = Eigen::VectorXd::Zero(h_size);
  Eigen::VectorXd c = Eigen::VectorXd::Zero(h_size);
  if (cache) cache->steps.clear();

  for (const FeatureVector& x : history) {
    if (x.size() != n)
      throw DataError("lstm_forward: feature dimension mismatch");
    LstmStepCache step;
    step.h_prev = h;
    step.c_prev = c;
    step.x = x;
    step.gate_i =
        detail::sigmoid(params.wx_input * x + params.wh_input * h + params.b_input);
    step.gate_f = detail::sigmoid(params.wx_forget * x + params.wh_forget * h +
                                  params.b_forget);
    step.gate_o = detail::sigmoid(params.wx_output * x + params.wh_output * h +
                                  params.b_output);
    step.gate_g = (params.wx_candidate * x + params.wh_candidate * h +
                   params.b_candidate)
                      .array()
                      .tanh();
    c = (step.gate_f.array() * c.array() +
         step.gate_i.array() * step.gate_g.array())
            .matrix();
    step.c = c;
    step.tanh_c = c.array().tanh().matrix();
    h = (step.gate_o.array() * step.tanh_c.array()).matrix();
    if (cache) cache->steps.push_back(std::move(step));
  }
  if (cache) cache->h_final = h;
  return h;
}

struct ForwardOutput {
  Eigen::Vector2d z;   // (Z_0, Z_1) raw class scores
  Eigen::Vector2d nz;  // softmax(z); nz[1] is the similarity score
};

struct ForwardCache {
  LstmCache lstm;
  Eigen::VectorXd concat;  // [detection; agent feature]
  ForwardOutput out;
};

inline Eigen::Vector2d softmax2(const Eigen::Vector2d& z) {
  const double m = std::max(z[0], z[1]);
  const double e0 = std::exp(z[0] - m);
  const double e1 = std::exp(z[1] - m);
  const double sum = e0 + e1;
  return {e0 / sum, e1 / sum};
}

// The recurrence consumes the query detection first (the newest capture),
// then the history newest to oldest. The query has to pass through the cell:
// a head that only reads per-side summaries additively cannot test identity
// agreement.
inline ForwardOutput forward(const MsDoasModel& model,
                             const FeatureVector& detection,
                             std::span<const FeatureVector> history,
                             ForwardCache* cache = nullptr) {
  model.config.validate();
  if (detection.size() != model.config.feature_dim)
    throw DataError("forward: detection dimension mismatch");
  if (history.empty()) throw DataError("forward: empty history");
  if (static_cast<int>(history.size()) > model.config.memory)
    throw DataError("forward: history longer than the configured memory T");

  std::vector<FeatureVector> sequence;
  sequence.reserve(history.size() + 1);
  sequence.push_back(detection);
  sequence.insert(sequence.end(), history.begin(), history.end());

  LstmCache local_lstm;
  LstmCache* lstm_cache = cache ? &cache->lstm : &local_lstm;
  const Eigen::VectorXd agent =
      lstm_forward(model.params.lstm, sequence, lstm_cache);

  Eigen::VectorXd concat(detection.size() + agent.size());
  concat << detection, agent;

  ForwardOutput out;
  out.z = model.params.fc.w * concat + model.params.fc.b;
  out.nz = softmax2(out.z);
  if (cache) {
    cache->concat = std::move(concat);
    cache->out = out;
  }
  return out;
}

// The similarity score: probability that the detection matches the agent.
inline double msdoas(const MsDoasModel& model, const FeatureVector& detection,
                     std::span<const FeatureVector> history) {
  return forward(model, detection, history).nz[1];
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Class-0 cross-entropy. nz0 is the mismatch probability, y the tracklet
// label; the class-0 indicator is 1-y. Probabilities are clamped away from
// {0,1} before the log.
inline double cross_entropy(double nz0, int y) {
  constexpr double eps = 1e-12;
  const double p = std::min(std::max(nz0, eps), 1.0 - eps);
  const double y0 = 1.0 - static_cast<double>(y);
  return -y0 * std::log(p) - (1.0 - y0) * std::log(1.0 - p);
}

namespace detail {

inline void check_batch_tracklet(const MsDoasModel& model,
                                 const FeatureTracklet& t) {
  if (t.memory() != model.config.memory)
    throw DataError("batch: tracklet memory does not match model T");
  for (const Observation& c : t.components)
    if (c.feature.size() != model.config.feature_dim)
      throw DataError("batch: tracklet feature dimension does not match model n");
}

}  // namespace detail

// Mean cross-entropy over the batch; component 0 is the query detection and
// components 1..T the history.
inline double batch_loss(const MsDoasModel& model,
                         std::span<const FeatureTracklet> batch) {
  if (batch.empty()) throw DataError("batch_loss: empty batch");
  double total = 0.0;
  std::vector<FeatureVector> history(model.config.memory);
  for (const FeatureTracklet& t : batch) {
    detail::check_batch_tracklet(model, t);
    for (int i = 0; i < model.config.memory; ++i)
      history[i] = t.components[i + 1].feature;
    const ForwardOutput out = forward(model, t.components[0].feature, history);
    total += cross_entropy(out.nz[0], t.label);
  }
  return total / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Exact gradient of batch_loss. Softmax and cross-entropy are fused
// (dZ = NZ - onehot), then the error flows through the FC head and back
// through time over the LSTM steps. Samples are accumulated in batch order
// and averaged, so the result is reproducible bit for bit.
inline Gradients backward(const MsDoasModel& model,
                          std::span<const FeatureTracklet> batch) {
  if (batch.empty()) throw DataError("backward: empty batch");
  Gradients grads = zero_params(model.config);

  std::vector<FeatureVector> history(model.config.memory);
  for (const FeatureTracklet& t : batch) {
    detail::check_batch_tracklet(model, t);
    for (int i = 0; i < model.config.memory; ++i)
      history[i] = t.components[i + 1].feature;

    ForwardCache cache;
    forward(model, t.components[0].feature, history, &cache);

    const double y0 = 1.0 - static_cast<double>(t.label);
    Eigen::Vector2d dz = cache.out.nz - Eigen::Vector2d(y0, 1.0 - y0);

    grads.fc.w.noalias() += dz * cache.concat.transpose();
    grads.fc.b += dz;

    const Eigen::VectorXd dconcat = model.params.fc.w.transpose() * dz;
    Eigen::VectorXd dh = dconcat.tail(model.config.hidden_size);
    Eigen::VectorXd dc_next =
        Eigen::VectorXd::Zero(model.config.hidden_size);

    for (int step = static_cast<int>(cache.lstm.steps.size()) - 1; step >= 0;
         --step) {
      const LstmStepCache& s = cache.lstm.steps[step];
      const Eigen::ArrayXd o = s.gate_o.array();
      const Eigen::ArrayXd i = s.gate_i.array();
      const Eigen::ArrayXd f = s.gate_f.array();
      const Eigen::ArrayXd g = s.gate_g.array();
      const Eigen::ArrayXd tc = s.tanh_c.array();

      const Eigen::ArrayXd d_o = dh.array() * tc;
      const Eigen::ArrayXd dc =
          dc_next.array() + dh.array() * o * (1.0 - tc * tc);
      const Eigen::ArrayXd d_i = dc * g;
      const Eigen::ArrayXd d_g = dc * i;
      const Eigen::ArrayXd d_f = dc * s.c_prev.array();
      dc_next = (dc * f).matrix();

      const Eigen::VectorXd a_i = (d_i * i * (1.0 - i)).matrix();
      const Eigen::VectorXd a_f = (d_f * f * (1.0 - f)).matrix();
      const Eigen::VectorXd a_o = (d_o * o * (1.0 - o)).matrix();
      const Eigen::VectorXd a_g = (d_g * (1.0 - g * g)).matrix();

      grads.lstm.wx_input.noalias() += a_i * s.x.transpose();
      grads.lstm.wx_forget.noalias() += a_f * s.x.transpose();
      grads.lstm.wx_output.noalias() += a_o * s.x.transpose();
      grads.lstm.wx_candidate.noalias() += a_g * s.x.transpose();
      grads.lstm.wh_input.noalias() += a_i * s.h_prev.transpose();
      grads.lstm.wh_forget.noalias() += a_f * s.h_prev.transpose();
      grads.lstm.wh_output.noalias() += a_o * s.h_prev.transpose();
      grads.lstm.wh_candidate.noalias() += a_g * s.h_prev.transpose();
      grads.lstm.b_input += a_i;
      grads.lstm.b_forget += a_f;
      grads.lstm.b_output += a_o;
      grads.lstm.b_candidate += a_g;

      dh = model.params.lstm.wh_input.transpose() * a_i +
           model.params.lstm.wh_forget.transpose() * a_f +
           model.params.lstm.wh_output.transpose() * a_o +
           model.params.lstm.wh_candidate.transpose() * a_g;
    }
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for_each_tensor(grads, [inv_b](auto& tensor) { tensor *= inv_b; });
  return grads;
}

// ---------------------------------------------------------------------------
// Adagrad
// ---------------------------------------------------------------------------

struct AdagradState {
  ModelParams accum;  // per-parameter sums of squared gradients
  double learning_rate = 0.01;
  double epsilon = 1e-8;
};

inline AdagradState make_adagrad_state(const ModelConfig& cfg,
                                       double learning_rate, double epsilon) {
  AdagradState state;
  state.accum = zero_params(cfg);
  state.learning_rate = learning_rate;
  state.epsilon = epsilon;
  return state;
}

// G += g*g; w -= lr * g / (sqrt(G) + eps), element-wise.
inline void adagrad_update(ModelParams& params, AdagradState& state,
                           const Gradients& grads) {
  const double lr = state.learning_rate;
  const double eps = state.epsilon;
  zip_tensors(params, state.accum, grads,
              [lr, eps](auto& w, auto& accum, const auto& g) {
                accum.array() += g.array().square();
                w.array() -= lr * g.array() / (accum.array().sqrt() + eps);
              });
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 32;       // B
  int iterations = 1000;     // IT
  double learning_rate = 0.01;
  double epsilon = 1e-8;
  double init_scale = 0.0;   // 0 -> 1/sqrt(fan-in)
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw UsageError("train: B must be >= 1");
    if (iterations < 0) throw UsageError("train: IT must be >= 0");
    if (learning_rate <= 0.0) throw UsageError("train: lr must be > 0");
  }
};

// Mini-batch gradient descent: per iteration, draw B tracklets, forward,
// mean cross-entropy, backward, Adagrad update. Returns the per-iteration
// loss trace. Deterministic per seed.
inline std::vector<double> train(MsDoasModel& model,
                                 const std::vector<FeatureTracklet>& data,
                                 const TrainConfig& cfg) {
  cfg.validate();
  model.config.validate();
  if (data.empty()) throw DataError("train: empty tracklet source");
  for (const FeatureTracklet& t : data)
    detail::check_batch_tracklet(model, t);

  AdagradState state =
      make_adagrad_state(model.config, cfg.learning_rate, cfg.epsilon);
  Rng rng(mix_seed(cfg.seed, 0x7a215eed00000001ull));

  std::vector<double> trace;
  trace.reserve(cfg.iterations);
  std::vector<FeatureTracklet> batch(cfg.batch_size);
  for (int it = 1; it <= cfg.iterations; ++it) {
    for (int b = 0; b < cfg.batch_size; ++b)
      batch[b] = data[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))];

    const double loss = batch_loss(model, batch);
    if (!std::isfinite(loss))
      throw NumericalError("train: non-finite loss at iteration " +
                           std::to_string(it) + " (batch " +
                           std::to_string(it) + ")");
    const Gradients grads = backward(model, batch);
    adagrad_update(model.params, state, grads);
    trace.push_back(loss);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Serialisation
// ---------------------------------------------------------------------------
// Binary container: magic, format version, (n, H, T), then the tensors in
// for_each_tensor order as row-major doubles.

namespace detail {
constexpr char kModelMagic[8] = {'M', 'S', 'D', 'O', 'A', 'S', 'M', '1'};
constexpr std::uint32_t kModelVersion = 1;
}  // namespace detail

inline void save_model(const MsDoasModel& model, const std::string& path) {
  model.config.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path);

  out.write(detail::kModelMagic, sizeof(detail::kModelMagic));
  const auto write_u32 = [&](std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  };
  write_u32(detail::kModelVersion);
  write_u32(static_cast<std::uint32_t>(model.config.feature_dim));
  write_u32(static_cast<std::uint32_t>(model.config.hidden_size));
  write_u32(static_cast<std::uint32_t>(model.config.memory));

  for_each_tensor(model.params, [&](const auto& tensor) {
    for (Eigen::Index i = 0; i < tensor.rows(); ++i)
      for (Eigen::Index j = 0; j < tensor.cols(); ++j) {
        const double v = tensor(i, j);
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
      }
  });
  if (!out) throw DataError("write failed: " + path);
}

inline MsDoasModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file: " + path);

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, detail::kModelMagic, sizeof(magic)) != 0)
    throw DataError(path + ": not a model file (bad magic)");
  const auto read_u32 = [&]() {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
  };
  const std::uint32_t version = read_u32();
  if (version != detail::kModelVersion)
    throw DataError(path + ": unsupported model format version " +
                    std::to_string(version));

  MsDoasModel model;
  model.config.feature_dim = static_cast<int>(read_u32());
  model.config.hidden_size = static_cast<int>(read_u32());
  model.config.memory = static_cast<int>(read_u32());
  if (!in) throw DataError(path + ": truncated header");
  model.config.validate();
  model.params = zero_params(model.config);

  for_each_tensor(model.params, [&](auto& tensor) {
    for (Eigen::Index i = 0; i < tensor.rows(); ++i)
      for (Eigen::Index j = 0; j < tensor.cols(); ++j) {
        double v = 0.0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        tensor(i, j) = v;
      }
  });
  if (!in)
    throw DataError(path + ": tensor data does not match the declared shape");
  in.peek();
  if (!in.eof())
    throw DataError(path + ": trailing bytes, shape mismatch");
  return model;
}

}  // namespace msdoas
