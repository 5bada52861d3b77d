#include "msdoas/model.hpp"

#include <gtest/gtest.h>
#include <unistd.h>

#include <filesystem>

#include "msdoas/tracklet.hpp"

using namespace msdoas;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("msdoas_mdl_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

FeatureVector random_feature(Rng& rng, int n) {
  FeatureVector f(n);
  for (int i = 0; i < n; ++i) f[i] = rng.normal();
  return f;
}

// random tracklet with the given label structure; frames are consecutive
FeatureTracklet random_tracklet(Rng& rng, int n, int memory, int label) {
  FeatureTracklet t;
  t.label = label;
  for (int i = 0; i <= memory; ++i) {
    Observation c;
    c.meta.identity = label == 1 ? 1 : (i == 0 ? 2 : 1);
    c.meta.frame = 100 - i;
    c.feature = random_feature(rng, n);
    t.components.push_back(c);
  }
  return t;
}

std::vector<FeatureTracklet> random_batch(Rng& rng, int n, int memory,
                                          int count) {
  std::vector<FeatureTracklet> batch;
  for (int i = 0; i < count; ++i)
    batch.push_back(random_tracklet(rng, n, memory, i % 2));
  return batch;
}

// central finite differences over every parameter; independent of backward()
double max_relative_gradient_error(MsDoasModel& model,
                                   const std::vector<FeatureTracklet>& batch,
                                   double step) {
  const Gradients analytic = backward(model, batch);
  double worst = 0.0;
  const auto check_tensor = [&](auto& tensor, const auto& grad_tensor) {
    for (Eigen::Index i = 0; i < tensor.rows(); ++i) {
      for (Eigen::Index j = 0; j < tensor.cols(); ++j) {
        const double saved = tensor(i, j);
        tensor(i, j) = saved + step;
        const double up = batch_loss(model, batch);
        tensor(i, j) = saved - step;
        const double down = batch_loss(model, batch);
        tensor(i, j) = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double analytic_v = grad_tensor(i, j);
        const double denom =
            std::max({std::abs(numeric), std::abs(analytic_v), 1e-8});
        worst = std::max(worst, std::abs(numeric - analytic_v) / denom);
      }
    }
  };
  // walk both parameter structs in the same tensor order
  std::vector<Eigen::MatrixXd*> params_m;
  std::vector<const Eigen::MatrixXd*> grads_m;
  std::vector<Eigen::VectorXd*> params_v;
  std::vector<const Eigen::VectorXd*> grads_v;
  LstmParams& l = model.params.lstm;
  const LstmParams& gl = analytic.lstm;
  params_m = {&l.wx_input, &l.wx_forget, &l.wx_output, &l.wx_candidate,
              &l.wh_input, &l.wh_forget, &l.wh_output, &l.wh_candidate,
              &model.params.fc.w};
  grads_m = {&gl.wx_input, &gl.wx_forget, &gl.wx_output, &gl.wx_candidate,
             &gl.wh_input, &gl.wh_forget, &gl.wh_output, &gl.wh_candidate,
             &analytic.fc.w};
  params_v = {&l.b_input, &l.b_forget, &l.b_output, &l.b_candidate,
              &model.params.fc.b};
  grads_v = {&gl.b_input, &gl.b_forget, &gl.b_output, &gl.b_candidate,
             &analytic.fc.b};
  for (std::size_t k = 0; k < params_m.size(); ++k)
    check_tensor(*params_m[k], *grads_m[k]);
  for (std::size_t k = 0; k < params_v.size(); ++k)
    check_tensor(*params_v[k], *grads_v[k]);
  return worst;
}

}  // namespace

// ---------------------------------------------------------------------------
// lstm_forward
// ---------------------------------------------------------------------------

TEST(LstmForward, ZeroParametersGiveZeroOutput) {
  ModelConfig cfg{4, 3, 5};
  MsDoasModel model;
  model.config = cfg;
  model.params = zero_params(cfg);
  Rng rng(1);
  std::vector<FeatureVector> history = {random_feature(rng, 4),
                                        random_feature(rng, 4)};
  const Eigen::VectorXd h = lstm_forward(model.params.lstm, history);
  EXPECT_DOUBLE_EQ(h.norm(), 0.0);
}

TEST(LstmForward, SingleStepMatchesClosedForm) {
  ModelConfig cfg{3, 2, 5};
  MsDoasModel model = init_model(cfg, 17);
  Rng rng(2);
  const FeatureVector x = random_feature(rng, 3);

  const Eigen::VectorXd h = lstm_forward(model.params.lstm, {{x}});

  // hand-evaluated single recurrence step with zero initial state
  const LstmParams& p = model.params.lstm;
  for (int r = 0; r < 2; ++r) {
    const double ai = 1.0 / (1.0 + std::exp(-(p.wx_input.row(r).dot(x) +
                                              p.b_input[r])));
    const double ao = 1.0 / (1.0 + std::exp(-(p.wx_output.row(r).dot(x) +
                                              p.b_output[r])));
    const double ag = std::tanh(p.wx_candidate.row(r).dot(x) +
                                p.b_candidate[r]);
    const double c = ai * ag;  // forget gate multiplies zero state
    const double expected = ao * std::tanh(c);
    EXPECT_NEAR(h[r], expected, 1e-12);
  }
}

TEST(LstmForward, OrderSensitivity) {
  ModelConfig cfg{4, 4, 5};
  MsDoasModel model = init_model(cfg, 23);
  Rng rng(3);
  std::vector<FeatureVector> fwd = {random_feature(rng, 4),
                                    random_feature(rng, 4),
                                    random_feature(rng, 4)};
  std::vector<FeatureVector> rev(fwd.rbegin(), fwd.rend());
  const Eigen::VectorXd a = lstm_forward(model.params.lstm, fwd);
  const Eigen::VectorXd b = lstm_forward(model.params.lstm, rev);
  EXPECT_GT((a - b).norm(), 1e-8);
}

TEST(LstmForward, EmptyHistoryAndDimensionErrors) {
  ModelConfig cfg{4, 4, 5};
  MsDoasModel model = init_model(cfg, 5);
  EXPECT_THROW(lstm_forward(model.params.lstm, {}), DataError);
  std::vector<FeatureVector> wrong = {FeatureVector::Zero(3)};
  EXPECT_THROW(lstm_forward(model.params.lstm, wrong), DataError);
}

// ---------------------------------------------------------------------------
// forward / msdoas
// ---------------------------------------------------------------------------

TEST(Forward, ZeroFcWeightsEqualBiasesGiveHalfHalf) {
  ModelConfig cfg{4, 3, 5};
  MsDoasModel model = init_model(cfg, 7);
  model.params.fc.w.setZero();
  model.params.fc.b.setZero();
  Rng rng(4);
  std::vector<FeatureVector> history = {random_feature(rng, 4)};
  const ForwardOutput out = forward(model, random_feature(rng, 4), history);
  EXPECT_NEAR(out.nz[0], 0.5, 1e-12);
  EXPECT_NEAR(out.nz[1], 0.5, 1e-12);
}

TEST(Forward, SoftmaxOfKnownLogits) {
  // softmax(1, 2) evaluated directly: e / (e + e^2)
  const Eigen::Vector2d nz = softmax2({1.0, 2.0});
  EXPECT_NEAR(nz[0], 0.26894142136992605, 1e-11);
  EXPECT_NEAR(nz[1], 0.7310585786300049, 1e-11);
  EXPECT_NEAR(nz[0] + nz[1], 1.0, 1e-12);
}

TEST(Forward, SoftmaxPropertiesOverRandomLogits) {
  Rng rng(6);
  for (int t = 0; t < 10000; ++t) {
    const double z0 = rng.normal() * 10;
    const double z1 = rng.normal() * 10;
    const Eigen::Vector2d nz = softmax2({z0, z1});
    EXPECT_NEAR(nz[0] + nz[1], 1.0, 1e-12);
    EXPECT_GE(nz[0], 0.0);
    EXPECT_LE(nz[0], 1.0);
    if (std::abs(z0 - z1) < 30.0) {  // open interval within double resolution
      EXPECT_GT(nz[0], 0.0);
      EXPECT_LT(nz[0], 1.0);
    }
    // shift invariance
    const double c = rng.normal() * 5;
    const Eigen::Vector2d shifted = softmax2({z0 + c, z1 + c});
    EXPECT_NEAR(shifted[0], nz[0], 1e-12);
    EXPECT_NEAR(shifted[1], nz[1], 1e-12);
  }
}

TEST(Forward, MsdoasReturnsNz1AndStaysInUnitInterval) {
  ModelConfig cfg{5, 4, 3};
  MsDoasModel model = init_model(cfg, 9);
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    const FeatureVector det = random_feature(rng, 5);
    std::vector<FeatureVector> history;
    const int len = static_cast<int>(rng.uniform_int(1, 3));
    for (int i = 0; i < len; ++i) history.push_back(random_feature(rng, 5));
    const ForwardOutput out = forward(model, det, history);
    const double score = msdoas::msdoas(model, det, history);
    EXPECT_DOUBLE_EQ(score, out.nz[1]);
    EXPECT_GE(score, 0.0);
    EXPECT_LE(score, 1.0);
  }
}

TEST(Forward, HistoryLongerThanMemoryRejected) {
  ModelConfig cfg{4, 3, 2};
  MsDoasModel model = init_model(cfg, 2);
  Rng rng(8);
  std::vector<FeatureVector> history = {random_feature(rng, 4),
                                        random_feature(rng, 4),
                                        random_feature(rng, 4)};
  EXPECT_THROW(forward(model, random_feature(rng, 4), history), DataError);
}

// ---------------------------------------------------------------------------
// cross_entropy / batch_loss
// ---------------------------------------------------------------------------

TEST(CrossEntropy, KnownValues) {
  // negative tracklet classified confidently as negative
  EXPECT_NEAR(cross_entropy(1.0 - 1e-12, 0), 0.0, 1e-10);
  // positive tracklet at the undecided point: log 2
  EXPECT_NEAR(cross_entropy(0.5, 1), 0.6931471805599453, 1e-12);
  // confident and wrong: grows to the clamp ceiling
  EXPECT_GT(cross_entropy(1.0 - 1e-13, 1), 20.0);
  EXPECT_LT(cross_entropy(1.0, 1), 30.0);  // clamp keeps it finite
}

TEST(BatchLoss, SingleAndDuplicatedTracklet) {
  ModelConfig cfg{4, 3, 3};
  MsDoasModel model = init_model(cfg, 11);
  Rng rng(9);
  const FeatureTracklet t = random_tracklet(rng, 4, 3, 1);
  const double single = batch_loss(model, {{t}});
  const double doubled = batch_loss(model, std::vector<FeatureTracklet>{t, t});
  EXPECT_NEAR(single, doubled, 1e-15);
}

TEST(BatchLoss, MeanOfIndividualLosses) {
  ModelConfig cfg{4, 3, 3};
  MsDoasModel model = init_model(cfg, 13);
  Rng rng(10);
  const auto batch = random_batch(rng, 4, 3, 3);
  double sum = 0.0;
  for (const auto& t : batch) sum += batch_loss(model, {{t}});
  EXPECT_NEAR(batch_loss(model, batch), sum / 3.0, 1e-12);
}

TEST(BatchLoss, EmptyBatchRejected) {
  ModelConfig cfg{4, 3, 3};
  MsDoasModel model = init_model(cfg, 1);
  EXPECT_THROW(batch_loss(model, {}), DataError);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

TEST(Backward, MatchesFiniteDifferences) {
  Rng seed_rng(101);
  for (int trial = 0; trial < 5; ++trial) {
    ModelConfig cfg{16, 8, 5};
    MsDoasModel model = init_model(cfg, seed_rng.next_u64());
    Rng rng(seed_rng.next_u64());
    const auto batch = random_batch(rng, 16, 5, 4);
    EXPECT_LT(max_relative_gradient_error(model, batch, 1e-5), 1e-4);
  }
}

TEST(Backward, StationaryPointHasZeroFcBiasGradient) {
  // two identical samples with opposite labels: mean softmax-CE error
  // cancels when NZ = (0.5, 0.5)
  ModelConfig cfg{4, 3, 2};
  MsDoasModel model = init_model(cfg, 3);
  model.params.fc.w.setZero();
  model.params.fc.b.setZero();
  Rng rng(12);
  FeatureTracklet a = random_tracklet(rng, 4, 2, 1);
  FeatureTracklet b = a;
  b.label = 0;
  b.components[0].meta.identity = 2;
  const Gradients g = backward(model, std::vector<FeatureTracklet>{a, b});
  EXPECT_NEAR(g.fc.b.norm(), 0.0, 1e-12);
}

TEST(Backward, BatchGradientIsMeanOfSampleGradients) {
  ModelConfig cfg{5, 4, 3};
  MsDoasModel model = init_model(cfg, 21);
  Rng rng(13);
  const FeatureTracklet t1 = random_tracklet(rng, 5, 3, 1);
  const FeatureTracklet t2 = random_tracklet(rng, 5, 3, 0);
  const Gradients g12 = backward(model, std::vector<FeatureTracklet>{t1, t2});
  const Gradients g1 = backward(model, {{t1}});
  const Gradients g2 = backward(model, {{t2}});
  zip_tensors(const_cast<Gradients&>(g12), const_cast<Gradients&>(g1),
              g2, [](const auto& mean, const auto& a, const auto& b) {
                EXPECT_LT((mean - 0.5 * (a + b)).norm(), 1e-12);
              });
}

// ---------------------------------------------------------------------------
// adagrad
// ---------------------------------------------------------------------------

TEST(Adagrad, ZeroGradientLeavesEverythingUnchanged) {
  ModelConfig cfg{3, 2, 2};
  MsDoasModel model = init_model(cfg, 31);
  const MsDoasModel before = model;
  AdagradState state = make_adagrad_state(cfg, 0.1, 1e-8);
  const Gradients zero = zero_params(cfg);
  adagrad_update(model.params, state, zero);
  zip_tensors(model.params, const_cast<ModelParams&>(before.params),
              state.accum, [](const auto& after, const auto& prior,
                              const auto& accum) {
                EXPECT_DOUBLE_EQ((after - prior).norm(), 0.0);
                EXPECT_DOUBLE_EQ(accum.norm(), 0.0);
              });
}

TEST(Adagrad, FirstStepMatchesHandComputation) {
  // scalar parameter, g = 2, lr = 0.1, eps = 0:
  // G = 4, step = 0.1 * 2 / sqrt(4) = 0.1
  ModelConfig cfg{1, 1, 1};
  MsDoasModel model;
  model.config = cfg;
  model.params = zero_params(cfg);
  model.params.fc.b[0] = 1.0;
  AdagradState state = make_adagrad_state(cfg, 0.1, 0.0);
  Gradients g = zero_params(cfg);
  g.fc.b[0] = 2.0;
  adagrad_update(model.params, state, g);
  EXPECT_NEAR(model.params.fc.b[0], 1.0 - 0.1, 1e-15);
  EXPECT_NEAR(state.accum.fc.b[0], 4.0, 1e-15);
}

TEST(Adagrad, RepeatedIdenticalGradientsShrinkSteps) {
  ModelConfig cfg{1, 1, 1};
  MsDoasModel model;
  model.config = cfg;
  model.params = zero_params(cfg);
  AdagradState state = make_adagrad_state(cfg, 0.1, 1e-8);
  Gradients g = zero_params(cfg);
  g.fc.b[0] = 1.5;
  double prev_value = model.params.fc.b[0];
  double prev_step = std::numeric_limits<double>::infinity();
  double prev_accum = -1.0;
  for (int i = 0; i < 10; ++i) {
    adagrad_update(model.params, state, g);
    const double step = std::abs(model.params.fc.b[0] - prev_value);
    EXPECT_LT(step, prev_step);
    EXPECT_GT(state.accum.fc.b[0], prev_accum);  // monotone accumulator
    prev_step = step;
    prev_value = model.params.fc.b[0];
    prev_accum = state.accum.fc.b[0];
  }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

TEST(Train, ZeroIterationsLeaveWeightsUntouched) {
  ModelConfig cfg{4, 3, 2};
  MsDoasModel model = init_model(cfg, 41);
  const MsDoasModel before = model;
  Rng rng(14);
  const auto data = random_batch(rng, 4, 2, 8);
  TrainConfig tc;
  tc.iterations = 0;
  tc.batch_size = 4;
  const auto trace = train(model, data, tc);
  EXPECT_TRUE(trace.empty());
  zip_tensors(model.params, const_cast<ModelParams&>(before.params),
              before.params, [](const auto& after, const auto& prior,
                                const auto&) {
                EXPECT_DOUBLE_EQ((after - prior).norm(), 0.0);
              });
}

TEST(Train, LearnsASeparableSyntheticCorpus) {
  SyntheticWorldConfig world;
  world.identity_count = 4;
  world.feature_dim = 12;
  world.separation = 8.0;
  world.noise_scale = 1.0;
  world.seed = 3;
  const auto pool = synth_pool(world, 60, "s");

  FactoryConfig fc;
  fc.kind = TrackletKind::consecutive;
  fc.set_size = 400;
  fc.memory = 3;
  fc.seed = 5;
  const auto data = generate_set(fc, pool);

  ModelConfig cfg{12, 16, 3};
  MsDoasModel model = init_model(cfg, 1);
  TrainConfig tc;
  tc.batch_size = 16;
  tc.iterations = 600;
  tc.learning_rate = 0.05;
  tc.seed = 1;
  const auto trace = train(model, data, tc);

  for (double loss : trace) EXPECT_TRUE(std::isfinite(loss));
  // training accuracy at th = 0.5
  int correct = 0;
  std::vector<FeatureVector> history(3);
  for (const auto& t : data) {
    for (int i = 0; i < 3; ++i) history[i] = t.components[i + 1].feature;
    const double score = msdoas::msdoas(model, t.components[0].feature, history);
    correct += (score >= 0.5) == (t.label == 1) ? 1 : 0;
  }
  EXPECT_GE(static_cast<double>(correct) / data.size(), 0.95);
  // the loss trace should come down substantially on a separable corpus
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 50; ++i) head += trace[i];
  for (int i = 0; i < 50; ++i) tail += trace[trace.size() - 50 + i];
  EXPECT_LT(tail, head * 0.5);
}

TEST(Train, LossTraceMovingAverageIsNonIncreasingOnSeparableCorpus) {
  SyntheticWorldConfig world;
  world.identity_count = 4;
  world.feature_dim = 12;
  world.separation = 10.0;
  world.noise_scale = 1.0;
  world.seed = 3;
  const auto pool = synth_pool(world, 80, "s");
  FactoryConfig fc;
  fc.kind = TrackletKind::consecutive;
  fc.set_size = 600;
  fc.memory = 3;
  fc.seed = 5;
  const auto data = generate_set(fc, pool);

  MsDoasModel model = init_model(ModelConfig{12, 16, 3}, 2);
  TrainConfig tc;
  tc.batch_size = 32;
  tc.iterations = 1000;
  tc.learning_rate = 0.1;
  tc.seed = 2;
  const auto trace = train(model, data, tc);
  ASSERT_EQ(trace.size(), 1000u);
  for (double loss : trace) EXPECT_TRUE(std::isfinite(loss));

  double prev = std::numeric_limits<double>::infinity();
  for (int i = 99; i < 1000; ++i) {
    double ma = 0.0;
    for (int j = i - 99; j <= i; ++j) ma += trace[j];
    ma /= 100.0;
    EXPECT_LE(ma, prev + 1e-5);  // non-increasing up to minibatch wiggle
    prev = ma;
  }
}

TEST(Train, DeterministicPerSeed) {
  Rng rng(15);
  const auto data = random_batch(rng, 4, 2, 16);
  ModelConfig cfg{4, 3, 2};
  TrainConfig tc;
  tc.batch_size = 4;
  tc.iterations = 20;
  tc.seed = 7;
  MsDoasModel a = init_model(cfg, tc.seed);
  MsDoasModel b = init_model(cfg, tc.seed);
  const auto trace_a = train(a, data, tc);
  const auto trace_b = train(b, data, tc);
  ASSERT_EQ(trace_a.size(), trace_b.size());
  for (std::size_t i = 0; i < trace_a.size(); ++i)
    EXPECT_EQ(trace_a[i], trace_b[i]);
  zip_tensors(a.params, b.params, b.params,
              [](const auto& pa, const auto& pb, const auto&) {
                EXPECT_DOUBLE_EQ((pa - pb).norm(), 0.0);
              });
}

// ---------------------------------------------------------------------------
// save / load
// ---------------------------------------------------------------------------

TEST(ModelFile, RoundTripGivesBitIdenticalForwardOutputs) {
  TempDir dir;
  ModelConfig cfg{6, 5, 4};
  MsDoasModel model = init_model(cfg, 51);
  const std::string path = dir.file("m.bin");
  save_model(model, path);
  const MsDoasModel loaded = load_model(path);
  EXPECT_EQ(loaded.config.feature_dim, 6);
  EXPECT_EQ(loaded.config.hidden_size, 5);
  EXPECT_EQ(loaded.config.memory, 4);

  Rng rng(16);
  const FeatureVector det = random_feature(rng, 6);
  std::vector<FeatureVector> history = {random_feature(rng, 6),
                                        random_feature(rng, 6)};
  EXPECT_EQ(msdoas::msdoas(model, det, history), msdoas::msdoas(loaded, det, history));
}

TEST(ModelFile, MissingFileAndCorruptShapes) {
  TempDir dir;
  EXPECT_THROW(load_model(dir.file("absent.bin")), DataError);

  ModelConfig cfg{6, 5, 4};
  MsDoasModel model = init_model(cfg, 52);
  const std::string path = dir.file("m.bin");
  save_model(model, path);

  // tamper the declared feature dimension: tensor payload no longer matches
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(12);  // magic(8) + version(4) -> n field
    const std::uint32_t wrong_n = 7;
    f.write(reinterpret_cast<const char*>(&wrong_n), sizeof(wrong_n));
  }
  EXPECT_THROW(load_model(path), DataError);
}
