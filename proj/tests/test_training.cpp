#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "voxprint/config.hpp"
#include "voxprint/dataset.hpp"
#include "voxprint/pipeline.hpp"
#include "voxprint/training.hpp"

using namespace voxprint;

namespace {

std::vector<Parameter<double>> scalar_param(double value, double grad) {
  std::vector<Parameter<double>> p;
  p.emplace_back("p", Tensor<double>({1}, value));
  p[0].grad[0] = grad;
  return p;
}

TrainConfig sgd(double lr, double momentum, double wd) {
  TrainConfig c;
  c.lr0 = lr;
  c.momentum = momentum;
  c.weight_decay = wd;
  return c;
}

// Two synthetic speakers rendered as small feature images.
std::pair<LabeledSet, LabeledSet> two_speaker_sets() {
  SynthSpec spec;
  spec.num_speakers = 2;
  spec.utterances_per_speaker = 24;
  spec.min_duration_s = 1.5;
  spec.max_duration_s = 2.5;
  spec.seed = 3;
  RunConfig cfg;
  cfg.duration_s = 2.0;
  cfg.geometry = Geometry{32, 32};
  const auto voices = synth_voices(spec);
  LabeledSet train, val;
  for (int s = 0; s < 2; ++s) {
    for (int u = 0; u < spec.utterances_per_speaker; ++u) {
      auto& dst = u % 4 == 3 ? val : train;
      dst.features.push_back(utterance_features(synth_utterance(spec, voices[std::size_t(s)], s, u), cfg));
      dst.labels.push_back(s);
    }
  }
  return {train, val};
}

}  // namespace

TEST(Sgd, VanillaReduction) {
  auto p = scalar_param(2.0, 0.5);
  SgdState<double> st;
  sgd_step<double>(p, st, 0.1, sgd(0.1, 0.0, 0.0));
  EXPECT_DOUBLE_EQ(p[0].value[0], 2.0 - 0.1 * 0.5);
}

TEST(Sgd, WeightDecayOnly) {
  auto p = scalar_param(1.0, 0.0);
  SgdState<double> st;
  sgd_step<double>(p, st, 0.001, sgd(0.001, 0.0, 1e-4));
  EXPECT_NEAR(p[0].value[0], 0.9999999, 1e-15);
}

TEST(Sgd, MomentumTwoSteps) {
  const double g = 0.3, lr = 0.01;
  auto p = scalar_param(0.0, g);
  SgdState<double> st;
  const auto cfg = sgd(lr, 0.9, 0.0);
  sgd_step<double>(p, st, lr, cfg);
  sgd_step<double>(p, st, lr, cfg);
  EXPECT_NEAR(p[0].value[0], -lr * g * (1 + 1.9), 1e-15);
}

TEST(Sgd, NonFiniteGradientAborts) {
  auto p = scalar_param(1.0, std::nan(""));
  SgdState<double> st;
  EXPECT_THROW(sgd_step<double>(p, st, 0.1, sgd(0.1, 0.9, 0.0)), TrainingError);
}

TEST(Sgd, DescendsQuadraticBelowStabilityLimit) {
  // f(p) = p^2 has curvature 2, so any lr < 1 reduces it.
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const double p0 = 10 * (2 * uniform01(rng) - 1);
    if (p0 == 0) continue;
    const double lr = 0.999 * uniform01(rng) + 1e-6;
    auto p = scalar_param(p0, 2 * p0);
    SgdState<double> st;
    sgd_step<double>(p, st, lr, sgd(lr, 0.0, 0.0));
    EXPECT_LT(p[0].value[0] * p[0].value[0], p0 * p0);
  }
}

TEST(Plateau, DecreasingLossKeepsRate) {
  std::vector<double> h;
  for (int i = 0; i < 40; ++i) h.push_back(5.0 - 0.1 * i);
  for (double lr : plateau_scheduler(h, TrainConfig{})) EXPECT_EQ(lr, 0.001);
}

TEST(Plateau, DropsAfterSixthFlatEpoch) {
  const std::vector<double> h(7, 1.0);
  const auto lrs = plateau_scheduler(h, TrainConfig{});
  for (int i = 0; i < 6; ++i) EXPECT_EQ(lrs[std::size_t(i)], 0.001) << i;
  EXPECT_NEAR(lrs[6], 1e-4, 1e-18);
}

TEST(Plateau, ImprovementOfExactlyThresholdDoesNotCount) {
  TrainConfig cfg;
  cfg.plateau_threshold = 0.125;  // exactly representable
  std::vector<double> h{1.0};
  for (int i = 1; i <= 6; ++i) h.push_back(1.0 - 0.125);
  const auto lrs = plateau_scheduler(h, cfg);
  EXPECT_LT(lrs.back(), cfg.lr0);
  h.assign(1, 1.0);
  for (int i = 1; i <= 6; ++i) h.push_back(1.0 - 0.25 * i);
  EXPECT_EQ(plateau_scheduler(h, cfg).back(), cfg.lr0);
}

TEST(Plateau, RatesArePowersOfFactorAndNonIncreasing) {
  std::mt19937_64 rng(2);
  TrainConfig cfg;
  cfg.lr0 = 0.01;
  cfg.plateau_factor = 0.5;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> h(1 + rng() % 120);
    for (auto& v : h) v = uniform01(rng) < 0.3 ? 1.0 : 3 * uniform01(rng);
    const auto lrs = plateau_scheduler(h, cfg);
    double prev = cfg.lr0;
    for (double lr : lrs) {
      EXPECT_LE(lr, prev);
      const double k = std::log(lr / cfg.lr0) / std::log(cfg.plateau_factor);
      EXPECT_NEAR(k, std::round(k), 1e-9);
      prev = lr;
    }
  }
}

TEST(EarlyStop, FlatHistoryStopsAtFloor) {
  const std::vector<double> h(60, 2.0);
  EXPECT_EQ(first_stop_epoch(h, TrainConfig{}), 30);
}

TEST(EarlyStop, ImprovingHistoryNeverStops) {
  std::vector<double> h;
  for (int i = 0; i < 120; ++i) h.push_back(10.0 - 0.01 * i);
  EXPECT_FALSE(first_stop_epoch(h, TrainConfig{}).has_value());
}

TEST(EarlyStop, ImprovementAtTwentyNineStopsAtFortyFour) {
  std::vector<double> h(28, 2.0);
  h.push_back(1.0);
  h.resize(80, 1.0);
  EXPECT_EQ(first_stop_epoch(h, TrainConfig{}), 44);
}

TEST(EarlyStop, NeverBeforeMinEpochs) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    TrainConfig cfg;
    cfg.min_epochs = 1 + int(rng() % 40);
    cfg.early_stop_patience = int(rng() % 20);
    std::vector<double> h(1 + rng() % 100);
    for (auto& v : h) v = uniform01(rng);
    const auto d = early_stop(h, cfg);
    for (int e = 1; e < cfg.min_epochs && e <= int(d.size()); ++e) EXPECT_FALSE(d[std::size_t(e - 1)]);
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.min_epochs = 200;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lr0 = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.plateau_factor = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(EpochOrder, IsAPermutationEveryEpoch) {
  std::mt19937_64 rng(4);
  std::vector<std::size_t> order(57);
  for (int epoch = 0; epoch < 20; ++epoch) {
    epoch_order(order, rng);
    auto sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
  }
}

TEST(MakeBatch, ReplicatesChannels) {
  std::vector<FeatureTensor> f;
  f.emplace_back(Geometry{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  f.emplace_back(Geometry{2, 3}, std::vector<float>{7, 8, 9, 10, 11, 12});
  const std::vector<std::size_t> idx{1, 0};
  const auto x = make_batch<float>(f, idx);
  ASSERT_EQ(x.shape(), Shape({2, 3, 2, 3}));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(x.at(0, c, 0, 0), 7.0f);
    EXPECT_EQ(x.at(1, c, 1, 2), 6.0f);
  }
  f.emplace_back(Geometry{3, 2}, std::vector<float>(6));
  const std::vector<std::size_t> mixed{0, 2};
  EXPECT_THROW(make_batch<float>(f, mixed), ShapeError);
}

TEST(Train, TwoSpeakerSanityRun) {
  const auto [train_set, val_set] = two_speaker_sets();
  LossConfig lc;
  lc.family = LossFamily::softmax;
  lc.num_classes = 2;
  TrainConfig tc;
  tc.lr0 = 0.01;
  tc.max_epochs = 50;
  tc.min_epochs = 50;
  tc.batch_size = 8;
  tc.seed = 5;
  const auto r = train(train_set, val_set, NetworkConfig::tiny(2), lc, tc);
  ASSERT_EQ(r.records.size(), 50u);
  double best_train = 1e9;
  for (const auto& rec : r.records) best_train = std::min(best_train, rec.train_loss);
  EXPECT_LT(best_train, 0.1);

  // The kept network is the one with the lowest validation loss.
  const auto best = std::min_element(r.records.begin(), r.records.end(),
                                     [](const auto& a, const auto& b) { return a.val_loss < b.val_loss; });
  EXPECT_EQ(r.best_epoch, best->epoch);
  EXPECT_NEAR(evaluate_split(r.best, lc, val_set, 8).loss, best->val_loss, 1e-9);
}

TEST(Train, IdenticalSeedsGiveIdenticalRecords) {
  const auto [train_set, val_set] = two_speaker_sets();
  for (auto family : {LossFamily::softmax, LossFamily::arcface}) {
    LossConfig lc;
    lc.family = family;
    lc.num_classes = 2;
    TrainConfig tc;
    tc.lr0 = 0.003;
    tc.max_epochs = 4;
    tc.min_epochs = 4;
    tc.batch_size = 8;
    tc.seed = 9;
    const auto a = train(train_set, val_set, NetworkConfig::tiny(2), lc, tc);
    const auto b = train(train_set, val_set, NetworkConfig::tiny(2), lc, tc);
    EXPECT_EQ(a.records, b.records);
    EXPECT_EQ(format_training_log(a.records), format_training_log(b.records));
    tc.seed = 10;
    const auto c = train(train_set, val_set, NetworkConfig::tiny(2), lc, tc);
    EXPECT_NE(a.records, c.records);
  }
}

TEST(Train, CosineHeadStaysUnitNorm) {
  const auto [train_set, val_set] = two_speaker_sets();
  LossConfig lc;
  lc.family = LossFamily::cosface;
  lc.num_classes = 2;
  TrainConfig tc;
  tc.max_epochs = 2;
  tc.min_epochs = 2;
  tc.batch_size = 8;
  const auto r = train(train_set, val_set, NetworkConfig::tiny(2), lc, tc);
  const auto& w = r.best.head_weight();
  for (std::size_t row = 0; row < w.dim(0); ++row) {
    double s = 0;
    for (std::size_t c = 0; c < w.dim(1); ++c) s += double(w.at(row, c)) * w.at(row, c);
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(Train, EmptyOrUncoveredSplitsAreConfigErrors) {
  auto [train_set, val_set] = two_speaker_sets();
  LossConfig lc;
  lc.family = LossFamily::softmax;
  lc.num_classes = 2;
  TrainConfig tc;
  EXPECT_THROW(train(train_set, LabeledSet{}, NetworkConfig::tiny(2), lc, tc), ConfigError);
  LabeledSet one_class;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    if (train_set.labels[i] == 0) {
      one_class.features.push_back(train_set.features[i]);
      one_class.labels.push_back(0);
    }
  }
  EXPECT_THROW(train(one_class, val_set, NetworkConfig::tiny(2), lc, tc), ConfigError);
}

TEST(TrainingLog, RoundTrip) {
  std::mt19937_64 rng(6);
  std::vector<EpochRecord> recs;
  for (int e = 1; e <= 30; ++e) recs.push_back({e, uniform01(rng) * 3, uniform01(rng), uniform01(rng), 1e-3 * uniform01(rng)});
  const auto text = format_training_log(recs);
  EXPECT_EQ(parse_training_log(text), recs);
  EXPECT_EQ(format_training_log(parse_training_log(text)), text);
  EXPECT_THROW(parse_training_log("epoch\tloss\n"), FormatError);
}
