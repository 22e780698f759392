#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <random>

#include "voxprint/layers.hpp"
#include "voxprint/losses.hpp"

using namespace voxprint;

namespace {

Tensor<double> unit_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  Tensor<double> t({n, d});
  for (auto& v : t.data()) v = 2 * uniform01(rng) - 1;
  renormalize_rows(t);
  return t;
}

std::vector<int> random_labels(std::size_t n, int k, std::mt19937_64& rng) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng() % static_cast<std::uint64_t>(k));
  return y;
}

// Softmax cross-entropy over s-scaled cosines, with the chain rule back to
// embeddings and weights.
LossResult<double> scaled_cosine_softmax(const Tensor<double>& emb, const Tensor<double>& w, std::span<const int> y,
                                         double s) {
  auto z = dense_forward<double>(emb, w, nullptr);
  for (auto& v : z.data()) v *= s;
  auto ce = softmax_ce(z, y);
  for (auto& v : ce.grad_logits.data()) v *= s;
  auto g = dense_backward<double>(emb, w, ce.grad_logits);
  LossResult<double> r;
  r.loss = ce.loss;
  r.grad_embeddings = g.grad_x;
  r.grad_weights = g.grad_weight;
  return r;
}

LossConfig config(LossFamily f, int k, double s = 22, double m = 0.2) {
  LossConfig c;
  c.family = f;
  c.num_classes = k;
  c.s = s;
  c.m = m;
  return c;
}

Tensor<double> numeric_grad(Tensor<double>& t, const std::function<double()>& f, double h = 1e-5) {
  Tensor<double> g(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double keep = t[i];
    t[i] = keep + h;
    const double up = f();
    t[i] = keep - h;
    const double down = f();
    t[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

double max_rel_error(const Tensor<double>& a, const Tensor<double>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), 1e-6}));
  }
  return worst;
}

}  // namespace

TEST(SoftmaxCe, UniformLogitsGiveLnK) {
  for (std::size_t k : {2u, 4u, 10u}) {
    const Tensor<double> z({3, k}, 0.7);
    const std::vector<int> y{0, 1, static_cast<int>(k - 1)};
    EXPECT_NEAR(softmax_ce(z, y).loss, std::log(double(k)), 1e-14);
  }
  EXPECT_NEAR(softmax_ce(Tensor<double>({1, 4}), std::vector<int>{2}).loss, 1.3862943611198906, 1e-15);
}

TEST(SoftmaxCe, LargeTargetLogitIsStable) {
  Tensor<double> z({1, 3});
  z[1] = 1000;
  const auto ce = softmax_ce(z, std::vector<int>{1});
  EXPECT_TRUE(std::isfinite(ce.loss));
  EXPECT_NEAR(ce.loss, 0.0, 1e-300);
  EXPECT_TRUE(ce.grad_logits.all_finite());
  z[1] = -1000;
  EXPECT_NEAR(softmax_ce(z, std::vector<int>{1}).loss, 1000 + std::log(2.0), 1e-9);
}

TEST(SoftmaxCe, MatchesHighPrecisionValue) {
  const Tensor<double> z({2, 3}, std::vector<double>{0.3, -1.2, 2.5, 1.1, 0.4, -0.7});
  EXPECT_NEAR(softmax_ce(z, std::vector<int>{2, 0}).loss, 0.31752429845503732408, 1e-15);
}

TEST(SoftmaxCe, LabelOutOfRangeThrows) {
  const Tensor<double> z({1, 3});
  EXPECT_THROW(softmax_ce(z, std::vector<int>{3}), ArgumentError);
  EXPECT_THROW(softmax_ce(z, std::vector<int>{-1}), ArgumentError);
  EXPECT_THROW(softmax_ce(z, std::vector<int>{0, 1}), ShapeError);
}

TEST(MarginLogits, ClosedFormScalarExamples) {
  // Embedding at cos 0.9 to the target and 0.1 to the other class.
  const Tensor<double> cos({1, 2}, std::vector<double>{0.9, 0.1});
  const std::vector<int> y{0};
  const double cosface = softmax_ce(cosface_logits(cos, y, 22, 0.2), y).loss;
  const double arcface = softmax_ce(arcface_logits(cos, y, 22, 0.2), y).loss;
  EXPECT_NEAR(cosface / 1.8505994852216231045e-6, 1.0, 1e-9);
  EXPECT_NEAR(arcface / 2.2658099206238689524e-7, 1.0, 1e-9);
  EXPECT_NEAR(std::acos(0.9), 0.45102681179626243, 1e-15);
  EXPECT_NEAR(arcface_logits(cos, y, 22, 0.2).at(0, 0) / 22, 0.79546196644546497, 1e-14);
}

TEST(MarginLogits, TargetLogitDecreasesWithMargin) {
  const Tensor<double> cos({1, 3}, std::vector<double>{0.4, -0.2, 0.7});
  const std::vector<int> y{2};
  double prev_cf = cosface_logits(cos, y, 10, 0.0).at(0, 2);
  double prev_af = arcface_logits(cos, y, 10, 0.0).at(0, 2);
  EXPECT_DOUBLE_EQ(prev_cf, 7.0);
  for (double m = 0.05; m < 0.9; m += 0.05) {
    const auto cf = cosface_logits(cos, y, 10, m);
    const auto af = arcface_logits(cos, y, 10, m);
    EXPECT_LT(cf.at(0, 2), prev_cf);
    EXPECT_LT(af.at(0, 2), prev_af);
    EXPECT_DOUBLE_EQ(cf.at(0, 0), 4.0);
    EXPECT_DOUBLE_EQ(af.at(0, 1), -2.0);
    prev_cf = cf.at(0, 2);
    prev_af = af.at(0, 2);
  }
}

TEST(LossForwardBackward, ZeroMarginReducesToScaledSoftmax) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t n = 1 + rng() % 6, k = 2 + rng() % 6, d = 2 + rng() % 10;
    const auto emb = unit_rows(n, d, rng);
    const auto w = unit_rows(k, d, rng);
    const auto y = random_labels(n, int(k), rng);
    const double s = 1 + 30 * uniform01(rng);
    const auto ref = scaled_cosine_softmax(emb, w, y, s);
    for (auto f : {LossFamily::cosface, LossFamily::arcface}) {
      const auto r = loss_forward_backward<double>(config(f, int(k), s, 0.0), emb, w, nullptr, y);
      EXPECT_NEAR(r.loss, ref.loss, 1e-12);
      for (std::size_t i = 0; i < ref.grad_embeddings.size(); ++i) {
        EXPECT_NEAR(r.grad_embeddings[i], ref.grad_embeddings[i], 1e-12);
      }
      for (std::size_t i = 0; i < ref.grad_weights.size(); ++i) {
        EXPECT_NEAR(r.grad_weights[i], ref.grad_weights[i], 1e-12);
      }
    }
  }
}

TEST(LossForwardBackward, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (auto f : {LossFamily::softmax, LossFamily::cosface, LossFamily::arcface}) {
      std::mt19937_64 rng(1000 + seed);
      auto emb = unit_rows(3, 8, rng);
      auto w = unit_rows(5, 8, rng);
      Tensor<double> b({5});
      for (auto& v : b.data()) v = uniform01(rng) - 0.5;
      const auto y = random_labels(3, 5, rng);
      const auto cfg = config(f, 5, 4.0, 0.3);
      const Tensor<double>* bias = f == LossFamily::softmax ? &b : nullptr;
      auto loss = [&] { return loss_forward_backward(cfg, emb, w, bias, y).loss; };
      const auto r = loss_forward_backward(cfg, emb, w, bias, y);
      EXPECT_LT(max_rel_error(r.grad_embeddings, numeric_grad(emb, loss)), 1e-4) << to_string(f) << " seed " << seed;
      EXPECT_LT(max_rel_error(r.grad_weights, numeric_grad(w, loss)), 1e-4) << to_string(f) << " seed " << seed;
      if (bias) {
        EXPECT_LT(max_rel_error(r.grad_bias, numeric_grad(b, loss)), 1e-4);
      }
    }
  }
}

TEST(LossForwardBackward, MarginOrdering) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto emb = unit_rows(4, 6, rng);
    const auto w = unit_rows(5, 6, rng);
    const auto y = random_labels(4, 5, rng);
    const double m = 0.05 + 0.5 * uniform01(rng);
    const double base = scaled_cosine_softmax(emb, w, y, 22).loss;
    EXPECT_GE(loss_forward_backward<double>(config(LossFamily::cosface, 5, 22, m), emb, w, nullptr, y).loss, base);
    const auto cos = dense_forward<double>(emb, w, nullptr);
    bool in_regime = true;
    for (std::size_t n = 0; n < 4; ++n) in_regime &= std::acos(cos.at(n, std::size_t(y[n]))) + m <= std::numbers::pi;
    if (in_regime) {
      EXPECT_GE(loss_forward_backward<double>(config(LossFamily::arcface, 5, 22, m), emb, w, nullptr, y).loss, base);
    }
  }
}

TEST(LossForwardBackward, ClassPermutationInvariance) {
  std::mt19937_64 rng(8);
  for (auto f : {LossFamily::softmax, LossFamily::cosface, LossFamily::arcface}) {
    const auto emb = unit_rows(5, 7, rng);
    const auto w = unit_rows(6, 7, rng);
    Tensor<double> b({6});
    for (auto& v : b.data()) v = uniform01(rng);
    const auto y = random_labels(5, 6, rng);
    std::vector<int> perm{3, 0, 5, 1, 4, 2};  // new index of old class c
    Tensor<double> pw(w.shape()), pb(b.shape());
    for (std::size_t c = 0; c < 6; ++c) {
      pb[std::size_t(perm[c])] = b[c];
      for (std::size_t d = 0; d < 7; ++d) pw.at(std::size_t(perm[c]), d) = w.at(c, d);
    }
    std::vector<int> py(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) py[i] = perm[std::size_t(y[i])];
    const bool dense = f == LossFamily::softmax;
    const auto cfg = config(f, 6);
    EXPECT_NEAR(loss_forward_backward(cfg, emb, w, dense ? &b : nullptr, y).loss,
                loss_forward_backward(cfg, emb, pw, dense ? &pb : nullptr, py).loss, 1e-12);
  }
}

TEST(LossForwardBackward, EmbeddingScaleInvarianceAfterRenormalization) {
  std::mt19937_64 rng(9);
  const auto emb = unit_rows(4, 6, rng);
  const auto w = unit_rows(3, 6, rng);
  const auto y = random_labels(4, 3, rng);
  for (double scale : {0.01, 3.0, 1e4}) {
    Tensor<double> scaled = emb;
    for (auto& v : scaled.data()) v *= scale;
    const auto renorm = l2_normalize_forward(scaled).output;
    for (auto f : {LossFamily::cosface, LossFamily::arcface}) {
      EXPECT_NEAR(loss_forward_backward<double>(config(f, 3), renorm, w, nullptr, y).loss,
                  loss_forward_backward<double>(config(f, 3), emb, w, nullptr, y).loss, 1e-12);
    }
  }
}

TEST(LossForwardBackward, FiniteAtBoundaryCosines) {
  // Embeddings exactly on (and against) class directions.
  Tensor<double> w({2, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor<double> emb({4, 2}, std::vector<double>{1, 0, -1, 0, 0, 1, 0, -1});
  const std::vector<int> y{0, 0, 1, 1};
  for (auto f : {LossFamily::cosface, LossFamily::arcface}) {
    for (double m : {0.0, 0.2, 0.9}) {
      const auto r = loss_forward_backward<double>(config(f, 2, 64, m), emb, w, nullptr, y);
      EXPECT_TRUE(std::isfinite(r.loss));
      EXPECT_TRUE(r.grad_embeddings.all_finite());
      EXPECT_TRUE(r.grad_weights.all_finite());
    }
  }
}

TEST(LossForwardBackward, NonTargetGradientSharedAcrossFamilies) {
  // d(loss)/d(logit) for non-targets is softmax(z)/N regardless of how the
  // target logit was produced.
  const Tensor<double> cos({1, 3}, std::vector<double>{0.3, 0.5, -0.1});
  const std::vector<int> y{1};
  const auto cf = cosface_logits(cos, y, 22, 0.2);
  const auto ce = softmax_ce(cf, y);
  double denom = 0;
  for (std::size_t k = 0; k < 3; ++k) denom += std::exp(cf[k]);
  EXPECT_NEAR(ce.grad_logits[0], std::exp(cf[0]) / denom, 1e-15);
  EXPECT_NEAR(ce.grad_logits[2], std::exp(cf[2]) / denom, 1e-15);
}

TEST(LossConfig, Validation) {
  EXPECT_THROW(config(LossFamily::cosface, 4, 22, 1.0).validate(), ConfigError);
  EXPECT_THROW(config(LossFamily::arcface, 4, 22, 1.6).validate(), ConfigError);
  EXPECT_NO_THROW(config(LossFamily::arcface, 4, 22, 1.5).validate());
  EXPECT_THROW(config(LossFamily::softmax, 4, 0.0).validate(), ConfigError);
  EXPECT_THROW(config(LossFamily::softmax, 1).validate(), ConfigError);
  EXPECT_EQ(parse_loss_family("arcface"), LossFamily::arcface);
  EXPECT_THROW(parse_loss_family("triplet"), ConfigError);
}
