#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "voxprint/audio_io.hpp"
#include "voxprint/features.hpp"
#include "voxprint/tensor.hpp"

using namespace voxprint;

namespace {

AudioClip tone(std::size_t n, double hz, double amp = 0.5) {
  AudioClip c;
  c.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) c.samples[i] = amp * std::sin(2 * std::numbers::pi * hz * i / 16000.0);
  return c;
}

// O(n^2) DFT power of one Hann-windowed frame.
std::vector<double> naive_frame_power(const std::vector<double>& x, std::size_t start, std::size_t win, std::size_t nfft) {
  std::vector<double> p(nfft / 2 + 1);
  for (std::size_t k = 0; k < p.size(); ++k) {
    std::complex<double> acc;
    for (std::size_t n = 0; n < win; ++n) {
      const double w = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * n / win);
      acc += x[start + n] * w * std::polar(1.0, -2 * std::numbers::pi * double(k) * double(n) / double(nfft));
    }
    p[k] = std::norm(acc);
  }
  return p;
}

// Independent triangle construction straight from the band edges.
double triangle(double f, double lo, double mid, double hi) {
  if (f <= lo || f >= hi) return 0.0;
  return f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
}

}  // namespace

TEST(Stft, MatchesNaiveDft) {
  std::mt19937_64 rng(1);
  AudioClip clip;
  clip.samples.resize(1200);
  for (auto& s : clip.samples) s = 2 * uniform01(rng) - 1;
  const auto p = stft_power(clip);
  ASSERT_EQ(p.rows(), 1 + (1200 - 400) / 160);
  ASSERT_EQ(p.cols(), 257);
  for (Eigen::Index t = 0; t < p.rows(); ++t) {
    const auto ref = naive_frame_power(clip.samples, static_cast<std::size_t>(t) * 160, 400, 512);
    for (Eigen::Index k = 0; k < p.cols(); ++k) {
      EXPECT_NEAR(p(t, k), ref[static_cast<std::size_t>(k)], 1e-9 * (1 + ref[static_cast<std::size_t>(k)]));
    }
  }
}

TEST(Stft, BinCenterSineConcentrates) {
  for (int k0 : {8, 32, 100, 200}) {
    const auto clip = tone(400, k0 * 16000.0 / 512);
    const auto ref = naive_frame_power(clip.samples, 0, 400, 512);
    const auto p = stft_power(clip);
    double total = 0, near = 0;
    for (int k = 0; k < 257; ++k) {
      total += p(0, k);
      if (std::abs(k - k0) <= 1) near += p(0, k);
      EXPECT_NEAR(p(0, k), ref[static_cast<std::size_t>(k)], 1e-9 * (1 + ref[static_cast<std::size_t>(k)]));
    }
    EXPECT_GE(near / total, 0.95) << "k0=" << k0;
  }
}

TEST(Stft, ZeroClipAndFrameCount) {
  AudioClip z;
  z.samples.assign(160000, 0.0);
  const auto p = stft_power(z);
  EXPECT_EQ(p.rows(), 998);
  EXPECT_EQ(p.maxCoeff(), 0.0);
  EXPECT_EQ(p.minCoeff(), 0.0);
}

TEST(Stft, TooShortThrows) {
  AudioClip c;
  c.samples.assign(399, 0.1);
  EXPECT_THROW(stft_power(c), TooShortError);
}

TEST(Stft, SignFlipInvariant) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    AudioClip c;
    c.samples.resize(2000 + rng() % 2000);
    for (auto& s : c.samples) s = 2 * uniform01(rng) - 1;
    AudioClip neg = c;
    for (auto& s : neg.samples) s = -s;
    EXPECT_EQ(stft_power(c), stft_power(neg));
  }
}

TEST(Stft, ConfigValidation) {
  StftConfig bad;
  bad.fft_size = 256;  // window is 400 samples
  EXPECT_THROW(bad.validate(16000), ConfigError);
  bad = {};
  bad.hop_ms = 30;
  EXPECT_THROW(bad.validate(16000), ConfigError);
  bad = {};
  bad.fft_size = 500;
  EXPECT_THROW(bad.validate(16000), ConfigError);
}

TEST(Mel, ScaleValues) {
  EXPECT_EQ(hz_to_mel(0.0), 0.0);
  EXPECT_NEAR(hz_to_mel(700.0), 781.17283874803120, 1e-9);
  EXPECT_NEAR(mel_to_hz(hz_to_mel(1234.5)), 1234.5, 1e-9);
}

TEST(Mel, FilterbankMatchesExplicitTriangles) {
  for (int n_mels : {8, 40, 64}) {
    MelConfig cfg;
    cfg.n_mels = n_mels;
    const auto fb = mel_filterbank(cfg, 512, 16000);
    ASSERT_EQ(fb.rows(), n_mels);
    ASSERT_EQ(fb.cols(), 257);
    const double top = 2595.0 * std::log10(1.0 + 8000.0 / 700.0);
    std::vector<double> edges;
    for (int i = 0; i < n_mels + 2; ++i) {
      edges.push_back(700.0 * (std::pow(10.0, top * i / (n_mels + 1) / 2595.0) - 1.0));
    }
    for (int m = 0; m < n_mels; ++m) {
      int argmax = 0;
      int maxima = 0;
      for (int k = 0; k < 257; ++k) {
        const double f = k * 16000.0 / 512;
        EXPECT_NEAR(fb(m, k), triangle(f, edges[m], edges[m + 1], edges[m + 2]), 1e-12);
        EXPECT_GE(fb(m, k), 0.0);
        if (fb(m, k) > fb(m, argmax)) argmax = k;
      }
      for (int k = 0; k < 257; ++k) maxima += fb(m, k) == fb(m, argmax) ? 1 : 0;
      EXPECT_EQ(maxima, 1) << "row " << m;
      EXPECT_GT(fb.row(m).sum(), 0.0);
    }
    // Overlapping triangles partition unity between the first and last peak.
    for (int k = 0; k < 257; ++k) {
      const double f = k * 16000.0 / 512;
      if (f > edges[1] && f < edges[n_mels]) {
        const double s = fb.col(k).sum();
        EXPECT_GT(s, 0.0);
        EXPECT_LE(s, 1.0 + 1e-12);
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    }
  }
}

TEST(Mel, TooManyBandsThrows) {
  MelConfig cfg;
  cfg.n_mels = 200;
  EXPECT_THROW(mel_filterbank(cfg, 512, 16000), ConfigError);
  cfg = {};
  cfg.f_min = 9000;
  EXPECT_THROW(cfg.validate(16000), ConfigError);
  cfg = {};
  cfg.n_mels = 1;
  EXPECT_THROW(cfg.validate(16000), ConfigError);
}

TEST(MelSpectrogram, FloorOnSilence) {
  AudioClip z;
  z.samples.assign(4000, 0.0);
  const auto s = mel_spectrogram(z);
  EXPECT_EQ(s.rows(), 64);
  for (Eigen::Index i = 0; i < s.size(); ++i) EXPECT_DOUBLE_EQ(s.data()[i], -100.0);
}

TEST(MelSpectrogram, DoublingAmplitudeAddsSixDb) {
  std::mt19937_64 rng(4);
  AudioClip c;
  c.samples.resize(8000);
  for (auto& s : c.samples) s = 0.4 * (2 * uniform01(rng) - 1);
  AudioClip d = c;
  for (auto& s : d.samples) s *= 2;
  const auto a = mel_spectrogram(c);
  const auto b = mel_spectrogram(d);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (a.data()[i] > -99.0) {
      EXPECT_NEAR(b.data()[i] - a.data()[i], 6.0205999132796239, 1e-9);
    }
  }
}

TEST(MelSpectrogram, SineLandsInNearestFilter) {
  const auto s = mel_spectrogram(tone(16000, 1000.0));
  const auto peaks = mel_peak_frequencies({}, 16000);
  std::size_t nearest = 0;
  for (std::size_t i = 0; i < peaks.size(); ++i) {
    if (std::abs(peaks[i] - 1000.0) < std::abs(peaks[nearest] - 1000.0)) nearest = i;
  }
  for (Eigen::Index t = 0; t < s.cols(); ++t) {
    Eigen::Index row = 0;
    s.col(t).maxCoeff(&row);
    EXPECT_EQ(static_cast<std::size_t>(row), nearest);
  }
}

TEST(MelSpectrogram, LoopedClipColumnsRepeat) {
  std::mt19937_64 rng(6);
  AudioClip c;
  c.samples.resize(16000);  // 100 hops
  for (auto& s : c.samples) s = 2 * uniform01(rng) - 1;
  const auto looped = loop_to_duration(c, 3.0);
  const auto s = mel_spectrogram(looped);
  for (Eigen::Index t = 0; t + 100 < s.cols(); ++t) {
    for (Eigen::Index m = 0; m < s.rows(); ++m) ASSERT_NEAR(s(m, t), s(m, t + 100), 1e-9);
  }
}

TEST(Resize, TwoByTwoToThreeByThree) {
  RealMatrix m(2, 2);
  m << 0, 1, 1, 0;
  const auto r = resize_bilinear(m, 3, 3);
  EXPECT_DOUBLE_EQ(r(1, 1), 0.5);
  // pixel-center sampling clamps the corners to the source corners
  EXPECT_DOUBLE_EQ(r(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(r(0, 2), 1.0);
}

TEST(Resize, SameShapeIsIdentity) {
  std::mt19937_64 rng(7);
  RealMatrix m(5, 9);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform01(rng);
  EXPECT_EQ(resize_bilinear(m, 5, 9), m);
}

TEST(FeatureTensor, ConstantSpecNormalizesToZero) {
  const RealMatrix m = RealMatrix::Constant(224, 224, 3.5);
  const auto t = to_feature_tensor(m, Geometry::square224());
  for (float v : t.plane()) EXPECT_EQ(v, 0.0f);
}

TEST(FeatureTensor, WideGeometryShape) {
  std::mt19937_64 rng(8);
  RealMatrix m(64, 998);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = -100 + 80 * uniform01(rng);
  const auto t = to_feature_tensor(m, Geometry::parse("432x288"));
  EXPECT_EQ(t.height(), 288);
  EXPECT_EQ(t.width(), 432);
  EXPECT_EQ(t.plane().size(), 288u * 432u);
}

TEST(FeatureTensor, InvariantsOverRandomSizes) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    RealMatrix m(2 + rng() % 80, 2 + rng() % 300);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = -100 + 90 * uniform01(rng);
    const Geometry g{static_cast<int>(1 + rng() % 100), static_cast<int>(1 + rng() % 100)};
    const auto t = to_feature_tensor(m, g);
    ASSERT_EQ(t.geometry(), g);
    double sum = 0, sq = 0;
    for (float v : t.plane()) {
      ASSERT_TRUE(std::isfinite(v));
      sum += v;
    }
    const double mean = sum / t.plane().size();
    for (float v : t.plane()) sq += (v - mean) * (v - mean);
    EXPECT_NEAR(mean, 0.0, 1e-5);
    if (g.height * g.width > 1) {
      EXPECT_NEAR(sq / t.plane().size(), 1.0, 1e-5);
    }
    for (int y = 0; y < g.height; y += 7) {
      for (int x = 0; x < g.width; x += 5) {
        EXPECT_EQ(t.at(y, x, 0), t.at(y, x, 1));
        EXPECT_EQ(t.at(y, x, 0), t.at(y, x, 2));
      }
    }
  }
}

TEST(Geometry, ParseAndFormat) {
  EXPECT_EQ(Geometry::parse("432x288"), Geometry::wide432x288());
  EXPECT_EQ(Geometry::wide432x288().height, 288);
  EXPECT_EQ(Geometry::square448().to_string(), "448x448");
  EXPECT_TRUE(Geometry::parse("224x224").is_standard());
  EXPECT_FALSE(Geometry::parse("16x16").is_standard());
  EXPECT_THROW(Geometry::parse("224"), ConfigError);
  EXPECT_THROW(Geometry::parse("0x5"), ConfigError);
  EXPECT_THROW(Geometry::parse("ax5"), ConfigError);
}

TEST(NormalizePerSpeaker, ConstantGroupThrows) {
  std::map<std::string, std::vector<FeatureTensor>> g;
  g["a"].emplace_back(Geometry{2, 2}, std::vector<float>(4, 1.0f));
  EXPECT_THROW(normalize_per_speaker(g), NormalizationError);
  std::map<std::string, std::vector<FeatureTensor>> empty{{"b", {}}};
  EXPECT_THROW(normalize_per_speaker(empty), NormalizationError);
}

TEST(NormalizePerSpeaker, TwoLevelsBecomeMinusOnePlusOne) {
  std::map<std::string, std::vector<FeatureTensor>> g;
  g["a"].emplace_back(Geometry{2, 3}, std::vector<float>(6, 1.0f));
  g["a"].emplace_back(Geometry{2, 3}, std::vector<float>(6, 3.0f));
  normalize_per_speaker(g);
  for (float v : g["a"][0].plane()) EXPECT_FLOAT_EQ(v, -1.0f);
  for (float v : g["a"][1].plane()) EXPECT_FLOAT_EQ(v, 1.0f);
}

TEST(NormalizePerSpeaker, GroupsAreIndependent) {
  std::mt19937_64 rng(10);
  auto random_tensor = [&] {
    std::vector<float> p(12);
    for (auto& v : p) v = static_cast<float>(uniform01(rng) * 10);
    return FeatureTensor(Geometry{3, 4}, p);
  };
  std::map<int, std::vector<FeatureTensor>> both{{0, {random_tensor(), random_tensor()}}, {1, {random_tensor()}}};
  std::map<int, std::vector<FeatureTensor>> only_first{{0, both[0]}};
  std::map<int, std::vector<FeatureTensor>> only_second{{7, both[1]}};
  normalize_per_speaker(both);
  normalize_per_speaker(only_first);
  normalize_per_speaker(only_second);
  EXPECT_EQ(both[0], only_first[0]);
  EXPECT_EQ(both[1], only_second[7]);
}
