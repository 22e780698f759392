#pragma once

// Log-mel spectrogram images: STFT power, HTK mel filterbank, bilinear
// resizing to a fixed geometry and mean/variance normalization.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "voxprint/audio_io.hpp"
#include "voxprint/binary_io.hpp"
#include "voxprint/errors.hpp"
#include "voxprint/fft.hpp"

namespace voxprint {

using RealMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct StftConfig {
  int window_ms = 25;
  int hop_ms = 10;
  int fft_size = 512;

  [[nodiscard]] std::size_t window_length(int sample_rate) const {
    return static_cast<std::size_t>(std::llround(sample_rate * window_ms / 1000.0));
  }
  [[nodiscard]] std::size_t hop_length(int sample_rate) const {
    return static_cast<std::size_t>(std::llround(sample_rate * hop_ms / 1000.0));
  }

  void validate(int sample_rate) const {
    if (window_ms <= 0 || hop_ms <= 0 || hop_ms > window_ms) {
      throw ConfigError("StftConfig requires 0 < hop_ms <= window_ms");
    }
    if (hop_length(sample_rate) == 0) throw ConfigError("StftConfig hop shorter than one sample");
    if (fft_size < 2 || !std::has_single_bit(static_cast<unsigned>(fft_size))) {
      throw ConfigError("StftConfig fft_size must be a power of two");
    }
    if (static_cast<std::size_t>(fft_size) < window_length(sample_rate)) {
      throw ConfigError("StftConfig fft_size must cover the window length");
    }
  }
};

struct MelConfig {
  int n_mels = 64;
  double f_min = 0.0;
  std::optional<double> f_max;  // defaults to the Nyquist frequency

  [[nodiscard]] double resolved_f_max(int sample_rate) const { return f_max.value_or(sample_rate / 2.0); }

  void validate(int sample_rate) const {
    if (n_mels < 2) throw ConfigError("MelConfig requires n_mels >= 2");
    const double hi = resolved_f_max(sample_rate);
    if (!(0.0 <= f_min && f_min < hi && hi <= sample_rate / 2.0)) {
      throw ConfigError("MelConfig requires 0 <= f_min < f_max <= sample_rate/2");
    }
  }
};

/// HTK mel scale.
inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Output image size. The three standard geometries are the ones the CLI
/// accepts; other sizes are allowed for small-scale experiments.
struct Geometry {
  int height = 224;
  int width = 224;

  static constexpr Geometry square224() { return {224, 224}; }
  static constexpr Geometry square448() { return {448, 448}; }
  static constexpr Geometry wide432x288() { return {288, 432}; }

  [[nodiscard]] bool is_standard() const {
    return *this == square224() || *this == square448() || *this == wide432x288();
  }

  /// "WIDTHxHEIGHT", e.g. "432x288".
  [[nodiscard]] std::string to_string() const { return std::to_string(width) + "x" + std::to_string(height); }

  static Geometry parse(std::string_view s) {
    const auto x = s.find('x');
    if (x == std::string_view::npos) throw ConfigError("geometry must look like 224x224, got '" + std::string(s) + "'");
    Geometry g;
    try {
      g.width = std::stoi(std::string(s.substr(0, x)));
      g.height = std::stoi(std::string(s.substr(x + 1)));
    } catch (const std::exception&) {
      throw ConfigError("geometry must look like 224x224, got '" + std::string(s) + "'");
    }
    if (g.width <= 0 || g.height <= 0) throw ConfigError("geometry dimensions must be positive");
    return g;
  }

  friend constexpr bool operator==(const Geometry&, const Geometry&) = default;
};

/// Normalized log-mel image, height x width x 3. The three channels are
/// replicas of one plane, so only the plane is stored.
class FeatureTensor {
 public:
  static constexpr int kChannels = 3;

  FeatureTensor() = default;
  FeatureTensor(Geometry g, std::vector<float> plane) : geometry_(g), plane_(std::move(plane)) {
    if (g.height <= 0 || g.width <= 0) throw ShapeError("feature geometry must be positive");
    if (plane_.size() != static_cast<std::size_t>(g.height) * g.width) {
      throw ShapeError("feature plane size does not match geometry");
    }
  }

  [[nodiscard]] Geometry geometry() const { return geometry_; }
  [[nodiscard]] int height() const { return geometry_.height; }
  [[nodiscard]] int width() const { return geometry_.width; }
  [[nodiscard]] std::span<const float> plane() const { return plane_; }
  [[nodiscard]] std::span<float> plane() { return plane_; }

  [[nodiscard]] float at(int y, int x, int channel) const {
    if (channel < 0 || channel >= kChannels) throw ShapeError("channel out of range");
    return plane_[static_cast<std::size_t>(y) * width() + x];
  }

  friend bool operator==(const FeatureTensor&, const FeatureTensor&) = default;

 private:
  Geometry geometry_{};
  std::vector<float> plane_;
};

/// |DFT|^2 of Hann-windowed frames, frames x (fft_size/2 + 1).
inline RealMatrix stft_power(const AudioClip& clip, const StftConfig& cfg = {}) {
  cfg.validate(clip.sample_rate);
  const std::size_t win = cfg.window_length(clip.sample_rate);
  const std::size_t hop = cfg.hop_length(clip.sample_rate);
  if (clip.size() < win) {
    throw TooShortError("clip of " + std::to_string(clip.size()) + " samples is shorter than one " +
                        std::to_string(win) + "-sample window");
  }
  const std::size_t n_fft = static_cast<std::size_t>(cfg.fft_size);
  const std::size_t frames = 1 + (clip.size() - win) / hop;
  const std::size_t bins = n_fft / 2 + 1;

  std::vector<double> window(win);
  for (std::size_t n = 0; n < win; ++n) {
    window[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(win));
  }

  const FftPlan plan(n_fft);
  RealMatrix power(static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(bins));
  std::vector<std::complex<double>> buf(n_fft);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), std::complex<double>{});
    const double* src = clip.samples.data() + t * hop;
    for (std::size_t n = 0; n < win; ++n) buf[n] = src[n] * window[n];
    plan.forward(buf);
    for (std::size_t k = 0; k < bins; ++k) power(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = std::norm(buf[k]);
  }
  return power;
}

/// Center frequencies (Hz) of the filters: n_mels points equally spaced in
/// mel strictly between mel(f_min) and mel(f_max).
inline std::vector<double> mel_peak_frequencies(const MelConfig& cfg, int sample_rate) {
  const double lo = hz_to_mel(cfg.f_min);
  const double hi = hz_to_mel(cfg.resolved_f_max(sample_rate));
  std::vector<double> peaks(static_cast<std::size_t>(cfg.n_mels));
  for (int i = 0; i < cfg.n_mels; ++i) {
    peaks[static_cast<std::size_t>(i)] = mel_to_hz(lo + (hi - lo) * (i + 1) / (cfg.n_mels + 1));
  }
  return peaks;
}

/// Triangular filters with unit peak, n_mels x (fft_size/2 + 1).
inline RealMatrix mel_filterbank(const MelConfig& cfg, int fft_size, int sample_rate) {
  cfg.validate(sample_rate);
  if (fft_size < 2) throw ConfigError("fft_size must be >= 2");
  const int bins = fft_size / 2 + 1;
  const double lo = hz_to_mel(cfg.f_min);
  const double hi = hz_to_mel(cfg.resolved_f_max(sample_rate));

  std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
  }

  RealMatrix fb = RealMatrix::Zero(cfg.n_mels, bins);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[static_cast<std::size_t>(m)];
    const double center = edges[static_cast<std::size_t>(m) + 1];
    const double right = edges[static_cast<std::size_t>(m) + 2];
    double row_sum = 0.0;
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / fft_size;
      double w = 0.0;
      if (f > left && f <= center) {
        w = (f - left) / (center - left);
      } else if (f > center && f < right) {
        w = (right - f) / (right - center);
      }
      fb(m, k) = w;
      row_sum += w;
    }
    if (!(row_sum > 0.0)) {
      throw ConfigError("n_mels=" + std::to_string(cfg.n_mels) + " is too large for fft_size=" +
                        std::to_string(fft_size) + ": filter " + std::to_string(m) + " covers no FFT bin");
    }
  }
  return fb;
}

inline constexpr double kLogMelFloor = 1e-10;

/// 10*log10(max(filterbank * power, 1e-10)), n_mels x frames.
inline RealMatrix mel_spectrogram(const AudioClip& clip, const StftConfig& stft = {}, const MelConfig& mel = {}) {
  const RealMatrix power = stft_power(clip, stft);
  const RealMatrix fb = mel_filterbank(mel, stft.fft_size, clip.sample_rate);
  RealMatrix energies = fb * power.transpose();
  return energies.unaryExpr([](double e) { return 10.0 * std::log10(std::max(e, kLogMelFloor)); });
}

/// Bilinear resize with the pixel-center convention (corners not aligned).
inline RealMatrix resize_bilinear(const RealMatrix& src, int out_h, int out_w) {
  if (src.size() == 0) throw ShapeError("cannot resize an empty matrix");
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize target must be positive");
  const auto in_h = static_cast<int>(src.rows());
  const auto in_w = static_cast<int>(src.cols());

  struct Tap {
    int i0, i1;
    double frac;
  };
  auto taps = [](int in, int out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      double s = (o + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(s));
      const int i1 = std::min(i0 + 1, in - 1);
      t[static_cast<std::size_t>(o)] = {i0, i1, s - i0};
    }
    return t;
  };
  const auto ty = taps(in_h, out_h);
  const auto tx = taps(in_w, out_w);

  RealMatrix out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const auto& a = ty[static_cast<std::size_t>(y)];
    for (int x = 0; x < out_w; ++x) {
      const auto& b = tx[static_cast<std::size_t>(x)];
      const double top = src(a.i0, b.i0) * (1.0 - b.frac) + src(a.i0, b.i1) * b.frac;
      const double bottom = src(a.i1, b.i0) * (1.0 - b.frac) + src(a.i1, b.i1) * b.frac;
      out(y, x) = top * (1.0 - a.frac) + bottom * a.frac;
    }
  }
  return out;
}

inline constexpr double kMinNormalizationSd = 1e-8;

/// Resizes a mel matrix (rows = mel bands -> height, columns = frames ->
/// width) and normalizes the image to zero mean and unit variance.
inline FeatureTensor to_feature_tensor(const RealMatrix& spec, Geometry geometry) {
  if (spec.size() == 0) throw ShapeError("mel spectrogram is empty");
  const RealMatrix img = resize_bilinear(spec, geometry.height, geometry.width);
  const double mean = img.mean();
  const double var = (img.array() - mean).square().mean();
  const double sd = std::max(std::sqrt(var), kMinNormalizationSd);

  std::vector<float> plane(static_cast<std::size_t>(img.size()));
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    plane[static_cast<std::size_t>(i)] = static_cast<float>((img.data()[i] - mean) / sd);
  }
  return FeatureTensor(geometry, std::move(plane));
}

/// Standardizes each speaker's tensors with that speaker's scalar mean and
/// (population) standard deviation over all of their values.
template <typename Key>
void normalize_per_speaker(std::map<Key, std::vector<FeatureTensor>>& groups) {
  for (auto& [speaker, tensors] : groups) {
    if (tensors.empty()) throw NormalizationError("speaker group is empty");
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& t : tensors) {
      for (float v : t.plane()) sum += v;
      count += t.plane().size();
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (const auto& t : tensors) {
      for (float v : t.plane()) sq += (v - mean) * (v - mean);
    }
    const double sd = std::sqrt(sq / static_cast<double>(count));
    if (!(sd > 0.0)) throw NormalizationError("speaker group has zero variance");
    for (auto& t : tensors) {
      for (float& v : t.plane()) v = static_cast<float>((v - mean) / sd);
    }
  }
}

// ---------------------------------------------------------------------------
// Feature cache file: "VPFT", u16 version, u32 height, u32 width, u32
// channels, then height*width*channels little-endian f32 in row-major HWC.

inline constexpr std::uint16_t kFeatureCacheVersion = 1;

inline Bytes encode_feature_cache(const FeatureTensor& t) {
  ByteWriter w;
  w.bytes("VPFT");
  w.u16(kFeatureCacheVersion);
  w.u32(static_cast<std::uint32_t>(t.height()));
  w.u32(static_cast<std::uint32_t>(t.width()));
  w.u32(FeatureTensor::kChannels);
  std::vector<float> hwc(t.plane().size() * FeatureTensor::kChannels);
  for (std::size_t i = 0; i < t.plane().size(); ++i) {
    for (int c = 0; c < FeatureTensor::kChannels; ++c) hwc[i * FeatureTensor::kChannels + static_cast<std::size_t>(c)] = t.plane()[i];
  }
  w.f32_array(hwc);
  return std::move(w).take();
}

inline FeatureTensor decode_feature_cache(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(4) != "VPFT") throw FormatError("not a feature cache file (bad magic)");
  if (const auto v = r.u16(); v != kFeatureCacheVersion) {
    throw UnsupportedError("feature cache version " + std::to_string(v) + " is not supported");
  }
  const auto h = r.u32();
  const auto w = r.u32();
  const auto c = r.u32();
  if (h == 0 || w == 0 || c != FeatureTensor::kChannels) throw FormatError("bad feature cache dimensions");
  const std::size_t n = static_cast<std::size_t>(h) * w;
  if (r.remaining() != n * c * 4) throw FormatError("feature cache payload size mismatch");
  std::vector<float> hwc(n * c);
  r.f32_array(hwc);
  std::vector<float> plane(n);
  for (std::size_t i = 0; i < n; ++i) {
    plane[i] = hwc[i * c];
    for (std::size_t k = 1; k < c; ++k) {
      if (std::bit_cast<std::uint32_t>(hwc[i * c + k]) != std::bit_cast<std::uint32_t>(plane[i])) {
        throw FormatError("feature cache channels are not replicas");
      }
    }
  }
  return FeatureTensor(Geometry{static_cast<int>(h), static_cast<int>(w)}, std::move(plane));
}

}  // namespace voxprint
