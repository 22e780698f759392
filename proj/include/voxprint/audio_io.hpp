#pragma once

// WAV decoding, leading/trailing silence trimming and loop extension.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "voxprint/binary_io.hpp"
#include "voxprint/errors.hpp"

namespace voxprint {

inline constexpr int kCanonicalSampleRate = 16000;

/// Mono PCM audio with amplitudes in [-1, 1].
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = kCanonicalSampleRate;
  std::string source_id;

  [[nodiscard]] std::size_t size() const { return samples.size(); }
  [[nodiscard]] double duration_s() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

/// Energy-threshold parameters for silence trimming.
struct TrimPolicy {
  int frame_ms = 25;
  int hop_ms = 10;
  double threshold_db = -40.0;  // relative to the loudest frame
  int min_voiced_frames = 3;

  void validate() const {
    if (hop_ms <= 0 || frame_ms < hop_ms) throw ConfigError("TrimPolicy requires frame_ms >= hop_ms > 0");
    if (!(threshold_db < 0.0)) throw ConfigError("TrimPolicy requires threshold_db < 0");
    if (min_voiced_frames < 1) throw ConfigError("TrimPolicy requires min_voiced_frames >= 1");
  }
};

namespace detail {

inline constexpr std::uint16_t kWavePcm = 1;
inline constexpr std::uint16_t kWaveFloat = 3;
inline constexpr std::uint16_t kWaveExtensible = 0xFFFE;

inline void validate_clip(const AudioClip& clip) {
  if (clip.sample_rate <= 0) throw ArgumentError("sample_rate must be positive");
  if (clip.samples.empty()) throw EmptyAudioError("clip has no samples");
}

}  // namespace detail

/// Decodes a RIFF/WAVE container holding 16-bit PCM or 32-bit float samples.
/// Multichannel input is averaged down to mono.
inline AudioClip decode_wav(std::span<const std::uint8_t> bytes, std::string source_id = {}) {
  ByteReader r(bytes);
  try {
    if (r.str(4) != "RIFF") throw FormatError("missing RIFF tag");
    r.u32();
    if (r.str(4) != "WAVE") throw FormatError("missing WAVE tag");
  } catch (const FormatError& e) {
    throw FormatError(std::string("malformed WAV header: ") + e.what());
  }

  std::optional<std::uint16_t> format;
  std::uint16_t channels = 0;
  std::uint32_t rate = 0;
  std::uint16_t bits = 0;
  std::optional<std::span<const std::uint8_t>> data;

  while (r.remaining() >= 8 && !(format && data)) {
    const std::string id = r.str(4);
    const std::uint32_t size = r.u32();
    if (size > r.remaining()) {
      // Streaming writers sometimes leave a bogus data size; take what is there.
      if (id != "data") throw FormatError("chunk '" + id + "' overruns file");
      data = r.span(r.remaining());
      break;
    }
    if (id == "fmt ") {
      if (size < 16) throw FormatError("fmt chunk too short");
      ByteReader f(r.span(size));
      std::uint16_t tag = f.u16();
      channels = f.u16();
      rate = f.u32();
      f.u32();  // byte rate
      f.u16();  // block align
      bits = f.u16();
      if (tag == detail::kWaveExtensible) {
        if (size < 40) throw FormatError("extensible fmt chunk too short");
        f.u16();  // cb size
        f.u16();  // valid bits
        f.u32();  // channel mask
        tag = f.u16();  // leading two bytes of the sub-format GUID
      }
      format = tag;
    } else if (id == "data") {
      data = r.span(size);
    } else {
      r.skip(size);
    }
    if (size % 2 == 1 && r.remaining() > 0) r.skip(1);
  }

  if (!format) throw FormatError("missing fmt chunk");
  if (!data) throw FormatError("missing data chunk");
  if (channels == 0) throw FormatError("zero channels");
  if (rate == 0) throw FormatError("zero sample rate");

  const bool pcm16 = *format == detail::kWavePcm && bits == 16;
  const bool float32 = *format == detail::kWaveFloat && bits == 32;
  if (!pcm16 && !float32) {
    throw UnsupportedError("unsupported WAV encoding (format " + std::to_string(*format) + ", " +
                           std::to_string(bits) + " bits)");
  }

  const std::size_t bytes_per_frame = static_cast<std::size_t>(bits / 8) * channels;
  const std::size_t frames = data->size() / bytes_per_frame;
  if (frames == 0) throw EmptyAudioError("WAV data chunk is empty");

  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.source_id = std::move(source_id);
  clip.samples.resize(frames);
  ByteReader d(*data);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::uint16_t c = 0; c < channels; ++c) {
      if (pcm16) {
        acc += static_cast<double>(d.i16()) / 32768.0;
      } else {
        const float v = d.f32();
        if (!std::isfinite(v)) throw FormatError("non-finite float sample");
        acc += std::clamp(static_cast<double>(v), -1.0, 1.0);
      }
    }
    clip.samples[i] = acc / channels;
  }
  return clip;
}

/// Writes interleaved 16-bit PCM as a canonical 44-byte-header WAV.
inline Bytes encode_wav_pcm16(std::span<const std::int16_t> interleaved, int channels, int sample_rate) {
  if (channels <= 0 || sample_rate <= 0) throw ArgumentError("channels and sample_rate must be positive");
  const auto data_bytes = static_cast<std::uint32_t>(interleaved.size() * 2);
  ByteWriter w;
  w.bytes("RIFF");
  w.u32(36 + data_bytes);
  w.bytes("WAVE");
  w.bytes("fmt ");
  w.u32(16);
  w.u16(detail::kWavePcm);
  w.u16(static_cast<std::uint16_t>(channels));
  w.u32(static_cast<std::uint32_t>(sample_rate));
  w.u32(static_cast<std::uint32_t>(sample_rate * channels * 2));
  w.u16(static_cast<std::uint16_t>(channels * 2));
  w.u16(16);
  w.bytes("data");
  w.u32(data_bytes);
  for (auto s : interleaved) w.i16(s);
  return std::move(w).take();
}

inline Bytes encode_wav_float32(std::span<const float> interleaved, int channels, int sample_rate) {
  if (channels <= 0 || sample_rate <= 0) throw ArgumentError("channels and sample_rate must be positive");
  const auto data_bytes = static_cast<std::uint32_t>(interleaved.size() * 4);
  ByteWriter w;
  w.bytes("RIFF");
  w.u32(36 + data_bytes);
  w.bytes("WAVE");
  w.bytes("fmt ");
  w.u32(16);
  w.u16(detail::kWaveFloat);
  w.u16(static_cast<std::uint16_t>(channels));
  w.u32(static_cast<std::uint32_t>(sample_rate));
  w.u32(static_cast<std::uint32_t>(sample_rate * channels * 4));
  w.u16(static_cast<std::uint16_t>(channels * 4));
  w.u16(32);
  w.bytes("data");
  w.u32(data_bytes);
  w.f32_array(interleaved);
  return std::move(w).take();
}

/// Quantizes to 16-bit with the inverse of decode_wav's scaling, so
/// decode -> encode -> decode is bit-exact.
inline std::int16_t to_pcm16(double x) {
  const double q = std::nearbyint(x * 32768.0);
  return static_cast<std::int16_t>(std::clamp(q, -32768.0, 32767.0));
}

inline Bytes encode_wav(const AudioClip& clip) {
  std::vector<std::int16_t> pcm(clip.samples.size());
  std::transform(clip.samples.begin(), clip.samples.end(), pcm.begin(), to_pcm16);
  return encode_wav_pcm16(pcm, 1, clip.sample_rate);
}

inline AudioClip read_wav(const std::filesystem::path& path) {
  return decode_wav(read_file(path), path.string());
}

inline void require_canonical_rate(const AudioClip& clip) {
  if (clip.sample_rate != kCanonicalSampleRate) {
    throw UnsupportedError("expected " + std::to_string(kCanonicalSampleRate) + " Hz audio, got " +
                           std::to_string(clip.sample_rate) + " Hz (resampling is not supported)");
  }
}

/// Per-frame RMS on the trimming grid. Frames start every hop; frames that run
/// past the end of the clip are zero-padded to the nominal frame length.
inline std::vector<double> frame_rms(std::span<const double> x, std::size_t frame_len, std::size_t hop) {
  std::vector<double> rms;
  for (std::size_t start = 0; start < x.size(); start += hop) {
    const std::size_t end = std::min(x.size(), start + frame_len);
    double e = 0.0;
    for (std::size_t i = start; i < end; ++i) e += x[i] * x[i];
    rms.push_back(std::sqrt(e / static_cast<double>(frame_len)));
    if (end == x.size()) break;
  }
  return rms;
}

/// Removes leading and trailing silence. A frame is voiced when its RMS lies
/// above (loudest frame RMS + threshold_db). The run of unvoiced frames before
/// the first voiced frame is cut, as is the run after the last voiced frame,
/// so the kept span starts where the last leading silent frame ends and stops
/// where the first trailing silent frame begins. Interior pauses are kept.
inline AudioClip trim_silence(const AudioClip& clip, const TrimPolicy& policy = {}) {
  detail::validate_clip(clip);
  policy.validate();
  const auto frame_len = static_cast<std::size_t>(
      std::max<long long>(1, std::llround(clip.sample_rate * policy.frame_ms / 1000.0)));
  const auto hop = static_cast<std::size_t>(
      std::max<long long>(1, std::llround(clip.sample_rate * policy.hop_ms / 1000.0)));

  const auto rms = frame_rms(clip.samples, frame_len, hop);
  const double peak = *std::max_element(rms.begin(), rms.end());
  if (!(peak > 0.0)) throw SilentAudioError("no voiced frames (clip is silent)");
  const double floor = peak * std::pow(10.0, policy.threshold_db / 20.0);

  std::vector<bool> voiced(rms.size());
  int n_voiced = 0;
  for (std::size_t t = 0; t < rms.size(); ++t) {
    voiced[t] = rms[t] > floor;
    n_voiced += voiced[t] ? 1 : 0;
  }
  if (n_voiced < policy.min_voiced_frames) {
    throw SilentAudioError("no voiced frames (only " + std::to_string(n_voiced) + " above threshold)");
  }

  const std::size_t first = static_cast<std::size_t>(std::find(voiced.begin(), voiced.end(), true) - voiced.begin());
  const std::size_t last = rms.size() - 1 -
                           static_cast<std::size_t>(std::find(voiced.rbegin(), voiced.rend(), true) - voiced.rbegin());

  // Leading samples covered only by silent frames end where frame first-1 ends.
  std::size_t begin = 0;
  if (first > 0) begin = std::min(clip.size(), (first - 1) * hop + frame_len);
  // Trailing samples covered only by silent frames start at frame last+1.
  std::size_t end = clip.size();
  if (last + 1 < rms.size()) end = (last + 1) * hop;
  if (end <= begin) {
    begin = first * hop;
    end = std::min(clip.size(), last * hop + frame_len);
  }

  AudioClip out;
  out.sample_rate = clip.sample_rate;
  out.source_id = clip.source_id;
  out.samples.assign(clip.samples.begin() + static_cast<std::ptrdiff_t>(begin),
                     clip.samples.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

/// round-half-up(target_s * sample_rate)
inline std::size_t target_length(double target_s, int sample_rate) {
  if (!(target_s > 0.0) || !std::isfinite(target_s)) throw ArgumentError("target duration must be positive");
  const double t = std::floor(target_s * sample_rate + 0.5);
  if (t < 1.0) throw ArgumentError("target duration shorter than one sample");
  return static_cast<std::size_t>(t);
}

/// Extends a clip to exactly round(target_s * sr) samples by repeating it
/// end-to-end, or crops it to that length. The crop keeps the leading segment
/// unless crop_seed is given, in which case the offset is drawn uniformly.
inline AudioClip loop_to_duration(const AudioClip& clip, double target_s,
                                  std::optional<std::uint64_t> crop_seed = std::nullopt) {
  detail::validate_clip(clip);
  const std::size_t n = target_length(target_s, clip.sample_rate);
  const std::size_t len = clip.size();

  AudioClip out;
  out.sample_rate = clip.sample_rate;
  out.source_id = clip.source_id;
  out.samples.resize(n);
  if (len >= n) {
    std::size_t offset = 0;
    if (crop_seed) {
      std::mt19937_64 rng(*crop_seed);
      offset = std::uniform_int_distribution<std::size_t>(0, len - n)(rng);
    }
    std::copy_n(clip.samples.begin() + static_cast<std::ptrdiff_t>(offset), n, out.samples.begin());
    return out;
  }
  for (std::size_t pos = 0; pos < n; pos += len) {
    const std::size_t chunk = std::min(len, n - pos);
    std::copy_n(clip.samples.begin(), chunk, out.samples.begin() + static_cast<std::ptrdiff_t>(pos));
  }
  return out;
}

}  // namespace voxprint
