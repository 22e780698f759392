#pragma once

// Utterance manifests (speaker, path, split, duration), stratified
// per-speaker splitting, and a seeded harmonic-voice corpus generator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "voxprint/audio_io.hpp"
#include "voxprint/binary_io.hpp"
#include "voxprint/errors.hpp"
#include "voxprint/tensor.hpp"
#include "voxprint/text.hpp"

namespace voxprint {

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw FormatError("unknown split '" + std::string(s) + "'");
}

struct ManifestEntry {
  std::string speaker_id;
  std::string path;  // relative to the manifest's directory unless absolute
  Split split = Split::train;
  double duration_s = 0.0;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;  // where relative paths resolve; not serialized

  [[nodiscard]] std::filesystem::path resolve(const ManifestEntry& e) const { return base_dir / e.path; }

  [[nodiscard]] std::vector<const ManifestEntry*> select(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries) {
      if (e.split == s) out.push_back(&e);
    }
    return out;
  }

  /// Sorted ids of speakers with training data (the closed set).
  [[nodiscard]] std::vector<std::string> speakers() const {
    std::set<std::string> ids;
    for (const auto& e : entries) {
      if (e.split == Split::train) ids.insert(e.speaker_id);
    }
    return {ids.begin(), ids.end()};
  }

  void validate() const {
    if (entries.empty()) throw ConfigError("manifest has no entries");
    std::set<std::string_view> paths;
    std::set<std::string_view> with_train;
    for (const auto& e : entries) {
      if (e.speaker_id.empty() || e.path.empty()) throw ConfigError("manifest entry lacks a speaker or path");
      if (e.speaker_id.find_first_of("\t\n") != std::string::npos || e.path.find_first_of("\t\n") != std::string::npos) {
        throw ConfigError("manifest fields must not contain tabs or newlines");
      }
      if (!(e.duration_s >= 0.0) || !std::isfinite(e.duration_s)) throw ConfigError("manifest duration must be finite and >= 0");
      if (!paths.insert(e.path).second) throw ConfigError("duplicate utterance path '" + e.path + "'");
      if (e.split == Split::train) with_train.insert(e.speaker_id);
    }
    for (const auto& e : entries) {
      if (!with_train.contains(e.speaker_id)) {
        throw ConfigError("speaker '" + e.speaker_id + "' has no train utterances");
      }
    }
  }

  friend bool operator==(const Manifest& a, const Manifest& b) { return a.entries == b.entries; }
};

inline constexpr std::string_view kManifestHeader = "speaker_id\tpath\tsplit\tduration_s";

inline std::string format_manifest(const Manifest& m) {
  std::string out(kManifestHeader);
  out += '\n';
  for (const auto& e : m.entries) {
    out += e.speaker_id + '\t' + e.path + '\t' + to_string(e.split) + '\t' + format_real(e.duration_s) + '\n';
  }
  return out;
}

inline Manifest parse_manifest(std::string_view text, std::filesystem::path base_dir = {}) {
  const auto rows = lines(text);
  if (rows.empty() || rows.front() != kManifestHeader) throw FormatError("manifest lacks its header");
  Manifest m;
  m.base_dir = std::move(base_dir);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = split(rows[i], '\t');
    if (f.size() != 4) throw FormatError("manifest row " + std::to_string(i) + " needs 4 fields");
    m.entries.push_back({std::string(f[0]), std::string(f[1]), parse_split(f[2]), parse_real(f[3])});
  }
  m.validate();
  return m;
}

inline void write_manifest(const std::filesystem::path& file, const Manifest& m) {
  m.validate();
  write_text_file(file, format_manifest(m));
}

inline Manifest read_manifest(const std::filesystem::path& file) {
  return parse_manifest(read_text_file(file), file.parent_path());
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitRatios {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;

  void validate() const {
    if (!(train > 0.0) || !(val >= 0.0) || !(test >= 0.0) || std::abs(train + val + test - 1.0) > 1e-9) {
      throw ConfigError("split ratios must be non-negative, train > 0, and sum to 1");
    }
  }
};

/// Per-speaker counts: val and test are floor(n * ratio) and train keeps the
/// remainder, so rounding favors train and train is never empty.
inline std::array<std::size_t, 3> split_counts(std::size_t n, const SplitRatios& r) {
  r.validate();
  if (n == 0) return {0, 0, 0};
  auto v = static_cast<std::size_t>(std::floor(static_cast<double>(n) * r.val + 1e-9));
  auto t = static_cast<std::size_t>(std::floor(static_cast<double>(n) * r.test + 1e-9));
  while (v + t >= n) {
    if (t >= v && t > 0) {
      --t;
    } else {
      --v;
    }
  }
  return {n - v - t, v, t};
}

/// Seeded shuffle of each speaker's files, then train/val/test by
/// split_counts. Speakers are processed in id order.
inline void assign_splits(std::vector<ManifestEntry>& entries, const SplitRatios& ratios, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < entries.size(); ++i) by_speaker[entries[i].speaker_id].push_back(i);
  std::mt19937_64 rng(seed);
  for (auto& [id, idx] : by_speaker) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return entries[a].path < entries[b].path; });
    // Fisher-Yates with our own draws, so the order does not depend on the
    // standard library's shuffle implementation.
    for (std::size_t i = idx.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
      std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
    }
    const auto c = split_counts(idx.size(), ratios);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      entries[idx[k]].split = k < c[0] ? Split::train : (k < c[0] + c[1] ? Split::val : Split::test);
    }
  }
}

inline bool has_wav_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".wav";
}

using WarningSink = std::function<void(const std::string&)>;

/// Scans root/<speaker_id>/*.wav. Paths in the result are relative to root.
inline Manifest build_manifest(const std::filesystem::path& root, const SplitRatios& ratios = {}, std::uint64_t seed = 0,
                               const WarningSink& warn = {}) {
  namespace fs = std::filesystem;
  ratios.validate();
  if (!fs::is_directory(root)) throw IoError("not a directory: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& d : fs::directory_iterator(root)) {
    if (d.is_directory()) dirs.push_back(d.path());
  }
  std::sort(dirs.begin(), dirs.end());

  Manifest m;
  m.base_dir = root;
  for (const auto& dir : dirs) {
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(dir)) {
      if (f.is_regular_file() && has_wav_extension(f.path())) files.push_back(f.path());
    }
    const std::string id = dir.filename().string();
    if (files.empty()) {
      if (warn) warn("skipping speaker '" + id + "': no .wav files");
      continue;
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const auto clip = read_wav(f);
      m.entries.push_back({id, fs::relative(f, root).generic_string(), Split::train, clip.duration_s()});
    }
  }
  if (m.entries.empty()) throw ConfigError("no speaker directories with .wav files under " + root.string());
  assign_splits(m.entries, ratios, seed);
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthSpec {
  int num_speakers = 8;
  int utterances_per_speaker = 40;
  double min_duration_s = 1.5;
  double max_duration_s = 6.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_speakers < 2) throw ConfigError("SynthSpec requires num_speakers >= 2");
    if (utterances_per_speaker < 1) throw ConfigError("SynthSpec requires utterances_per_speaker >= 1");
    if (!(min_duration_s > 0.0) || !(max_duration_s >= min_duration_s)) {
      throw ConfigError("SynthSpec requires 0 < min_duration_s <= max_duration_s");
    }
  }
};

inline constexpr int kSynthHarmonics = 8;
inline constexpr double kSynthSnrDb = 20.0;
inline constexpr double kSynthF0Min = 90.0;
inline constexpr double kSynthF0Max = 260.0;
inline constexpr double kSynthF0Step = 2.0;

/// Identity of one synthetic voice.
struct SynthVoice {
  double f0 = 0.0;
  std::array<double, kSynthHarmonics> amplitude{};  // envelope x tilt x formant, max 1
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline double gaussian(std::mt19937_64& rng) {
  const double u1 = 1.0 - uniform01(rng);  // (0, 1]
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace detail

inline std::string synth_speaker_id(int index, int num_speakers) {
  const int width = std::max(2, static_cast<int>(std::to_string(num_speakers - 1).size()));
  std::string s = std::to_string(index);
  return "spk" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

inline std::string synth_utterance_name(int index) {
  std::string s = std::to_string(index);
  return "utt" + std::string(static_cast<std::size_t>(std::max(0, 3 - static_cast<int>(s.size()))), '0') + s + ".wav";
}

/// Voices for a spec: fundamentals drawn without replacement from the
/// 2 Hz grid over [90, 260] Hz.
inline std::vector<SynthVoice> synth_voices(const SynthSpec& spec) {
  spec.validate();
  std::vector<double> grid;
  for (double f = kSynthF0Min; f <= kSynthF0Max + 1e-9; f += kSynthF0Step) grid.push_back(f);
  if (static_cast<std::size_t>(spec.num_speakers) > grid.size()) {
    throw ConfigError("SynthSpec allows at most " + std::to_string(grid.size()) + " speakers (distinct fundamentals)");
  }
  std::mt19937_64 rng(detail::splitmix64(spec.seed));
  std::vector<SynthVoice> voices(static_cast<std::size_t>(spec.num_speakers));
  for (auto& v : voices) {
    const auto k = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(grid.size()));
    v.f0 = grid[k];
    grid.erase(grid.begin() + static_cast<std::ptrdiff_t>(k));

    const double tilt = detail::uniform(rng, 0.3, 1.5);       // spectral slope exponent
    const double formant = detail::uniform(rng, 400.0, 2400.0);
    const double bandwidth = detail::uniform(rng, 150.0, 500.0);
    double peak = 0.0;
    for (int h = 0; h < kSynthHarmonics; ++h) {
      const double fh = v.f0 * (h + 1);
      const double envelope = detail::uniform(rng, 0.2, 1.0);
      const double resonance = 1.0 + 3.0 * std::exp(-0.5 * std::pow((fh - formant) / bandwidth, 2.0));
      v.amplitude[static_cast<std::size_t>(h)] = envelope * std::pow(h + 1.0, -tilt) * resonance;
      peak = std::max(peak, v.amplitude[static_cast<std::size_t>(h)]);
    }
    for (auto& a : v.amplitude) a /= peak;
  }
  return voices;
}

/// One utterance of `voice`: per-utterance duration, random phases, +-15%
/// harmonic amplitude jitter, overall gain jitter and white noise at 20 dB SNR.
inline AudioClip synth_utterance(const SynthSpec& spec, const SynthVoice& voice, int speaker, int utterance) {
  std::mt19937_64 rng(detail::splitmix64(spec.seed ^ detail::splitmix64((static_cast<std::uint64_t>(speaker) << 32) |
                                                                         static_cast<std::uint32_t>(utterance))));
  const double duration = detail::uniform(rng, spec.min_duration_s, spec.max_duration_s);
  const std::size_t n = target_length(duration, kCanonicalSampleRate);
  std::array<double, kSynthHarmonics> amp{}, phase{};
  for (std::size_t h = 0; h < amp.size(); ++h) {
    amp[h] = voice.amplitude[h] * detail::uniform(rng, 0.85, 1.15);
    phase[h] = detail::uniform(rng, 0.0, 2.0 * std::numbers::pi);
  }
  const double gain = detail::uniform(rng, 0.4, 0.8);

  AudioClip clip;
  clip.samples.assign(n, 0.0);
  const double w0 = 2.0 * std::numbers::pi * voice.f0 / kCanonicalSampleRate;
  for (std::size_t h = 0; h < amp.size(); ++h) {
    const double w = w0 * static_cast<double>(h + 1);
    if (w >= std::numbers::pi) break;  // above Nyquist
    for (std::size_t i = 0; i < n; ++i) clip.samples[i] += amp[h] * std::sin(w * static_cast<double>(i) + phase[h]);
  }
  double peak = 0.0, power = 0.0;
  for (double x : clip.samples) {
    peak = std::max(peak, std::abs(x));
    power += x * x;
  }
  const double scale = gain / peak;
  power *= scale * scale / static_cast<double>(n);
  const double noise_sd = std::sqrt(power / std::pow(10.0, kSynthSnrDb / 10.0));
  for (double& x : clip.samples) x = std::clamp(x * scale + noise_sd * detail::gaussian(rng), -1.0, 1.0);
  return clip;
}

/// Writes out_dir/<speaker>/uttNNN.wav for every voice and utterance plus
/// out_dir/manifest.tsv; returns the manifest (split seeded by spec.seed).
inline Manifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir,
                                   const SplitRatios& ratios = {}) {
  const auto voices = synth_voices(spec);
  Manifest m;
  m.base_dir = out_dir;
  for (int s = 0; s < spec.num_speakers; ++s) {
    const std::string id = synth_speaker_id(s, spec.num_speakers);
    for (int u = 0; u < spec.utterances_per_speaker; ++u) {
      const auto clip = synth_utterance(spec, voices[static_cast<std::size_t>(s)], s, u);
      const std::string rel = id + "/" + synth_utterance_name(u);
      write_file(out_dir / rel, encode_wav(clip));
      m.entries.push_back({id, rel, Split::train, clip.duration_s()});
    }
  }
  assign_splits(m.entries, ratios, spec.seed);
  write_manifest(out_dir / "manifest.tsv", m);
  return m;
}

}  // namespace voxprint
