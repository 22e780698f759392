#pragma once

// End-to-end plumbing: utterance -> feature tensor, the on-disk feature
// cache, training runs, evaluation and single-utterance identification.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "voxprint/audio_io.hpp"
#include "voxprint/binary_io.hpp"
#include "voxprint/checkpoint.hpp"
#include "voxprint/config.hpp"
#include "voxprint/dataset.hpp"
#include "voxprint/features.hpp"
#include "voxprint/identification.hpp"
#include "voxprint/training.hpp"

namespace voxprint {

using LogSink = std::function<void(const std::string&)>;

/// trim -> loop/crop to the target duration -> log-mel -> normalized image.
inline FeatureTensor utterance_features(const AudioClip& clip, const RunConfig& cfg) {
  require_canonical_rate(clip);
  const auto trimmed = trim_silence(clip, cfg.trim);
  const auto fixed = loop_to_duration(trimmed, cfg.duration_s);
  return to_feature_tensor(mel_spectrogram(fixed, cfg.stft, cfg.mel), cfg.geometry);
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::jthread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------
// Feature cache: <dir>/features.txt (feature settings), <dir>/index.tsv
// ("path\tcache_file\thash") and one .vpft file per utterance.

inline constexpr std::string_view kCacheIndexHeader = "path\tcache_file\thash";

struct CacheRecord {
  std::string cache_file;
  std::uint64_t hash = 0;
};

using CacheIndex = std::map<std::string, CacheRecord>;

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string format_cache_index(const CacheIndex& index) {
  std::string out(kCacheIndexHeader);
  out += '\n';
  for (const auto& [path, r] : index) out += path + '\t' + r.cache_file + '\t' + hex64(r.hash) + '\n';
  return out;
}

inline CacheIndex parse_cache_index(std::string_view text) {
  const auto rows = lines(text);
  if (rows.empty() || rows.front() != kCacheIndexHeader) throw FormatError("cache index lacks its header");
  CacheIndex index;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = split(rows[i], '\t');
    if (f.size() != 3 || f[2].size() != 16) throw FormatError("bad cache index row " + std::to_string(i));
    index[std::string(f[0])] = {std::string(f[1]), std::stoull(std::string(f[2]), nullptr, 16)};
  }
  return index;
}

/// Hash of the audio bytes under the given feature settings.
inline std::uint64_t feature_hash(std::span<const std::uint8_t> wav, const RunConfig& cfg) {
  return fnv1a64(wav, fnv1a64(format_key_values(cfg.feature_key_values())));
}

struct PreprocessSummary {
  std::size_t total = 0;
  std::size_t computed = 0;
  std::size_t reused = 0;
  std::vector<std::pair<std::string, std::string>> skipped;  // path, reason

  [[nodiscard]] double skip_fraction() const {
    return total == 0 ? 0.0 : static_cast<double>(skipped.size()) / static_cast<double>(total);
  }
};

inline constexpr double kMaxSkipFraction = 0.10;

/// Computes (or reuses, when the content hash matches) the feature file of
/// every manifest utterance. Unreadable or silent utterances are skipped.
inline PreprocessSummary preprocess(const Manifest& manifest, const RunConfig& cfg, const std::filesystem::path& cache_dir,
                                    const LogSink& log = {}, unsigned threads = default_threads()) {
  namespace fs = std::filesystem;
  cfg.validate();
  manifest.validate();
  fs::create_directories(cache_dir);
  const auto settings_file = cache_dir / "features.txt";
  const auto index_file = cache_dir / "index.tsv";
  CacheIndex old_index;
  if (fs::exists(index_file)) old_index = parse_cache_index(read_text_file(index_file));

  const auto& entries = manifest.entries;
  std::vector<std::optional<CacheRecord>> records(entries.size());
  std::vector<std::string> failures(entries.size());
  std::vector<char> reused(entries.size(), 0);
  parallel_for(entries.size(), threads, [&](std::size_t i) {
    const auto& e = entries[i];
    try {
      const auto bytes = read_file(manifest.resolve(e));
      const std::uint64_t h = feature_hash(bytes, cfg);
      CacheRecord rec{hex64(fnv1a64(e.path)) + ".vpft", h};
      const auto it = old_index.find(e.path);
      if (it != old_index.end() && it->second.hash == h && it->second.cache_file == rec.cache_file &&
          fs::exists(cache_dir / rec.cache_file)) {
        reused[i] = 1;
      } else {
        const auto f = utterance_features(decode_wav(bytes, e.path), cfg);
        write_file(cache_dir / rec.cache_file, encode_feature_cache(f));
      }
      records[i] = rec;
    } catch (const SilentAudioError& ex) {
      failures[i] = std::string("no voiced frames: ") + ex.what();
    } catch (const Error& ex) {
      failures[i] = ex.what();
    }
  });

  PreprocessSummary s;
  s.total = entries.size();
  CacheIndex index;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (records[i]) {
      index[entries[i].path] = *records[i];
      ++(reused[i] ? s.reused : s.computed);
    } else {
      s.skipped.emplace_back(entries[i].path, failures[i]);
      if (log) log("skipped " + entries[i].path + ": " + failures[i]);
    }
  }
  write_text_file(settings_file, format_key_values(cfg.feature_key_values()));
  write_text_file(index_file, format_cache_index(index));
  return s;
}

struct FeatureCache {
  std::filesystem::path dir;
  CacheIndex index;

  /// Opens a cache and checks it was built with cfg's feature settings.
  static FeatureCache open(const std::filesystem::path& dir, const RunConfig& cfg) {
    namespace fs = std::filesystem;
    if (!fs::exists(dir / "index.tsv") || !fs::exists(dir / "features.txt")) {
      throw ConfigError("no feature cache at " + dir.string() + "; run 'voxprint preprocess' first");
    }
    if (parse_key_values(read_text_file(dir / "features.txt")) != cfg.feature_key_values()) {
      throw ConfigError("feature cache at " + dir.string() +
                        " was built with different feature settings; rerun 'voxprint preprocess'");
    }
    return {dir, parse_cache_index(read_text_file(dir / "index.tsv"))};
  }

  [[nodiscard]] std::optional<FeatureTensor> load(const std::string& path) const {
    const auto it = index.find(path);
    if (it == index.end()) return std::nullopt;
    return decode_feature_cache(read_file(dir / it->second.cache_file));
  }
};

/// Labeled features of one split. Utterances missing from the cache (skipped
/// during preprocessing) are left out.
struct SplitData {
  LabeledSet set;
  std::vector<std::string> speaker_ids;
};

inline int speaker_label(const std::vector<std::string>& speakers, const std::string& id) {
  const auto it = std::find(speakers.begin(), speakers.end(), id);
  if (it == speakers.end()) throw ClosedSetError("speaker '" + id + "' was not seen in training (closed-set identification)");
  return static_cast<int>(it - speakers.begin());
}

inline SplitData load_split(const Manifest& manifest, const FeatureCache& cache, Split split,
                            const std::vector<std::string>& speakers) {
  SplitData d;
  for (const auto* e : manifest.select(split)) {
    auto f = cache.load(e->path);
    if (!f) continue;
    d.set.features.push_back(std::move(*f));
    d.set.labels.push_back(speaker_label(speakers, e->speaker_id));
    d.speaker_ids.push_back(e->speaker_id);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Training runs

inline std::string join(const std::vector<std::string>& v, char sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? std::string(1, sep) : std::string()) + v[i];
  return out;
}

inline EnrollmentDB enroll(const Network<float>& net, const SplitData& data) {
  const auto emb = embed_features(net, data.set.features);
  std::map<std::string, std::vector<std::vector<double>>> groups;
  for (std::size_t i = 0; i < data.speaker_ids.size(); ++i) groups[data.speaker_ids[i]].push_back(row_of(emb, i));
  return EnrollmentDB::from_embeddings(groups);
}

inline constexpr std::string_view kCentroidTensor = "enrollment.centroids";

/// Best-validation network plus enrollment centroids (from the train split)
/// and the run configuration as metadata.
inline Checkpoint make_run_checkpoint(const Network<float>& net, const RunConfig& cfg,
                                      const std::vector<std::string>& speakers, const EnrollmentDB& db, int best_epoch) {
  KeyValues meta = cfg.to_key_values();
  meta["speakers"] = join(speakers, ',');
  meta["best_epoch"] = std::to_string(best_epoch);
  auto ck = make_checkpoint(net, std::move(meta));
  ck.tensors.emplace_back(std::string(kCentroidTensor), db.to_tensor());
  return ck;
}

struct RunArtifacts {
  Checkpoint checkpoint;
  std::vector<EpochRecord> records;
};

inline RunArtifacts train_run(const Manifest& manifest, const FeatureCache& cache, const RunConfig& cfg,
                              const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const auto speakers = manifest.speakers();
  const auto train_data = load_split(manifest, cache, Split::train, speakers);
  const auto val_data = load_split(manifest, cache, Split::val, speakers);
  if (train_data.set.size() == 0) throw ConfigError("train split has no cached features");
  if (val_data.set.size() == 0) throw ConfigError("validation split has no cached features");

  LossConfig loss = cfg.loss;
  loss.num_classes = static_cast<int>(speakers.size());
  auto result = train(train_data.set, val_data.set, cfg.network(loss.num_classes), loss, cfg.train, on_epoch);
  const auto db = enroll(result.best, train_data);
  return {make_run_checkpoint(result.best, cfg, speakers, db, result.best_epoch), std::move(result.records)};
}

/// Writes checkpoint.vpck, train_log.tsv and config.txt into run_dir.
inline void write_run(const std::filesystem::path& run_dir, const RunArtifacts& run, const RunConfig& cfg) {
  save_checkpoint(run_dir / "checkpoint.vpck", run.checkpoint);
  write_text_file(run_dir / "train_log.tsv", format_training_log(run.records));
  write_text_file(run_dir / "config.txt", cfg.serialize());
}

inline RunConfig run_config_of(const Checkpoint& ck) {
  KeyValues kv = ck.metadata;
  kv.erase("speakers");
  kv.erase("best_epoch");
  return RunConfig::from_key_values(kv);
}

inline std::vector<std::string> speakers_of(const Checkpoint& ck) {
  std::vector<std::string> out;
  for (auto s : split(ck.meta("speakers"), ',')) out.emplace_back(s);
  return out;
}

inline EnrollmentDB enrollment_of(const Checkpoint& ck) {
  const auto* t = ck.extra(kCentroidTensor);
  if (t == nullptr) throw FormatError("checkpoint has no enrollment centroids");
  return EnrollmentDB::from_tensor(speakers_of(ck), *t);
}

// ---------------------------------------------------------------------------
// Evaluation and identification

/// Evaluates a checkpoint on one manifest split, computing features from the
/// audio with the checkpoint's own settings. Failing utterances are logged
/// and left out.
inline Evaluation evaluate_checkpoint(const Checkpoint& ck, const Manifest& manifest, Split split = Split::test,
                                      const LogSink& log = {}, unsigned threads = default_threads()) {
  const auto cfg = run_config_of(ck);
  const auto speakers = speakers_of(ck);
  const auto net = ck.network();
  const auto entries = manifest.select(split);
  if (entries.empty()) throw ConfigError(to_string(split) + " split is empty");
  for (const auto* e : entries) speaker_label(speakers, e->speaker_id);

  std::vector<std::optional<FeatureTensor>> feats(entries.size());
  std::vector<std::string> failures(entries.size());
  parallel_for(entries.size(), threads, [&](std::size_t i) {
    try {
      feats[i] = utterance_features(read_wav(manifest.resolve(*entries[i])), cfg);
    } catch (const Error& ex) {
      failures[i] = ex.what();
    }
  });
  SplitData d;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!feats[i]) {
      if (log) log("skipped " + entries[i]->path + ": " + failures[i]);
      continue;
    }
    d.set.features.push_back(std::move(*feats[i]));
    d.speaker_ids.push_back(entries[i]->speaker_id);
  }
  if (d.speaker_ids.empty()) throw ConfigError("no usable utterances in the " + to_string(split) + " split");

  const auto emb = embed_features(net, d.set.features);
  auto ev = evaluate_embeddings(net, speakers, emb, d.speaker_ids, enrollment_of(ck), cfg.loss, cfg.duration_s);
  ev.report.geometry = cfg.geometry.to_string();
  return ev;
}

inline Match identify_clip(const Checkpoint& ck, const AudioClip& clip) {
  const auto cfg = run_config_of(ck);
  const auto f = utterance_features(clip, cfg);
  const auto emb = embed_features(ck.network(), std::vector<FeatureTensor>{f});
  return identify_cosine(enrollment_of(ck), row_of(emb, 0));
}

}  // namespace voxprint
