// voxprint command-line tool: synth, preprocess, train, eval, identify.
// Exit codes: 0 success, 1 I/O or runtime failure, 2 configuration or
// validation error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "voxprint/config.hpp"
#include "voxprint/dataset.hpp"
#include "voxprint/pipeline.hpp"

namespace fs = std::filesystem;
using namespace voxprint;

namespace {

constexpr int kExitIo = 1;
constexpr int kExitConfig = 2;

struct ConfigFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::string> geometry, loss, preset;
  std::optional<double> duration, margin, scale, lr;
  std::optional<std::uint64_t> seed;
  std::optional<int> max_epochs, min_epochs, batch_size;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key=value config file");
    app->add_option("--set", sets, "override one config key (key=value), repeatable");
    app->add_option("--geometry", geometry, "feature image size: 224x224, 448x448 or 432x288");
    app->add_option("--duration", duration, "utterance length in seconds after looping/cropping");
    app->add_option("--loss", loss, "softmax, cosface or arcface");
    app->add_option("--margin", margin, "margin m of the cosine losses");
    app->add_option("--scale", scale, "scale s of the cosine losses");
    app->add_option("--preset", preset, "network preset: vgg16m, desk or tiny");
    app->add_option("--seed", seed, "random seed");
    app->add_option("--lr", lr, "initial learning rate");
    app->add_option("--max-epochs", max_epochs);
    app->add_option("--min-epochs", min_epochs);
    app->add_option("--batch-size", batch_size);
  }

  // File first, then --set, then the named flags.
  [[nodiscard]] RunConfig resolve() const {
    RunConfig cfg;
    if (!config_file.empty()) {
      KeyValues kv;
      try {
        kv = parse_key_values(read_text_file(config_file));
      } catch (const FormatError& e) {
        throw ConfigError(config_file + ": " + e.what());
      }
      for (const auto& [k, v] : kv) cfg.set(k, v);
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
      cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    if (geometry) cfg.set("geometry", *geometry);
    if (duration) cfg.duration_s = *duration;
    if (loss) cfg.set("loss", *loss);
    if (margin) cfg.loss.m = *margin;
    if (scale) cfg.loss.s = *scale;
    if (preset) cfg.net_preset = *preset;
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (lr) cfg.train.lr0 = *lr;
    if (max_epochs) cfg.train.max_epochs = *max_epochs;
    if (min_epochs) cfg.train.min_epochs = *min_epochs;
    if (batch_size) cfg.train.batch_size = *batch_size;
    cfg.validate();
    return cfg;
  }
};

void log_line(const std::string& s) { std::cerr << s << '\n'; }

int cmd_synth(const SynthSpec& spec, const fs::path& out) {
  const auto m = generate_synthetic(spec, out);
  std::cout << "wrote " << m.entries.size() << " utterances and " << (out / "manifest.tsv").string() << '\n';
  return 0;
}

int cmd_preprocess(const fs::path& manifest_file, const fs::path& cache, const RunConfig& cfg, unsigned threads) {
  const auto manifest = read_manifest(manifest_file);
  const auto s = preprocess(manifest, cfg, cache, log_line, threads);
  std::cout << "features: " << s.computed << " computed, " << s.reused << " fresh, " << s.skipped.size()
            << " skipped of " << s.total << '\n';
  if (s.skip_fraction() > kMaxSkipFraction) {
    log_line("error: more than 10% of utterances were skipped");
    return kExitIo;
  }
  return 0;
}

int cmd_train(const fs::path& manifest_file, const fs::path& cache_dir, const fs::path& run_dir, const RunConfig& cfg) {
  const auto manifest = read_manifest(manifest_file);
  const auto cache = FeatureCache::open(cache_dir, cfg);
  const auto run = train_run(manifest, cache, cfg, [](const EpochRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "epoch %3d  train_loss %.5f  val_loss %.5f  val_top1 %.4f  lr %g", r.epoch,
                  r.train_loss, r.val_loss, r.val_top1, r.lr);
    log_line(buf);
  });
  write_run(run_dir, run, cfg);
  std::cout << "best epoch " << run.checkpoint.meta("best_epoch") << "; wrote " << run_dir.string() << '\n';
  return 0;
}

fs::path checkpoint_path(const fs::path& p) { return fs::is_directory(p) ? p / "checkpoint.vpck" : p; }

int cmd_eval(const std::vector<std::string>& runs, const fs::path& manifest_file, const std::string& split_name,
             const fs::path& out, unsigned threads) {
  const auto manifest = read_manifest(manifest_file);
  const auto split = parse_split(split_name);
  std::vector<Report> rows;
  for (const auto& r : runs) {
    const auto ck_file = checkpoint_path(r);
    const auto ev = evaluate_checkpoint(load_checkpoint(ck_file), manifest, split, log_line, threads);
    write_text_file(ck_file.parent_path() / "confusion.tsv", format_confusion(ev));
    rows.push_back(ev.report);
  }
  const auto text = format_report(rows);
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text_file(out, text);
    std::cout << "wrote " << out.string() << '\n';
  }
  return 0;
}

int cmd_identify(const fs::path& checkpoint, const fs::path& wav) {
  const auto ck = load_checkpoint(checkpoint_path(checkpoint));
  const auto m = identify_clip(ck, read_wav(wav));
  std::cout << m.speaker_id << '\t' << format_real(m.score) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"voxprint: speaker identification from mel-spectrogram embeddings"};
  app.require_subcommand(1);

  SynthSpec spec;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate a synthetic speaker corpus and its manifest");
  synth->add_option("--speakers", spec.num_speakers)->required();
  synth->add_option("--utts", spec.utterances_per_speaker)->required();
  synth->add_option("--min-duration", spec.min_duration_s);
  synth->add_option("--max-duration", spec.max_duration_s);
  synth->add_option("--seed", spec.seed);
  synth->add_option("--out", synth_out)->required();

  unsigned threads = default_threads();
  std::string manifest_file, cache_dir, run_dir;
  ConfigFlags pre_flags, train_flags;
  auto* pre = app.add_subcommand("preprocess", "compute the feature cache for a manifest");
  pre->add_option("--manifest", manifest_file)->required();
  pre->add_option("--cache", cache_dir)->required();
  pre->add_option("--threads", threads);
  pre_flags.attach(pre);

  auto* tr = app.add_subcommand("train", "train a network from a feature cache");
  tr->add_option("--manifest", manifest_file)->required();
  tr->add_option("--cache", cache_dir)->required();
  tr->add_option("--run-dir", run_dir)->required();
  train_flags.attach(tr);

  std::vector<std::string> runs;
  std::string split_name = "test", report_out;
  auto* ev = app.add_subcommand("eval", "evaluate trained runs and write a report");
  ev->add_option("--run", runs, "run directory or checkpoint file, repeatable")->required();
  ev->add_option("--manifest", manifest_file)->required();
  ev->add_option("--split", split_name);
  ev->add_option("--out", report_out, "report file (default: stdout)");
  ev->add_option("--threads", threads);

  std::string checkpoint, wav;
  auto* id = app.add_subcommand("identify", "identify the speaker of one WAV file");
  id->add_option("--checkpoint", checkpoint, "run directory or checkpoint file")->required();
  id->add_option("--wav", wav)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*synth) return cmd_synth(spec, synth_out);
    if (*pre) return cmd_preprocess(manifest_file, cache_dir, pre_flags.resolve(), threads);
    if (*tr) return cmd_train(manifest_file, cache_dir, run_dir, train_flags.resolve());
    if (*ev) return cmd_eval(runs, manifest_file, split_name, report_out, threads);
    if (*id) return cmd_identify(checkpoint, wav);
  } catch (const SilentAudioError& e) {
    log_line(std::string("error: no voiced frames: ") + e.what());
    return kExitConfig;
  } catch (const IoError& e) {
    log_line(std::string("error: ") + e.what());
    return kExitIo;
  } catch (const FormatError& e) {
    log_line(std::string("error: unreadable file: ") + e.what());
    return kExitIo;
  } catch (const TrainingError& e) {
    log_line(std::string("error: training aborted: ") + e.what());
    return kExitIo;
  } catch (const Error& e) {
    log_line(std::string("error: ") + e.what());
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    log_line(std::string("error: ") + e.what());
    return kExitIo;
  }
  return kExitConfig;
}
