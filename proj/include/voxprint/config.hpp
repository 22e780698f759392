#pragma once

// Run configuration: flat key=value text, every field explicit so a snapshot
// re-parses to the identical value.

#include <cstdint>
#include <string>

#include "voxprint/audio_io.hpp"
#include "voxprint/errors.hpp"
#include "voxprint/features.hpp"
#include "voxprint/losses.hpp"
#include "voxprint/network.hpp"
#include "voxprint/text.hpp"
#include "voxprint/training.hpp"

namespace voxprint {

struct RunConfig {
  Geometry geometry = Geometry::square224();
  double duration_s = 10.0;
  std::string net_preset = "vgg16m";
  LossConfig loss;
  TrainConfig train;
  StftConfig stft;
  MelConfig mel;
  TrimPolicy trim;
  std::uint64_t seed = 0;

  friend bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.to_key_values() == b.to_key_values();
  }

  void validate() const {
    if (!geometry.is_standard()) {
      throw ConfigError("geometry must be one of 224x224, 448x448, 432x288; got " + geometry.to_string());
    }
    if (!(duration_s > 0.0) || !std::isfinite(duration_s)) throw ConfigError("duration_s must be positive");
    NetworkConfig::preset(net_preset, 2);
    loss.validate();
    train.validate();
    stft.validate(kCanonicalSampleRate);
    mel.validate(kCanonicalSampleRate);
    trim.validate();
  }

  /// Keys that determine the feature tensor of an utterance.
  [[nodiscard]] KeyValues feature_key_values() const {
    return {{"geometry", geometry.to_string()},
            {"duration_s", format_real(duration_s)},
            {"stft.window_ms", std::to_string(stft.window_ms)},
            {"stft.hop_ms", std::to_string(stft.hop_ms)},
            {"stft.fft_size", std::to_string(stft.fft_size)},
            {"mel.n_mels", std::to_string(mel.n_mels)},
            {"mel.f_min", format_real(mel.f_min)},
            {"mel.f_max", mel.f_max ? format_real(*mel.f_max) : "nyquist"},
            {"trim.frame_ms", std::to_string(trim.frame_ms)},
            {"trim.hop_ms", std::to_string(trim.hop_ms)},
            {"trim.threshold_db", format_real(trim.threshold_db)},
            {"trim.min_voiced_frames", std::to_string(trim.min_voiced_frames)}};
  }

  [[nodiscard]] KeyValues to_key_values() const {
    KeyValues kv = feature_key_values();
    kv.insert({{"net_preset", net_preset},
               {"loss", to_string(loss.family)},
               {"scale", format_real(loss.s)},
               {"margin", format_real(loss.m)},
               {"seed", std::to_string(seed)},
               {"lr0", format_real(train.lr0)},
               {"momentum", format_real(train.momentum)},
               {"weight_decay", format_real(train.weight_decay)},
               {"plateau_factor", format_real(train.plateau_factor)},
               {"plateau_patience", std::to_string(train.plateau_patience)},
               {"plateau_threshold", format_real(train.plateau_threshold)},
               {"early_stop_patience", std::to_string(train.early_stop_patience)},
               {"min_epochs", std::to_string(train.min_epochs)},
               {"max_epochs", std::to_string(train.max_epochs)},
               {"batch_size", std::to_string(train.batch_size)}});
    return kv;
  }

  /// Applies one key=value setting; unknown keys are rejected.
  void set(std::string_view key, std::string_view value) {
    auto as_int = [&] {
      try {
        return static_cast<int>(parse_int(value));
      } catch (const FormatError&) {
        throw ConfigError("'" + std::string(key) + "' expects an integer, got '" + std::string(value) + "'");
      }
    };
    auto as_real = [&] {
      try {
        return parse_real(value);
      } catch (const FormatError&) {
        throw ConfigError("'" + std::string(key) + "' expects a number, got '" + std::string(value) + "'");
      }
    };
    if (key == "geometry") geometry = Geometry::parse(value);
    else if (key == "duration_s") duration_s = as_real();
    else if (key == "net_preset") net_preset = value;
    else if (key == "loss") loss.family = parse_loss_family(value);
    else if (key == "scale") loss.s = as_real();
    else if (key == "margin") loss.m = as_real();
    else if (key == "seed") {
      try {
        seed = std::stoull(std::string(value));
      } catch (const std::exception&) {
        throw ConfigError("'seed' expects a non-negative integer, got '" + std::string(value) + "'");
      }
    }
    else if (key == "lr0") train.lr0 = as_real();
    else if (key == "momentum") train.momentum = as_real();
    else if (key == "weight_decay") train.weight_decay = as_real();
    else if (key == "plateau_factor") train.plateau_factor = as_real();
    else if (key == "plateau_patience") train.plateau_patience = as_int();
    else if (key == "plateau_threshold") train.plateau_threshold = as_real();
    else if (key == "early_stop_patience") train.early_stop_patience = as_int();
    else if (key == "min_epochs") train.min_epochs = as_int();
    else if (key == "max_epochs") train.max_epochs = as_int();
    else if (key == "batch_size") train.batch_size = as_int();
    else if (key == "stft.window_ms") stft.window_ms = as_int();
    else if (key == "stft.hop_ms") stft.hop_ms = as_int();
    else if (key == "stft.fft_size") stft.fft_size = as_int();
    else if (key == "mel.n_mels") mel.n_mels = as_int();
    else if (key == "mel.f_min") mel.f_min = as_real();
    else if (key == "mel.f_max") {
      if (value == "nyquist") mel.f_max.reset();
      else mel.f_max = as_real();
    }
    else if (key == "trim.frame_ms") trim.frame_ms = as_int();
    else if (key == "trim.hop_ms") trim.hop_ms = as_int();
    else if (key == "trim.threshold_db") trim.threshold_db = as_real();
    else if (key == "trim.min_voiced_frames") trim.min_voiced_frames = as_int();
    else throw ConfigError("unknown config key '" + std::string(key) + "'");
    train.seed = seed;
  }

  /// Defaults overridden by every key present.
  static RunConfig from_key_values(const KeyValues& kv) {
    RunConfig c;
    for (const auto& [k, v] : kv) c.set(k, v);
    c.validate();
    return c;
  }

  [[nodiscard]] std::string serialize() const { return format_key_values(to_key_values()); }

  static RunConfig parse(std::string_view text) {
    try {
      return from_key_values(parse_key_values(text));
    } catch (const FormatError& e) {
      throw ConfigError(e.what());
    }
  }

  [[nodiscard]] NetworkConfig network(int num_classes) const {
    NetworkConfig n = NetworkConfig::preset(net_preset, num_classes);
    n.head = head_for(loss.family);
    return n;
  }
};

}  // namespace voxprint
