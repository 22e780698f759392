#pragma once

// Closed-set identification: classifier top-1, centroid cosine matching and
// embedding-geometry diagnostics, plus the tab-separated report format.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "voxprint/errors.hpp"
#include "voxprint/features.hpp"
#include "voxprint/losses.hpp"
#include "voxprint/metrics.hpp"
#include "voxprint/network.hpp"
#include "voxprint/tensor.hpp"
#include "voxprint/text.hpp"

namespace voxprint {

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("vector dimensions differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline std::vector<double> unit(std::span<const double> v) {
  const double n = std::sqrt(dot(v, v));
  if (!(n > 0.0) || !std::isfinite(n)) throw DegenerateError("cannot normalize a zero or non-finite vector");
  std::vector<double> out(v.begin(), v.end());
  for (auto& x : out) x /= n;
  return out;
}

template <typename T>
std::vector<double> row_of(const Tensor<T>& m, std::size_t r) {
  std::vector<double> out(m.dim(1));
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = static_cast<double>(m.at(r, c));
  return out;
}

struct Match {
  std::string speaker_id;
  double score = 0.0;
};

/// Speaker centroids (unit norm), kept sorted by speaker id.
class EnrollmentDB {
 public:
  EnrollmentDB() = default;

  /// Centroid of each speaker = renormalized mean of its embeddings.
  static EnrollmentDB from_embeddings(const std::map<std::string, std::vector<std::vector<double>>>& groups) {
    EnrollmentDB db;
    for (const auto& [id, embs] : groups) {
      if (embs.empty()) throw DegenerateError("speaker '" + id + "' has no embeddings to enroll");
      std::vector<double> mean(embs.front().size(), 0.0);
      for (const auto& e : embs) {
        if (e.size() != mean.size()) throw ShapeError("embedding dimensions differ within speaker '" + id + "'");
        for (std::size_t i = 0; i < e.size(); ++i) mean[i] += e[i];
      }
      db.add(id, mean);
    }
    db.validate();
    return db;
  }

  /// Adds (or replaces) a speaker; the vector is renormalized.
  void add(const std::string& speaker_id, std::span<const double> centroid) {
    auto u = unit(centroid);
    if (!entries_.empty() && entries_.front().second.size() != u.size()) {
      throw ShapeError("centroid dimension does not match the database");
    }
    auto it = std::lower_bound(entries_.begin(), entries_.end(), speaker_id,
                               [](const auto& e, const std::string& id) { return e.first < id; });
    if (it != entries_.end() && it->first == speaker_id) {
      it->second = std::move(u);
    } else {
      entries_.emplace(it, speaker_id, std::move(u));
    }
  }

  void validate() const {
    if (entries_.size() < 2) throw StateError("enrollment database needs at least 2 speakers");
  }

  [[nodiscard]] bool empty() const { return entries_.empty(); }
  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] std::size_t dim() const { return entries_.empty() ? 0 : entries_.front().second.size(); }
  [[nodiscard]] const std::vector<std::pair<std::string, std::vector<double>>>& entries() const { return entries_; }

  [[nodiscard]] const std::vector<double>& centroid(std::string_view id) const {
    for (const auto& [k, v] : entries_) {
      if (k == id) return v;
    }
    throw ArgumentError("speaker '" + std::string(id) + "' is not enrolled");
  }

  /// Centroids as a [speakers, D] float tensor in id order (for checkpoints).
  [[nodiscard]] Tensor<float> to_tensor() const {
    if (entries_.empty()) throw StateError("enrollment database is empty");
    Tensor<float> t({entries_.size(), dim()});
    for (std::size_t r = 0; r < entries_.size(); ++r) {
      for (std::size_t c = 0; c < dim(); ++c) t.at(r, c) = static_cast<float>(entries_[r].second[c]);
    }
    return t;
  }

  static EnrollmentDB from_tensor(const std::vector<std::string>& ids, const Tensor<float>& t) {
    if (t.rank() != 2 || t.dim(0) != ids.size()) throw FormatError("centroid tensor does not match speaker list");
    EnrollmentDB db;
    for (std::size_t r = 0; r < ids.size(); ++r) db.add(ids[r], row_of(t, r));
    return db;
  }

 private:
  std::vector<std::pair<std::string, std::vector<double>>> entries_;
};

/// Highest dot product against the centroids; the probe is renormalized
/// first. Ties go to the lexicographically smaller id.
inline Match identify_cosine(const EnrollmentDB& db, std::span<const double> probe) {
  if (db.empty()) throw StateError("enrollment database is empty");
  const auto u = unit(probe);
  Match best;
  bool first = true;
  for (const auto& [id, c] : db.entries()) {
    const double s = dot(u, c);
    if (first || s > best.score) {
      best = {id, s};
      first = false;
    }
  }
  return best;
}

struct EmbeddingGeometry {
  double intra_cos = 0.0;
  double inter_cos = 0.0;
};

/// Mean pairwise cosine within speakers and across speakers.
inline EmbeddingGeometry embedding_geometry(const std::map<std::string, std::vector<std::vector<double>>>& groups) {
  if (groups.size() < 2) throw DegenerateError("embedding geometry needs at least 2 speakers");
  std::vector<std::pair<std::size_t, std::vector<double>>> all;
  std::size_t g = 0;
  for (const auto& [id, embs] : groups) {
    for (const auto& e : embs) all.emplace_back(g, unit(e));
    ++g;
  }
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t j = i + 1; j < all.size(); ++j) {
      const double c = dot(all[i].second, all[j].second);
      if (all[i].first == all[j].first) {
        intra += c;
        ++n_intra;
      } else {
        inter += c;
        ++n_inter;
      }
    }
  }
  if (n_intra == 0) throw DegenerateError("embedding geometry needs a speaker with at least 2 embeddings");
  if (n_inter == 0) throw DegenerateError("embedding geometry needs embeddings from 2 speakers");
  return {intra / static_cast<double>(n_intra), inter / static_cast<double>(n_inter)};
}

// ---------------------------------------------------------------------------
// Evaluation

struct Report {
  std::string loss;
  std::string geometry;
  double duration_s = 0.0;
  double top1_classifier = 0.0;
  double top1_cosine = 0.0;
  double intra_cos = 0.0;
  double inter_cos = 0.0;

  friend bool operator==(const Report&, const Report&) = default;
};

struct Evaluation {
  Report report;
  std::vector<std::string> speakers;           // class order
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted], classifier head
};

/// Scores test embeddings with the classifier head and against the
/// enrollment centroids. `speaker_ids` names the true speaker of each row.
template <typename T>
Evaluation evaluate_embeddings(const Network<T>& net, const std::vector<std::string>& speakers,
                               const Tensor<T>& embeddings, const std::vector<std::string>& speaker_ids,
                               const EnrollmentDB& db, const LossConfig& loss_cfg, double duration_s) {
  if (speaker_ids.empty()) throw ConfigError("test split is empty");
  if (embeddings.rank() != 2 || embeddings.dim(0) != speaker_ids.size()) {
    throw ShapeError("embedding rows do not match test utterances");
  }
  if (speakers.size() != static_cast<std::size_t>(net.config().num_classes)) {
    throw FormatError("speaker list does not match the classifier head");
  }
  std::vector<int> labels(speaker_ids.size());
  for (std::size_t i = 0; i < speaker_ids.size(); ++i) {
    const auto it = std::find(speakers.begin(), speakers.end(), speaker_ids[i]);
    if (it == speakers.end()) {
      throw ClosedSetError("speaker '" + speaker_ids[i] + "' was not seen in training (closed-set identification)");
    }
    labels[i] = static_cast<int>(it - speakers.begin());
  }

  LossConfig cfg = loss_cfg;
  cfg.num_classes = net.config().num_classes;
  const auto scored = loss_forward_backward(cfg, embeddings, net.head_weight(), net.head_bias(), labels);
  const auto pred = argmax_rows(scored.scores);

  Evaluation ev;
  ev.speakers = speakers;
  ev.confusion.assign(speakers.size(), std::vector<std::size_t>(speakers.size(), 0));
  std::size_t cos_hits = 0;
  std::map<std::string, std::vector<std::vector<double>>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++ev.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(pred[i])];
    auto e = row_of(embeddings, i);
    if (identify_cosine(db, e).speaker_id == speaker_ids[i]) ++cos_hits;
    groups[speaker_ids[i]].push_back(std::move(e));
  }

  ev.report.loss = to_string(loss_cfg.family);
  ev.report.duration_s = duration_s;
  ev.report.top1_classifier = top1_accuracy(scored.scores, labels);
  ev.report.top1_cosine = static_cast<double>(cos_hits) / static_cast<double>(labels.size());
  const auto geo = embedding_geometry(groups);
  ev.report.intra_cos = geo.intra_cos;
  ev.report.inter_cos = geo.inter_cos;
  return ev;
}

// ---------------------------------------------------------------------------
// Report files

inline constexpr std::string_view kReportHeader =
    "loss\tgeometry\tduration_s\ttop1_classifier\ttop1_cosine\tintra_cos\tinter_cos";

inline std::string format_report_row(const Report& r) {
  return r.loss + '\t' + r.geometry + '\t' + format_real(r.duration_s) + '\t' + format_real(r.top1_classifier) + '\t' +
         format_real(r.top1_cosine) + '\t' + format_real(r.intra_cos) + '\t' + format_real(r.inter_cos);
}

inline std::string format_report(std::span<const Report> rows) {
  std::string out(kReportHeader);
  out += '\n';
  for (const auto& r : rows) out += format_report_row(r) + '\n';
  return out;
}

inline std::vector<Report> parse_report(std::string_view text) {
  const auto rows = lines(text);
  if (rows.empty() || rows.front() != kReportHeader) throw FormatError("report lacks its header");
  std::vector<Report> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = split(rows[i], '\t');
    if (f.size() != 7) throw FormatError("report row needs 7 fields");
    parse_loss_family(f[0]);
    Geometry::parse(f[1]);
    out.push_back({std::string(f[0]), std::string(f[1]), parse_real(f[2]), parse_real(f[3]), parse_real(f[4]), parse_real(f[5]), parse_real(f[6])});
  }
  return out;
}

/// Confusion counts as "true_speaker\tpredicted_speaker\tcount", zeros omitted.
inline std::string format_confusion(const Evaluation& ev) {
  std::string out = "true_speaker\tpredicted_speaker\tcount\n";
  for (std::size_t t = 0; t < ev.speakers.size(); ++t) {
    for (std::size_t p = 0; p < ev.speakers.size(); ++p) {
      if (ev.confusion[t][p] == 0) continue;
      out += ev.speakers[t] + '\t' + ev.speakers[p] + '\t' + std::to_string(ev.confusion[t][p]) + '\n';
    }
  }
  return out;
}

}  // namespace voxprint
