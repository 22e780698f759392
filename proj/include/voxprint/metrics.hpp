#pragma once

#include <span>
#include <vector>

#include "voxprint/errors.hpp"
#include "voxprint/tensor.hpp"

namespace voxprint {

/// Row argmax; the lowest index wins ties.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& scores) {
  require(scores.rank() == 2, "scores must be [N,K]");
  std::vector<int> out(scores.dim(0));
  for (std::size_t n = 0; n < scores.dim(0); ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < scores.dim(1); ++k) {
      if (scores.at(n, k) > scores.at(n, best)) best = k;
    }
    out[n] = static_cast<int>(best);
  }
  return out;
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
template <typename T>
double top1_accuracy(const Tensor<T>& scores, std::span<const int> labels) {
  require(scores.rank() == 2, "scores must be [N,K]");
  if (labels.size() != scores.dim(0)) throw ShapeError("label count does not match score rows");
  const auto pred = argmax_rows(scores);
  std::size_t hits = 0;
  for (std::size_t n = 0; n < pred.size(); ++n) hits += pred[n] == labels[n] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace voxprint
