// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "haaf/tensor.hpp"

namespace haaf {

class MetricError : public Error {
 public:
  using Error::Error;
};

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
};

namespace detail {
inline void check_metric_inputs(const char* what, std::span<const int> labels, std::span<const double> scores) {
  if (labels.empty()) throw MetricError(std::string(what) + ": empty input");
  if (labels.size() != scores.size())
    throw MetricError(std::string(what) + ": " + std::to_string(labels.size()) + " labels vs " +
                      std::to_string(scores.size()) + " scores");
  for (int y : labels)
    if (y != 0 && y != 1) throw MetricError(std::string(what) + ": labels must be 0 or 1");
}
}  // namespace detail

/// A probability equal to the threshold counts as positive.
inline Confusion confusion(std::span<const int> labels, std::span<const double> probs, double threshold = 0.5) {
  detail::check_metric_inputs("confusion", labels, probs);
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = probs[i] >= threshold;
    if (pred && labels[i]) ++c.tp;
    else if (pred) ++c.fp;
    else if (labels[i]) ++c.fn;
    else ++c.tn;
  }
  return c;
}

inline double f1_from_confusion(const Confusion& c) {
  const double p = c.tp + c.fp ? double(c.tp) / double(c.tp + c.fp) : 0.0;
  const double r = c.tp + c.fn ? double(c.tp) / double(c.tp + c.fn) : 0.0;
  return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

inline double f1_score(std::span<const int> labels, std::span<const double> probs, double threshold = 0.5) {
  return f1_from_confusion(confusion(labels, probs, threshold));
}

/// Mann-Whitney AUC: P(score(pos) > score(neg)) with ties counted 1/2,
/// computed from mid-ranks in O(n log n).
inline double auc_score(std::span<const int> labels, std::span<const double> scores) {
  detail::check_metric_inputs("auc_score", labels, scores);
  const std::size_t n = labels.size();
  const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw MetricError("AUC undefined: only one class present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of (1-based) mid-ranks of positives; every value is a multiple of 1/2.
  double rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * double(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum += mid;
    i = j;
  }
  const double wins = rank_sum - 0.5 * double(n_pos) * double(n_pos + 1);
  return wins / (double(n_pos) * double(n_neg));
}

inline double mean(std::span<const double> v) {
  if (v.empty()) return std::nan("");
  return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

/// Sample standard deviation (n-1); 0 for a single value.
inline double stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double mu = mean(v);
  double s = 0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / double(v.size() - 1));
}

}  // namespace haaf
