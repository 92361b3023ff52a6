// SPDX-License-Identifier: Apache-2.0
//
// Adam, early stopping, the per-fold training loop and 5-fold
// cross-validation.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "haaf/data.hpp"
#include "haaf/metrics.hpp"
#include "haaf/models.hpp"
#include "haaf/params.hpp"

namespace haaf {

class TrainingError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  struct Moments {
    std::vector<real> m, v;
  };
  std::map<std::string, Moments> moments;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update on every trainable tensor. Throws, without
/// touching any parameter, if a trainable tensor has no gradient.
inline void adam_step(AdamState& state, ModelParams& params, const AdamConfig& cfg) {
  for (auto& [name, t] : params)
    if (t.requires_grad() && !t.has_grad()) throw TrainingError("adam_step: parameter " + name + " has no gradient");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (auto& [name, t] : params) {
    if (!t.requires_grad()) continue;
    auto& mo = state.moments[name];
    if (mo.m.size() != t.size()) {
      mo.m.assign(t.size(), real(0));
      mo.v.assign(t.size(), real(0));
    }
    auto w = t.mutable_values();
    auto g = t.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      mo.m[i] = real(cfg.beta1) * mo.m[i] + real(1 - cfg.beta1) * g[i];
      mo.v[i] = real(cfg.beta2) * mo.v[i] + real(1 - cfg.beta2) * g[i] * g[i];
      const double mhat = double(mo.m[i]) / c1;
      const double vhat = double(mo.v[i]) / c2;
      w[i] -= static_cast<real>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Early stopping

/// Tracks the best value of a metric (lower is better unless `maximize`).
/// should_stop() turns true exactly `patience` updates after the last
/// improvement. NaN never counts as an improvement.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience, bool maximize = false) : patience_(patience), maximize_(maximize) {
    if (patience < 1) throw std::invalid_argument("patience must be >= 1");
  }

  /// Returns true when `metric` improves on the best seen so far.
  bool update(double metric) {
    ++epoch_;
    const bool better = !std::isnan(metric) && (!best_ || (maximize_ ? metric > *best_ : metric < *best_));
    if (better) {
      best_ = metric;
      best_epoch_ = epoch_;
      since_ = 0;
    } else {
      ++since_;
    }
    return better;
  }

  bool should_stop() const { return since_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  std::optional<double> best() const { return best_; }
  int epoch() const { return epoch_; }

 private:
  int patience_;
  bool maximize_;
  std::optional<double> best_;
  int best_epoch_ = 0;
  int epoch_ = 0;
  int since_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

struct ScoredBag {
  std::string bag_id;
  int label = 0;
  double logit = 0;
  double probability = 0;
};

struct Evaluation {
  std::vector<ScoredBag> scores;
  double loss = 0;  // mean BCE
  double f1 = 0;
  std::optional<double> auc;
  std::string auc_error;
  Confusion confusion;
  double threshold = 0.5;

  double auc_or_nan() const { return auc.value_or(std::numeric_limits<double>::quiet_NaN()); }
};

inline Evaluation evaluate(const MilModel& model, const std::vector<Bag>& bags, double threshold = 0.5) {
  if (bags.empty()) throw TrainingError("evaluate: no bags");
  Evaluation ev;
  ev.threshold = threshold;
  std::vector<int> labels;
  std::vector<double> probs;
  double loss = 0;
  for (auto& b : bags) {
    auto p = model.predict(b);
    const double z = p.logit;
    loss += std::max(z, 0.0) - z * b.label + std::log1p(std::exp(-std::abs(z)));
    ev.scores.push_back({b.bag_id, b.label, z, p.probability});
    labels.push_back(b.label);
    probs.push_back(p.probability);
  }
  ev.loss = loss / double(bags.size());
  ev.confusion = confusion(labels, probs, threshold);
  ev.f1 = f1_from_confusion(ev.confusion);
  try {
    ev.auc = auc_score(labels, probs);
  } catch (const MetricError& e) {
    ev.auc_error = e.what();
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Training

enum class StopMetric { val_loss, val_auc };

struct TrainConfig {
  double lr = 1e-4;  // 3e-6 reproduces the pretrained-encoder setting
  std::size_t batch_size = 16;
  int patience = 50;
  int max_epochs = 0;  // 0 = until patience runs out
  std::uint64_t seed = 0;
  Variant variant = Variant::hyper_adag;
  StopMetric stop_metric = StopMetric::val_loss;

  void validate() const {
    if (!(lr > 0)) throw std::invalid_argument("train: lr must be > 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (patience < 1) throw std::invalid_argument("train: patience must be >= 1");
    if (max_epochs < 0) throw std::invalid_argument("train: max_epochs must be >= 0");
  }
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_auc = 0;  // NaN when undefined
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_metric = 0;
  double best_val_loss = 0;
  double best_val_auc = 0;
};

struct TrainHooks {
  /// Replaces the stopping metric (lower is better) for an epoch.
  std::function<double(const EpochLog&)> metric_override;
  std::function<void(const EpochLog&)> on_epoch;
};

inline void write_train_log(const std::vector<EpochLog>& log, std::ostream& os) {
  os << "epoch,train_loss,val_loss,val_auc\n";
  char buf[128];
  for (auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss, e.val_loss, e.val_auc);
    os << buf;
  }
}

/// Trains `model` in place and leaves it holding the best-epoch parameters.
inline TrainResult train_fold(MilModel& model, const std::vector<Bag>& train, const std::vector<Bag>& val,
                              const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train.empty() || val.empty()) throw TrainingError("train_fold: train and val sets must be non-empty");
  model.fit_normalizer(train);

  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  AdamState adam;
  auto rng = derived_rng(cfg.seed, "shuffle");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  const bool maximize = cfg.stop_metric == StopMetric::val_auc && !hooks.metric_override;
  EarlyStopper stopper(cfg.patience, maximize);
  ModelParams best = model.params().clone();
  TrainResult result;
  auto& params = model.params();

  for (int epoch = 1;; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t batch_idx = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_idx) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      params.zero_grad();
      std::vector<Tensor> logits;
      std::vector<real> labels;
      for (std::size_t i = start; i < end; ++i) {
        const Bag& bag = train[order[i]];
        logits.push_back(model.forward(bag).logit);
        labels.push_back(static_cast<real>(bag.label));
      }
      for (std::size_t i = 0; i < logits.size(); ++i) {
        const double z = logits[i].item();
        if (!std::isfinite(z))
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch_idx) + ", bag " + train[order[start + i]].bag_id);
      }
      Tensor loss = bce_with_logits(concat_lastdim(logits), labels);
      if (!std::isfinite(loss.item()))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_idx) + ", bag " + train[order[start]].bag_id);
      loss_sum += double(loss.item()) * double(end - start);
      loss.backward();
      adam_step(adam, params, adam_cfg);
    }
    params.zero_grad();

    EpochLog row;
    row.epoch = epoch;
    row.train_loss = loss_sum / double(train.size());
    auto ev = evaluate(model, val);
    row.val_loss = ev.loss;
    row.val_auc = ev.auc_or_nan();
    result.log.push_back(row);
    if (hooks.on_epoch) hooks.on_epoch(row);

    const double metric = hooks.metric_override ? hooks.metric_override(row)
                          : cfg.stop_metric == StopMetric::val_loss ? row.val_loss
                                                                    : row.val_auc;
    if (stopper.update(metric)) {
      best = params.clone();
      result.best_epoch = epoch;
      result.best_metric = metric;
      result.best_val_loss = row.val_loss;
      result.best_val_auc = row.val_auc;
    }
    if (stopper.should_stop() || (cfg.max_epochs > 0 && epoch >= cfg.max_epochs)) break;
  }
  params.copy_values_from(best);
  return result;
}

// ---------------------------------------------------------------------------
// Parallel helpers

/// Worker cap from HAAF_THREADS, else the hardware concurrency.
inline std::size_t thread_budget() {
  if (const char* env = std::getenv("HAAF_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs job(i) for i in [0, n) on up to `threads` workers; rethrows the
/// first failure after all workers finish.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= n || failure) return;
        i = next++;
      }
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Cross-validation

struct FoldResult {
  int rotation = 0;
  TrainResult training;
  Evaluation test;
};

struct EvalReport {
  std::vector<FoldResult> folds;
  double mean_f1 = 0;
  double mean_auc = 0;  // NaN if any fold AUC is undefined
};

inline void summarize(EvalReport& report) {
  std::vector<double> f1, auc;
  for (auto& f : report.folds) {
    f1.push_back(f.test.f1);
    auc.push_back(f.test.auc_or_nan());
  }
  report.mean_f1 = mean(f1);
  report.mean_auc = mean(auc);
}

/// Trains and tests one model per rotation (3 folds train, 1 val, 1 test).
inline EvalReport run_cross_validation(const std::vector<Bag>& bags, const FoldAssignment& folds,
                                       const ModelConfig& model_cfg, const TrainConfig& cfg,
                                       std::vector<int> rotations = {0, 1, 2, 3, 4},
                                       std::size_t threads = thread_budget()) {
  EvalReport report;
  report.folds.resize(rotations.size());
  parallel_for(rotations.size(), threads, [&](std::size_t i) {
    const int r = rotations[i];
    auto split = split_rotation(bags, folds, r);
    auto model = MilModel::create(cfg.variant, model_cfg, cfg.seed);
    FoldResult fr;
    fr.rotation = r;
    fr.training = train_fold(model, split.train, split.val, cfg);
    fr.test = evaluate(model, split.test);
    report.folds[i] = std::move(fr);
  });
  summarize(report);
  return report;
}

}  // namespace haaf
