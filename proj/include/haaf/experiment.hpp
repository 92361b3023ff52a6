// SPDX-License-Identifier: Apache-2.0
//
// Multi-seed ablation runs and the paired-bag conditioning probe.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "haaf/data.hpp"
#include "haaf/metrics.hpp"
#include "haaf/models.hpp"
#include "haaf/training.hpp"

namespace haaf {

struct AblationConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<Variant> variants{Variant::feature_transformer, Variant::hyper_adag_no_tctp, Variant::hyper_adag};
  std::vector<int> rotations{0, 1, 2, 3, 4};
};

struct AblationRow {
  Variant variant{};
  std::uint64_t seed = 0;
  double f1 = 0;   // mean over rotations
  double auc = 0;  // mean over rotations
};

struct AblationSummary {
  Variant variant{};
  double f1_mean = 0, f1_std = 0, auc_mean = 0, auc_std = 0;
  std::size_t n = 0;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // variant-major, then seed
  std::vector<AblationSummary> summary;

  const AblationSummary& of(Variant v) const {
    for (auto& s : summary)
      if (s.variant == v) return s;
    throw std::out_of_range("variant not in ablation: " + std::string(variant_name(v)));
  }
};

/// For every seed: generate a dataset (gen.seed = seed), assign folds with
/// the same seed, and train each variant from init seed `seed` on identical
/// splits. All (seed, variant, rotation) jobs are independent.
inline AblationResult run_ablation(GenConfig gen, const ModelConfig& model_cfg, TrainConfig train_cfg,
                                   const AblationConfig& ab, std::size_t threads = thread_budget()) {
  struct Dataset {
    std::vector<Bag> bags;
    FoldAssignment folds;
  };
  std::vector<Dataset> data(ab.seeds.size());
  for (std::size_t s = 0; s < ab.seeds.size(); ++s) {
    gen.seed = ab.seeds[s];
    data[s].bags = generate_bags(gen);
    data[s].folds = make_folds(data[s].bags, ab.seeds[s]);
  }

  const std::size_t nv = ab.variants.size(), nr = ab.rotations.size();
  std::vector<Evaluation> evals(ab.seeds.size() * nv * nr);
  parallel_for(evals.size(), threads, [&](std::size_t job) {
    const std::size_t s = job / (nv * nr), v = (job / nr) % nv, r = job % nr;
    TrainConfig cfg = train_cfg;
    cfg.seed = ab.seeds[s];
    cfg.variant = ab.variants[v];
    auto split = split_rotation(data[s].bags, data[s].folds, ab.rotations[r]);
    auto model = MilModel::create(cfg.variant, model_cfg, cfg.seed);
    train_fold(model, split.train, split.val, cfg);
    evals[job] = evaluate(model, split.test);
  });

  AblationResult out;
  for (std::size_t v = 0; v < nv; ++v) {
    std::vector<double> f1s, aucs;
    for (std::size_t s = 0; s < ab.seeds.size(); ++s) {
      std::vector<double> f1, auc;
      for (std::size_t r = 0; r < nr; ++r) {
        const auto& ev = evals[(s * nv + v) * nr + r];
        f1.push_back(ev.f1);
        auc.push_back(ev.auc_or_nan());
      }
      AblationRow row{ab.variants[v], ab.seeds[s], mean(f1), mean(auc)};
      out.rows.push_back(row);
      f1s.push_back(row.f1);
      aucs.push_back(row.auc);
    }
    out.summary.push_back({ab.variants[v], mean(f1s), stddev(f1s), mean(aucs), stddev(aucs), f1s.size()});
  }
  return out;
}

// ---------------------------------------------------------------------------

struct ProbePair {
  std::string bag_id;
  double attention_l1 = 0;
  double logit_low = 0, logit_high = 0;
  std::vector<real> attention_low, attention_high;
};

/// Copies of `bag` whose tabular column `column` is set to `value`.
inline Bag with_condition(const Bag& bag, std::size_t column, real value, const std::string& suffix) {
  Bag b = bag;
  b.tabular.values.at(column) = value;
  b.bag_id += suffix;
  return b;
}

/// Runs each bag twice with identical instances and the condition column set
/// to `low` and `high`, and reports how attention and logit move.
inline std::vector<ProbePair> conditioning_probe(const MilModel& model, const std::vector<Bag>& bags,
                                                 std::size_t column = 0, real low = 0, real high = 1) {
  std::vector<ProbePair> out;
  for (auto& bag : bags) {
    auto a = model.predict(with_condition(bag, column, low, "#t0"));
    auto b = model.predict(with_condition(bag, column, high, "#t1"));
    ProbePair p;
    p.bag_id = bag.bag_id;
    p.logit_low = a.logit;
    p.logit_high = b.logit;
    for (std::size_t j = 0; j < a.attention.size() && j < b.attention.size(); ++j)
      p.attention_l1 += std::abs(double(a.attention[j]) - double(b.attention[j]));
    p.attention_low = std::move(a.attention);
    p.attention_high = std::move(b.attention);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace haaf
