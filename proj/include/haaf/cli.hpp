// SPDX-License-Identifier: Apache-2.0
//
// Subcommands of the `haaf` tool. Each command reads one JSON RunConfig,
// writes its outputs plus the resolved config into --out, and returns an
// exit code: 0 success, 1 runtime failure, 2 usage or config error.
#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "haaf/data.hpp"
#include "haaf/experiment.hpp"
#include "haaf/json_fields.hpp"
#include "haaf/models.hpp"
#include "haaf/training.hpp"

namespace haaf::cli {

using nlohmann::json;
namespace fs = std::filesystem;

enum class Split { train, val, test, all };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::all: return "all";
  }
  return "?";
}

struct RunConfig {
  std::string data_dir = "data";
  std::uint64_t seed = 0;
  GenConfig gen{};
  ModelConfig model{};
  TrainConfig train{};
  int fold = 0;
  std::string checkpoint;  // empty: <out>/checkpoint.bin
  Split split = Split::test;
  std::size_t threads = 0;  // 0: HAAF_THREADS or hardware concurrency
  AblationConfig ablate{};
  bool probe = false;  // export-attention: emit paired t=0/t=1 bags
};

// ---------------------------------------------------------------------------
// JSON <-> RunConfig

namespace detail {

template <class E>
E parse_enum(JsonFields& f, const std::string& key, E current, std::initializer_list<std::pair<const char*, E>> names) {
  std::string s;
  if (!f.opt(key, s)) return current;
  for (auto& [n, e] : names)
    if (s == n) return e;
  throw ConfigError(f.where(key) + ": unknown value '" + s + "'");
}

inline Variant parse_variant_key(JsonFields& f, const std::string& key, Variant current) {
  std::string s;
  if (!f.opt(key, s)) return current;
  try {
    return parse_variant(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(f.where(key) + ": " + e.what());
  }
}

inline void read_model(const json& j, ModelConfig& m) {
  JsonFields f(j, "model");
  f.opt("d", m.transformer.d);
  f.opt("heads", m.transformer.heads);
  f.opt("d_ff", m.transformer.d_ff);
  f.opt("blocks", m.transformer.blocks);
  m.encoder = parse_enum(f, "encoder", m.encoder, {{"mlp", EncoderKind::mlp}, {"conv2", EncoderKind::conv2}});
  f.opt("encoder_hidden", m.encoder_hidden);
  f.opt("conv_channels1", m.conv_channels1);
  f.opt("conv_channels2", m.conv_channels2);
  f.opt("attention_block", m.attention_block);
  f.opt("attention_hidden", m.attention_hidden);
  f.opt("table_hidden", m.table_hidden);
  f.opt("hyper_hidden", m.hyper_hidden);
  f.opt("hyper_head_variance", m.hyper_head_variance);
  f.opt("token_init_std", m.token_init_std);
  f.opt("encoder_offset_std", m.encoder_offset_std);
  f.finish();
}

inline void read_train(const json& j, TrainConfig& t) {
  JsonFields f(j, "train");
  f.opt("lr", t.lr);
  f.opt("batch_size", t.batch_size);
  f.opt("patience", t.patience);
  f.opt("max_epochs", t.max_epochs);
  t.variant = parse_variant_key(f, "variant", t.variant);
  t.stop_metric =
      parse_enum(f, "stop_metric", t.stop_metric, {{"val_loss", StopMetric::val_loss}, {"val_auc", StopMetric::val_auc}});
  f.finish();
}

inline void read_ablate(const json& j, AblationConfig& a) {
  JsonFields f(j, "ablate");
  f.opt("seeds", a.seeds);
  f.opt("rotations", a.rotations);
  std::vector<std::string> names;
  if (f.opt("variants", names)) {
    a.variants.clear();
    for (auto& n : names) {
      try {
        a.variants.push_back(parse_variant(n));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(f.where("variants") + ": " + e.what());
      }
    }
  }
  f.finish();
}

}  // namespace detail

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  JsonFields f(j, "");
  f.opt("data_dir", c.data_dir);
  f.opt("seed", c.seed);
  f.opt("fold", c.fold);
  f.opt("checkpoint", c.checkpoint);
  f.opt("threads", c.threads);
  f.opt("probe", c.probe);
  c.split = detail::parse_enum(f, "split", c.split,
                               {{"train", Split::train}, {"val", Split::val}, {"test", Split::test}, {"all", Split::all}});
  if (auto* g = f.sub("gen")) {
    if (g->contains("seed")) throw ConfigError("unknown config key: gen.seed (use the top-level seed)");
    c.gen = gen_config_from_json(*g, c.gen, "gen");
  }
  if (auto* m = f.sub("model")) detail::read_model(*m, c.model);
  if (auto* t = f.sub("train")) detail::read_train(*t, c.train);
  if (auto* a = f.sub("ablate")) detail::read_ablate(*a, c.ablate);
  f.finish();
  return c;
}

inline json run_config_to_json(const RunConfig& c) {
  const auto& m = c.model;
  json variants = json::array();
  for (auto v : c.ablate.variants) variants.push_back(std::string(variant_name(v)));
  json gen = gen_config_to_json(c.gen);
  gen.erase("seed");
  return {
      {"data_dir", c.data_dir},
      {"seed", c.seed},
      {"fold", c.fold},
      {"checkpoint", c.checkpoint},
      {"threads", c.threads},
      {"probe", c.probe},
      {"split", std::string(split_name(c.split))},
      {"gen", gen},
      {"model",
       {{"d", m.transformer.d},
        {"heads", m.transformer.heads},
        {"d_ff", m.transformer.d_ff},
        {"blocks", m.transformer.blocks},
        {"encoder", m.encoder == EncoderKind::mlp ? "mlp" : "conv2"},
        {"encoder_hidden", m.encoder_hidden},
        {"conv_channels1", m.conv_channels1},
        {"conv_channels2", m.conv_channels2},
        {"attention_block", m.attention_block},
        {"attention_hidden", m.attention_hidden},
        {"table_hidden", m.table_hidden},
        {"hyper_hidden", m.hyper_hidden},
        {"hyper_head_variance", m.hyper_head_variance},
        {"token_init_std", m.token_init_std},
        {"encoder_offset_std", m.encoder_offset_std}}},
      {"train",
       {{"lr", c.train.lr},
        {"batch_size", c.train.batch_size},
        {"patience", c.train.patience},
        {"max_epochs", c.train.max_epochs},
        {"variant", std::string(variant_name(c.train.variant))},
        {"stop_metric", c.train.stop_metric == StopMetric::val_loss ? "val_loss" : "val_auc"}}},
      {"ablate", {{"seeds", c.ablate.seeds}, {"rotations", c.ablate.rotations}, {"variants", variants}}},
  };
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Helpers shared by the commands

struct Context {
  RunConfig cfg;
  fs::path out;
  std::ostream* log = &std::cout;

  std::size_t threads() const { return cfg.threads ? cfg.threads : thread_budget(); }
  fs::path checkpoint_path() const { return cfg.checkpoint.empty() ? out / "checkpoint.bin" : fs::path(cfg.checkpoint); }
};

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot open " + p.string() + " for writing");
  return os;
}

inline void write_text(const fs::path& p, const std::string& text) { open_out(p) << text; }

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

/// Resolved config next to the outputs; timestamps go to run_info.json only.
inline void write_run_files(const Context& ctx, const std::string& command) {
  fs::create_directories(ctx.out);
  write_text(ctx.out / "config.json", run_config_to_json(ctx.cfg).dump(2) + "\n");
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  write_text(ctx.out / "run_info.json", json{{"command", command}, {"started_utc", stamp}}.dump(2) + "\n");
}

struct LoadedData {
  DatasetManifest manifest;
  std::vector<Bag> bags;
};

inline LoadedData load_data(const Context& ctx) {
  auto [m, bags] = load_dataset((fs::path(ctx.cfg.data_dir) / "manifest.json").string());
  return {std::move(m), std::move(bags)};
}

/// Model config with input sizes taken from the dataset.
inline ModelConfig model_for(const Context& ctx, const GenConfig& data) {
  ModelConfig m = ctx.cfg.model;
  m.patch_size = data.patch_size;
  m.k_tabular = data.k_tabular;
  return m;
}

inline void check_fold(int fold) {
  if (fold < 0 || fold >= kNumFolds) throw ConfigError("fold must be in 0.." + std::to_string(kNumFolds - 1));
}

inline std::vector<Bag> select_split(const LoadedData& d, int fold, Split s) {
  if (s == Split::all) return d.bags;
  auto sp = split_rotation(d.bags, d.manifest.folds, fold);
  return s == Split::train ? sp.train : s == Split::val ? sp.val : sp.test;
}

inline MilModel load_model(const Context& ctx, const ModelConfig& mc) {
  auto params = load_checkpoint(ctx.checkpoint_path().string());
  return MilModel(ctx.cfg.train.variant, mc, std::move(params));
}

inline void write_scores_csv(const fs::path& p, const std::vector<ScoredBag>& scores) {
  auto os = open_out(p);
  os << "bag_id,label,logit,probability\n";
  for (auto& s : scores) os << s.bag_id << ',' << s.label << ',' << fmt(s.logit) << ',' << fmt(s.probability) << '\n';
}

inline json evaluation_json(const Evaluation& ev) {
  return {{"n_bags", ev.scores.size()},
          {"loss", ev.loss},
          {"f1", ev.f1},
          {"auc", ev.auc ? json(*ev.auc) : json(nullptr)},
          {"auc_error", ev.auc_error},
          {"threshold", ev.threshold},
          {"confusion", {{"tp", ev.confusion.tp}, {"fp", ev.confusion.fp}, {"tn", ev.confusion.tn}, {"fn", ev.confusion.fn}}}};
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_gen(const Context& ctx) {
  GenConfig g = ctx.cfg.gen;
  g.seed = ctx.cfg.seed;
  write_run_files(ctx, "gen");
  generate_dataset(g, ctx.out.string());
  auto bags = read_bags((ctx.out / "bags.jsonl").string());
  std::size_t pos = 0;
  for (auto& b : bags) pos += b.label;
  char line[160];
  std::snprintf(line, sizeof line, "generated %zu bags: %zu positive, %zu negative (positive rate %.3f)\n", bags.size(),
                pos, bags.size() - pos, double(pos) / double(bags.size()));
  *ctx.log << line;
  return 0;
}

inline int cmd_train(const Context& ctx) {
  check_fold(ctx.cfg.fold);
  auto data = load_data(ctx);
  const auto mc = model_for(ctx, data.manifest.config);
  TrainConfig tc = ctx.cfg.train;
  tc.seed = ctx.cfg.seed;
  write_run_files(ctx, "train");
  auto split = split_rotation(data.bags, data.manifest.folds, ctx.cfg.fold);
  auto model = MilModel::create(tc.variant, mc, tc.seed);
  auto result = train_fold(model, split.train, split.val, tc);
  save_checkpoint(model.params(), ctx.checkpoint_path().string());
  {
    auto os = open_out(ctx.out / "train_log.csv");
    write_train_log(result.log, os);
  }
  json summary = {{"variant", std::string(variant_name(tc.variant))},
                  {"fold", ctx.cfg.fold},
                  {"epochs", result.log.size()},
                  {"best_epoch", result.best_epoch},
                  {"best_val_loss", result.best_val_loss},
                  {"best_val_auc", number_or_null(result.best_val_auc)},
                  {"n_train", split.train.size()},
                  {"n_val", split.val.size()},
                  {"n_test", split.test.size()}};
  write_text(ctx.out / "train_summary.json", summary.dump(2) + "\n");
  *ctx.log << variant_name(tc.variant) << " fold " << ctx.cfg.fold << ": " << result.log.size()
           << " epochs, best epoch " << result.best_epoch << ", val loss " << fmt(result.best_val_loss) << "\n";
  return 0;
}

inline int cmd_eval(const Context& ctx) {
  check_fold(ctx.cfg.fold);
  auto data = load_data(ctx);
  auto model = load_model(ctx, model_for(ctx, data.manifest.config));
  write_run_files(ctx, "eval");
  auto bags = select_split(data, ctx.cfg.fold, ctx.cfg.split);
  auto ev = evaluate(model, bags);
  json j = evaluation_json(ev);
  j["variant"] = std::string(variant_name(model.variant()));
  j["fold"] = ctx.cfg.fold;
  j["split"] = std::string(split_name(ctx.cfg.split));
  write_text(ctx.out / "metrics.json", j.dump(2) + "\n");
  {
    auto os = open_out(ctx.out / "metrics.csv");
    os << "variant,fold,split,n_bags,loss,f1,auc\n"
       << variant_name(model.variant()) << ',' << ctx.cfg.fold << ',' << split_name(ctx.cfg.split) << ','
       << ev.scores.size() << ',' << fmt(ev.loss) << ',' << fmt(ev.f1) << ',' << fmt(ev.auc_or_nan()) << '\n';
  }
  write_scores_csv(ctx.out / "scores.csv", ev.scores);
  *ctx.log << variant_name(model.variant()) << " " << split_name(ctx.cfg.split) << ": f1 " << fmt(ev.f1);
  if (ev.auc)
    *ctx.log << ", auc " << fmt(*ev.auc) << "\n";
  else
    *ctx.log << ", auc unavailable (" << ev.auc_error << ")\n";
  return 0;
}

inline int cmd_cv(const Context& ctx) {
  auto data = load_data(ctx);
  const auto mc = model_for(ctx, data.manifest.config);
  TrainConfig tc = ctx.cfg.train;
  tc.seed = ctx.cfg.seed;
  write_run_files(ctx, "cv");
  auto report = run_cross_validation(data.bags, data.manifest.folds, mc, tc, {0, 1, 2, 3, 4}, ctx.threads());
  auto os = open_out(ctx.out / "cv_folds.csv");
  os << "rotation,epochs,best_epoch,best_val_loss,test_loss,test_f1,test_auc\n";
  std::vector<ScoredBag> all_scores;
  for (auto& f : report.folds) {
    os << f.rotation << ',' << f.training.log.size() << ',' << f.training.best_epoch << ','
       << fmt(f.training.best_val_loss) << ',' << fmt(f.test.loss) << ',' << fmt(f.test.f1) << ','
       << fmt(f.test.auc_or_nan()) << '\n';
    all_scores.insert(all_scores.end(), f.test.scores.begin(), f.test.scores.end());
  }
  write_scores_csv(ctx.out / "scores.csv", all_scores);
  json j = {{"variant", std::string(variant_name(tc.variant))},
            {"mean_f1", report.mean_f1},
            {"mean_auc", number_or_null(report.mean_auc)}};
  write_text(ctx.out / "cv_report.json", j.dump(2) + "\n");
  *ctx.log << variant_name(tc.variant) << " 5-fold: mean f1 " << fmt(report.mean_f1) << ", mean auc "
           << fmt(report.mean_auc) << "\n";
  return 0;
}

inline int cmd_ablate(const Context& ctx) {
  if (ctx.cfg.ablate.seeds.empty() || ctx.cfg.ablate.variants.empty() || ctx.cfg.ablate.rotations.empty())
    throw ConfigError("ablate: seeds, variants and rotations must be non-empty");
  for (int r : ctx.cfg.ablate.rotations) check_fold(r);
  ModelConfig mc = ctx.cfg.model;
  mc.patch_size = ctx.cfg.gen.patch_size;
  mc.k_tabular = ctx.cfg.gen.k_tabular;
  write_run_files(ctx, "ablate");
  auto res = run_ablation(ctx.cfg.gen, mc, ctx.cfg.train, ctx.cfg.ablate, ctx.threads());
  {
    auto os = open_out(ctx.out / "ablation.csv");
    os << "variant,seed,f1,auc\n";
    for (auto& r : res.rows) os << variant_name(r.variant) << ',' << r.seed << ',' << fmt(r.f1) << ',' << fmt(r.auc) << '\n';
  }
  auto os = open_out(ctx.out / "ablation_summary.csv");
  os << "variant,n_seeds,f1_mean,f1_std,auc_mean,auc_std\n";
  for (auto& s : res.summary) {
    os << variant_name(s.variant) << ',' << s.n << ',' << fmt(s.f1_mean) << ',' << fmt(s.f1_std) << ','
       << fmt(s.auc_mean) << ',' << fmt(s.auc_std) << '\n';
    char line[200];
    std::snprintf(line, sizeof line, "%-22s F1 %.3f ± %.3f   AUC %.3f ± %.3f\n", std::string(variant_name(s.variant)).c_str(),
                  s.f1_mean, s.f1_std, s.auc_mean, s.auc_std);
    *ctx.log << line;
  }
  return 0;
}

inline int cmd_export_attention(const Context& ctx) {
  check_fold(ctx.cfg.fold);
  auto data = load_data(ctx);
  auto model = load_model(ctx, model_for(ctx, data.manifest.config));
  write_run_files(ctx, "export-attention");
  auto bags = select_split(data, ctx.cfg.fold, ctx.cfg.split);
  if (ctx.cfg.probe) {
    std::vector<Bag> paired;
    for (auto& b : bags) {
      paired.push_back(with_condition(b, 0, 0, "#t0"));
      paired.push_back(with_condition(b, 0, 1, "#t1"));
    }
    auto probe = conditioning_probe(model, bags);
    auto os = open_out(ctx.out / "probe.csv");
    os << "bag_id,attention_l1,logit_t0,logit_t1\n";
    for (auto& p : probe)
      os << p.bag_id << ',' << fmt(p.attention_l1) << ',' << fmt(p.logit_low) << ',' << fmt(p.logit_high) << '\n';
    bags = std::move(paired);
  }
  auto os = open_out(ctx.out / "attention.csv");
  os << "bag_id,instance_index,attention,logit,probability,label,v_norm,w_norm,b\n";
  for (auto& b : bags) {
    auto p = model.predict(b);
    if (p.attention.empty())
      throw ConfigError("variant " + std::string(variant_name(model.variant())) + " has no attention to export");
    const std::string v = p.tctp ? fmt(p.tctp->v_norm) : "", w = p.tctp ? fmt(p.tctp->w_norm) : "",
                      bias = p.tctp ? fmt(p.tctp->b) : "";
    for (std::size_t j = 0; j < p.attention.size(); ++j)
      os << b.bag_id << ',' << j << ',' << fmt(p.attention[j]) << ',' << fmt(p.logit) << ',' << fmt(p.probability) << ','
         << b.label << ',' << v << ',' << w << ',' << bias << '\n';
  }
  *ctx.log << "exported attention for " << bags.size() << " bags\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses argv, runs the subcommand and maps failures to exit codes.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Hypernetwork-conditioned adaptive-aggregation transformer for multimodal MIL"};
  app.require_subcommand(1);
  std::string config_path, out_dir = ".", variant;
  std::optional<std::uint64_t> seed;
  std::optional<int> fold;
  app.add_option("--config", config_path, "RunConfig JSON file");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--variant", variant, "model variant");
  app.add_option("--seed", seed, "seed (overrides the config)");
  app.add_option("--fold", fold, "fold rotation 0-4");
  const std::vector<std::pair<std::string, int (*)(const Context&)>> commands = {
      {"gen", cmd_gen},     {"train", cmd_train},   {"eval", cmd_eval},
      {"cv", cmd_cv},       {"ablate", cmd_ablate}, {"export-attention", cmd_export_attention}};
  const std::map<std::string, std::string> help = {
      {"gen", "generate a synthetic dataset and folds"},
      {"train", "train one variant on one fold"},
      {"eval", "evaluate a checkpoint"},
      {"cv", "5-fold cross-validation"},
      {"ablate", "multi-seed ablation of the three transformer variants"},
      {"export-attention", "per-instance attention and TCTP norms as CSV"}};
  for (auto& [name, fn] : commands) app.add_subcommand(name, help.at(name))->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  Context ctx;
  ctx.out = out_dir;
  ctx.log = &out;
  try {
    if (!config_path.empty()) ctx.cfg = load_run_config(config_path);
    if (seed) ctx.cfg.seed = *seed;
    if (fold) ctx.cfg.fold = *fold;
    if (!variant.empty()) {
      try {
        ctx.cfg.train.variant = parse_variant(variant);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    ctx.cfg.gen.seed = ctx.cfg.seed;
    try {
      ctx.cfg.gen.validate();
      ctx.cfg.train.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  }

  for (auto& [name, fn] : commands) {
    if (!app.got_subcommand(name)) continue;
    try {
      return fn(ctx);
    } catch (const ConfigError& e) {
      err << "config error: " << e.what() << "\n";
      return 2;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return 1;
    }
  }
  return 2;
}

}  // namespace haaf::cli
