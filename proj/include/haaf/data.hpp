// SPDX-License-Identifier: Apache-2.0
//
// Bags, the synthetic condition-dependent benchmark, JSONL bag files,
// dataset manifests and stratified 5-fold assignment.
//
// Synthetic rule: every bag carries a condition value t in [0,1] (tabular
// column 0). Some instances contain a square blob whose intensity and side
// length grow with a severity s in [0,1]. The bag is positive iff some
// instance has s >= 0.2 + 0.6 t, so the instances that matter depend on the
// tabular vector.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "haaf/hypernet.hpp"
#include "haaf/json_fields.hpp"
#include "haaf/params.hpp"

namespace haaf {

class DataError : public Error {
 public:
  using Error::Error;
};

struct Bag {
  std::string bag_id;
  std::size_t instance_len = 0;  // P*P
  std::vector<real> pixels;      // |bag| * instance_len, row-major
  TabularVector tabular;
  int label = 0;
  std::vector<real> severities;  // audit metadata; models never read it

  std::size_t size() const { return instance_len == 0 ? 0 : pixels.size() / instance_len; }
  std::span<const real> instance(std::size_t j) const {
    return std::span<const real>(pixels).subspan(j * instance_len, instance_len);
  }

  void validate() const {
    if (instance_len == 0 || pixels.empty()) throw DataError("bag " + bag_id + ": empty instance list");
    if (pixels.size() % instance_len != 0) throw DataError("bag " + bag_id + ": inconsistent instance lengths");
    if (label != 0 && label != 1) throw DataError("bag " + bag_id + ": label must be 0 or 1");
    for (real v : tabular.values)
      if (!std::isfinite(v)) throw DataError("bag " + bag_id + ": non-finite tabular value");
  }

  friend bool operator==(const Bag& a, const Bag& b) {
    return a.bag_id == b.bag_id && a.instance_len == b.instance_len && a.pixels == b.pixels &&
           a.tabular.values == b.tabular.values && a.label == b.label && a.severities == b.severities;
  }
};

// ---------------------------------------------------------------------------
// Synthetic generator

struct GenConfig {
  std::size_t n_bags = 200;
  std::size_t bag_size_min = 5;
  std::size_t bag_size_max = 40;
  std::size_t patch_size = 8;
  std::size_t k_tabular = 20;
  double severity_noise = 0.0;  // label flip probability
  std::size_t distractor_dims = 3;
  double label_balance = 0.5;
  std::uint64_t seed = 0;
  double pixel_noise = 0.05;
  double blob_bag_rate = 1.0;   // fraction of bags with at least one blob
  std::size_t max_blobs = 3;
  double severity_min = 0.2;    // range of the most severe blob in a bag
  double severity_max = 0.8;

  /// Wide bag-size range, 9 to 635 instances.
  static GenConfig full_scale() {
    GenConfig c;
    c.bag_size_min = 9;
    c.bag_size_max = 635;
    return c;
  }

  void validate() const {
    if (n_bags == 0) throw std::invalid_argument("gen: n_bags must be positive");
    if (bag_size_min == 0 || bag_size_min > bag_size_max)
      throw std::invalid_argument("gen: need 1 <= bag_size_min <= bag_size_max");
    if (patch_size < 4) throw std::invalid_argument("gen: patch_size must be >= 4");
    if (k_tabular < 1 + distractor_dims) throw std::invalid_argument("gen: k_tabular must be >= 1 + distractor_dims");
    if (!(label_balance > 0 && label_balance < 1)) throw std::invalid_argument("gen: label_balance must be in (0,1)");
    if (severity_noise < 0 || severity_noise > 1) throw std::invalid_argument("gen: severity_noise must be in [0,1]");
    if (max_blobs == 0) throw std::invalid_argument("gen: max_blobs must be positive");
    if (!(severity_min > 0 && severity_min <= severity_max && severity_max <= 1))
      throw std::invalid_argument("gen: need 0 < severity_min <= severity_max <= 1");
    if (blob_bag_rate < 0 || blob_bag_rate > 1) throw std::invalid_argument("gen: blob_bag_rate must be in [0,1]");
  }
};

/// Severity cutoff for condition value t.
inline real condition_threshold(real t) { return real(0.2) + real(0.6) * t; }

/// Noise-free label rule.
inline int condition_label(std::span<const real> severities, real t) {
  const real g = condition_threshold(t);
  for (real s : severities)
    if (s > 0 && s >= g) return 1;
  return 0;
}

namespace detail {

inline real quantize(double v) { return static_cast<real>(std::round(v * 1e4) / 1e4); }

inline Bag generate_candidate(const GenConfig& cfg, std::uint64_t candidate) {
  auto rng = derived_rng(cfg.seed, "bag/" + std::to_string(candidate));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, cfg.pixel_noise);
  const std::size_t P = cfg.patch_size;

  Bag bag;
  bag.instance_len = P * P;
  const std::size_t m = std::uniform_int_distribution<std::size_t>(cfg.bag_size_min, cfg.bag_size_max)(rng);
  bag.pixels.resize(m * P * P);
  for (auto& v : bag.pixels) v = quantize(noise(rng));
  bag.severities.assign(m, real(0));

  const real t = quantize(unit(rng));
  bag.tabular.values.assign(cfg.k_tabular, real(0));
  bag.tabular.values[0] = t;
  for (std::size_t i = 1; i <= cfg.distractor_dims; ++i)
    bag.tabular.values[i] = i % 2 ? quantize(std::normal_distribution<double>(0.0, 1.0)(rng))
                                  : static_cast<real>(unit(rng) < 0.5 ? 0 : 1);

  if (unit(rng) < cfg.blob_bag_rate) {
    const std::size_t n_blobs = std::uniform_int_distribution<std::size_t>(1, std::min(cfg.max_blobs, m))(rng);
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    // The most severe blob is uniform on [severity_min, severity_max]; the
    // others lie below it.
    const double top = std::round((cfg.severity_min + unit(rng) * (cfg.severity_max - cfg.severity_min)) * 1e4) / 1e4;
    for (std::size_t b = 0; b < n_blobs; ++b) {
      const double s = b == 0 ? top : std::max(0.01, std::round(unit(rng) * top * 1e4) / 1e4);
      const std::size_t j = idx[b];
      bag.severities[j] = static_cast<real>(s);
      const std::size_t side = 2 + static_cast<std::size_t>(std::lround(s * static_cast<double>(P / 4)));
      const double intensity = 0.5 + 1.5 * s;
      const std::size_t r0 = std::uniform_int_distribution<std::size_t>(0, P - side)(rng);
      const std::size_t c0 = std::uniform_int_distribution<std::size_t>(0, P - side)(rng);
      real* px = bag.pixels.data() + j * P * P;
      for (std::size_t r = r0; r < r0 + side; ++r)
        for (std::size_t c = c0; c < c0 + side; ++c) px[r * P + c] = quantize(px[r * P + c] + intensity);
    }
  }

  bag.label = condition_label(bag.severities, t);
  if (cfg.severity_noise > 0 && unit(rng) < cfg.severity_noise) bag.label = 1 - bag.label;
  return bag;
}

}  // namespace detail

/// Draws candidate bags (each from its own derived stream) and keeps them
/// until both class quotas are filled, so the positive rate equals
/// round(label_balance * n_bags) / n_bags.
inline std::vector<Bag> generate_bags(const GenConfig& cfg) {
  cfg.validate();
  const std::size_t want_pos = static_cast<std::size_t>(std::llround(cfg.label_balance * double(cfg.n_bags)));
  const std::size_t want_neg = cfg.n_bags - want_pos;
  const std::uint64_t max_candidates = 100 * static_cast<std::uint64_t>(cfg.n_bags) + 1000;
  std::vector<Bag> out;
  out.reserve(cfg.n_bags);
  std::size_t pos = 0, neg = 0;
  for (std::uint64_t c = 0; out.size() < cfg.n_bags; ++c) {
    if (c >= max_candidates)
      throw DataError("generate_dataset: could not reach label balance " + std::to_string(cfg.label_balance) +
                      " after " + std::to_string(max_candidates) + " candidate bags");
    Bag bag = detail::generate_candidate(cfg, c);
    if (bag.label == 1 ? pos >= want_pos : neg >= want_neg) continue;
    (bag.label == 1 ? pos : neg)++;
    char id[32];
    std::snprintf(id, sizeof(id), "bag_%05zu", out.size());
    bag.bag_id = id;
    out.push_back(std::move(bag));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

inline nlohmann::json bag_to_json(const Bag& bag) {
  nlohmann::json inst = nlohmann::json::array();
  for (std::size_t j = 0; j < bag.size(); ++j) {
    auto s = bag.instance(j);
    inst.push_back(std::vector<real>(s.begin(), s.end()));
  }
  nlohmann::json j;
  j["bag_id"] = bag.bag_id;
  j["label"] = bag.label;
  j["tabular"] = bag.tabular.values;
  j["instances"] = std::move(inst);
  j["meta"] = {{"severities", bag.severities}};
  return j;
}

inline Bag bag_from_json(const nlohmann::json& j) {
  Bag bag;
  bag.bag_id = j.at("bag_id").get<std::string>();
  bag.label = j.at("label").get<int>();
  bag.tabular.values = j.at("tabular").get<std::vector<real>>();
  const auto& inst = j.at("instances");
  if (!inst.is_array() || inst.empty()) throw DataError("bag " + bag.bag_id + ": empty instance list");
  for (const auto& row : inst) {
    auto v = row.get<std::vector<real>>();
    if (bag.instance_len == 0) bag.instance_len = v.size();
    if (v.size() != bag.instance_len || v.empty())
      throw DataError("bag " + bag.bag_id + ": inconsistent instance lengths (" + std::to_string(v.size()) + " vs " +
                      std::to_string(bag.instance_len) + ")");
    bag.pixels.insert(bag.pixels.end(), v.begin(), v.end());
  }
  if (j.contains("meta") && j["meta"].contains("severities"))
    bag.severities = j["meta"]["severities"].get<std::vector<real>>();
  bag.validate();
  return bag;
}

inline void write_bags(const std::vector<Bag>& bags, std::ostream& os) {
  for (const auto& b : bags) os << bag_to_json(b).dump() << '\n';
}

inline void write_bags(const std::vector<Bag>& bags, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_bags(bags, os);
  if (!os) throw DataError("failed writing " + path);
}

inline std::vector<Bag> read_bags(std::istream& is, const std::string& source = "<stream>") {
  std::vector<Bag> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(bag_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw DataError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<Bag> read_bags(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_bags(is, path);
}

// ---------------------------------------------------------------------------
// Folds

inline constexpr int kNumFolds = 5;

using FoldAssignment = std::map<std::string, int>;

/// Stratified by label: each class is shuffled and dealt round-robin.
inline FoldAssignment make_folds(const std::vector<Bag>& bags, std::uint64_t seed) {
  if (bags.size() < kNumFolds) throw DataError("make_folds: need at least 5 bags");
  FoldAssignment out;
  for (int cls : {0, 1}) {
    std::vector<std::string> ids;
    for (auto& b : bags)
      if (b.label == cls) ids.push_back(b.bag_id);
    if (ids.size() < kNumFolds)
      throw DataError("make_folds: class " + std::to_string(cls) + " has " + std::to_string(ids.size()) +
                      " members, need at least 5");
    std::sort(ids.begin(), ids.end());
    auto rng = derived_rng(seed, "folds/" + std::to_string(cls));
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t i = 0; i < ids.size(); ++i) out[ids[i]] = static_cast<int>(i % kNumFolds);
  }
  return out;
}

enum class Role { train, val, test };

/// Rotation r: test = fold r, val = fold r+1 (mod 5), train = the other three.
inline Role fold_role(int fold, int rotation) {
  if (fold == rotation) return Role::test;
  if (fold == (rotation + 1) % kNumFolds) return Role::val;
  return Role::train;
}

struct Split {
  std::vector<Bag> train, val, test;
};

inline Split split_rotation(const std::vector<Bag>& bags, const FoldAssignment& folds, int rotation) {
  if (rotation < 0 || rotation >= kNumFolds) throw DataError("rotation must be in [0,5)");
  Split s;
  for (auto& b : bags) {
    auto it = folds.find(b.bag_id);
    if (it == folds.end()) throw DataError("bag " + b.bag_id + " has no fold assignment");
    switch (fold_role(it->second, rotation)) {
      case Role::train: s.train.push_back(b); break;
      case Role::val: s.val.push_back(b); break;
      case Role::test: s.test.push_back(b); break;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Manifest

inline nlohmann::json gen_config_to_json(const GenConfig& c) {
  return {{"n_bags", c.n_bags},
          {"bag_size_min", c.bag_size_min},
          {"bag_size_max", c.bag_size_max},
          {"patch_size", c.patch_size},
          {"k_tabular", c.k_tabular},
          {"severity_noise", c.severity_noise},
          {"distractor_dims", c.distractor_dims},
          {"label_balance", c.label_balance},
          {"seed", c.seed},
          {"pixel_noise", c.pixel_noise},
          {"blob_bag_rate", c.blob_bag_rate},
          {"max_blobs", c.max_blobs},
          {"severity_min", c.severity_min},
          {"severity_max", c.severity_max}};
}

/// Overlays the keys present in `j` onto `base`; unknown keys are rejected.
inline GenConfig gen_config_from_json(const nlohmann::json& j, GenConfig base = {}, const std::string& path = "gen") {
  JsonFields f(j, path);
  f.opt("n_bags", base.n_bags);
  f.opt("bag_size_min", base.bag_size_min);
  f.opt("bag_size_max", base.bag_size_max);
  f.opt("patch_size", base.patch_size);
  f.opt("k_tabular", base.k_tabular);
  f.opt("severity_noise", base.severity_noise);
  f.opt("distractor_dims", base.distractor_dims);
  f.opt("label_balance", base.label_balance);
  f.opt("seed", base.seed);
  f.opt("pixel_noise", base.pixel_noise);
  f.opt("blob_bag_rate", base.blob_bag_rate);
  f.opt("max_blobs", base.max_blobs);
  f.opt("severity_min", base.severity_min);
  f.opt("severity_max", base.severity_max);
  f.finish();
  return base;
}

struct DatasetManifest {
  std::vector<std::string> bag_files;  // relative to the manifest directory
  FoldAssignment folds;
  GenConfig config;

  nlohmann::json to_json() const {
    nlohmann::json f = nlohmann::json::object();
    for (auto& [id, k] : folds) f[id] = k;
    return {{"bag_files", bag_files}, {"num_folds", kNumFolds}, {"folds", f}, {"config", gen_config_to_json(config)}};
  }
};

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << m.to_json().dump(2) << '\n';
}

/// Reads the manifest, its bag files, and checks the fold partition.
inline std::pair<DatasetManifest, std::vector<Bag>> load_dataset(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw DataError("cannot open manifest " + manifest_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const std::exception& e) {
    throw DataError(manifest_path + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.bag_files = j.at("bag_files").get<std::vector<std::string>>();
    if (j.contains("config")) m.config = gen_config_from_json(j.at("config"), {}, "config");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(manifest_path + ": " + e.what());
  }
  for (auto& [id, f] : j.at("folds").items()) {
    const int k = f.get<int>();
    if (k < 0 || k >= kNumFolds) throw DataError("manifest: fold out of range for " + id);
    m.folds[id] = k;
  }
  const auto dir = std::filesystem::path(manifest_path).parent_path();
  std::vector<Bag> bags;
  for (auto& f : m.bag_files) {
    auto part = read_bags((dir / f).string());
    bags.insert(bags.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  if (bags.size() != m.folds.size())
    throw DataError("manifest: " + std::to_string(m.folds.size()) + " fold entries for " +
                    std::to_string(bags.size()) + " bags");
  for (auto& b : bags)
    if (!m.folds.count(b.bag_id)) throw DataError("manifest: bag " + b.bag_id + " has no fold");
  return {std::move(m), std::move(bags)};
}

/// Generates bags and folds, writes <dir>/bags.jsonl and <dir>/manifest.json.
inline DatasetManifest generate_dataset(const GenConfig& cfg, const std::string& dir) {
  auto bags = generate_bags(cfg);
  std::filesystem::create_directories(dir);
  write_bags(bags, (std::filesystem::path(dir) / "bags.jsonl").string());
  DatasetManifest m;
  m.bag_files = {"bags.jsonl"};
  m.folds = make_folds(bags, cfg.seed);
  m.config = cfg;
  write_manifest(m, (std::filesystem::path(dir) / "manifest.json").string());
  return m;
}

}  // namespace haaf
