// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "haaf/data.hpp"
#include "support.hpp"

using namespace haaf;

namespace {

GenConfig small_gen(std::uint64_t seed = 0) {
  GenConfig g;
  g.n_bags = 60;
  g.seed = seed;
  return g;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST(Generator, LabelRuleExamples) {
  std::vector<real> sev{0, 0.3, 0};
  EXPECT_EQ(condition_label(sev, 0), 1);
  EXPECT_EQ(condition_label(sev, 1), 0);
  EXPECT_DOUBLE_EQ(condition_threshold(0), 0.2);
  EXPECT_DOUBLE_EQ(condition_threshold(1), 0.8);
}

TEST(Generator, LabelsRecomputableFromSeverities) {
  auto bags = generate_bags(small_gen(3));
  for (auto& b : bags) {
    // Brute force, independent of condition_label.
    int y = 0;
    const double g = 0.2 + 0.6 * b.tabular.values[0];
    for (real s : b.severities) y |= (s > 0 && s >= g);
    EXPECT_EQ(b.label, y) << b.bag_id;
  }
}

TEST(Generator, ShapesAndRanges) {
  auto g = small_gen(1);
  auto bags = generate_bags(g);
  ASSERT_EQ(bags.size(), g.n_bags);
  std::set<std::string> ids;
  for (auto& b : bags) {
    ids.insert(b.bag_id);
    EXPECT_GE(b.size(), g.bag_size_min);
    EXPECT_LE(b.size(), g.bag_size_max);
    EXPECT_EQ(b.instance_len, g.patch_size * g.patch_size);
    ASSERT_EQ(b.tabular.values.size(), g.k_tabular);
    EXPECT_GE(b.tabular.values[0], 0);
    EXPECT_LE(b.tabular.values[0], 1);
    EXPECT_EQ(b.severities.size(), b.size());
    for (real s : b.severities) {
      EXPECT_GE(s, 0);
      EXPECT_LE(s, 1);
    }
  }
  EXPECT_EQ(ids.size(), bags.size());
}

TEST(Generator, ClassBalanceIsEnforced) {
  for (double balance : {0.5, 0.3}) {
    auto g = small_gen(2);
    g.label_balance = balance;
    auto bags = generate_bags(g);
    double pos = 0;
    for (auto& b : bags) pos += b.label;
    EXPECT_NEAR(pos / double(bags.size()), balance, 0.05);
  }
}

TEST(Generator, UnsatisfiableBalanceThrows) {
  auto g = small_gen();
  g.label_balance = 0.99;
  g.blob_bag_rate = 0.0;  // no blobs: every bag is negative
  EXPECT_THROW(generate_bags(g), DataError);
}

TEST(Generator, DeterministicGivenSeed) {
  EXPECT_EQ(generate_bags(small_gen(7)), generate_bags(small_gen(7)));
  EXPECT_NE(generate_bags(small_gen(7)), generate_bags(small_gen(8)));
}

TEST(Generator, LabelNoiseFlipsAboutTheRequestedFraction) {
  auto g = small_gen(4);
  g.n_bags = 400;
  g.severity_noise = 0.2;
  auto bags = generate_bags(g);
  double flipped = 0;
  for (auto& b : bags) flipped += b.label != condition_label(b.severities, b.tabular.values[0]);
  EXPECT_NEAR(flipped / double(bags.size()), 0.2, 0.07);
}

TEST(Generator, ConfigValidation) {
  auto g = small_gen();
  g.distractor_dims = 20;  // needs k >= 21
  EXPECT_THROW(g.validate(), std::invalid_argument);
  g = small_gen();
  g.bag_size_min = 50;
  EXPECT_THROW(g.validate(), std::invalid_argument);
  g = small_gen();
  g.label_balance = 1.0;
  EXPECT_THROW(g.validate(), std::invalid_argument);
}

// The best single severity cutoff that ignores t must be clearly worse than
// the condition-aware rule (which is exact on noise-free data).
TEST(Generator, StaticThresholdLearnabilityGap) {
  GenConfig g;
  g.n_bags = 2000;
  auto bags = generate_bags(g);
  std::vector<std::pair<double, int>> scored;
  for (auto& b : bags) scored.push_back({*std::max_element(b.severities.begin(), b.severities.end()), b.label});
  std::sort(scored.begin(), scored.end());
  const double n = double(scored.size());
  double pos_total = 0;
  for (auto& s : scored) pos_total += s.second;
  // Cutoff between positions i-1 and i: predict 1 for index >= i.
  double best = std::max(pos_total, n - pos_total) / n, neg_below = 0, pos_below = 0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    (scored[i].second ? pos_below : neg_below) += 1;
    best = std::max(best, (neg_below + (pos_total - pos_below)) / n);
  }
  double aware = 0;
  for (auto& b : bags) aware += condition_label(b.severities, b.tabular.values[0]) == b.label;
  aware /= n;
  EXPECT_EQ(aware, 1.0);
  EXPECT_GE(aware - best, 0.10) << "static Bayes accuracy " << best;
}

// --- JSONL ------------------------------------------------------------------

TEST(Jsonl, RoundTripIsValueExact) {
  std::mt19937_64 rng(5);
  std::vector<Bag> bags;
  for (int i = 0; i < 100; ++i) {
    auto b = test::random_bag(rng, test::rand_dim(rng, 1, 6), 3, 4, "bag" + std::to_string(i));
    b.severities = test::random_values(rng, b.size(), 0, 1);
    bags.push_back(b);
  }
  std::stringstream ss;
  write_bags(bags, ss);
  EXPECT_EQ(read_bags(ss), bags);
}

TEST(Jsonl, FieldNames) {
  std::mt19937_64 rng(6);
  auto j = bag_to_json(test::random_bag(rng, 2, 2, 3));
  for (const char* k : {"bag_id", "label", "tabular", "instances", "meta"}) EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_TRUE(j["meta"].contains("severities"));
}

TEST(Jsonl, TruncatedFileNamesTheLine) {
  std::mt19937_64 rng(7);
  std::vector<Bag> bags{test::random_bag(rng, 2, 2, 3, "a"), test::random_bag(rng, 2, 2, 3, "b")};
  std::stringstream ss;
  write_bags(bags, ss);
  std::string text = ss.str();
  std::stringstream cut(text.substr(0, text.size() - 10));
  try {
    read_bags(cut, "bags.jsonl");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bags.jsonl:2"), std::string::npos) << e.what();
  }
}

TEST(Jsonl, EmptyInstanceListRejected) {
  std::stringstream ss(R"({"bag_id":"x","label":0,"tabular":[0.5],"instances":[],"meta":{"severities":[]}})");
  EXPECT_THROW(read_bags(ss), DataError);
}

TEST(Jsonl, InconsistentInstanceLengthsRejected) {
  std::stringstream ss(R"({"bag_id":"x","label":0,"tabular":[0.5],"instances":[[1,2],[3]],"meta":{"severities":[0,0]}})");
  EXPECT_THROW(read_bags(ss), DataError);
}

// --- folds ------------------------------------------------------------------

TEST(Folds, StratifiedAndBalanced) {
  std::vector<Bag> bags;
  for (int i = 0; i < 100; ++i) {
    Bag b;
    b.bag_id = "b" + std::to_string(i);
    b.label = i % 2;
    bags.push_back(b);
  }
  auto folds = make_folds(bags, 3);
  std::vector<int> pos(5, 0), total(5, 0);
  for (auto& b : bags) {
    pos[folds.at(b.bag_id)] += b.label;
    total[folds.at(b.bag_id)] += 1;
  }
  for (int f = 0; f < 5; ++f) {
    EXPECT_NEAR(pos[f], 10, 1);
    EXPECT_EQ(total[f], 20);
  }
  EXPECT_EQ(make_folds(bags, 3), folds);
}

TEST(Folds, RotationsPartitionTheBags) {
  auto bags = generate_bags(small_gen(9));
  auto folds = make_folds(bags, 9);
  for (int r = 0; r < 5; ++r) {
    auto s = split_rotation(bags, folds, r);
    std::multiset<std::string> seen;
    for (auto* part : {&s.train, &s.val, &s.test})
      for (auto& b : *part) seen.insert(b.bag_id);
    EXPECT_EQ(seen.size(), bags.size());
    EXPECT_EQ(std::set<std::string>(seen.begin(), seen.end()).size(), bags.size());
    for (auto& b : s.test) EXPECT_EQ(folds.at(b.bag_id), r);
    for (auto& b : s.val) EXPECT_EQ(folds.at(b.bag_id), (r + 1) % 5);
  }
}

TEST(Folds, TooFewMembersOfAClassThrows) {
  std::vector<Bag> bags;
  for (int i = 0; i < 10; ++i) {
    Bag b;
    b.bag_id = std::to_string(i);
    b.label = i < 3;
    bags.push_back(b);
  }
  EXPECT_THROW(make_folds(bags, 0), DataError);
}

// --- manifest ---------------------------------------------------------------

TEST(Manifest, GenerateAndLoad) {
  auto dir = test::temp_dir("manifest");
  auto g = small_gen(11);
  auto m = generate_dataset(g, dir.string());
  auto [loaded, bags] = load_dataset((dir / "manifest.json").string());
  EXPECT_EQ(loaded.folds, m.folds);
  EXPECT_EQ(bags, generate_bags(g));
  EXPECT_EQ(loaded.config.n_bags, g.n_bags);
  EXPECT_EQ(loaded.config.patch_size, g.patch_size);
  auto j = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(j["num_folds"], 5);
}

TEST(Manifest, SameConfigGivesByteIdenticalFiles) {
  auto a = test::temp_dir("manifest_a"), b = test::temp_dir("manifest_b");
  generate_dataset(small_gen(12), a.string());
  generate_dataset(small_gen(12), b.string());
  EXPECT_EQ(slurp(a / "bags.jsonl"), slurp(b / "bags.jsonl"));
  EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
}

TEST(Manifest, UnknownGeneratorKeyRejected) {
  EXPECT_THROW(gen_config_from_json(nlohmann::json{{"n_bag", 3}}), ConfigError);
  auto g = gen_config_from_json(nlohmann::json{{"n_bags", 3}});
  EXPECT_EQ(g.n_bags, 3u);
}
