// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test suites: random tensors and bags, and a small
// model configuration that keeps the suites fast.
#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "haaf/data.hpp"
#include "haaf/models.hpp"
#include "haaf/tensor.hpp"

namespace haaf::test {

inline std::vector<real> random_values(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<real> v(n);
  for (auto& x : v) x = static_cast<real>(u(rng));
  return v;
}

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  return Tensor::from(shape, random_values(rng, shape_numel(shape), lo, hi));
}

inline std::size_t rand_dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Small but complete model: every code path of the full-size model with
/// dimensions that keep a forward pass in the microsecond range.
inline ModelConfig small_model(std::size_t patch = 4, std::size_t k = 5) {
  ModelConfig c;
  c.patch_size = patch;
  c.k_tabular = k;
  c.encoder_hidden = 12;
  c.transformer.d = 8;
  c.transformer.heads = 2;
  c.transformer.d_ff = 12;
  c.transformer.blocks = 2;
  c.attention_hidden = 6;
  c.table_hidden = 6;
  c.hyper_hidden = 10;
  return c;
}

inline Bag random_bag(std::mt19937_64& rng, std::size_t m, std::size_t patch, std::size_t k, const std::string& id = "b") {
  Bag b;
  b.bag_id = id;
  b.instance_len = patch * patch;
  b.pixels = random_values(rng, m * patch * patch);
  b.tabular.values = random_values(rng, k, 0.0, 1.0);
  b.label = static_cast<int>(rng() % 2);
  b.severities.assign(m, real(0));
  return b;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("haaf_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace haaf::test
