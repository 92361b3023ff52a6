// SPDX-License-Identifier: Apache-2.0
//
// Hypernetwork mapping a per-bag tabular vector to the token shift v, the
// classifier weights W and the classifier bias b:
//
//   trunk = gelu MLP  k -> h -> h -> h
//   v = trunk Hv,  W = trunk Hw,  b = trunk Hb
//
// The three heads are initialized with a small target variance so that the
// generated classifier starts near zero and the initial bag logit is ~0.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "haaf/layers.hpp"
#include "haaf/params.hpp"

namespace haaf {

struct TabularVector {
  std::vector<real> values;
  bool normalized = false;
};

/// Generated per-bag parameters, as plain values.
struct Tctp {
  std::vector<real> v;  // [d]
  std::vector<real> w;  // [d], used as a d x 1 column
  real b = 0;
};

struct HyperNetConfig {
  std::size_t k = 20;       // tabular width
  std::size_t hidden = 64;  // trunk width
  std::size_t depth = 3;    // trunk layers
  std::size_t d = 128;      // aggregation-token width
  bool emit_v = true;       // false drops the token-shift head entirely
  double head_variance = 0; // 0 -> 1 / (hidden * d)

  double resolved_head_variance() const {
    return head_variance > 0 ? head_variance : 1.0 / static_cast<double>(hidden * d);
  }
};

inline void hypernet_declare(ArchSpec& spec, const std::string& prefix, const HyperNetConfig& cfg) {
  if (cfg.k == 0 || cfg.hidden == 0 || cfg.depth == 0 || cfg.d == 0)
    throw std::invalid_argument("hypernet: sizes must be positive");
  std::vector<std::size_t> widths{cfg.k};
  for (std::size_t i = 0; i < cfg.depth; ++i) widths.push_back(cfg.hidden);
  Mlp::declare(spec, prefix + ".trunk", widths);
  const double var = cfg.resolved_head_variance();
  auto head = [&](const std::string& name, std::size_t out) {
    spec.push_back({prefix + "." + name + ".W", {cfg.hidden, out}, InitKind::uniform_variance, var});
    spec.push_back({prefix + "." + name + ".b", {out}, InitKind::zeros});
  };
  if (cfg.emit_v) head("head_v", cfg.d);
  head("head_w", cfg.d);
  head("head_b", 1);
}

/// Initializes only the hypernetwork tensors.
inline ModelParams hypernet_init(const HyperNetConfig& cfg, std::uint64_t seed, const std::string& prefix = "hyper") {
  ArchSpec spec;
  hypernet_declare(spec, prefix, cfg);
  return init_params(spec, seed);
}

class HyperNet {
 public:
  /// Differentiable outputs: v [1,d] (undefined when emit_v is off),
  /// w [d,1], b [1,1].
  struct Output {
    Tensor v, w, b;
    Tctp values() const {
      Tctp t;
      if (v.defined()) t.v.assign(v.values().begin(), v.values().end());
      t.w.assign(w.values().begin(), w.values().end());
      t.b = b.item();
      return t;
    }
  };

  static HyperNet bind(const ModelParams& p, const std::string& prefix, const HyperNetConfig& cfg) {
    HyperNet h;
    h.cfg_ = cfg;
    h.trunk_ = Mlp::bind(p, prefix + ".trunk", cfg.depth, Activation::gelu, true);
    if (cfg.emit_v) h.head_v_ = LinearLayer::bind(p, prefix + ".head_v");
    h.head_w_ = LinearLayer::bind(p, prefix + ".head_w");
    h.head_b_ = LinearLayer::bind(p, prefix + ".head_b");
    return h;
  }

  /// t: [1, k]
  Output forward(const Tensor& t) const {
    if (t.size() != cfg_.k)
      throw ShapeError("hypernet_forward", "tabular vector of " + std::to_string(cfg_.k) + " values",
                       shape_str(t.shape()));
    Tensor row = t.rank() == 2 ? t : reshape(t, {1, cfg_.k});
    Tensor z = trunk_.forward(row);
    Output o;
    if (cfg_.emit_v) o.v = head_v_.forward(z);
    o.w = reshape(head_w_.forward(z), {cfg_.d, 1});
    o.b = head_b_.forward(z);
    return o;
  }

  const HyperNetConfig& config() const { return cfg_; }

 private:
  HyperNetConfig cfg_;
  Mlp trunk_;
  LinearLayer head_v_, head_w_, head_b_;
};

inline Tctp hypernet_forward(const ModelParams& params, const HyperNetConfig& cfg, const TabularVector& t,
                             const std::string& prefix = "hyper") {
  NoGradGuard ng;
  return HyperNet::bind(params, prefix, cfg).forward(Tensor::row(t.values)).values();
}

}  // namespace haaf
