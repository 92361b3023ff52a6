// SPDX-License-Identifier: Apache-2.0
//
// Bag-level predictors. Every variant shares the instance encoder f and, where
// applicable, the token-based transformer aggregator:
//
//   e_j  = f(x_j)
//   q    = Transformer(token, e_1..e_m)[token row]
//
// hyper_adag replaces the shared token a by a + v(T) and the shared
// classifier by (W(T), b(T)) from the hypernetwork; hyper_adag_no_tctp keeps
// a and only generates the classifier.
#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "haaf/data.hpp"
#include "haaf/hypernet.hpp"
#include "haaf/layers.hpp"
#include "haaf/params.hpp"

namespace haaf {

enum class Variant {
  table_mlp,
  output_max,
  feature_mean,
  feature_max,
  feature_attention,
  feature_transformer,
  concat_fusion,
  hyper_adag_no_tctp,
  hyper_adag,
};

inline constexpr std::array<Variant, 9> kAllVariants = {
    Variant::table_mlp,          Variant::output_max,    Variant::feature_mean,
    Variant::feature_max,        Variant::feature_attention, Variant::feature_transformer,
    Variant::concat_fusion,      Variant::hyper_adag_no_tctp, Variant::hyper_adag};

inline constexpr std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::table_mlp: return "table_mlp";
    case Variant::output_max: return "output_max";
    case Variant::feature_mean: return "feature_mean";
    case Variant::feature_max: return "feature_max";
    case Variant::feature_attention: return "feature_attention";
    case Variant::feature_transformer: return "feature_transformer";
    case Variant::concat_fusion: return "concat_fusion";
    case Variant::hyper_adag_no_tctp: return "hyper_adag_no_tctp";
    case Variant::hyper_adag: return "hyper_adag";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (auto v : kAllVariants)
    if (variant_name(v) == s) return v;
  throw std::invalid_argument("unknown variant: " + std::string(s));
}

inline bool uses_tabular(Variant v) {
  return v == Variant::table_mlp || v == Variant::concat_fusion || v == Variant::hyper_adag_no_tctp ||
         v == Variant::hyper_adag;
}

inline bool uses_instances(Variant v) { return v != Variant::table_mlp; }

inline bool uses_transformer(Variant v) {
  return v == Variant::feature_transformer || v == Variant::concat_fusion || v == Variant::hyper_adag_no_tctp ||
         v == Variant::hyper_adag;
}

enum class EncoderKind { mlp, conv2 };

struct ModelConfig {
  std::size_t patch_size = 8;
  std::size_t k_tabular = 20;
  EncoderKind encoder = EncoderKind::mlp;
  std::size_t encoder_hidden = 256;
  std::size_t conv_channels1 = 8;
  std::size_t conv_channels2 = 16;
  TransformerConfig transformer{};
  int attention_block = -1;  // block whose token row is exported; -1 = last
  std::size_t attention_hidden = 64;
  std::size_t table_hidden = 64;
  std::size_t hyper_hidden = 64;
  double hyper_head_variance = 0;  // 0 -> 1 / (hyper_hidden * d)
  double token_init_std = 0.02;
  double encoder_offset_std = 1.0;  // init std of the encoder output bias

  std::size_t d() const { return transformer.d; }

  HyperNetConfig hypernet(bool emit_v) const {
    HyperNetConfig h;
    h.k = k_tabular;
    h.hidden = hyper_hidden;
    h.depth = 3;
    h.d = transformer.d;
    h.emit_v = emit_v;
    h.head_variance = hyper_head_variance;
    return h;
  }
};

struct TctpNorms {
  real v_norm = 0;
  real w_norm = 0;
  real b = 0;
};

struct ForwardResult {
  Tensor logit;                  // [1]
  std::vector<real> attention;   // empty when the variant has none
  std::optional<TctpNorms> tctp;
};

struct BagPrediction {
  real logit = 0;
  real probability = 0.5;
  std::vector<real> attention;
  std::optional<TctpNorms> tctp;
};

struct AggregateOutput {
  Tensor q;                      // [1, d]
  std::vector<real> attention;   // [m], sums to 1
};

// ---------------------------------------------------------------------------
// Architecture declarations

inline void declare_encoder(ArchSpec& spec, const ModelConfig& c) {
  const std::size_t in = c.patch_size * c.patch_size;
  // The output bias starts as a random shared offset. Pre-norm blocks rescale
  // every token to unit variance, so without it near-empty background
  // instances would be blown up to the same scale as informative ones.
  auto offset_output_bias = [&] {
    spec.back().init = c.encoder_offset_std > 0 ? InitKind::normal : InitKind::zeros;
    spec.back().scale = c.encoder_offset_std;
  };
  if (c.encoder == EncoderKind::mlp) {
    Mlp::declare(spec, "enc", {in, c.encoder_hidden, c.d()});
    offset_output_bias();
    return;
  }
  if (c.patch_size % 4 != 0) throw std::invalid_argument("conv2 encoder needs patch_size divisible by 4");
  LinearLayer::declare(spec, "enc.conv1", 9, c.conv_channels1);
  LinearLayer::declare(spec, "enc.conv2", 9 * c.conv_channels1, c.conv_channels2);
  const std::size_t side = c.patch_size / 4;
  LinearLayer::declare(spec, "enc.proj", side * side * c.conv_channels2, c.d());
  offset_output_bias();
}

inline void declare_aggregator(ArchSpec& spec, const ModelConfig& c) {
  spec.push_back({"agg.token", {c.d()}, InitKind::normal, c.token_init_std});
  for (std::size_t i = 0; i < c.transformer.blocks; ++i)
    TransformerBlock::declare(spec, "agg.block" + std::to_string(i), c.transformer);
}

inline ArchSpec declare_model(Variant v, const ModelConfig& c) {
  if (c.patch_size == 0 || c.k_tabular == 0 || c.d() == 0 || c.transformer.blocks == 0)
    throw std::invalid_argument("model: dimensions must be positive");
  ArchSpec spec;
  spec.push_back({"buffer.variant", {1}, InitKind::zeros, 0, false});
  if (uses_tabular(v)) {
    spec.push_back({"buffer.tab_mean", {c.k_tabular}, InitKind::zeros, 0, false});
    spec.push_back({"buffer.tab_std", {c.k_tabular}, InitKind::ones, 0, false});
  }
  if (uses_instances(v)) declare_encoder(spec, c);
  if (uses_transformer(v)) declare_aggregator(spec, c);

  switch (v) {
    case Variant::table_mlp:
      Mlp::declare(spec, "tab", {c.k_tabular, c.table_hidden, c.table_hidden});
      LinearLayer::declare(spec, "cls", c.table_hidden, 1);
      break;
    case Variant::output_max:
    case Variant::feature_mean:
    case Variant::feature_max:
    case Variant::feature_transformer:
      LinearLayer::declare(spec, "cls", c.d(), 1);
      break;
    case Variant::feature_attention:
      spec.push_back({"attn.V", {c.d(), c.attention_hidden}, InitKind::xavier_uniform});
      spec.push_back({"attn.w", {c.attention_hidden, 1}, InitKind::xavier_uniform});
      LinearLayer::declare(spec, "cls", c.d(), 1);
      break;
    case Variant::concat_fusion:
      Mlp::declare(spec, "tab", {c.k_tabular, c.table_hidden, c.table_hidden});
      LinearLayer::declare(spec, "cls", c.d() + c.table_hidden, 1);
      break;
    case Variant::hyper_adag_no_tctp:
      hypernet_declare(spec, "hyper", c.hypernet(false));
      break;
    case Variant::hyper_adag:
      hypernet_declare(spec, "hyper", c.hypernet(true));
      break;
  }
  return spec;
}

// ---------------------------------------------------------------------------

namespace detail {

/// im2col gather indices for a 3x3, stride-2, pad-1 convolution over m
/// images stored HWC in rows of a [m, side*side*channels] matrix.
inline std::vector<std::ptrdiff_t> im2col_index(std::size_t m, std::size_t side, std::size_t channels) {
  const std::size_t out_side = side / 2;
  std::vector<std::ptrdiff_t> idx;
  idx.reserve(m * out_side * out_side * 9 * channels);
  const auto s = static_cast<std::ptrdiff_t>(side);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t oy = 0; oy < out_side; ++oy)
      for (std::size_t ox = 0; ox < out_side; ++ox)
        for (std::ptrdiff_t ky = -1; ky <= 1; ++ky)
          for (std::ptrdiff_t kx = -1; kx <= 1; ++kx)
            for (std::size_t ch = 0; ch < channels; ++ch) {
              const std::ptrdiff_t y = 2 * static_cast<std::ptrdiff_t>(oy) + ky;
              const std::ptrdiff_t x = 2 * static_cast<std::ptrdiff_t>(ox) + kx;
              if (y < 0 || x < 0 || y >= s || x >= s) {
                idx.push_back(-1);
              } else {
                idx.push_back(static_cast<std::ptrdiff_t>(i * side * side * channels +
                                                          static_cast<std::size_t>(y * s + x) * channels + ch));
              }
            }
  return idx;
}

inline real l2norm(std::span<const real> v) {
  real s = 0;
  for (real x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

class MilModel {
 public:
  MilModel(Variant variant, ModelConfig cfg, ModelParams params)
      : variant_(variant), cfg_(std::move(cfg)), params_(std::move(params)) {
    if (params_.contains("buffer.variant")) {
      const auto stored = static_cast<int>(params_.at("buffer.variant").item());
      if (stored != static_cast<int>(variant_))
        throw std::invalid_argument(
            "checkpoint holds variant " +
            std::string(stored >= 0 && stored < 9 ? variant_name(static_cast<Variant>(stored)) : "?") +
            " but variant " + std::string(variant_name(variant_)) + " was requested");
    }
    for (auto& d : declare_model(variant_, cfg_)) {
      if (!params_.contains(d.name))
        throw std::invalid_argument("parameters for " + std::string(variant_name(variant_)) + " lack " + d.name);
      if (params_.at(d.name).shape() != d.shape)
        throw ShapeError("model parameter " + d.name, shape_str(d.shape), shape_str(params_.at(d.name).shape()));
    }
  }

  static MilModel create(Variant variant, const ModelConfig& cfg, std::uint64_t seed) {
    ModelParams p = init_params(declare_model(variant, cfg), seed);
    p.at("buffer.variant").mutable_values()[0] = static_cast<real>(static_cast<int>(variant));
    return MilModel(variant, cfg, std::move(p));
  }

  Variant variant() const { return variant_; }
  const ModelConfig& config() const { return cfg_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  /// Deep copy with independent storage.
  MilModel clone() const { return MilModel(variant_, cfg_, params_.clone()); }

  /// z-scores tabular columns with statistics of `bags`; binary columns
  /// pass through unchanged.
  void fit_normalizer(const std::vector<Bag>& bags) {
    if (!uses_tabular(variant_) || bags.empty()) return;
    const std::size_t k = cfg_.k_tabular;
    auto mean = params_.at("buffer.tab_mean").mutable_values();
    auto sd = params_.at("buffer.tab_std").mutable_values();
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0, s2 = 0;
      bool binary = true;
      for (auto& b : bags) {
        const double v = b.tabular.values.at(c);
        s += v;
        s2 += v * v;
        binary = binary && (v == 0.0 || v == 1.0);
      }
      const double n = static_cast<double>(bags.size());
      const double mu = s / n;
      const double var = std::max(0.0, s2 / n - mu * mu);
      if (binary) {
        mean[c] = 0;
        sd[c] = 1;
      } else {
        mean[c] = static_cast<real>(mu);
        sd[c] = var > 1e-24 ? static_cast<real>(std::sqrt(var)) : real(1);
      }
    }
  }

  Tensor tabular_input(const Bag& bag) const {
    const auto& t = bag.tabular.values;
    if (t.size() != cfg_.k_tabular)
      throw ShapeError("tabular input", std::to_string(cfg_.k_tabular) + " values", std::to_string(t.size()));
    std::vector<real> v(t.begin(), t.end());
    if (!bag.tabular.normalized) {
      auto mean = params_.at("buffer.tab_mean").values();
      auto sd = params_.at("buffer.tab_std").values();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - mean[i]) / sd[i];
    }
    const std::size_t k = v.size();
    return Tensor::from({1, k}, std::move(v));
  }

  /// f applied to every instance independently; [m, d].
  Tensor encode_instances(const Bag& bag) const {
    const std::size_t len = cfg_.patch_size * cfg_.patch_size;
    if (bag.instance_len != len)
      throw ShapeError("encode_instances", "instances of " + std::to_string(len) + " values",
                       std::to_string(bag.instance_len));
    if (bag.size() == 0) throw ShapeError("encode_instances", "non-empty bag", "0 instances");
    const std::size_t m = bag.size();
    Tensor x = Tensor::from({m, len}, bag.pixels);
    if (cfg_.encoder == EncoderKind::mlp) return Mlp::bind(params_, "enc", 2, Activation::gelu, false).forward(x);

    const std::size_t P = cfg_.patch_size, c1 = cfg_.conv_channels1, c2 = cfg_.conv_channels2;
    auto conv1 = LinearLayer::bind(params_, "enc.conv1");
    auto conv2 = LinearLayer::bind(params_, "enc.conv2");
    auto proj = LinearLayer::bind(params_, "enc.proj");
    const std::size_t s1 = P / 2, s2 = P / 4;
    Tensor h = gather(x, detail::im2col_index(m, P, 1), {m * s1 * s1, 9});
    h = reshape(relu(conv1.forward(h)), {m, s1 * s1 * c1});
    h = gather(h, detail::im2col_index(m, s1, c1), {m * s2 * s2, 9 * c1});
    h = reshape(relu(conv2.forward(h)), {m, s2 * s2 * c2});
    return proj.forward(h);
  }

  /// Prepends `token` ([d] or [1,d]) to the features, runs the blocks and
  /// returns the token row plus its head-averaged attention over instances.
  AggregateOutput aggregate_transformer(const Tensor& features, const Tensor& token) const {
    const std::size_t d = cfg_.d(), m = features.dim(0);
    Tensor x = concat_rows({reshape(token, {1, d}), features});
    const std::size_t nb = cfg_.transformer.blocks;
    const std::size_t export_block =
        cfg_.attention_block < 0 ? nb - 1 : std::min<std::size_t>(nb - 1, static_cast<std::size_t>(cfg_.attention_block));
    AggregateOutput out;
    for (std::size_t i = 0; i < nb; ++i) {
      auto blk = TransformerBlock::bind(params_, "agg.block" + std::to_string(i), cfg_.transformer.heads);
      auto r = blk.forward(x);
      x = r.out;
      if (i == export_block) out.attention = token_attention(r.attn, m);
    }
    out.q = slice(x, 0, 0, 1);
    return out;
  }

  AggregateOutput aggregate_transformer(const Tensor& features) const {
    return aggregate_transformer(features, params_.at("agg.token"));
  }

  ForwardResult forward(const Bag& bag) const {
    if (!uses_instances(variant_)) return forward_features(Tensor(), bag);
    return forward_features(encode_instances(bag), bag);
  }

  /// Everything after the instance encoder; `e` is [m, d] (ignored by
  /// table_mlp). The bag supplies the tabular vector.
  ForwardResult forward_features(const Tensor& e, const Bag& bag) const {
    ForwardResult r;
    const std::size_t d = cfg_.d();
    if (uses_instances(variant_) && (!e.defined() || e.rank() != 2 || e.dim(1) != d))
      throw ShapeError("instance features", "[m, " + std::to_string(d) + "]", e.defined() ? shape_str(e.shape()) : "none");
    const std::size_t m = uses_instances(variant_) ? e.dim(0) : 0;
    switch (variant_) {
      case Variant::table_mlp: {
        Tensor z = Mlp::bind(params_, "tab", 2, Activation::gelu, true).forward(tabular_input(bag));
        r.logit = reshape(LinearLayer::bind(params_, "cls").forward(z), {1});
        break;
      }
      case Variant::output_max: {
        Tensor s = LinearLayer::bind(params_, "cls").forward(e);  // [m,1]
        Tensor row = reshape(s, {1, s.size()});
        r.logit = reshape(max_lastdim(row), {1});
        std::vector<real> onehot(s.size(), real(0));
        onehot[static_cast<std::size_t>(std::max_element(s.values().begin(), s.values().end()) - s.values().begin())] = 1;
        r.attention = std::move(onehot);
        break;
      }
      case Variant::feature_mean:
      case Variant::feature_max: {
        Tensor et = transpose_last2(e);  // [d, m]
        Tensor pooled = variant_ == Variant::feature_mean ? mean_lastdim(et) : max_lastdim(et);
        r.logit = reshape(LinearLayer::bind(params_, "cls").forward(reshape(pooled, {1, d})), {1});
        if (variant_ == Variant::feature_mean) r.attention.assign(m, real(1) / real(m));
        break;
      }
      case Variant::feature_attention: {
        Tensor s = matmul(tanh(matmul(e, params_.at("attn.V"))), params_.at("attn.w"));  // [m,1]
        Tensor alpha = softmax_lastdim(reshape(s, {1, s.size()}));                      // [1,m]
        Tensor q = matmul(alpha, e);                                                    // [1,d]
        r.logit = reshape(LinearLayer::bind(params_, "cls").forward(q), {1});
        r.attention.assign(alpha.values().begin(), alpha.values().end());
        break;
      }
      case Variant::feature_transformer: {
        auto agg = aggregate_transformer(e);
        r.logit = reshape(LinearLayer::bind(params_, "cls").forward(agg.q), {1});
        r.attention = std::move(agg.attention);
        break;
      }
      case Variant::concat_fusion: {
        auto agg = aggregate_transformer(e);
        Tensor z = Mlp::bind(params_, "tab", 2, Activation::gelu, true).forward(tabular_input(bag));
        r.logit = reshape(LinearLayer::bind(params_, "cls").forward(concat_lastdim({agg.q, z})), {1});
        r.attention = std::move(agg.attention);
        break;
      }
      case Variant::hyper_adag_no_tctp:
      case Variant::hyper_adag: {
        const bool with_v = variant_ == Variant::hyper_adag;
        auto h = HyperNet::bind(params_, "hyper", cfg_.hypernet(with_v)).forward(tabular_input(bag));
        Tensor token = reshape(params_.at("agg.token"), {1, d});
        if (with_v) token = add(token, h.v);
        auto agg = aggregate_transformer(e, token);
        r.logit = reshape(add(matmul(agg.q, h.w), h.b), {1});
        r.attention = std::move(agg.attention);
        r.tctp = TctpNorms{with_v ? detail::l2norm(h.v.values()) : real(0), detail::l2norm(h.w.values()), h.b.item()};
        break;
      }
    }
    return r;
  }

  BagPrediction predict(const Bag& bag) const {
    NoGradGuard ng;
    auto f = forward(bag);
    BagPrediction p;
    p.logit = f.logit.item();
    p.probability = sigmoid(p.logit);
    p.attention = std::move(f.attention);
    p.tctp = f.tctp;
    return p;
  }

 private:
  std::vector<real> token_attention(const std::vector<real>& attn, std::size_t m) const {
    const std::size_t heads = cfg_.transformer.heads, n = m + 1;
    std::vector<real> a(m, real(0));
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = 0; j < m; ++j) a[j] += attn[h * n * n + (j + 1)];
    real total = 0;
    for (real v : a) total += v;
    for (real& v : a) v /= total;
    return a;
  }

  Variant variant_;
  ModelConfig cfg_;
  ModelParams params_;
};

inline Variant stored_variant(const ModelParams& p) {
  if (!p.contains("buffer.variant")) throw std::invalid_argument("checkpoint has no variant marker");
  const int v = static_cast<int>(p.at("buffer.variant").item());
  if (v < 0 || v >= static_cast<int>(kAllVariants.size())) throw std::invalid_argument("checkpoint has bad variant marker");
  return static_cast<Variant>(v);
}

inline BagPrediction hyper_adag_forward(const MilModel& model, const Bag& bag) { return model.predict(bag); }

}  // namespace haaf
