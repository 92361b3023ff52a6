// SPDX-License-Identifier: Apache-2.0
//
// Layers are thin views over tensors stored in a ModelParams: each one is
// declared (name, shape, init) into an ArchSpec, then bound by prefix.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "haaf/params.hpp"
#include "haaf/tensor.hpp"

namespace haaf {

enum class Activation { none, relu, gelu, tanh };

inline Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::relu:
      return relu(x);
    case Activation::gelu:
      return gelu(x);
    case Activation::tanh:
      return tanh(x);
    case Activation::none:
      break;
  }
  return x;
}

// ---------------------------------------------------------------------------

struct LinearLayer {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static void declare(ArchSpec& spec, const std::string& prefix, std::size_t in, std::size_t out) {
    spec.push_back({prefix + ".W", {in, out}, InitKind::xavier_uniform});
    spec.push_back({prefix + ".b", {out}, InitKind::zeros});
  }

  static LinearLayer bind(const ModelParams& p, const std::string& prefix) {
    LinearLayer l{p.at(prefix + ".W"), p.at(prefix + ".b")};
    if (l.weight.rank() != 2 || l.bias.size() != l.weight.dim(1))
      throw ShapeError("linear " + prefix, "W [in,out] with bias [out]",
                       shape_str(l.weight.shape()) + " / " + shape_str(l.bias.shape()));
    return l;
  }

  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }

  /// x [n, in] -> x W + bias, [n, out]
  Tensor forward(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != in())
      throw ShapeError("linear_forward", "[n, " + std::to_string(in()) + "]", shape_str(x.shape()));
    return broadcast_add_row(matmul(x, weight), bias);
  }
};

inline Tensor linear_forward(const LinearLayer& layer, const Tensor& x) { return layer.forward(x); }

/// Stack of linear layers; the activation follows every layer except,
/// optionally, the last.
struct Mlp {
  std::vector<LinearLayer> layers;
  Activation act = Activation::gelu;
  bool activate_last = false;

  static void declare(ArchSpec& spec, const std::string& prefix, const std::vector<std::size_t>& widths) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
      LinearLayer::declare(spec, prefix + ".l" + std::to_string(i + 1), widths[i], widths[i + 1]);
  }

  static Mlp bind(const ModelParams& p, const std::string& prefix, std::size_t depth, Activation act,
                  bool activate_last) {
    Mlp m;
    m.act = act;
    m.activate_last = activate_last;
    for (std::size_t i = 0; i < depth; ++i) m.layers.push_back(LinearLayer::bind(p, prefix + ".l" + std::to_string(i + 1)));
    return m;
  }

  Tensor forward(Tensor x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i].forward(x);
      if (i + 1 < layers.size() || activate_last) x = activate(x, act);
    }
    return x;
  }
};

// ---------------------------------------------------------------------------

struct TransformerConfig {
  std::size_t d = 128;
  std::size_t heads = 4;
  std::size_t d_ff = 256;
  std::size_t blocks = 2;
};

/// Pre-norm encoder block without positional encodings:
///   h   = x + MHSA(LN1(x)) Wo
///   out = h + FF(LN2(h))
struct TransformerBlock {
  Tensor wq, wk, wv, wo;  // [d, d]; head h owns columns [h*dh, (h+1)*dh)
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  LinearLayer ff1, ff2;
  std::size_t heads = 1;

  struct Output {
    Tensor out;               // [m, d]
    std::vector<real> attn;   // [heads, m, m], row-major
  };

  static void declare(ArchSpec& spec, const std::string& prefix, const TransformerConfig& cfg) {
    if (cfg.heads == 0 || cfg.d % cfg.heads != 0)
      throw std::invalid_argument("transformer: d=" + std::to_string(cfg.d) + " is not divisible by heads=" +
                                  std::to_string(cfg.heads));
    for (const char* n : {".wq", ".wk", ".wv", ".wo"}) spec.push_back({prefix + n, {cfg.d, cfg.d}, InitKind::xavier_uniform});
    spec.push_back({prefix + ".ln1.g", {cfg.d}, InitKind::ones});
    spec.push_back({prefix + ".ln1.b", {cfg.d}, InitKind::zeros});
    spec.push_back({prefix + ".ln2.g", {cfg.d}, InitKind::ones});
    spec.push_back({prefix + ".ln2.b", {cfg.d}, InitKind::zeros});
    LinearLayer::declare(spec, prefix + ".ff1", cfg.d, cfg.d_ff);
    LinearLayer::declare(spec, prefix + ".ff2", cfg.d_ff, cfg.d);
  }

  static TransformerBlock bind(const ModelParams& p, const std::string& prefix, std::size_t heads) {
    TransformerBlock b{p.at(prefix + ".wq"),    p.at(prefix + ".wk"),    p.at(prefix + ".wv"),
                       p.at(prefix + ".wo"),    p.at(prefix + ".ln1.g"), p.at(prefix + ".ln1.b"),
                       p.at(prefix + ".ln2.g"), p.at(prefix + ".ln2.b"), LinearLayer::bind(p, prefix + ".ff1"),
                       LinearLayer::bind(p, prefix + ".ff2"),            heads};
    if (heads == 0 || b.dim() % heads != 0)
      throw std::invalid_argument("transformer: d=" + std::to_string(b.dim()) + " is not divisible by heads=" +
                                  std::to_string(heads));
    return b;
  }

  std::size_t dim() const { return wq.dim(0); }

  Output forward(const Tensor& x) const {
    const std::size_t d = dim();
    if (x.rank() != 2 || x.dim(1) != d)
      throw ShapeError("mhsa_forward", "[m, " + std::to_string(d) + "]", shape_str(x.shape()));
    const std::size_t m = x.dim(0), dh = d / heads;
    const real inv_scale = real(1) / std::sqrt(static_cast<real>(dh));

    Tensor h = broadcast_add_row(broadcast_mul_row(layernorm_lastdim(x), ln1_gain), ln1_bias);
    Tensor q = matmul(h, wq), k = matmul(h, wk), v = matmul(h, wv);

    Output result;
    result.attn.reserve(heads * m * m);
    std::vector<Tensor> head_out;
    for (std::size_t i = 0; i < heads; ++i) {
      Tensor qh = slice(q, 1, i * dh, (i + 1) * dh);
      Tensor kh = slice(k, 1, i * dh, (i + 1) * dh);
      Tensor vh = slice(v, 1, i * dh, (i + 1) * dh);
      Tensor a = softmax_lastdim(scale(matmul(qh, transpose_last2(kh)), inv_scale));
      result.attn.insert(result.attn.end(), a.values().begin(), a.values().end());
      head_out.push_back(matmul(a, vh));
    }
    Tensor attended = heads == 1 ? head_out[0] : concat_lastdim(head_out);
    Tensor x1 = add(x, matmul(attended, wo));

    Tensor h2 = broadcast_add_row(broadcast_mul_row(layernorm_lastdim(x1), ln2_gain), ln2_bias);
    result.out = add(x1, ff2.forward(gelu(ff1.forward(h2))));
    return result;
  }
};

inline TransformerBlock::Output mhsa_forward(const TransformerBlock& block, const Tensor& tokens) {
  return block.forward(tokens);
}

}  // namespace haaf
