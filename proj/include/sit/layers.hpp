#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sit/ops.hpp"
#include "sit/rng.hpp"

namespace sit {

template <typename Scalar>
struct NamedParam {
  std::string name;
  Tensor<Scalar> tensor;
  bool training_only = false;
};

template <typename Scalar>
using ParamList = std::vector<NamedParam<Scalar>>;

template <typename Scalar>
std::vector<Tensor<Scalar>> tensors_of(const ParamList<Scalar>& params) {
  std::vector<Tensor<Scalar>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

/// y = x W + b with W stored in x out.
template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  Linear() = default;
  Linear(Index in, Index out, Rng& rng)
      : weight(Tensor<Scalar>::parameter(rng.xavier<Scalar>(in, out))),
        bias(Tensor<Scalar>::parameter(Mat<Scalar>::Zero(1, out))) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return add_row(matmul(x, weight), bias); }

  void collect(const std::string& prefix, ParamList<Scalar>& out, bool training_only = false) const {
    out.push_back({prefix + ".weight", weight, training_only});
    out.push_back({prefix + ".bias", bias, training_only});
  }
};

template <typename Scalar>
struct LayerNorm {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;

  LayerNorm() = default;
  explicit LayerNorm(Index dim)
      : gamma(Tensor<Scalar>::parameter(Mat<Scalar>::Ones(1, dim))),
        beta(Tensor<Scalar>::parameter(Mat<Scalar>::Zero(1, dim))) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return layernorm(x, gamma, beta); }

  void collect(const std::string& prefix, ParamList<Scalar>& out) const {
    out.push_back({prefix + ".gamma", gamma, false});
    out.push_back({prefix + ".beta", beta, false});
  }
};

/// Two-layer perceptron over channels with a GELU in between.
template <typename Scalar>
struct Mlp {
  Linear<Scalar> fc1;
  Linear<Scalar> fc2;

  Mlp() = default;
  Mlp(Index dim, Index hidden, Rng& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return fc2(gelu(fc1(x))); }

  void collect(const std::string& prefix, ParamList<Scalar>& out, bool training_only = false) const {
    fc1.collect(prefix + ".fc1", out, training_only);
    fc2.collect(prefix + ".fc2", out, training_only);
  }
};

/// Multi-head self-attention over a T x C token matrix.
template <typename Scalar>
struct Attention {
  Linear<Scalar> qkv;
  Linear<Scalar> proj;
  int heads = 1;

  Attention() = default;
  Attention(Index dim, int num_heads, Rng& rng) : qkv(dim, 3 * dim, rng), proj(dim, dim, rng), heads(num_heads) {}

  /// Appends each head's T x T attention to `attention` when it is non-null.
  Tensor<Scalar> operator()(const Tensor<Scalar>& x, std::vector<Mat<Scalar>>* attention = nullptr) const {
    const Index dim = x.cols();
    const Index head_dim = dim / heads;
    const Scalar scale_factor = Scalar(1) / std::sqrt(static_cast<Scalar>(head_dim));
    const Tensor<Scalar> packed = qkv(x);
    std::vector<Tensor<Scalar>> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      const auto q = slice_cols(packed, h * head_dim, head_dim);
      const auto k = slice_cols(packed, dim + h * head_dim, head_dim);
      const auto v = slice_cols(packed, 2 * dim + h * head_dim, head_dim);
      const auto weights = softmax(scale(matmul_nt(q, k), scale_factor), 1);
      if (attention != nullptr) attention->push_back(weights.value());
      outs.push_back(matmul(weights, v));
    }
    return proj(heads == 1 ? outs.front() : concat_cols(outs));
  }

  void collect(const std::string& prefix, ParamList<Scalar>& out) const {
    qkv.collect(prefix + ".qkv", out);
    proj.collect(prefix + ".proj", out);
  }
};

template <typename Scalar>
struct BlockOutput {
  Tensor<Scalar> tokens;
  /// Per-head attention, empty unless requested.
  std::vector<Mat<Scalar>> attention;
};

/// Pre-norm transformer block: x + MSA(LN(x)), then x + MLP(LN(x)).
template <typename Scalar>
struct TransformerBlock {
  LayerNorm<Scalar> norm1;
  Attention<Scalar> attn;
  LayerNorm<Scalar> norm2;
  Mlp<Scalar> mlp;

  TransformerBlock() = default;
  TransformerBlock(Index dim, int heads, int mlp_ratio, Rng& rng)
      : norm1(dim), attn(dim, heads, rng), norm2(dim), mlp(dim, dim * mlp_ratio, rng) {}

  BlockOutput<Scalar> operator()(const Tensor<Scalar>& x, bool keep_attention = false) const {
    BlockOutput<Scalar> out;
    const auto h = x + attn(norm1(x), keep_attention ? &out.attention : nullptr);
    out.tokens = h + mlp(norm2(h));
    return out;
  }

  void collect(const std::string& prefix, ParamList<Scalar>& out) const {
    norm1.collect(prefix + ".norm1", out);
    attn.collect(prefix + ".attn", out);
    norm2.collect(prefix + ".norm2", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

}  // namespace sit
