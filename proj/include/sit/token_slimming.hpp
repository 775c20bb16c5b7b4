#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sit/config.hpp"
#include "sit/layers.hpp"

namespace sit {

/// Learnable parameters of one slimming module.
///
/// key_proj is C x C/2, queries is N_hat x C/2 (one learned query per output
/// token, independent of the input) and log_tau parameterizes the
/// temperature as tau = exp(log_tau).
template <typename Scalar>
struct TsmParams {
  Tensor<Scalar> key_proj;
  Tensor<Scalar> queries;
  Tensor<Scalar> log_tau;

  Index output_tokens() const { return queries.rows(); }
  Scalar tau() const { return std::exp(log_tau.value()(0, 0)); }

  /// Xavier-uniform maps and tau = sqrt(C/2).
  static TsmParams init(Index channels, Index output_tokens, Rng& rng) {
    TsmParams p;
    const Index half = channels / 2;
    p.key_proj = Tensor<Scalar>::parameter(rng.xavier<Scalar>(channels, half));
    p.queries = Tensor<Scalar>::parameter(rng.xavier<Scalar>(output_tokens, half));
    Mat<Scalar> t(1, 1);
    t(0, 0) = static_cast<Scalar>(0.5 * std::log(static_cast<double>(half)));
    p.log_tau = Tensor<Scalar>::parameter(std::move(t));
    return p;
  }
};

/// The N_hat x N aggregation matrix A_hat. With SlimAxis::kOutput every
/// column sums to one.
template <typename Scalar>
struct SlimMatrix {
  Tensor<Scalar> weights;

  Index output_tokens() const { return weights.rows(); }
  Index input_tokens() const { return weights.cols(); }
};

/// A_hat = softmax(W_q gelu(X W_k)^T / tau), normalized over the output axis
/// by default.
template <typename Scalar>
SlimMatrix<Scalar> tsm_attention(const Tensor<Scalar>& tokens, const TsmParams<Scalar>& params,
                                 SlimAxis axis = SlimAxis::kOutput) {
  if (tokens.cols() != params.key_proj.rows())
    throw ShapeError("tsm_attention: token channels differ from key projection " +
                     shapes_string(tokens, params.key_proj));
  const auto keys = gelu(matmul(tokens, params.key_proj));
  const auto logits = divide_by(matmul_nt(params.queries, keys), exp(params.log_tau));
  return {softmax(logits, axis == SlimAxis::kOutput ? 0 : 1)};
}

/// X_hat = A_hat X.
template <typename Scalar>
Tensor<Scalar> slim(const SlimMatrix<Scalar>& a_hat, const Tensor<Scalar>& tokens) {
  if (a_hat.input_tokens() != tokens.rows())
    throw ShapeError("slim: aggregation matrix and tokens disagree " + shapes_string(a_hat.weights, tokens));
  return matmul(a_hat.weights, tokens);
}

/// Keeps the `keep` highest-scoring tokens in their original order. Ties go
/// to the lower index. Comparison baseline only.
template <typename Scalar>
Mat<Scalar> hard_drop_baseline(const Mat<Scalar>& tokens, const std::vector<Scalar>& scores, Index keep) {
  if (static_cast<Index>(scores.size()) != tokens.rows())
    throw ShapeError("hard_drop_baseline: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(tokens.rows()) + " tokens");
  if (keep < 1 || keep > tokens.rows()) throw std::invalid_argument("hard_drop_baseline: keep out of range");
  for (Scalar s : scores)
    if (!std::isfinite(s)) throw NumericError("hard_drop_baseline: non-finite score");
  std::vector<Index> order(scores.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return scores[a] > scores[b]; });
  order.resize(static_cast<std::size_t>(keep));
  std::sort(order.begin(), order.end());
  Mat<Scalar> out(keep, tokens.cols());
  for (Index i = 0; i < keep; ++i) out.row(i) = tokens.row(order[static_cast<std::size_t>(i)]);
  return out;
}

/// The 0/1 selection matrix equivalent to hard_drop_baseline.
template <typename Scalar>
Mat<Scalar> hard_drop_matrix(const std::vector<Scalar>& scores, Index keep) {
  const Index n = static_cast<Index>(scores.size());
  Mat<Scalar> ids(n, 1);
  for (Index i = 0; i < n; ++i) ids(i, 0) = static_cast<Scalar>(i);
  const Mat<Scalar> kept = hard_drop_baseline(ids, scores, keep);
  Mat<Scalar> out = Mat<Scalar>::Zero(keep, n);
  for (Index i = 0; i < keep; ++i) out(i, static_cast<Index>(kept(i, 0))) = Scalar(1);
  return out;
}

enum class TsmInit { kXavier, kIdentity };

/// One slimming module placed at a stage boundary. An identity module (only
/// valid when it keeps every token) passes tokens through unchanged.
template <typename Scalar>
class TokenSlimmer {
 public:
  TokenSlimmer() = default;
  TokenSlimmer(Index channels, Index input_tokens, Index output_tokens, SlimAxis axis, TsmInit init, Rng& rng)
      : params_(TsmParams<Scalar>::init(channels, output_tokens, rng)),
        input_tokens_(input_tokens),
        axis_(axis),
        identity_(init == TsmInit::kIdentity) {
    if (output_tokens > input_tokens)
      throw ConfigError("token slimming must not increase the token count (" + std::to_string(input_tokens) + " -> " +
                        std::to_string(output_tokens) + ")");
    if (identity_ && output_tokens != input_tokens)
      throw ConfigError("identity slimming requires keep ratio 1");
  }

  /// Slims a content-token matrix (class token already removed).
  std::pair<Tensor<Scalar>, SlimMatrix<Scalar>> operator()(const Tensor<Scalar>& content) const {
    if (content.rows() != input_tokens_)
      throw ShapeError("token slimmer expects " + std::to_string(input_tokens_) + " tokens, got " +
                       std::to_string(content.rows()));
    if (identity_) {
      return {content, {Tensor<Scalar>::constant(Mat<Scalar>::Identity(input_tokens_, input_tokens_))}};
    }
    auto a_hat = tsm_attention(content, params_, axis_);
    auto slimmed = slim(a_hat, content);
    return {std::move(slimmed), std::move(a_hat)};
  }

  const TsmParams<Scalar>& params() const { return params_; }
  TsmParams<Scalar>& params() { return params_; }
  Index input_tokens() const { return input_tokens_; }
  Index output_tokens() const { return params_.output_tokens(); }
  bool is_identity() const { return identity_; }

  void collect(const std::string& prefix, ParamList<Scalar>& out) const {
    out.push_back({prefix + ".key_proj", params_.key_proj, false});
    out.push_back({prefix + ".queries", params_.queries, false});
    out.push_back({prefix + ".log_tau", params_.log_tau, false});
  }

 private:
  TsmParams<Scalar> params_;
  Index input_tokens_ = 0;
  SlimAxis axis_ = SlimAxis::kOutput;
  bool identity_ = false;
};

}  // namespace sit
