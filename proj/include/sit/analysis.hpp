#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "sit/config.hpp"
#include "sit/vit.hpp"

namespace sit {

// ---------------------------------------------------------------- cost model

struct BlockCost {
  int stage = 0;
  /// Tokens seen by the block, class token included.
  long tokens = 0;
  /// 4 T C^2: qkv and output projections.
  double msa_linear = 0;
  /// 2 T^2 C: scores and weighted values.
  double msa_attention = 0;
  /// 2 T C (ratio C).
  double mlp = 0;
  double total() const { return msa_linear + msa_attention + mlp; }
};

/// Inference cost in multiply-accumulates (MACs). FLOPs are reported as
/// 2 x MACs.
struct CostReport {
  double stem = 0;
  std::vector<BlockCost> blocks;
  /// One entry per slimming module.
  std::vector<double> tsm;
  double head = 0;
  /// The recalibration branch only runs in training.
  double recalibration = 0;
  long parameters = 0;

  double total_macs() const;
  double total_flops() const { return 2.0 * total_macs(); }
};

/// Pure function of the config; nothing is allocated or initialized.
CostReport flops(const ModelConfig& config);

/// Parameter count of the inference model (backbone, heads, slimmers).
long parameter_count(const ModelConfig& config);

void to_json(nlohmann::json& j, const BlockCost& b);
void to_json(nlohmann::json& j, const CostReport& r);

// ---------------------------------------------------------------- throughput

struct BenchResult {
  double images_per_sec = 0;
  int batch = 0;
  int warmup = 0;
  int iters = 0;
  int threads = 1;
  std::vector<double> seconds_per_iter;
};

void to_json(nlohmann::json& j, const BenchResult& b);

/// Median images/sec of batched inference. Each iteration classifies `batch`
/// inputs (cycling through `inputs`), split across `threads` workers.
template <typename Scalar>
BenchResult bench(const VisionTransformer<Scalar>& model, const std::vector<Mat<Scalar>>& inputs, int batch, int warmup,
                  int iters, int threads = 1) {
  if (inputs.empty() || batch < 1 || iters < 1) throw std::invalid_argument("bench: need inputs, batch >= 1, iters >= 1");
  BenchResult r;
  r.batch = batch;
  r.warmup = warmup;
  r.iters = iters;
  r.threads = std::max(1, threads);
  const std::size_t workers = static_cast<std::size_t>(r.threads);
  volatile Index sink = 0;
  auto run_batch = [&] {
    auto work = [&](std::size_t w) {
      NoGradGuard no_grad;
      Index acc = 0;
      for (std::size_t i = w; i < static_cast<std::size_t>(batch); i += workers) {
        const auto out = model.forward(inputs[i % inputs.size()]);
        Index best = 0;
        out.logits.value().row(0).maxCoeff(&best);
        acc += best;
      }
      sink = sink + acc;
    };
    if (workers == 1) {
      work(0);
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    }
  };
  for (int i = 0; i < warmup; ++i) run_batch();
  for (int i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run_batch();
    r.seconds_per_iter.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  auto sorted = r.seconds_per_iter;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  const double median = m % 2 == 1 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  r.images_per_sec = static_cast<double>(batch) / median;
  return r;
}

// ---------------------------------------------------------------- diagnostics

enum class SimilarityMeasure { kPearson, kCosine };

/// Correlation of two equal-length vectors; 0 when either has zero spread.
template <typename DerivedA, typename DerivedB>
double similarity(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                  SimilarityMeasure measure = SimilarityMeasure::kPearson) {
  Eigen::VectorXd x = a.template cast<double>().reshaped();
  Eigen::VectorXd y = b.template cast<double>().reshaped();
  if (measure == SimilarityMeasure::kPearson) {
    x.array() -= x.mean();
    y.array() -= y.mean();
  }
  const double nx = x.norm(), ny = y.norm();
  if (nx == 0.0 || ny == 0.0) return 0.0;
  return x.dot(y) / (nx * ny);
}

/// For each k, the fraction of tokens (rows) whose similarity with at least
/// k other tokens is >= threshold.
template <typename Derived>
std::vector<double> token_similarity_stats(const Eigen::MatrixBase<Derived>& tokens, double threshold = 0.7,
                                           const std::vector<int>& k_list = {4, 8, 16},
                                           SimilarityMeasure measure = SimilarityMeasure::kPearson) {
  const Index n = tokens.rows();
  Eigen::MatrixXd x = tokens.template cast<double>();
  if (measure == SimilarityMeasure::kPearson) x = x.colwise() - x.rowwise().mean();
  Eigen::VectorXd norms = x.rowwise().norm();
  for (Index i = 0; i < n; ++i)
    if (norms(i) > 0.0) x.row(i) /= norms(i);
  const Eigen::MatrixXd corr = x * x.transpose();
  std::vector<int> similar(static_cast<std::size_t>(n), 0);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      if (i != j && norms(i) > 0.0 && norms(j) > 0.0 && corr(i, j) >= threshold) ++similar[static_cast<std::size_t>(i)];
  std::vector<double> out;
  for (int k : k_list) {
    const auto hits = std::count_if(similar.begin(), similar.end(), [k](int c) { return c >= k; });
    out.push_back(n == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(n));
  }
  return out;
}

/// Head-averaged attention rows of the selected query tokens.
template <typename Scalar>
Eigen::MatrixXd attention_focus(const std::vector<Mat<Scalar>>& heads, const std::vector<Index>& token_ids) {
  if (heads.empty()) throw std::invalid_argument("attention_focus: no attention retained");
  const Index t = heads.front().rows();
  Eigen::MatrixXd mean_attn = Eigen::MatrixXd::Zero(t, heads.front().cols());
  for (const auto& h : heads) mean_attn += h.template cast<double>();
  mean_attn /= static_cast<double>(heads.size());
  Eigen::MatrixXd out(static_cast<Index>(token_ids.size()), mean_attn.cols());
  for (std::size_t k = 0; k < token_ids.size(); ++k) {
    const Index id = token_ids[k];
    if (id < 0 || id >= t)
      throw std::out_of_range("attention_focus: token " + std::to_string(id) + " outside [0, " + std::to_string(t) + ")");
    out.row(static_cast<Index>(k)) = mean_attn.row(id);
  }
  return out;
}

/// Per-original-token contribution at one stage, on the patch grid.
struct ScoreMap {
  int stage = 0;
  int grid_height = 0;
  int grid_width = 0;
  std::vector<double> values;
};

/// Contribution maps for stage 0 (all ones) and after every slimming step.
///
/// The aggregation matrices are composed (A_s ... A_1), each row of the
/// product is normalized to the composition weights of one output token, and
/// original token j scores the sum of its weights over all outputs,
/// rescaled so the largest score is 1.
template <typename Scalar>
std::vector<ScoreMap> score_map(const std::vector<Mat<Scalar>>& slim_matrices, int grid_height, int grid_width) {
  const Index n = static_cast<Index>(grid_height) * grid_width;
  std::vector<ScoreMap> out;
  out.push_back({0, grid_height, grid_width, std::vector<double>(static_cast<std::size_t>(n), 1.0)});
  Eigen::MatrixXd composed = Eigen::MatrixXd::Identity(n, n);
  for (std::size_t s = 0; s < slim_matrices.size(); ++s) {
    const auto& a = slim_matrices[s];
    if (a.cols() != composed.rows())
      throw ShapeError("score_map: matrix " + std::to_string(s + 1) + " has " + std::to_string(a.cols()) +
                       " inputs, expected " + std::to_string(composed.rows()));
    composed = a.template cast<double>() * composed;
    Eigen::MatrixXd rows = composed;
    for (Index i = 0; i < rows.rows(); ++i) {
      const double total = rows.row(i).sum();
      if (total > 0.0) rows.row(i) /= total;
    }
    Eigen::VectorXd contrib = rows.colwise().sum().transpose();
    const double peak = contrib.maxCoeff();
    if (peak > 0.0) contrib /= peak;
    out.push_back({static_cast<int>(s + 1), grid_height, grid_width,
                   std::vector<double>(contrib.data(), contrib.data() + contrib.size())});
  }
  return out;
}

void to_json(nlohmann::json& j, const ScoreMap& m);

/// Plain-text PGM (P2), max value 255, one row of the patch grid per line.
std::string to_pgm(const ScoreMap& map);

namespace detail {

inline Eigen::MatrixXd centered(const Eigen::MatrixXd& x) { return x.rowwise() - x.colwise().mean(); }

}  // namespace detail

/// Linear CKA between two representations of the same n samples.
template <typename DerivedA, typename DerivedB>
double cka(const Eigen::MatrixBase<DerivedA>& feats_a, const Eigen::MatrixBase<DerivedB>& feats_b) {
  if (feats_a.rows() != feats_b.rows())
    throw ShapeError("cka: sample counts differ " + shapes_string(feats_a, feats_b));
  if (feats_a.rows() < 2) throw std::invalid_argument("cka: need at least two samples");
  const Eigen::MatrixXd a = detail::centered(feats_a.template cast<double>());
  const Eigen::MatrixXd b = detail::centered(feats_b.template cast<double>());
  // With centered features, tr(K H L H) = ||B^T A||_F^2 for K = AA^T, L = BB^T.
  const double ab = (b.transpose() * a).squaredNorm();
  const double aa = (a.transpose() * a).norm();
  const double bb = (b.transpose() * b).norm();
  if (aa == 0.0 || bb == 0.0) throw NumericError("cka: zero-norm (constant) features");
  return ab / (aa * bb);
}

}  // namespace sit
