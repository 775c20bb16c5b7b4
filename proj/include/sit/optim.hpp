#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "sit/tensor.hpp"

namespace sit {

enum class OptimizerKind { kSgdMomentum, kAdamW };

OptimizerKind optimizer_kind_from_string(const std::string& name);
std::string to_string(OptimizerKind kind);

/// A set of parameters sharing one learning rate.
template <typename Scalar>
struct ParamGroup {
  std::string name;
  std::vector<Tensor<Scalar>> params;
  double lr = 1e-3;
  double weight_decay = 0.0;
};

/// SGD with momentum or AdamW (decoupled decay) over independent groups.
template <typename Scalar>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::vector<ParamGroup<Scalar>> groups, double momentum = 0.9,
            double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : kind_(kind), groups_(std::move(groups)), momentum_(momentum), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& g : groups_) {
      std::vector<Mat<Scalar>> first, second;
      for (const auto& p : g.params) {
        first.push_back(Mat<Scalar>::Zero(p.rows(), p.cols()));
        if (kind_ == OptimizerKind::kAdamW) second.push_back(Mat<Scalar>::Zero(p.rows(), p.cols()));
      }
      first_moment_.push_back(std::move(first));
      second_moment_.push_back(std::move(second));
      base_lr_.push_back(g.lr);
    }
  }

  OptimizerKind kind() const { return kind_; }
  long step_count() const { return step_count_; }
  std::vector<ParamGroup<Scalar>>& groups() { return groups_; }
  const std::vector<ParamGroup<Scalar>>& groups() const { return groups_; }

  /// Sets each group's lr to base_lr * factor.
  void set_lr_factor(double factor) {
    for (std::size_t i = 0; i < groups_.size(); ++i) groups_[i].lr = base_lr_[i] * factor;
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.zero_grad();
  }

  /// Parameters without a gradient are skipped.
  void step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      auto& group = groups_[gi];
      const Scalar lr = static_cast<Scalar>(group.lr);
      const Scalar wd = static_cast<Scalar>(group.weight_decay);
      for (std::size_t pi = 0; pi < group.params.size(); ++pi) {
        auto& p = group.params[pi];
        if (!p.has_grad()) continue;
        auto& w = p.mutable_value();
        const auto& g = p.grad();
        auto& m = first_moment_[gi][pi];
        if (kind_ == OptimizerKind::kSgdMomentum) {
          m = static_cast<Scalar>(momentum_) * m + g + wd * w;
          w -= lr * m;
        } else {
          auto& v = second_moment_[gi][pi];
          m = static_cast<Scalar>(beta1_) * m + static_cast<Scalar>(1 - beta1_) * g;
          v = static_cast<Scalar>(beta2_) * v + static_cast<Scalar>(1 - beta2_) * g.cwiseAbs2();
          w *= Scalar(1) - lr * wd;
          const Scalar step_size = lr / static_cast<Scalar>(bc1);
          const Scalar denom_scale = static_cast<Scalar>(1.0 / std::sqrt(bc2));
          w.array() -= step_size * m.array() / (v.array().sqrt() * denom_scale + static_cast<Scalar>(eps_));
        }
      }
    }
  }

 private:
  OptimizerKind kind_;
  std::vector<ParamGroup<Scalar>> groups_;
  std::vector<std::vector<Mat<Scalar>>> first_moment_;
  std::vector<std::vector<Mat<Scalar>>> second_moment_;
  std::vector<double> base_lr_;
  double momentum_, beta1_, beta2_, eps_;
  long step_count_ = 0;
};

/// Linear warmup then cosine decay to zero; returns the lr multiplier.
inline double warmup_cosine(long step, long warmup_steps, long total_steps) {
  if (total_steps <= 0) return 1.0;
  if (step < warmup_steps) return static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const double span = static_cast<double>(std::max(1L, total_steps - warmup_steps));
  const double t = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace sit
