#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "json.hpp"
#include "sit/optim.hpp"

namespace sit {

/// Loss coefficients of the distillation objective.
struct DistillWeights {
  double lambda_token = 2.0;
  double lambda_logits = 2.0;
  double lambda_hard = 0.0;

  /// All coefficients non-negative; a positive lambda_hard needs a hard-label
  /// teacher.
  void validate(bool has_hard_teacher) const;
};

/// Optimization schedule. Learning rates scale linearly with batch size
/// against lr_reference_batch.
struct TrainPlan {
  int epochs = 30;
  int batch_size = 64;
  double base_lr_backbone = 2e-4;
  double base_lr_recalib = 1e-3;
  double lr_reference_batch = 1024.0;
  double weight_decay = 0.05;
  int warmup_epochs = 5;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kAdamW;

  double lr_backbone() const { return base_lr_backbone * batch_size / lr_reference_batch; }
  double lr_recalib() const { return base_lr_recalib * batch_size / lr_reference_batch; }
  void validate() const;
};

void to_json(nlohmann::json& j, const DistillWeights& w);
void from_json(const nlohmann::json& j, DistillWeights& w);
void to_json(nlohmann::json& j, const TrainPlan& p);
void from_json(const nlohmann::json& j, TrainPlan& p);

}  // namespace sit
