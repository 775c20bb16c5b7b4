#include "sit/plan.hpp"

#include "sit/config.hpp"

namespace sit {

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "adamw") return OptimizerKind::kAdamW;
  if (name == "sgd") return OptimizerKind::kSgdMomentum;
  throw ConfigError("unknown optimizer '" + name + "' (expected adamw or sgd)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kAdamW ? "adamw" : "sgd"; }

void DistillWeights::validate(bool has_hard_teacher) const {
  if (lambda_token < 0 || lambda_logits < 0 || lambda_hard < 0)
    throw ConfigError("distillation weights must be non-negative");
  if (lambda_hard > 0 && !has_hard_teacher) throw ConfigError("lambda_hard > 0 requires a hard-label teacher");
}

void TrainPlan::validate() const {
  if (epochs < 0) throw ConfigError("train.epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (base_lr_backbone < 0 || base_lr_recalib < 0) throw ConfigError("learning rates must be non-negative");
  if (lr_reference_batch <= 0) throw ConfigError("train.lr_reference_batch must be positive");
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be non-negative");
  if (warmup_epochs < 0) throw ConfigError("train.warmup_epochs must be non-negative");
}

void to_json(nlohmann::json& j, const DistillWeights& w) {
  j = {{"lambda_token", w.lambda_token}, {"lambda_logits", w.lambda_logits}, {"lambda_hard", w.lambda_hard}};
}

void from_json(const nlohmann::json& j, DistillWeights& w) {
  reject_unknown_fields(j, {"lambda_token", "lambda_logits", "lambda_hard"}, "distill");
  DistillWeights d;
  w.lambda_token = j.value("lambda_token", d.lambda_token);
  w.lambda_logits = j.value("lambda_logits", d.lambda_logits);
  w.lambda_hard = j.value("lambda_hard", d.lambda_hard);
}

void to_json(nlohmann::json& j, const TrainPlan& p) {
  j = {{"epochs", p.epochs},
       {"batch_size", p.batch_size},
       {"base_lr_backbone", p.base_lr_backbone},
       {"base_lr_recalib", p.base_lr_recalib},
       {"lr_reference_batch", p.lr_reference_batch},
       {"weight_decay", p.weight_decay},
       {"warmup_epochs", p.warmup_epochs},
       {"seed", p.seed},
       {"optimizer", to_string(p.optimizer)}};
}

void from_json(const nlohmann::json& j, TrainPlan& p) {
  reject_unknown_fields(j,
                        {"epochs", "batch_size", "base_lr_backbone", "base_lr_recalib", "lr_reference_batch",
                         "weight_decay", "warmup_epochs", "seed", "optimizer"},
                        "train");
  TrainPlan d;
  p.epochs = j.value("epochs", d.epochs);
  p.batch_size = j.value("batch_size", d.batch_size);
  p.base_lr_backbone = j.value("base_lr_backbone", d.base_lr_backbone);
  p.base_lr_recalib = j.value("base_lr_recalib", d.base_lr_recalib);
  p.lr_reference_batch = j.value("lr_reference_batch", d.lr_reference_batch);
  p.weight_decay = j.value("weight_decay", d.weight_decay);
  p.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
  p.seed = j.value("seed", d.seed);
  p.optimizer = optimizer_kind_from_string(j.value("optimizer", std::string("adamw")));
}

}  // namespace sit
