#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "sit/checkpoint.hpp"
#include "sit/dataset.hpp"
#include "sit/optim.hpp"
#include "sit/plan.hpp"
#include "sit/recalibration.hpp"
#include "sit/vit.hpp"

namespace sit {

// ---------------------------------------------------------------- losses

/// Block-to-block feature mimicking: the mean squared difference over
/// layers, tokens and channels.
template <typename Scalar>
Tensor<Scalar> token_loss(const std::vector<Tensor<Scalar>>& student, const std::vector<Tensor<Scalar>>& teacher) {
  if (student.empty() || student.size() != teacher.size())
    throw ShapeError("token_loss: " + std::to_string(student.size()) + " student layers vs " +
                     std::to_string(teacher.size()) + " teacher layers");
  std::vector<Tensor<Scalar>> per_layer;
  per_layer.reserve(student.size());
  for (std::size_t l = 0; l < student.size(); ++l) {
    if (student[l].rows() != teacher[l].rows() || student[l].cols() != teacher[l].cols())
      throw ShapeError("token_loss: layer " + std::to_string(l) + " shapes differ " +
                       shapes_string(student[l], teacher[l]));
    per_layer.push_back(mse(student[l], teacher[l]));
  }
  return scale(sum(concat_rows(per_layer)), Scalar(1) / static_cast<Scalar>(per_layer.size()));
}

/// KL(softmax(student) || softmax(teacher)); the teacher side is detached.
template <typename Scalar>
Tensor<Scalar> logits_loss(const Tensor<Scalar>& student_logits, const Tensor<Scalar>& teacher_logits) {
  return kl_div(student_logits, teacher_logits.detach());
}

/// Cross-entropy of the distillation head against the auxiliary teacher's
/// argmax label.
template <typename Scalar>
Tensor<Scalar> hard_loss(const Tensor<Scalar>& distill_logits, Index teacher_label) {
  if (!distill_logits.defined()) throw std::logic_error("hard_loss: the student has no distillation head");
  return cross_entropy(distill_logits, teacher_label);
}

template <typename Scalar>
Index argmax(const Mat<Scalar>& row) {
  Index best = 0;
  row.row(0).maxCoeff(&best);
  return best;
}

/// Class prediction; with a distillation head the two heads are averaged.
template <typename Scalar>
Index predict(const ForwardResult<Scalar>& out) {
  if (out.distill_logits.defined()) return argmax<Scalar>((out.logits.value() + out.distill_logits.value()) / Scalar(2));
  return argmax<Scalar>(out.logits.value());
}

template <typename Scalar>
struct LossBreakdown {
  Tensor<Scalar> total;
  double cls = 0, token = 0, logits = 0, hard = 0;
  double total_value = 0;
  Index prediction = 0;
};

/// Outputs of the frozen teachers for one sample, computed without a graph.
template <typename Scalar>
struct TeacherTargets {
  ForwardResult<Scalar> teacher;
  std::optional<Index> hard_label;
};

template <typename Scalar>
TeacherTargets<Scalar> teacher_targets(const Mat<Scalar>& patches, const VisionTransformer<Scalar>& teacher,
                                       const VisionTransformer<Scalar>* hard_teacher = nullptr) {
  NoGradGuard no_grad;
  TeacherTargets<Scalar> t;
  t.teacher = teacher.forward(patches);
  if (hard_teacher != nullptr) t.hard_label = argmax<Scalar>(hard_teacher->forward(patches).logits.value());
  return t;
}

/// L_cls + lambda_token L_token + lambda_logits L_logits + lambda_hard L_hard
/// for one sample. Components whose weight is zero are still evaluated for
/// logging but not recorded.
template <typename Scalar>
LossBreakdown<Scalar> global_loss(const Mat<Scalar>& patches, Index label, const VisionTransformer<Scalar>& student,
                                  const RecalibrationBranch<Scalar>& branch, const TeacherTargets<Scalar>& targets,
                                  const DistillWeights& weights) {
  weights.validate(targets.hard_label.has_value());
  const ForwardResult<Scalar>& t_out = targets.teacher;
  const Index hard_label = targets.hard_label.value_or(0);
  if (t_out.block_tokens.size() != static_cast<std::size_t>(student.config().depth))
    throw ShapeError("global_loss: teacher depth differs from student depth");

  const auto s_out = student.forward(patches);
  LossBreakdown<Scalar> out;
  out.prediction = predict(s_out);

  auto weighted = [](const Tensor<Scalar>& t, double w) { return scale(t, static_cast<Scalar>(w)); };
  const auto l_cls = cross_entropy(s_out.logits, label);
  Tensor<Scalar> total = l_cls;
  out.cls = static_cast<double>(l_cls.item());

  {
    std::optional<NoGradGuard> off;
    if (weights.lambda_token == 0) off.emplace();
    const auto blocks = student.config().block_stages();
    std::vector<Tensor<Scalar>> restored;
    restored.reserve(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) restored.push_back(branch.restore(blocks[i], s_out.block_tokens[i]));
    const auto l_token = token_loss(restored, t_out.block_tokens);
    out.token = static_cast<double>(l_token.item());
    if (weights.lambda_token != 0) total = total + weighted(l_token, weights.lambda_token);
  }

  const auto l_logits = logits_loss(s_out.logits, t_out.logits);
  out.logits = static_cast<double>(l_logits.item());
  if (weights.lambda_logits != 0) total = total + weighted(l_logits, weights.lambda_logits);

  if (weights.lambda_hard != 0) {
    const auto l_hard = hard_loss(s_out.distill_logits, hard_label);
    out.hard = static_cast<double>(l_hard.item());
    total = total + weighted(l_hard, weights.lambda_hard);
  }
  out.total = total;
  out.total_value = static_cast<double>(total.item());
  return out;
}

template <typename Scalar>
LossBreakdown<Scalar> global_loss(const Mat<Scalar>& patches, Index label, const VisionTransformer<Scalar>& student,
                                  const RecalibrationBranch<Scalar>& branch, const VisionTransformer<Scalar>& teacher,
                                  const DistillWeights& weights,
                                  const VisionTransformer<Scalar>* hard_teacher = nullptr) {
  weights.validate(hard_teacher != nullptr);
  return global_loss(patches, label, student, branch, teacher_targets(patches, teacher, hard_teacher), weights);
}

// ---------------------------------------------------------------- weight inheritance

namespace detail {

inline void require_compatible(const ModelConfig& teacher, const ModelConfig& student) {
  std::vector<std::string> diffs;
  if (teacher.depth != student.depth) diffs.push_back("depth");
  if (teacher.embed_dim != student.embed_dim) diffs.push_back("embed_dim");
  if (teacher.heads != student.heads) diffs.push_back("heads");
  if (teacher.image_size != student.image_size) diffs.push_back("image_size");
  if (teacher.patch_size != student.patch_size) diffs.push_back("patch_size");
  if (teacher.channels != student.channels) diffs.push_back("channels");
  if (teacher.mlp_ratio != student.mlp_ratio) diffs.push_back("mlp_ratio");
  if (teacher.num_classes != student.num_classes) diffs.push_back("num_classes");
  if (!diffs.empty()) {
    std::string s;
    for (const auto& d : diffs) s += (s.empty() ? "" : ", ") + d;
    throw ConfigError("teacher and student disagree on: " + s);
  }
}

}  // namespace detail

/// Copies every student parameter that the teacher also has. Slimming and
/// other student-only parameters keep their fresh initialization. Returns
/// the names copied.
template <typename Scalar>
std::vector<std::string> inherit_weights(const Checkpoint& teacher, VisionTransformer<Scalar>& student) {
  detail::require_compatible(teacher.config, student.config());
  auto params = student.parameters();
  std::vector<std::string> bad, copied;
  for (const auto& p : params) {
    const TensorEntry* e = teacher.find(p.name);
    if (e != nullptr && (e->rows != p.tensor.rows() || e->cols != p.tensor.cols()))
      bad.push_back(p.name + " " + shape_string(e->rows, e->cols) + " vs " +
                    shape_string(p.tensor.rows(), p.tensor.cols()));
  }
  if (!bad.empty()) {
    std::string s;
    for (const auto& b : bad) s += (s.empty() ? "" : ", ") + b;
    throw ShapeError("inherit_weights: shape mismatch: " + s);
  }
  for (auto& p : params) {
    if (const TensorEntry* e = teacher.find(p.name)) {
      p.tensor.mutable_value() = entry_values<Scalar>(*e);
      copied.push_back(p.name);
    }
  }
  return copied;
}

template <typename Scalar>
std::vector<std::string> inherit_weights(const VisionTransformer<Scalar>& teacher, VisionTransformer<Scalar>& student) {
  return inherit_weights(make_checkpoint(teacher.config(), teacher.parameters()), student);
}

// ---------------------------------------------------------------- training

struct EpochRecord {
  int epoch = 0;
  long step = 0;
  double loss = 0, cls = 0, token = 0, logits = 0, hard = 0;
  double lr_backbone = 0, lr_recalib = 0;
  double train_accuracy = 0;
  /// Negative when no evaluation set was given.
  double eval_accuracy = -1;
  double seconds = 0;
};

void to_json(nlohmann::json& j, const EpochRecord& r);

struct TrainLog {
  std::vector<EpochRecord> epochs;
  double final_eval_accuracy() const { return epochs.empty() ? -1.0 : epochs.back().eval_accuracy; }
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Thrown when a loss turns non-finite. `dump` describes the failing batch.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, nlohmann::json dump) : std::runtime_error(what), dump(std::move(dump)) {}
  nlohmann::json dump;
};

template <typename Scalar>
Mat<Scalar> sample_patches(const Dataset& ds, std::size_t i, int patch) {
  return patchify_u8<Scalar>(ds.image(i), ds.height, ds.width, ds.channels, patch);
}

/// Fraction of correctly classified samples; samples are split across
/// `threads` workers.
template <typename Scalar>
double evaluate(const VisionTransformer<Scalar>& model, const Dataset& ds, int threads = 1) {
  if (ds.size() == 0) return 0.0;
  const std::size_t workers = static_cast<std::size_t>(std::max(1, threads));
  std::vector<std::size_t> correct(workers, 0);
  auto work = [&](std::size_t w) {
    NoGradGuard no_grad;
    for (std::size_t i = w; i < ds.size(); i += workers) {
      const auto out = model.forward(sample_patches<Scalar>(ds, i, model.config().patch_size));
      if (predict(out) == static_cast<Index>(ds.label(i))) ++correct[w];
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
  }
  return static_cast<double>(std::accumulate(correct.begin(), correct.end(), std::size_t{0})) /
         static_cast<double>(ds.size());
}

namespace detail {

inline void check_dataset(const Dataset& ds, const ModelConfig& config) {
  if (ds.height != config.image_size || ds.width != config.image_size || ds.channels != config.channels)
    throw ConfigError("dataset images are " + std::to_string(ds.height) + "x" + std::to_string(ds.width) + "x" +
                      std::to_string(ds.channels) + " but the model expects " + std::to_string(config.image_size) +
                      "x" + std::to_string(config.image_size) + "x" + std::to_string(config.channels));
  if (ds.classes != config.num_classes)
    throw ConfigError("dataset has " + std::to_string(ds.classes) + " classes but the model has " +
                      std::to_string(config.num_classes));
}

/// Shared minibatch loop. `sample_loss` builds one sample's loss graph.
template <typename Scalar, typename SampleLoss, typename Evaluate>
TrainLog run_training(const TrainPlan& plan, Optimizer<Scalar>& optimizer, const Dataset& train, int patch,
                      SampleLoss&& sample_loss, Evaluate&& evaluate_fn, const EpochCallback& on_epoch) {
  plan.validate();
  TrainLog log;
  if (train.size() == 0) throw ConfigError("training set is empty");
  const std::size_t n = train.size();
  const std::size_t batch = static_cast<std::size_t>(plan.batch_size);
  const long steps_per_epoch = static_cast<long>((n + batch - 1) / batch);
  const long total_steps = steps_per_epoch * plan.epochs;
  const long warmup_steps = steps_per_epoch * plan.warmup_epochs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffler(plan.seed ^ 0x5eed5eed5eedULL);
  long step = 0;
  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    shuffler.shuffle(order.begin(), order.end());
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += batch, ++step) {
      const std::size_t b1 = std::min(n, b0 + batch);
      const Scalar inv = Scalar(1) / static_cast<Scalar>(b1 - b0);
      optimizer.set_lr_factor(warmup_cosine(step, warmup_steps, total_steps));
      optimizer.zero_grad();
      double loss = 0, cls = 0, token = 0, logits = 0, hard = 0;
      for (std::size_t k = b0; k < b1; ++k) {
        const std::size_t i = order[k];
        const auto br = sample_loss(sample_patches<Scalar>(train, i, patch), static_cast<Index>(train.label(i)));
        if (!std::isfinite(br.total_value)) {
          nlohmann::json dump = {{"epoch", epoch}, {"step", step}, {"sample", i},
                                 {"batch", std::vector<std::size_t>(order.begin() + static_cast<long>(b0),
                                                                    order.begin() + static_cast<long>(b1))},
                                 {"loss", {{"cls", br.cls}, {"token", br.token}, {"logits", br.logits}, {"hard", br.hard}}}};
          throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step),
                                 std::move(dump));
        }
        scale(br.total, inv).backward();
        loss += br.total_value;
        cls += br.cls;
        token += br.token;
        logits += br.logits;
        hard += br.hard;
        if (br.prediction == static_cast<Index>(train.label(i))) ++correct;
      }
      optimizer.step();
      rec.loss += loss;
      rec.cls += cls;
      rec.token += token;
      rec.logits += logits;
      rec.hard += hard;
    }
    optimizer.zero_grad();
    const double inv_n = 1.0 / static_cast<double>(n);
    rec.loss *= inv_n;
    rec.cls *= inv_n;
    rec.token *= inv_n;
    rec.logits *= inv_n;
    rec.hard *= inv_n;
    rec.step = step;
    rec.train_accuracy = static_cast<double>(correct) * inv_n;
    rec.lr_backbone = optimizer.groups().front().lr;
    rec.lr_recalib = optimizer.groups().size() > 1 ? optimizer.groups()[1].lr : 0.0;
    rec.eval_accuracy = evaluate_fn();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return log;
}

}  // namespace detail

/// Supervised pretraining of a plain classifier with cross-entropy.
template <typename Scalar>
TrainLog train_teacher(const TrainPlan& plan, VisionTransformer<Scalar>& model, const Dataset& train,
                       const Dataset* eval = nullptr, const EpochCallback& on_epoch = {}, int eval_threads = 1) {
  detail::check_dataset(train, model.config());
  if (eval != nullptr) detail::check_dataset(*eval, model.config());
  Optimizer<Scalar> optimizer(plan.optimizer,
                              {{"backbone", tensors_of(model.parameters()), plan.lr_backbone(), plan.weight_decay}});
  return detail::run_training(
      plan, optimizer, train, model.config().patch_size,
      [&](const Mat<Scalar>& patches, Index label) {
        const auto out = model.forward(patches);
        LossBreakdown<Scalar> br;
        br.total = cross_entropy(out.logits, label);
        br.cls = br.total_value = static_cast<double>(br.total.item());
        br.prediction = predict(out);
        return br;
      },
      [&] { return eval != nullptr ? evaluate(model, *eval, eval_threads) : -1.0; }, on_epoch);
}

/// Trains a slimmed student against a frozen teacher. The backbone and the
/// slimming modules use lr_backbone; the recalibration branch uses
/// lr_recalib.
template <typename Scalar>
TrainLog distill(const TrainPlan& plan, const DistillWeights& weights, const VisionTransformer<Scalar>& teacher,
                 VisionTransformer<Scalar>& student, RecalibrationBranch<Scalar>& branch, const Dataset& train,
                 const Dataset* eval = nullptr, const VisionTransformer<Scalar>* hard_teacher = nullptr,
                 const EpochCallback& on_epoch = {}, int eval_threads = 1) {
  detail::require_compatible(teacher.config(), student.config());
  weights.validate(hard_teacher != nullptr);
  if (weights.lambda_hard > 0 && !student.config().use_distill_head)
    throw ConfigError("lambda_hard > 0 requires use_distill_head in the student config");
  detail::check_dataset(train, student.config());
  if (eval != nullptr) detail::check_dataset(*eval, student.config());
  Optimizer<Scalar> optimizer(plan.optimizer,
                              {{"backbone", tensors_of(student.parameters()), plan.lr_backbone(), plan.weight_decay},
                               {"recalibration", tensors_of(branch.parameters()), plan.lr_recalib(), plan.weight_decay}});
  return detail::run_training(
      plan, optimizer, train, student.config().patch_size,
      [&](const Mat<Scalar>& patches, Index label) {
        return global_loss(patches, label, student, branch, teacher, weights, hard_teacher);
      },
      [&] { return eval != nullptr ? evaluate(student, *eval, eval_threads) : -1.0; }, on_epoch);
}

}  // namespace sit
