#include "doctest.h"

#include <cmath>
#include <cstring>

#include "oracles.hpp"
#include "sit/distillation.hpp"
#include "sit/grad_check.hpp"

using namespace sit;

namespace {

ModelConfig tiny_student() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.channels = 1;
  c.embed_dim = 16;
  c.heads = 2;
  c.depth = 4;
  c.stages = {1, 1, 1, 1};
  c.keep_ratio = 0.5;
  c.num_classes = 3;
  return c;
}

Dataset tiny_dataset(int per_class, std::uint64_t seed) {
  SynthSpec spec;
  spec.classes = 3;
  spec.samples_per_class = per_class;
  spec.size = 16;
  spec.seed = seed;
  spec.noise = 20;
  return gen_synth(spec);
}

std::vector<double> row_of(const Tensord& t) { return {t.value().data(), t.value().data() + t.size()}; }

}  // namespace

TEST_CASE("token_loss matches the oracle and vanishes on identical inputs") {
  Rng rng(1);
  std::vector<Tensord> s, t;
  std::vector<oracle::Matrix> so, to;
  for (int l = 0; l < 3; ++l) {
    s.push_back(Tensord::constant(rng.normal_matrix<double>(5, 4)));
    t.push_back(Tensord::constant(rng.normal_matrix<double>(5, 4)));
    so.push_back(oracle::from(s.back().value()));
    to.push_back(oracle::from(t.back().value()));
  }
  CHECK(token_loss(s, t).item() == doctest::Approx(oracle::token_loss(so, to)).epsilon(1e-12));
  CHECK(token_loss(s, s).item() == 0.0);
  std::vector<Tensord> short_t(t.begin(), t.begin() + 2);
  CHECK_THROWS_AS(token_loss(s, short_t), ShapeError);
}

TEST_CASE("logits_loss: closed form, zero on equality, oracle") {
  Mat<double> p(1, 2), q(1, 2);
  p << 0.0, 0.0;
  q << 0.0, std::log(3.0);
  CHECK(logits_loss(Tensord::constant(p), Tensord::constant(q)).item() ==
        doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0)).epsilon(1e-12));
  CHECK(logits_loss(Tensord::constant(p), Tensord::constant(q)).item() == doctest::Approx(0.1438).epsilon(1e-3));
  CHECK(std::abs(logits_loss(Tensord::constant(q), Tensord::constant(q)).item()) < 1e-15);
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = Tensord::constant(rng.normal_matrix<double>(1, 7, 2.0));
    const auto b = Tensord::constant(rng.normal_matrix<double>(1, 7, 2.0));
    const double got = logits_loss(a, b).item();
    CHECK(got == doctest::Approx(oracle::kl(row_of(a), row_of(b))).epsilon(1e-9));
    CHECK(got >= -1e-12);
  }
}

TEST_CASE("logits_loss never sends gradient to the teacher") {
  Rng rng(3);
  auto s = Tensord::parameter(rng.normal_matrix<double>(1, 5));
  auto t = Tensord::parameter(rng.normal_matrix<double>(1, 5));
  logits_loss(s, t).backward();
  CHECK(s.has_grad());
  CHECK_FALSE(t.has_grad());
  CHECK(grad_check<double>([&] { return logits_loss(s, t); }, {s}) < 1e-6);
}

TEST_CASE("hard_loss: uniform logits give ln K; missing head raises") {
  const auto z = Tensord::constant(Mat<double>::Zero(1, 10));
  CHECK(hard_loss(z, 3).item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  CHECK_THROWS_AS(hard_loss(Tensord{}, 0), std::logic_error);
  Rng rng(4);
  const auto l = Tensord::constant(rng.normal_matrix<double>(1, 6));
  CHECK(hard_loss(l, 2).item() == doctest::Approx(oracle::cross_entropy(row_of(l), 2)).epsilon(1e-12));
}

TEST_CASE("global_loss: weighted sum of its parts") {
  Rng rng(5);
  ModelConfig sc = tiny_student();
  sc.use_distill_head = true;
  VisionTransformer<double> student(sc, rng);
  VisionTransformer<double> teacher(sc.teacher(), rng);
  ModelConfig hc = sc.teacher();
  hc.use_distill_head = false;
  VisionTransformer<double> hard_teacher(hc, rng);
  RecalibrationBranch<double> branch(sc, rng);
  const Mat<double> x = rng.normal_matrix<double>(16, 16);

  DistillWeights w{0.7, 1.3, 0.5};
  const auto br = global_loss(x, 1, student, branch, teacher, w, &hard_teacher);
  CHECK(br.total_value == doctest::Approx(br.cls + 0.7 * br.token + 1.3 * br.logits + 0.5 * br.hard).epsilon(1e-12));
  CHECK(br.token > 0);
  CHECK(br.logits > 0);
  CHECK(br.hard > 0);

  // Components equal to independent evaluation.
  const auto s_out = student.forward(x);
  CHECK(br.cls == doctest::Approx(oracle::cross_entropy(row_of(s_out.logits), 1)).epsilon(1e-12));
  CHECK(br.logits == doctest::Approx(oracle::kl(row_of(s_out.logits), row_of(teacher.forward(x).logits))).epsilon(1e-10));

  CHECK_THROWS_AS(global_loss(x, 1, student, branch, teacher, w), ConfigError);
  DistillWeights cls_only{0, 0, 0};
  const auto only = global_loss(x, 1, student, branch, teacher, cls_only);
  CHECK(only.total_value == doctest::Approx(only.cls).epsilon(1e-15));
  CHECK(only.token > 0);
  DistillWeights negative{-1, 0, 0};
  CHECK_THROWS_AS(global_loss(x, 1, student, branch, teacher, negative), ConfigError);
}

TEST_CASE("global_loss: gradients reach student and branch, never the teacher") {
  Rng rng(6);
  const ModelConfig sc = tiny_student();
  VisionTransformer<double> student(sc, rng);
  VisionTransformer<double> teacher(sc.teacher(), rng);
  RecalibrationBranch<double> branch(sc, rng);
  const Mat<double> x = rng.normal_matrix<double>(16, 16);
  global_loss(x, 0, student, branch, teacher, DistillWeights{}).total.backward();
  for (const auto& p : teacher.parameters()) CHECK_FALSE(p.tensor.has_grad());
  for (const auto& p : branch.parameters()) CHECK(p.tensor.has_grad());
  for (const auto& p : student.parameters()) CHECK(p.tensor.has_grad());

  // With lambda_token = 0 the branch is outside the objective.
  for (auto& p : branch.parameters()) p.tensor.zero_grad();
  global_loss(x, 0, student, branch, teacher, DistillWeights{0, 2, 0}).total.backward();
  for (const auto& p : branch.parameters()) CHECK_FALSE(p.tensor.has_grad());
}

TEST_CASE("grad_check through the full distillation objective") {
  Rng rng(7);
  ModelConfig sc = tiny_student();
  sc.embed_dim = 8;
  VisionTransformer<double> student(sc, rng);
  VisionTransformer<double> teacher(sc.teacher(), rng);
  RecalibrationBranch<double> branch(sc, rng);
  const Mat<double> x = rng.normal_matrix<double>(16, 16);
  auto params = tensors_of(student.parameters());
  for (const auto& t : tensors_of(branch.parameters())) params.push_back(t);
  CHECK(grad_check<double>([&] { return global_loss(x, 2, student, branch, teacher, DistillWeights{}).total; },
                           params) < 1e-4);
}

TEST_CASE("inherit_weights copies every shared tensor bit-for-bit") {
  Rng rng(8);
  const ModelConfig sc = tiny_student();
  VisionTransformer<float> teacher(sc.teacher(), rng);
  VisionTransformer<float> student(sc, rng);
  const auto slim_before = student.slimmers()[0].params().queries.value();
  const auto copied = inherit_weights(teacher, student);
  CHECK(copied.size() == teacher.parameters().size());
  const auto sp = student.parameters();
  for (const auto& t : teacher.parameters()) {
    auto it = std::find_if(sp.begin(), sp.end(), [&](const auto& s) { return s.name == t.name; });
    REQUIRE(it != sp.end());
    CHECK(std::memcmp(it->tensor.value().data(), t.tensor.value().data(),
                      static_cast<std::size_t>(t.tensor.size()) * sizeof(float)) == 0);
  }
  CHECK(student.slimmers()[0].params().queries.value() == slim_before);

  ModelConfig wide = sc;
  wide.embed_dim = 32;
  VisionTransformer<float> other(wide, rng);
  CHECK_THROWS_AS(inherit_weights(teacher, other), ConfigError);
}

TEST_CASE("inherit_weights reports the offending parameter on a shape clash") {
  Rng rng(9);
  const ModelConfig sc = tiny_student();
  VisionTransformer<float> teacher(sc.teacher(), rng);
  VisionTransformer<float> student(sc, rng);
  auto ckpt = make_checkpoint(teacher.config(), teacher.parameters());
  for (auto& e : ckpt.tensors)
    if (e.name == "blocks.2.mlp.fc1.weight") {
      e.cols -= 1;
      e.bytes.resize(static_cast<std::size_t>(e.rows * e.cols) * 4);
    }
  try {
    inherit_weights(ckpt, student);
    FAIL("expected ShapeError");
  } catch (const ShapeError& err) {
    CHECK(std::string(err.what()).find("blocks.2.mlp.fc1.weight") != std::string::npos);
  }
}

TEST_CASE("a keep-ratio 1 student with identity slimming reproduces the teacher") {
  Rng rng(10);
  ModelConfig sc = tiny_student();
  sc.keep_ratio = 1.0;
  VisionTransformer<float> teacher(sc.teacher(), rng);
  VisionTransformer<float> student(sc, rng, TsmInit::kIdentity);
  inherit_weights(teacher, student);
  for (int trial = 0; trial < 10; ++trial) {
    const Mat<float> x = rng.normal_matrix<float>(16, 16);
    const auto d = (teacher.forward(x).logits.value() - student.forward(x).logits.value()).cwiseAbs().maxCoeff();
    CHECK(d < 1e-3f);
  }
}

TEST_CASE("predict averages both heads when present") {
  ForwardResult<double> out;
  Mat<double> a(1, 3), b(1, 3);
  a << 1.0, 0.0, 0.0;
  b << 0.0, 0.0, 3.0;
  out.logits = Tensord::constant(a);
  CHECK(predict(out) == 0);
  out.distill_logits = Tensord::constant(b);
  CHECK(predict(out) == 2);
}

TEST_CASE("train_teacher: deterministic and the loss decreases") {
  const Dataset train = tiny_dataset(12, 1);
  TrainPlan plan;
  plan.epochs = 4;
  plan.batch_size = 6;
  plan.warmup_epochs = 1;
  plan.base_lr_backbone = 0.5;
  plan.seed = 3;
  ModelConfig tc = tiny_student().teacher();
  auto run = [&] {
    Rng rng(11);
    VisionTransformer<float> m(tc, rng);
    const auto log = train_teacher(plan, m, train);
    return std::make_pair(log, m.parameters());
  };
  const auto [log_a, params_a] = run();
  const auto [log_b, params_b] = run();
  REQUIRE(log_a.epochs.size() == 4);
  CHECK(log_a.epochs.back().loss < log_a.epochs.front().loss);
  for (std::size_t i = 0; i < params_a.size(); ++i) CHECK(params_a[i].tensor.value() == params_b[i].tensor.value());
  CHECK(log_a.epochs.back().loss == log_b.epochs.back().loss);
}

TEST_CASE("distill: teacher frozen, losses logged, token loss decreases") {
  const Dataset train = tiny_dataset(8, 2);
  const ModelConfig sc = tiny_student();
  Rng rng(12);
  VisionTransformer<float> teacher(sc.teacher(), rng);
  VisionTransformer<float> student(sc, rng);
  RecalibrationBranch<float> branch(sc, rng);
  inherit_weights(teacher, student);
  const auto before = teacher.parameters();
  std::vector<Mat<float>> snapshot;
  for (const auto& p : before) snapshot.push_back(p.tensor.value());

  TrainPlan plan;
  plan.epochs = 3;
  plan.batch_size = 4;
  plan.warmup_epochs = 0;
  plan.base_lr_backbone = 0.2;
  plan.base_lr_recalib = 2.0;
  int seen = 0;
  const auto log = distill(plan, DistillWeights{}, teacher, student, branch, train, &train, static_cast<const VisionTransformer<float>*>(nullptr),
                           [&](const EpochRecord& r) { seen += r.epoch >= 0 ? 1 : 0; });
  CHECK(seen == 3);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].tensor.value() == snapshot[i]);
  CHECK(log.epochs.back().token < log.epochs.front().token);
  CHECK(log.epochs.back().lr_recalib > log.epochs.back().lr_backbone);
  CHECK(log.epochs.back().eval_accuracy >= 0.0);
  nlohmann::json j = log.epochs.back();
  CHECK(j.contains("token"));

  DistillWeights hard{2, 2, 1};
  CHECK_THROWS_AS(distill(plan, hard, teacher, student, branch, train, nullptr, &teacher), ConfigError);
}

TEST_CASE("a diverging run raises with a diagnostic dump") {
  const Dataset train = tiny_dataset(4, 3);
  ModelConfig tc = tiny_student().teacher();
  Rng rng(13);
  VisionTransformer<double> m(tc, rng);
  for (auto& p : m.parameters())
    if (p.name == "head.weight") p.tensor.mutable_value()(0, 0) = std::nan("");
  TrainPlan plan;
  plan.epochs = 1;
  plan.batch_size = 4;
  try {
    train_teacher(plan, m, train);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(e.dump.contains("batch"));
    CHECK(e.dump["epoch"] == 0);
  }
}
