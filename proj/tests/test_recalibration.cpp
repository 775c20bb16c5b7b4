#include "doctest.h"

#include "sit/grad_check.hpp"
#include "sit/recalibration.hpp"

using namespace sit;

TEST_CASE("recalibrate: output has N tokens") {
  Rng rng(1);
  const StageSchedule sched{64, 32, 16, 8};
  for (int s = 1; s < 4; ++s) {
    const auto p = rtsm_for_stage<float>(s, sched, 16, 4, rng);
    REQUIRE(p.has_value());
    const auto out = recalibrate(Tensorf::constant(rng.normal_matrix<float>(sched[static_cast<std::size_t>(s)], 16)), *p);
    CHECK(out.rows() == 64);
    CHECK(out.cols() == 16);
  }
  const auto p = rtsm_for_stage<float>(2, sched, 16, 4, rng);
  CHECK_THROWS_AS(recalibrate(Tensorf::constant(rng.normal_matrix<float>(15, 16)), *p), ShapeError);
}

TEST_CASE("recalibrate: zero input with zero biases gives zero output") {
  Rng rng(2);
  const auto p = rtsm_for_stage<double>(1, {16, 8, 4, 2}, 8, 4, rng);
  const auto out = recalibrate(Tensord::constant(Mat<double>::Zero(8, 8)), *p);
  CHECK(out.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("rtsm_for_stage: stage 0 has no module, shapes follow the schedule") {
  Rng rng(3);
  const StageSchedule sched{64, 32, 16, 8};
  CHECK_FALSE(rtsm_for_stage<float>(0, sched, 32, 4, rng).has_value());
  const auto p = rtsm_for_stage<float>(2, sched, 32, 4, rng);
  CHECK(p->expand.rows() == 256);
  CHECK(p->expand.cols() == 16);
  CHECK(p->compress.rows() == 64);
  CHECK(p->compress.cols() == 256);
  ParamList<float> mlp;
  p->mlp.collect("mlp", mlp);
  Index mlp_count = 0;
  for (const auto& m : mlp) mlp_count += m.tensor.size();
  const Index total = p->expand.size() + p->compress.size() + mlp_count;
  CHECK(total == 4 * 64 * 16 + 64 * 4 * 64 + (32 * 128 + 128 + 128 * 32 + 32));
  CHECK_THROWS_AS(rtsm_for_stage<float>(4, sched, 32, 4, rng), std::out_of_range);
}

TEST_CASE("grad_check through recalibrate") {
  Rng rng(4);
  auto p = *rtsm_for_stage<double>(1, {6, 3, 2, 1}, 4, 2, rng);
  auto x = Tensord::parameter(rng.normal_matrix<double>(3, 4));
  const Mat<double> w = rng.normal_matrix<double>(6, 4);
  ParamList<double> params;
  p.mlp.collect("mlp", params);
  auto tensors = tensors_of(params);
  tensors.push_back(p.expand);
  tensors.push_back(p.compress);
  tensors.push_back(x);
  CHECK(grad_check<double>([&] { return sum(hadamard(recalibrate(x, p), Tensord::constant(w))); }, tensors) < 1e-4);
}

TEST_CASE("the parameterization can express the identity map") {
  // gelu(z) - gelu(-z) = z, so A_1 = [cI; -cI; 0; 0] and A_2 = [I/c, -I/c, 0, 0]
  // reproduce the input exactly when the MLP output layer is zero.
  Rng rng(5);
  const Index n = 12, c = 8;
  auto p = *rtsm_for_stage<double>(1, {12, 12, 12, 12}, c, 4, rng);
  const double scale = 3.0;
  Mat<double> a1 = Mat<double>::Zero(4 * n, n), a2 = Mat<double>::Zero(n, 4 * n);
  a1.topRows(n) = scale * Mat<double>::Identity(n, n);
  a1.middleRows(n, n) = -scale * Mat<double>::Identity(n, n);
  a2.leftCols(n) = Mat<double>::Identity(n, n) / scale;
  a2.middleCols(n, n) = -Mat<double>::Identity(n, n) / scale;
  p.expand.mutable_value() = a1;
  p.compress.mutable_value() = a2;
  p.mlp.fc2.weight.mutable_value().setZero();
  const Mat<double> x = rng.normal_matrix<double>(n, c);
  const auto out = recalibrate(Tensord::constant(x), p).value();
  CHECK((out - x).cwiseAbs().maxCoeff() < 1e-2);
}

TEST_CASE("recalibration branch: one module per slimmed stage, class token passthrough") {
  Rng rng(6);
  ModelConfig c;
  c.embed_dim = 16;
  c.heads = 2;
  c.depth = 4;
  c.stages = {1, 1, 1, 1};
  c.keep_ratio = 0.5;
  RecalibrationBranch<float> branch(c, rng);
  CHECK_FALSE(branch.has_stage(0));
  CHECK(branch.has_stage(3));
  const Mat<float> tokens = rng.normal_matrix<float>(1 + 16, 16);
  const auto restored = branch.restore(2, Tensorf::constant(tokens)).value();
  CHECK(restored.rows() == 65);
  CHECK(restored.row(0) == tokens.row(0));
  const Mat<float> full = rng.normal_matrix<float>(65, 16);
  CHECK(branch.restore(0, Tensorf::constant(full)).value() == full);
  for (const auto& p : branch.parameters()) CHECK(p.training_only);
  RecalibrationBranch<float> none(c.teacher(), rng);
  CHECK(none.parameters().empty());
}
