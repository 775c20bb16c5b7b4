#include "doctest.h"

#include <algorithm>
#include <numeric>

#include "oracles.hpp"
#include "sit/grad_check.hpp"
#include "sit/token_slimming.hpp"

using namespace sit;

namespace {

TsmParams<double> random_params(Rng& rng, Index c, Index n_hat, double tau = 1.3) {
  TsmParams<double> p = TsmParams<double>::init(c, n_hat, rng);
  p.key_proj.mutable_value() = rng.normal_matrix<double>(c, c / 2, 0.5);
  p.queries.mutable_value() = rng.normal_matrix<double>(n_hat, c / 2, 0.5);
  p.log_tau.mutable_value()(0, 0) = std::log(tau);
  return p;
}

}  // namespace

TEST_CASE("tsm_attention: zero queries give uniform columns") {
  Rng rng(1);
  auto p = TsmParams<double>::init(8, 3, rng);
  p.queries.mutable_value().setZero();
  const auto a = tsm_attention(Tensord::constant(rng.normal_matrix<double>(6, 8)), p).weights.value();
  CHECK(a.rows() == 3);
  CHECK(a.cols() == 6);
  CHECK((a.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-15);
}

TEST_CASE("tsm_attention: hand-set logits give the closed-form column") {
  // queries [[0],[1]] against gelu keys equal to ln 3 * tau for every token
  // reproduce logits rows [0...] and [ln3...].
  Rng rng(2);
  auto p = TsmParams<double>::init(2, 2, rng);
  p.log_tau.mutable_value()(0, 0) = 0.0;
  p.key_proj.mutable_value() = Mat<double>::Ones(2, 1);
  p.queries.mutable_value() << 0.0, 1.0;
  // Pick x so that gelu(x0 + x1) = ln 3.
  double lo = 0.0, hi = 5.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (gelu_scalar(mid) < std::log(3.0) ? lo : hi) = mid;
  }
  Mat<double> x(4, 2);
  x.col(0).setConstant(lo);
  x.col(1).setZero();
  const auto a = tsm_attention(Tensord::constant(x), p).weights.value();
  for (Index j = 0; j < 4; ++j) {
    CHECK(a(0, j) == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(a(1, j) == doctest::Approx(0.75).epsilon(1e-9));
  }
}

TEST_CASE("tsm_attention: matches the straight-line oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_params(rng, 8, 3, rng.uniform(0.3, 3.0));
    const Mat<double> x = rng.normal_matrix<double>(6, 8);
    const auto a = tsm_attention(Tensord::constant(x), p).weights.value();
    const auto expect = oracle::tsm_attention(oracle::from(x), oracle::from(p.key_proj.value()),
                                              oracle::from(p.queries.value()), p.tau());
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 6; ++j) CHECK(std::abs(a(i, j) - expect(i, j)) < 1e-6);
  }
}

TEST_CASE("slim: identity, uniform average and oracle product") {
  Rng rng(4);
  const Mat<double> x = rng.normal_matrix<double>(5, 4);
  const SlimMatrix<double> eye{Tensord::constant(Mat<double>::Identity(5, 5))};
  CHECK(slim(eye, Tensord::constant(x)).value() == x);

  auto p = TsmParams<double>::init(4, 2, rng);
  p.queries.mutable_value().setZero();
  const auto a = tsm_attention(Tensord::constant(x), p);
  const auto out = slim(a, Tensord::constant(x)).value();
  const Eigen::RowVectorXd mean_token = x.colwise().sum() / 2.0;
  for (Index i = 0; i < 2; ++i) CHECK((out.row(i) - mean_token).cwiseAbs().maxCoeff() < 1e-12);

  const auto q = random_params(rng, 4, 3);
  const auto aq = tsm_attention(Tensord::constant(x), q);
  const auto got = slim(aq, Tensord::constant(x)).value();
  const auto expect = oracle::matmul(oracle::from(aq.weights.value()), oracle::from(x));
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 4; ++c) CHECK(std::abs(got(i, c) - expect(i, c)) < 1e-6);

  CHECK_THROWS_AS(slim(aq, Tensord::constant(rng.normal_matrix<double>(4, 4))), ShapeError);
}

TEST_CASE("property: column normalization and token mass conservation") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.below(30));
    const Index n_hat = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    const Index c = 2 * (1 + static_cast<Index>(rng.below(8)));
    const auto p = random_params(rng, c, n_hat, rng.uniform(0.05, 5.0));
    const Mat<double> x = rng.normal_matrix<double>(n, c, 2.0);
    const auto a = tsm_attention(Tensord::constant(x), p);
    const auto& w = a.weights.value();
    CHECK((w.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
    CHECK((w.array() > 0.0).all());
    const auto out = slim(a, Tensord::constant(x)).value();
    CHECK((out.colwise().sum() - x.colwise().sum()).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("property: slimmed output is invariant to input token order") {
  Rng rng(6);
  const auto p = random_params(rng, 8, 4);
  const Mat<double> x = rng.normal_matrix<double>(10, 8);
  const auto base = slim(tsm_attention(Tensord::constant(x), p), Tensord::constant(x)).value();
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Index> perm(10);
    std::iota(perm.begin(), perm.end(), Index{0});
    rng.shuffle(perm.begin(), perm.end());
    Mat<double> px(10, 8);
    for (Index i = 0; i < 10; ++i) px.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
    const auto out = slim(tsm_attention(Tensord::constant(px), p), Tensord::constant(px)).value();
    CHECK((out - base).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("property: temperature drives columns between one-hot and uniform") {
  Rng rng(7);
  auto p = random_params(rng, 8, 4);
  const Mat<double> x = rng.normal_matrix<double>(12, 8, 2.0);
  p.log_tau.mutable_value()(0, 0) = std::log(1e-4);
  const auto sharp = tsm_attention(Tensord::constant(x), p).weights.value();
  CHECK(sharp.colwise().maxCoeff().minCoeff() > 0.999);
  p.log_tau.mutable_value()(0, 0) = std::log(1e6);
  const auto flat = tsm_attention(Tensord::constant(x), p).weights.value();
  CHECK((flat.array() - 0.25).abs().maxCoeff() < 1e-4);
}

TEST_CASE("input-axis normalization is available as an escape hatch") {
  Rng rng(8);
  const auto p = random_params(rng, 8, 3);
  const auto a = tsm_attention(Tensord::constant(rng.normal_matrix<double>(6, 8)), p, SlimAxis::kInput).weights.value();
  CHECK((a.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("grad_check through tsm_attention and slim including the temperature") {
  Rng rng(9);
  auto p = random_params(rng, 6, 3);
  auto x = Tensord::parameter(rng.normal_matrix<double>(5, 6));
  const Mat<double> w = rng.normal_matrix<double>(3, 6);
  const double err = grad_check<double>(
      [&] { return sum(hadamard(slim(tsm_attention(x, p), x), Tensord::constant(w))); },
      {x, p.key_proj, p.queries, p.log_tau});
  CHECK(err < 1e-4);
}

TEST_CASE("tau is initialized to sqrt(C/2)") {
  Rng rng(10);
  const auto p = TsmParams<float>::init(128, 32, rng);
  CHECK(p.tau() == doctest::Approx(8.0).epsilon(1e-6));
  CHECK(p.key_proj.rows() == 128);
  CHECK(p.key_proj.cols() == 64);
  CHECK(p.queries.rows() == 32);
}

TEST_CASE("schedule: ceil rounding at three boundaries") {
  CHECK(schedule(196, {1, 1, 1, 11}, 0.5) == StageSchedule{196, 98, 49, 25});
  CHECK(schedule(64, {2, 2, 2, 2}, 0.5) == StageSchedule{64, 32, 16, 8});
  CHECK(schedule(64, {2, 2, 2, 2}, 1.0) == StageSchedule{64, 64, 64, 64});
  CHECK(schedule(10, {1, 1, 1, 1}, 0.7) == StageSchedule{10, 7, 5, 4});
  CHECK_THROWS_AS(schedule(64, {2, 2, 2, 2}, 0.0), ConfigError);
  CHECK_THROWS_AS(schedule(0, {2, 2, 2, 2}, 0.5), ConfigError);
}

TEST_CASE("property: schedule matches a ceil oracle and never increases") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int n0 = 1 + static_cast<int>(rng.below(400));
    const double r = rng.uniform(0.05, 1.0);
    const auto s = schedule(n0, {1, 1, 1, 1}, r);
    int expect = n0;
    for (std::size_t k = 1; k < 4; ++k) {
      // Smallest integer m with m >= r * expect (up to fp tolerance).
      int m = 1;
      while (static_cast<double>(m) < r * expect - 1e-9) ++m;
      expect = m;
      CHECK(s[k] == expect);
      CHECK(s[k] <= s[k - 1]);
    }
  }
}

TEST_CASE("hard_drop_baseline: ordering, identity and sort oracle") {
  Rng rng(12);
  const Mat<double> x = rng.normal_matrix<double>(6, 3);
  std::vector<double> by_index{0, 1, 2, 3, 4, 5};
  const auto kept = hard_drop_baseline(x, by_index, 2);
  CHECK(kept.row(0) == x.row(4));
  CHECK(kept.row(1) == x.row(5));
  CHECK(hard_drop_baseline(x, by_index, 6) == x);

  std::vector<double> ties{1, 2, 2, 0, 2, 1};
  const auto tie_kept = hard_drop_baseline(x, ties, 2);
  CHECK(tie_kept.row(0) == x.row(1));
  CHECK(tie_kept.row(1) == x.row(2));

  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> scores(6);
    for (auto& s : scores) s = rng.normal();
    const Index keep = 1 + static_cast<Index>(rng.below(6));
    std::vector<std::pair<double, Index>> ranked;
    for (Index i = 0; i < 6; ++i) ranked.emplace_back(-scores[static_cast<std::size_t>(i)], i);
    std::sort(ranked.begin(), ranked.end());
    std::vector<Index> ids;
    for (Index i = 0; i < keep; ++i) ids.push_back(ranked[static_cast<std::size_t>(i)].second);
    std::sort(ids.begin(), ids.end());
    const auto got = hard_drop_baseline(x, scores, keep);
    for (Index i = 0; i < keep; ++i) CHECK(got.row(i) == x.row(ids[static_cast<std::size_t>(i)]));
  }
  std::vector<double> bad{0, 1, std::nan(""), 3, 4, 5};
  CHECK_THROWS_AS(hard_drop_baseline(x, bad, 2), NumericError);
}

TEST_CASE("token slimmer rejects growth and non-reducing identity misuse") {
  Rng rng(13);
  CHECK_THROWS_AS(TokenSlimmer<double>(8, 4, 5, SlimAxis::kOutput, TsmInit::kXavier, rng), ConfigError);
  CHECK_THROWS_AS(TokenSlimmer<double>(8, 4, 2, SlimAxis::kOutput, TsmInit::kIdentity, rng), ConfigError);
  TokenSlimmer<double> eye(8, 4, 4, SlimAxis::kOutput, TsmInit::kIdentity, rng);
  const Mat<double> x = rng.normal_matrix<double>(4, 8);
  auto [out, a] = eye(Tensord::constant(x));
  CHECK(out.value() == x);
  CHECK(a.weights.value() == Mat<double>::Identity(4, 4));
}
