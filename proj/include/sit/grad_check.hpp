#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sit/tensor.hpp"

namespace sit {

/// Compares the analytic gradient of a scalar function with central
/// differences over every coordinate of `params`. Returns the max over
/// coordinates of |g_a - g_n| / max(1, |g_a|, |g_n|).
template <typename Scalar>
Scalar grad_check(const std::function<Tensor<Scalar>()>& f, std::vector<Tensor<Scalar>> params,
                  Scalar epsilon = Scalar(1e-5)) {
  for (auto& p : params) p.zero_grad();
  const Tensor<Scalar> loss = f();
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
  loss.backward();

  // Perturbed evaluations only need values.
  NoGradGuard no_grad;
  Scalar worst = 0;
  for (auto& p : params) {
    const Mat<Scalar> analytic = p.has_grad() ? p.grad() : Mat<Scalar>::Zero(p.rows(), p.cols());
    auto& value = p.mutable_value();
    for (Index i = 0; i < value.size(); ++i) {
      Scalar& x = value.data()[i];
      const Scalar saved = x;
      x = saved + epsilon;
      const Scalar up = f().item();
      x = saved - epsilon;
      const Scalar down = f().item();
      x = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("grad_check: non-finite loss under perturbation");
      const Scalar numeric = (up - down) / (Scalar(2) * epsilon);
      const Scalar ga = analytic.data()[i];
      if (!std::isfinite(ga)) throw NumericError("grad_check: non-finite analytic gradient");
      const Scalar denom = std::max({Scalar(1), std::abs(ga), std::abs(numeric)});
      worst = std::max(worst, std::abs(ga - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace sit
