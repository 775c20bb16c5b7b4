#pragma once

// Differentiable primitives over rank-2 tensors. Each op computes its value
// eagerly and records a backward rule that accumulates into its inputs.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "sit/tensor.hpp"

namespace sit {

namespace detail {

template <typename Scalar>
inline Node<Scalar>& parent(Node<Scalar>& n, std::size_t i) {
  return *n.parents[i];
}

template <typename Scalar>
inline bool wants(Node<Scalar>& n, std::size_t i) {
  return n.parents[i]->requires_grad;
}

template <typename T>
void require_same_shape(const T& a, const T& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shapes_string(a, b));
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ " + shapes_string(a, b));
  Mat<Scalar> out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return Tensor<Scalar>::make_result(std::move(out), {a, b}, [](detail::Node<Scalar>& n) {
    auto& pa = detail::parent(n, 0);
    auto& pb = detail::parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * n.grad);
  });
}

/// a * b^T without materializing the transpose.
template <typename Scalar>
Tensor<Scalar> matmul_nt(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ " + shapes_string(a, b));
  Mat<Scalar> out(a.rows(), b.rows());
  out.noalias() = a.value() * b.value().transpose();
  return Tensor<Scalar>::make_result(std::move(out), {a, b}, [](detail::Node<Scalar>& n) {
    auto& pa = detail::parent(n, 0);
    auto& pb = detail::parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad * pb.value);
    if (pb.requires_grad) pb.accumulate(n.grad.transpose() * pa.value);
  });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  return Tensor<Scalar>::make_result(a.value().transpose(), {a}, [](detail::Node<Scalar>& n) {
    detail::parent(n, 0).accumulate(n.grad.transpose());
  });
}

// ---------------------------------------------------------------- elementwise

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  return Tensor<Scalar>::make_result(a.value() + b.value(), {a, b}, [](detail::Node<Scalar>& n) {
    if (detail::wants(n, 0)) detail::parent(n, 0).accumulate(n.grad);
    if (detail::wants(n, 1)) detail::parent(n, 1).accumulate(n.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  return Tensor<Scalar>::make_result(a.value() - b.value(), {a, b}, [](detail::Node<Scalar>& n) {
    if (detail::wants(n, 0)) detail::parent(n, 0).accumulate(n.grad);
    if (detail::wants(n, 1)) detail::parent(n, 1).accumulate(-n.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}

template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return sub(a, b);
}

/// Adds a 1 x cols row vector to every row of `a`.
template <typename Scalar>
Tensor<Scalar> add_row(const Tensor<Scalar>& a, const Tensor<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("add_row: expected a 1x" + std::to_string(a.cols()) + " row, got " +
                     shape_string(row.rows(), row.cols()));
  Mat<Scalar> out = a.value().rowwise() + row.value().row(0);
  return Tensor<Scalar>::make_result(std::move(out), {a, row}, [](detail::Node<Scalar>& n) {
    if (detail::wants(n, 0)) detail::parent(n, 0).accumulate(n.grad);
    if (detail::wants(n, 1)) detail::parent(n, 1).accumulate(n.grad.colwise().sum());
  });
}

template <typename Scalar>
Tensor<Scalar> hadamard(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "hadamard");
  Mat<Scalar> out = a.value().cwiseProduct(b.value());
  return Tensor<Scalar>::make_result(std::move(out), {a, b}, [](detail::Node<Scalar>& n) {
    auto& pa = detail::parent(n, 0);
    auto& pb = detail::parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) pb.accumulate(n.grad.cwiseProduct(pa.value));
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  return Tensor<Scalar>::make_result(a.value() * factor, {a}, [factor](detail::Node<Scalar>& n) {
    detail::parent(n, 0).accumulate(n.grad * factor);
  });
}

/// Multiplies every entry of `a` by the 1x1 tensor `s`.
template <typename Scalar>
Tensor<Scalar> scale_by(const Tensor<Scalar>& a, const Tensor<Scalar>& s) {
  if (s.size() != 1) throw ShapeError("scale_by: factor must be 1x1, got " + shape_string(s.rows(), s.cols()));
  return Tensor<Scalar>::make_result(a.value() * s.value()(0, 0), {a, s}, [](detail::Node<Scalar>& n) {
    auto& pa = detail::parent(n, 0);
    auto& ps = detail::parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad * ps.value(0, 0));
    if (ps.requires_grad) {
      Mat<Scalar> g(1, 1);
      g(0, 0) = n.grad.cwiseProduct(pa.value).sum();
      ps.accumulate(g);
    }
  });
}

/// Divides every entry of `a` by the 1x1 tensor `s`.
template <typename Scalar>
Tensor<Scalar> divide_by(const Tensor<Scalar>& a, const Tensor<Scalar>& s) {
  if (s.size() != 1) throw ShapeError("divide_by: divisor must be 1x1, got " + shape_string(s.rows(), s.cols()));
  const Scalar inv = Scalar(1) / s.value()(0, 0);
  return Tensor<Scalar>::make_result(a.value() * inv, {a, s}, [inv](detail::Node<Scalar>& n) {
    auto& pa = detail::parent(n, 0);
    auto& ps = detail::parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad * inv);
    if (ps.requires_grad) {
      Mat<Scalar> g(1, 1);
      g(0, 0) = -n.grad.cwiseProduct(pa.value).sum() * inv * inv;
      ps.accumulate(g);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& a) {
  Mat<Scalar> out = a.value().array().exp().matrix();
  return Tensor<Scalar>::make_result(std::move(out), {a}, [](detail::Node<Scalar>& n) {
    detail::parent(n, 0).accumulate(n.grad.cwiseProduct(n.value));
  });
}

template <typename Scalar>
Scalar gelu_scalar(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(std::numbers::sqrt2 / 2)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(std::numbers::sqrt2 / 2)));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * Scalar(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

/// Exact-erf GELU.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& a) {
  Mat<Scalar> out = a.value().unaryExpr([](Scalar x) { return gelu_scalar(x); });
  return Tensor<Scalar>::make_result(std::move(out), {a}, [](detail::Node<Scalar>& n) {
    auto& pa = detail::parent(n, 0);
    pa.accumulate(n.grad.cwiseProduct(pa.value.unaryExpr([](Scalar x) { return gelu_derivative(x); })));
  });
}

// ---------------------------------------------------------------- normalization

namespace detail {

template <typename Scalar>
Mat<Scalar> softmax_rows(const Mat<Scalar>& x) {
  Mat<Scalar> out = x.colwise() - x.rowwise().maxCoeff();
  out = out.array().exp().matrix();
  out.array().colwise() /= out.rowwise().sum().array();
  return out;
}

template <typename Scalar>
Mat<Scalar> softmax_cols(const Mat<Scalar>& x) {
  Mat<Scalar> out = x.rowwise() - x.colwise().maxCoeff();
  out = out.array().exp().matrix();
  out.array().rowwise() /= out.colwise().sum().array();
  return out;
}

}  // namespace detail

/// Softmax along `axis`: 1 normalizes each row, 0 normalizes each column.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis) {
  if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1, got " + std::to_string(axis));
  Mat<Scalar> out = axis == 1 ? detail::softmax_rows(x.value()) : detail::softmax_cols(x.value());
  return Tensor<Scalar>::make_result(std::move(out), {x}, [axis](detail::Node<Scalar>& n) {
    const Mat<Scalar> gy = n.grad.cwiseProduct(n.value);
    if (axis == 1) {
      detail::parent(n, 0).accumulate(gy - (n.value.array().colwise() * gy.rowwise().sum().array()).matrix());
    } else {
      detail::parent(n, 0).accumulate(gy - (n.value.array().rowwise() * gy.colwise().sum().array()).matrix());
    }
  });
}

/// Row-wise log-softmax.
template <typename Scalar>
Tensor<Scalar> log_softmax(const Tensor<Scalar>& x) {
  const auto& v = x.value();
  Mat<Scalar> shifted = v.colwise() - v.rowwise().maxCoeff();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> lse = shifted.array().exp().rowwise().sum().log().matrix();
  Mat<Scalar> out = shifted.colwise() - lse;
  return Tensor<Scalar>::make_result(std::move(out), {x}, [](detail::Node<Scalar>& n) {
    Mat<Scalar> p = n.value.array().exp().matrix();
    detail::parent(n, 0).accumulate(n.grad - (p.array().colwise() * n.grad.rowwise().sum().array()).matrix());
  });
}

/// Per-row layer normalization with 1 x cols affine parameters.
template <typename Scalar>
Tensor<Scalar> layernorm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                         Scalar eps = Scalar(1e-5)) {
  const Index c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c)
    throw ShapeError("layernorm: affine parameters must be 1x" + std::to_string(c) + ", got " +
                     shapes_string(gamma, beta));
  const auto& v = x.value();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean = v.rowwise().mean();
  Mat<Scalar> centered = v.colwise() - mean;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std =
      ((centered.array().square().rowwise().sum() / Scalar(c)) + eps).rsqrt().matrix();
  Mat<Scalar> xhat = (centered.array().colwise() * inv_std.array()).matrix();
  Mat<Scalar> out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return Tensor<Scalar>::make_result(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), c](detail::Node<Scalar>& n) {
        auto& px = detail::parent(n, 0);
        auto& pg = detail::parent(n, 1);
        auto& pb = detail::parent(n, 2);
        if (pg.requires_grad) pg.accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
        if (pb.requires_grad) pb.accumulate(n.grad.colwise().sum());
        if (px.requires_grad) {
          Mat<Scalar> dxhat = (n.grad.array().rowwise() * pg.value.row(0).array()).matrix();
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m1 = dxhat.rowwise().mean();
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m2 = dxhat.cwiseProduct(xhat).rowwise().sum() / Scalar(c);
          Mat<Scalar> dx = dxhat.colwise() - m1;
          dx -= (xhat.array().colwise() * m2.array()).matrix();
          dx.array().colwise() *= inv_std.array();
          px.accumulate(dx);
        }
      });
}

// ---------------------------------------------------------------- structure

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows())
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + shape_string(a.rows(), a.cols()));
  const Index rows = a.rows();
  return Tensor<Scalar>::make_result(a.value().middleRows(start, count), {a},
                                     [start, count, rows](detail::Node<Scalar>& n) {
                                       auto& p = detail::parent(n, 0);
                                       if (p.grad.size() == 0) p.grad = Mat<Scalar>::Zero(rows, n.grad.cols());
                                       p.grad.middleRows(start, count) += n.grad;
                                     });
}

template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    throw ShapeError("slice_cols: cols [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + shape_string(a.rows(), a.cols()));
  const Index cols = a.cols();
  return Tensor<Scalar>::make_result(a.value().middleCols(start, count), {a},
                                     [start, count, cols](detail::Node<Scalar>& n) {
                                       auto& p = detail::parent(n, 0);
                                       if (p.grad.size() == 0) p.grad = Mat<Scalar>::Zero(n.grad.rows(), cols);
                                       p.grad.middleCols(start, count) += n.grad;
                                     });
}

template <typename Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch " + shapes_string(parts.front(), p));
    rows += p.rows();
  }
  Mat<Scalar> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return Tensor<Scalar>::make_result(std::move(out), parts, [](detail::Node<Scalar>& n) {
    Index offset = 0;
    for (auto& p : n.parents) {
      const Index r = p->value.rows();
      if (p->requires_grad) p->accumulate(n.grad.middleRows(offset, r));
      offset += r;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> concat_cols(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Index cols = 0;
  const Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch " + shapes_string(parts.front(), p));
    cols += p.cols();
  }
  Mat<Scalar> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return Tensor<Scalar>::make_result(std::move(out), parts, [](detail::Node<Scalar>& n) {
    Index offset = 0;
    for (auto& p : n.parents) {
      const Index c = p->value.cols();
      if (p->requires_grad) p->accumulate(n.grad.middleCols(offset, c));
      offset += c;
    }
  });
}

// ---------------------------------------------------------------- reductions and losses

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  Mat<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return Tensor<Scalar>::make_result(std::move(out), {a}, [r, c](detail::Node<Scalar>& n) {
    detail::parent(n, 0).accumulate(Mat<Scalar>::Constant(r, c, n.grad(0, 0)));
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  return scale(sum(a), Scalar(1) / Scalar(a.size()));
}

/// Mean of squared differences over all entries.
template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "mse");
  const Mat<Scalar> diff = a.value() - b.value();
  const Scalar inv = Scalar(1) / Scalar(diff.size());
  Mat<Scalar> out(1, 1);
  out(0, 0) = diff.squaredNorm() * inv;
  return Tensor<Scalar>::make_result(std::move(out), {a, b}, [diff, inv](detail::Node<Scalar>& n) {
    const Scalar g = n.grad(0, 0) * Scalar(2) * inv;
    if (detail::wants(n, 0)) detail::parent(n, 0).accumulate(diff * g);
    if (detail::wants(n, 1)) detail::parent(n, 1).accumulate(diff * (-g));
  });
}

/// -log softmax(logits)[label] for a 1 x K logit row.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, Index label) {
  if (logits.rows() != 1) throw ShapeError("cross_entropy: expected 1xK logits, got " + shape_string(logits.rows(), logits.cols()));
  if (label < 0 || label >= logits.cols())
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                            std::to_string(logits.cols()) + ")");
  Mat<Scalar> p = detail::softmax_rows(logits.value());
  const auto& z = logits.value();
  const Scalar zmax = z.maxCoeff();
  const Scalar lse = zmax + std::log((z.array() - zmax).exp().sum());
  Mat<Scalar> out(1, 1);
  out(0, 0) = lse - z(0, label);
  return Tensor<Scalar>::make_result(std::move(out), {logits}, [p = std::move(p), label](detail::Node<Scalar>& n) {
    Mat<Scalar> g = p;
    g(0, label) -= Scalar(1);
    detail::parent(n, 0).accumulate(g * n.grad(0, 0));
  });
}

/// KL(softmax(p_logits) || softmax(q_logits)) for 1 x K logit rows.
template <typename Scalar>
Tensor<Scalar> kl_div(const Tensor<Scalar>& p_logits, const Tensor<Scalar>& q_logits) {
  detail::require_same_shape(p_logits, q_logits, "kl_div");
  if (p_logits.rows() != 1) throw ShapeError("kl_div: expected 1xK logits, got " + shape_string(p_logits.rows(), p_logits.cols()));
  auto log_softmax_row = [](const Mat<Scalar>& z) {
    const Scalar zmax = z.maxCoeff();
    const Scalar lse = zmax + std::log((z.array() - zmax).exp().sum());
    return Mat<Scalar>(z.array() - lse);
  };
  Mat<Scalar> log_p = log_softmax_row(p_logits.value());
  Mat<Scalar> log_q = log_softmax_row(q_logits.value());
  Mat<Scalar> p = log_p.array().exp().matrix();
  Mat<Scalar> q = log_q.array().exp().matrix();
  const Scalar kl = (p.array() * (log_p - log_q).array()).sum();
  Mat<Scalar> out(1, 1);
  out(0, 0) = kl;
  return Tensor<Scalar>::make_result(
      std::move(out), {p_logits, q_logits},
      [p = std::move(p), q = std::move(q), log_p = std::move(log_p), log_q = std::move(log_q),
       kl](detail::Node<Scalar>& n) {
        const Scalar g = n.grad(0, 0);
        if (detail::wants(n, 0)) {
          Mat<Scalar> d = (p.array() * ((log_p - log_q).array() - kl)).matrix();
          detail::parent(n, 0).accumulate(d * g);
        }
        if (detail::wants(n, 1)) detail::parent(n, 1).accumulate((q - p) * g);
      });
}

}  // namespace sit
