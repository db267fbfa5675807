#pragma once

// Differentiable operations on BasicTensor. Every op records its value and an
// explicit backward rule on the tape that owns its inputs.

#include "promptpix/tensor.hpp"

#include <cmath>
#include <numbers>

namespace promptpix {

namespace detail {

template <typename Scalar>
void require_same_tape(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("tensors live on different tapes");
}

template <typename Scalar>
void require_same_shape(const char* op, const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

}  // namespace detail

template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + a.shape_str() + " x " + b.shape_str());
  }
  MatrixX<Scalar> out = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    if (a.requires_grad()) tape.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) tape.accumulate(b, a.value().transpose() * g);
  });
}

template <typename Scalar>
BasicTensor<Scalar> operator+(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("add", a, b);
  MatrixX<Scalar> out = a.value() + b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

template <typename Scalar>
BasicTensor<Scalar> operator-(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("sub", a, b);
  MatrixX<Scalar> out = a.value() - b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    tape.accumulate(a, g);
    tape.accumulate(b, -g);
  });
}

template <typename Scalar>
BasicTensor<Scalar> operator*(Scalar s, const BasicTensor<Scalar>& a) {
  MatrixX<Scalar> out = s * a.value();
  return a.tape().record(std::move(out), {a}, [a, s](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    tape.accumulate(a, s * g);
  });
}

template <typename Scalar>
BasicTensor<Scalar> hadamard(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("hadamard", a, b);
  MatrixX<Scalar> out = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    if (a.requires_grad()) tape.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) tape.accumulate(b, g.cwiseProduct(a.value()));
  });
}

// x (p x q) plus a 1 x q row broadcast over every row.
template <typename Scalar>
BasicTensor<Scalar> add_row(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& row) {
  detail::require_same_tape(x, row);
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw DimensionError("add_row: expected 1x" + std::to_string(x.cols()) + " row, got " + row.shape_str());
  }
  MatrixX<Scalar> out = x.value().rowwise() + row.value().row(0);
  return x.tape().record(std::move(out), {x, row}, [x, row](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    tape.accumulate(x, g);
    if (row.requires_grad()) tape.accumulate(row, g.colwise().sum());
  });
}

template <typename Scalar>
BasicTensor<Scalar> linear(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& w, const BasicTensor<Scalar>& b) {
  if (x.cols() != w.rows()) {
    throw DimensionError("linear: input " + x.shape_str() + " does not match weight " + w.shape_str());
  }
  return add_row(matmul(x, w), b);
}

template <typename Scalar>
BasicTensor<Scalar> transpose(const BasicTensor<Scalar>& a) {
  MatrixX<Scalar> out = a.value().transpose();
  return a.tape().record(std::move(out), {a}, [a](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    tape.accumulate(a, g.transpose());
  });
}

// Row-major reinterpretation with the same element count.
template <typename Scalar>
BasicTensor<Scalar> reshape(const BasicTensor<Scalar>& a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) {
    throw DimensionError("reshape: cannot view " + a.shape_str() + " as " + shape_string(rows, cols));
  }
  MatrixX<Scalar> out = Eigen::Map<const MatrixX<Scalar>>(a.value().data(), rows, cols);
  const Index r0 = a.rows(), c0 = a.cols();
  return a.tape().record(std::move(out), {a}, [a, r0, c0](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    tape.accumulate(a, MatrixX<Scalar>(Eigen::Map<const MatrixX<Scalar>>(g.data(), r0, c0)));
  });
}

// Rows of the result sum to one. Shifted by the row maximum before exponentiation.
template <typename Scalar>
BasicTensor<Scalar> softmax_rows(const BasicTensor<Scalar>& x) {
  const MatrixX<Scalar>& v = x.value();
  MatrixX<Scalar> out(v.rows(), v.cols());
  for (Index r = 0; r < v.rows(); ++r) {
    const Scalar mx = v.row(r).maxCoeff();
    out.row(r) = (v.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return x.tape().record(std::move(out), {x}, [x](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>& y) {
    // dx = y * (g - <g, y>_row)
    MatrixX<Scalar> dx(y.rows(), y.cols());
    for (Index r = 0; r < y.rows(); ++r) {
      const Scalar dot = g.row(r).dot(y.row(r));
      dx.row(r) = y.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
    }
    tape.accumulate(x, dx);
  });
}

// x minus the row-wise log-sum-exp; finite wherever x is.
template <typename Scalar>
BasicTensor<Scalar> log_softmax_rows(const BasicTensor<Scalar>& x) {
  const MatrixX<Scalar>& v = x.value();
  MatrixX<Scalar> out(v.rows(), v.cols());
  for (Index r = 0; r < v.rows(); ++r) {
    const Scalar mx = v.row(r).maxCoeff();
    const Scalar lse = mx + std::log((v.row(r).array() - mx).exp().sum());
    out.row(r) = (v.row(r).array() - lse).matrix();
  }
  return x.tape().record(std::move(out), {x}, [x](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>& y) {
    // dx = g - softmax(x) * sum_row(g)
    MatrixX<Scalar> dx = g - (y.array().exp().colwise() * g.rowwise().sum().array()).matrix();
    tape.accumulate(x, dx);
  });
}

template <typename Scalar>
BasicTensor<Scalar> softmax_cols(const BasicTensor<Scalar>& x) {
  return transpose(softmax_rows(transpose(x)));
}

// Exact x * Phi(x), Phi the standard normal CDF.
template <typename Scalar>
BasicTensor<Scalar> gelu(const BasicTensor<Scalar>& x) {
  using std::erf;
  using std::exp;
  const Scalar inv_sqrt2 = Scalar(1) / std::numbers::sqrt2_v<Scalar>;
  MatrixX<Scalar> out = x.value().unaryExpr([inv_sqrt2](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + erf(v * inv_sqrt2)); });
  return x.tape().record(std::move(out), {x}, [x, inv_sqrt2](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    const Scalar inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<Scalar> * inv_sqrt2;
    MatrixX<Scalar> d = x.value().unaryExpr([&](Scalar v) {
      return Scalar(0.5) * (Scalar(1) + erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * exp(Scalar(-0.5) * v * v);
    });
    tape.accumulate(x, g.cwiseProduct(d));
  });
}

template <typename Scalar>
BasicTensor<Scalar> relu(const BasicTensor<Scalar>& x) {
  MatrixX<Scalar> out = x.value().cwiseMax(Scalar(0));
  return x.tape().record(std::move(out), {x}, [x](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    tape.accumulate(x, (x.value().array() > Scalar(0)).select(g, Scalar(0)));
  });
}

template <typename Scalar>
BasicTensor<Scalar> exp(const BasicTensor<Scalar>& x) {
  MatrixX<Scalar> out = x.value().array().exp().matrix();
  return x.tape().record(std::move(out), {x}, [x](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>& y) {
    tape.accumulate(x, g.cwiseProduct(y));
  });
}

// 1x1 sum of all entries, reduced in row-major index order.
template <typename Scalar>
BasicTensor<Scalar> sum(const BasicTensor<Scalar>& x) {
  Scalar acc = 0;
  const MatrixX<Scalar>& v = x.value();
  for (Index i = 0; i < v.size(); ++i) acc += v.data()[i];
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = acc;
  return x.tape().record(std::move(out), {x}, [x](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    tape.accumulate(x, MatrixX<Scalar>::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

template <typename Scalar>
BasicTensor<Scalar> mean(const BasicTensor<Scalar>& x) {
  return (Scalar(1) / static_cast<Scalar>(x.value().size())) * sum(x);
}

// out(p, i) = ||a_p - b_i||^2 for a (n x k), b (m x k).
template <typename Scalar>
BasicTensor<Scalar> pairwise_sq_dist(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.cols()) {
    throw DimensionError("pairwise_sq_dist: feature widths differ, " + a.shape_str() + " vs " + b.shape_str());
  }
  const MatrixX<Scalar>& av = a.value();
  const MatrixX<Scalar>& bv = b.value();
  MatrixX<Scalar> out(av.rows(), bv.rows());
  for (Index p = 0; p < av.rows(); ++p) {
    for (Index i = 0; i < bv.rows(); ++i) out(p, i) = (av.row(p) - bv.row(i)).squaredNorm();
  }
  return a.tape().record(std::move(out), {a, b}, [a, b](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    const MatrixX<Scalar>& av = a.value();
    const MatrixX<Scalar>& bv = b.value();
    // d/da_p = 2 sum_i g_pi (a_p - b_i);  d/db_i = -2 sum_p g_pi (a_p - b_i)
    if (a.requires_grad()) {
      MatrixX<Scalar> da = Scalar(2) * (g.rowwise().sum().asDiagonal() * av - g * bv);
      tape.accumulate(a, da);
    }
    if (b.requires_grad()) {
      MatrixX<Scalar> db = Scalar(2) * (g.colwise().sum().transpose().asDiagonal() * bv - g.transpose() * av);
      tape.accumulate(b, db);
    }
  });
}

// Per-row layer normalization followed by an affine map with 1 x q gamma/beta.
template <typename Scalar>
BasicTensor<Scalar> layer_norm(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& gamma, const BasicTensor<Scalar>& beta,
                               Scalar eps = Scalar(1e-6)) {
  detail::require_same_tape(x, gamma);
  detail::require_same_tape(x, beta);
  const Index q = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != q || beta.rows() != 1 || beta.cols() != q) {
    throw DimensionError("layer_norm: affine params must be 1x" + std::to_string(q));
  }
  const MatrixX<Scalar>& v = x.value();
  MatrixX<Scalar> xhat(v.rows(), q);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(v.rows());
  for (Index r = 0; r < v.rows(); ++r) {
    const Scalar mu = v.row(r).mean();
    const Scalar var = (v.row(r).array() - mu).square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (v.row(r).array() - mu).matrix() * inv_std(r);
  }
  MatrixX<Scalar> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return x.tape().record(std::move(out), {x, gamma, beta},
                         [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                             BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
                           if (gamma.requires_grad()) tape.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                           if (beta.requires_grad()) tape.accumulate(beta, g.colwise().sum());
                           if (x.requires_grad()) {
                             MatrixX<Scalar> dxhat = g.array().rowwise() * gamma.value().row(0).array();
                             MatrixX<Scalar> dx(dxhat.rows(), dxhat.cols());
                             for (Index r = 0; r < dxhat.rows(); ++r) {
                               const Scalar m1 = dxhat.row(r).mean();
                               const Scalar m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<Scalar>(dxhat.cols());
                               dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2).matrix();
                             }
                             tape.accumulate(x, dx);
                           }
                         });
}

// Unfolds a (height*width) x channels token grid into one row per output
// position holding the k x k zero-padded neighbourhood, ordered
// (ky, kx, channel).
template <typename Scalar>
BasicTensor<Scalar> im2col(const BasicTensor<Scalar>& x, Index height, Index width, Index kernel, Index stride, Index pad) {
  if (x.rows() != height * width) {
    throw DimensionError("im2col: " + x.shape_str() + " is not a " + shape_string(height, width) + " grid");
  }
  if (kernel < 1 || stride < 1 || pad < 0 || height + 2 * pad < kernel || width + 2 * pad < kernel) {
    throw DimensionError("im2col: invalid kernel/stride/padding");
  }
  const Index ch = x.cols();
  const Index out_h = (height + 2 * pad - kernel) / stride + 1;
  const Index out_w = (width + 2 * pad - kernel) / stride + 1;
  const MatrixX<Scalar>& v = x.value();
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(out_h * out_w, kernel * kernel * ch);
  auto visit = [=](auto&& fn) {
    for (Index oy = 0; oy < out_h; ++oy) {
      for (Index ox = 0; ox < out_w; ++ox) {
        for (Index ky = 0; ky < kernel; ++ky) {
          const Index iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= height) continue;
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= width) continue;
            fn(oy * out_w + ox, (ky * kernel + kx) * ch, iy * width + ix);
          }
        }
      }
    }
  };
  visit([&](Index orow, Index ocol, Index irow) { out.row(orow).segment(ocol, ch) = v.row(irow); });
  return x.tape().record(std::move(out), {x}, [x, visit](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    const Index ch = x.cols();
    MatrixX<Scalar> dx = MatrixX<Scalar>::Zero(x.rows(), ch);
    visit([&](Index orow, Index ocol, Index irow) { dx.row(irow) += g.row(orow).segment(ocol, ch); });
    tape.accumulate(x, dx);
  });
}

template <typename Scalar>
BasicTensor<Scalar> slice_cols(const BasicTensor<Scalar>& x, Index start, Index count) {
  if (start < 0 || count < 1 || start + count > x.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + x.shape_str());
  }
  MatrixX<Scalar> out = x.value().middleCols(start, count);
  return x.tape().record(std::move(out), {x}, [x, start, count](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    MatrixX<Scalar> dx = MatrixX<Scalar>::Zero(x.rows(), x.cols());
    dx.middleCols(start, count) = g;
    tape.accumulate(x, dx);
  });
}

template <typename Scalar>
BasicTensor<Scalar> concat_cols(const std::vector<BasicTensor<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  BasicTape<Scalar>& tape = parts.front().tape();
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    detail::require_same_tape(parts.front(), p);
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ, " + parts.front().shape_str() + " vs " + p.shape_str());
    cols += p.cols();
  }
  MatrixX<Scalar> out(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return tape.record(std::move(out), std::span<const BasicTensor<Scalar>>(parts), [parts](BasicTape<Scalar>& tape, const MatrixX<Scalar>& g, const MatrixX<Scalar>&) {
    Index off = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) tape.accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

}  // namespace promptpix
