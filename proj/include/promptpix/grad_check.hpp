#pragma once

#include "promptpix/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

namespace promptpix {

template <typename Scalar>
using ScalarFunction = std::function<BasicTensor<Scalar>(BasicTape<Scalar>&, const BasicTensor<Scalar>&)>;

// Maximum over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, floor),
// where numeric is the central difference (f(x + eps e) - f(x - eps e)) / 2 eps.
// `coords` restricts the check to a subset of flat (row-major) indices; empty
// means every coordinate.
template <typename Scalar>
Scalar grad_check(const ScalarFunction<Scalar>& f, const MatrixX<Scalar>& x, Scalar eps,
                  const std::vector<Index>& coords = {}, Scalar floor = Scalar(1e-6)) {
  if (!(eps > Scalar(0) && eps <= Scalar(1e-3))) throw std::invalid_argument("grad_check: eps must lie in (0, 1e-3]");

  MatrixX<Scalar> analytic;
  {
    BasicTape<Scalar> tape;
    BasicTensor<Scalar> xv = tape.variable(x);
    BasicTensor<Scalar> y = f(tape, xv);
    if (!std::isfinite(y.item())) throw EvaluationError("grad_check: f is not finite at x");
    tape.backward(y);
    analytic = xv.grad();
  }

  auto eval = [&](const MatrixX<Scalar>& at) {
    BasicTape<Scalar> tape;
    const Scalar v = f(tape, tape.constant(at)).item();
    if (!std::isfinite(v)) throw EvaluationError("grad_check: f is not finite at a perturbed point");
    return v;
  };

  std::vector<Index> idx = coords;
  if (idx.empty()) {
    idx.resize(static_cast<std::size_t>(x.size()));
    std::iota(idx.begin(), idx.end(), Index{0});
  }

  Scalar worst = 0;
  MatrixX<Scalar> probe = x;
  for (Index i : idx) {
    if (i < 0 || i >= x.size()) throw std::out_of_range("grad_check: coordinate out of range");
    const Scalar orig = probe.data()[i];
    probe.data()[i] = orig + eps;
    const Scalar up = eval(probe);
    probe.data()[i] = orig - eps;
    const Scalar down = eval(probe);
    probe.data()[i] = orig;
    const Scalar numeric = (up - down) / (Scalar(2) * eps);
    const Scalar a = analytic.data()[i];
    const Scalar denom = std::max({std::abs(a), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace promptpix
