#include "doctest.h"

#include "promptpix/grad_check.hpp"
#include "promptpix/ops.hpp"
#include "support.hpp"

#include <cmath>
#include <functional>
#include <vector>

using namespace promptpix;
using testing::random_matrix;

namespace {

// Scalar probe: sum(w .* y) with fixed random weights, so every output entry
// carries a distinct sensitivity.
Tensor weighted_sum(Tape& tape, const Tensor& y, const Matrix& w) { return sum(hadamard(y, tape.constant(w))); }

using UnaryOp = std::function<Tensor(Tape&, const Tensor&)>;

double check_unary(std::mt19937_64& rng, const UnaryOp& op, Index rows, Index cols, double lo = -1.0, double hi = 1.0) {
  const Matrix x = random_matrix(rng, rows, cols, lo, hi);
  Matrix w;
  {
    Tape probe;
    const Tensor y = op(probe, probe.constant(x));
    w = random_matrix(rng, y.rows(), y.cols());
  }
  return grad_check<double>([&](Tape& t, const Tensor& v) { return weighted_sum(t, op(t, v), w); }, x, 1e-5);
}

}  // namespace

TEST_CASE("matmul of identity and a hand-checked product") {
  Tape tape;
  Matrix m(2, 2);
  m << 1, 2, 3, 4;
  const Tensor id = tape.constant(Matrix::Identity(2, 2));
  CHECK(matmul(id, tape.constant(m)).value() == m);
  Matrix ones(2, 1);
  ones << 1, 1;
  Matrix expect(2, 1);
  expect << 3, 7;
  CHECK(matmul(tape.constant(m), tape.constant(ones)).value() == expect);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  const Tensor a = tape.constant(Matrix::Zero(2, 3));
  const Tensor b = tape.constant(Matrix::Zero(2, 3));
  try {
    (void)matmul(a, b);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("x [2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradients of both arguments against central differences") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix a = random_matrix(rng, 3, 4), b = random_matrix(rng, 4, 2), w = random_matrix(rng, 3, 2);
    const double ea = grad_check<double>([&](Tape& t, const Tensor& x) { return weighted_sum(t, matmul(x, t.constant(b)), w); }, a, 1e-5);
    const double eb = grad_check<double>([&](Tape& t, const Tensor& x) { return weighted_sum(t, matmul(t.constant(a), x), w); }, b, 1e-5);
    CHECK(ea <= 1e-6);
    CHECK(eb <= 1e-6);
  }
}

TEST_CASE("matmul is associative on random triples") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape;
    const Tensor a = tape.constant(random_matrix(rng, 3, 5)), b = tape.constant(random_matrix(rng, 5, 4)),
                 c = tape.constant(random_matrix(rng, 4, 2));
    const Matrix left = matmul(matmul(a, b), c).value();
    const Matrix right = matmul(a, matmul(b, c)).value();
    CHECK((left - right).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("softmax_rows: symmetric row, large logits, row sums") {
  Tape tape;
  const Matrix s = softmax_rows(tape.constant(Matrix::Zero(1, 3))).value();
  for (Index i = 0; i < 3; ++i) CHECK(s(0, i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Matrix big(1, 2);
  big << 1000, 0;
  const Matrix t = softmax_rows(tape.constant(big)).value();
  CHECK(t.allFinite());
  CHECK(t(0, 0) == 1.0);
  CHECK(t(0, 1) <= 1e-300);

  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix y = softmax_rows(tape.constant(random_matrix(rng, 6, 7, -20, 20))).value();
    CHECK((y.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("softmax_rows gradient against central differences") {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    CHECK(check_unary(rng, [](Tape&, const Tensor& x) { return softmax_rows(x); }, 4, 5, -2, 2) <= 1e-6);
  }
}

TEST_CASE("gelu uses the exact normal CDF") {
  Tape tape;
  Matrix x(1, 1);
  x << 0.0;
  CHECK(gelu(tape.constant(x)).item() == 0.0);

  // Phi(1) = 0.841344746068542948585232545632...
  x << 1.0;
  CHECK(gelu(tape.constant(x)).item() == doctest::Approx(0.8413447460685429).epsilon(1e-15));
  // The tanh approximation gives 0.8411919906082768 here.
  CHECK(std::abs(gelu(tape.constant(x)).item() - 0.8411919906082768) > 1e-4);

  // Phi(x) + Phi(-x) = 1, so gelu(x) - gelu(-x) = x.
  std::mt19937_64 rng(15);
  const Matrix v = random_matrix(rng, 5, 5, -6, 6);
  const Matrix pos = gelu(tape.constant(v)).value();
  const Matrix neg = gelu(tape.constant(Matrix(-v))).value();
  CHECK(((pos - neg) - v).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("linear: identity weight, zero input, gradients of all arguments") {
  Tape tape;
  std::mt19937_64 rng(16);
  const Matrix x = random_matrix(rng, 3, 4);
  CHECK(linear(tape.constant(x), tape.constant(Matrix::Identity(4, 4)), tape.constant(Matrix::Zero(1, 4))).value() == x);
  const Matrix b = random_matrix(rng, 1, 2);
  const Matrix out = linear(tape.constant(Matrix::Zero(3, 4)), tape.constant(random_matrix(rng, 4, 2)), tape.constant(b)).value();
  for (Index r = 0; r < 3; ++r) CHECK(out.row(r) == b.row(0));

  for (int trial = 0; trial < 5; ++trial) {
    const Matrix xv = random_matrix(rng, 3, 4), wv = random_matrix(rng, 4, 2), bv = random_matrix(rng, 1, 2), probe = random_matrix(rng, 3, 2);
    CHECK(grad_check<double>([&](Tape& t, const Tensor& v) { return weighted_sum(t, linear(v, t.constant(wv), t.constant(bv)), probe); }, xv,
                             1e-5) <= 1e-6);
    CHECK(grad_check<double>([&](Tape& t, const Tensor& v) { return weighted_sum(t, linear(t.constant(xv), v, t.constant(bv)), probe); }, wv,
                             1e-5) <= 1e-6);
    CHECK(grad_check<double>([&](Tape& t, const Tensor& v) { return weighted_sum(t, linear(t.constant(xv), t.constant(wv), v), probe); }, bv,
                             1e-5) <= 1e-6);
  }
}

TEST_CASE("grad_check on closed-form functions") {
  // Dyadic points and step keep every difference exact.
  std::mt19937_64 rng(17);
  Matrix x = random_matrix(rng, 3, 3, -64, 64).array().round() / 8.0;
  CHECK(grad_check<double>([](Tape&, const Tensor& v) { return sum(v); }, x, std::ldexp(1.0, -17)) == 0.0);
  CHECK(grad_check<double>([](Tape&, const Tensor& v) { return sum(v); }, random_matrix(rng, 3, 3), 1e-5) <= 1e-9);

  Matrix p(1, 2);
  p << 1, 2;
  CHECK(grad_check<double>([](Tape&, const Tensor& v) { return sum(hadamard(v, v)); }, p, 1e-5) <= 1e-8);
}

TEST_CASE("grad_check validates eps and finiteness") {
  const Matrix x = Matrix::Ones(1, 2);
  const ScalarFunction<double> f = [](Tape&, const Tensor& v) { return sum(v); };
  CHECK_THROWS_AS(grad_check(f, x, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(grad_check(f, x, 2e-3), std::invalid_argument);
  CHECK_NOTHROW(grad_check(f, x, 1e-3));

  const bool before = finite_checks();
  set_finite_checks(false);
  const ScalarFunction<double> blowup = [](Tape&, const Tensor& v) { return sum(exp(1e6 * v)); };
  CHECK_THROWS_AS(grad_check(blowup, x, 1e-5), EvaluationError);
  set_finite_checks(before);
}

TEST_CASE("every op passes a gradient check on random inputs") {
  std::mt19937_64 rng(18);
  struct Case {
    const char* name;
    UnaryOp op;
    Index rows, cols;
    double lo = -1, hi = 1;
  };
  const Matrix other34 = random_matrix(rng, 3, 4);
  const Matrix row4 = random_matrix(rng, 1, 4);
  const Matrix centers = random_matrix(rng, 3, 4);
  const Matrix gamma = random_matrix(rng, 1, 4, 0.5, 1.5);
  const Matrix beta = random_matrix(rng, 1, 4);
  const std::vector<Case> cases = {
      {"add", [&](Tape& t, const Tensor& x) { return x + t.constant(other34); }, 3, 4},
      {"sub", [&](Tape& t, const Tensor& x) { return t.constant(other34) - x; }, 3, 4},
      {"scale", [](Tape&, const Tensor& x) { return -2.5 * x; }, 3, 4},
      {"hadamard", [&](Tape& t, const Tensor& x) { return hadamard(x, t.constant(other34)); }, 3, 4},
      {"hadamard_self", [](Tape&, const Tensor& x) { return hadamard(x, x); }, 3, 4},
      {"add_row_x", [&](Tape& t, const Tensor& x) { return add_row(x, t.constant(row4)); }, 3, 4},
      {"add_row_row", [&](Tape& t, const Tensor& x) { return add_row(t.constant(other34), x); }, 1, 4},
      {"transpose", [](Tape&, const Tensor& x) { return transpose(x); }, 3, 4},
      {"reshape", [](Tape&, const Tensor& x) { return reshape(x, 2, 6); }, 3, 4},
      {"softmax_cols", [](Tape&, const Tensor& x) { return softmax_cols(x); }, 4, 3, -2, 2},
      {"log_softmax_rows", [](Tape&, const Tensor& x) { return log_softmax_rows(x); }, 4, 3, -2, 2},
      {"gelu", [](Tape&, const Tensor& x) { return gelu(x); }, 3, 4, -3, 3},
      {"relu", [](Tape&, const Tensor& x) { return relu(x); }, 3, 4, 0.1, 1},
      {"exp", [](Tape&, const Tensor& x) { return exp(x); }, 3, 4},
      {"sum", [](Tape&, const Tensor& x) { return sum(x); }, 3, 4},
      {"mean", [](Tape&, const Tensor& x) { return mean(x); }, 3, 4},
      {"sq_dist_a", [&](Tape& t, const Tensor& x) { return pairwise_sq_dist(x, t.constant(centers)); }, 5, 4},
      {"sq_dist_b", [&](Tape& t, const Tensor& x) { return pairwise_sq_dist(t.constant(other34), x); }, 2, 4},
      {"layer_norm_x", [&](Tape& t, const Tensor& x) { return layer_norm(x, t.constant(gamma), t.constant(beta)); }, 3, 4},
      {"layer_norm_gamma", [&](Tape& t, const Tensor& x) { return layer_norm(t.constant(other34), x, t.constant(beta)); }, 1, 4},
      {"layer_norm_beta", [&](Tape& t, const Tensor& x) { return layer_norm(t.constant(other34), t.constant(gamma), x); }, 1, 4},
      {"im2col", [](Tape&, const Tensor& x) { return im2col(x, 4, 4, 3, 2, 1); }, 16, 2},
      {"slice_cols", [](Tape&, const Tensor& x) { return slice_cols(x, 1, 2); }, 3, 4},
      {"concat_cols", [&](Tape& t, const Tensor& x) { return concat_cols<double>({x, t.constant(other34), x}); }, 3, 4},
  };
  for (const Case& c : cases) {
    CAPTURE(c.name);
    for (int trial = 0; trial < 5; ++trial) CHECK(check_unary(rng, c.op, c.rows, c.cols, c.lo, c.hi) <= 1e-5);
  }
}

TEST_CASE("backward visits nodes in reverse recording order") {
  Tape tape;
  std::vector<int> visits;
  const Tensor x = tape.variable(Matrix::Ones(1, 1));
  auto step = [&](const Tensor& in, int tag) {
    return tape.record(in.value(), {in}, [&visits, in, tag](Tape& t, const Matrix& g, const Matrix&) {
      visits.push_back(tag);
      t.accumulate(in, g);
    });
  };
  const Tensor a = step(x, 0);
  const Tensor b = step(x, 1);
  const Tensor c = step(a, 2);
  const Tensor d = tape.record(Matrix(c.value() + b.value()), {c, b}, [&visits, b, c](Tape& t, const Matrix& g, const Matrix&) {
    visits.push_back(3);
    t.accumulate(c, g);
    t.accumulate(b, g);
  });
  tape.backward(d);
  CHECK(visits == std::vector<int>{3, 2, 1, 0});
  CHECK(x.grad()(0, 0) == 2.0);
}

TEST_CASE("gradients match value shapes; clear frees the tape") {
  Tape tape;
  std::mt19937_64 rng(19);
  const Tensor w = tape.variable(random_matrix(rng, 4, 3));
  const Tensor x = tape.constant(random_matrix(rng, 2, 4));
  const Tensor y = sum(gelu(matmul(x, w)));
  tape.backward(y);
  CHECK(w.grad().rows() == 4);
  CHECK(w.grad().cols() == 3);
  CHECK_THROWS_AS((void)x.grad(), std::logic_error);
  CHECK(tape.size() > 0);
  tape.clear();
  CHECK(tape.size() == 0);
}

TEST_CASE("non-finite results from finite inputs are rejected when checks are on") {
  const bool before = finite_checks();
  set_finite_checks(true);
  {
    Tape tape;
    Matrix v(1, 1);
    v << 1000.0;
    CHECK_THROWS_AS((void)exp(tape.constant(v)), EvaluationError);
    v << 1.0;
    CHECK_NOTHROW((void)exp(tape.constant(v)));
  }
  set_finite_checks(before);
}

TEST_CASE("the tape is generic over the scalar type") {
  BasicTape<float> tape;
  MatrixX<float> a(1, 2);
  a << 1.0f, 2.0f;
  const BasicTensor<float> x = tape.variable(a);
  const BasicTensor<float> y = sum(hadamard(x, x));
  tape.backward(y);
  CHECK(y.item() == 5.0f);
  CHECK(x.grad()(0, 1) == 4.0f);
}
