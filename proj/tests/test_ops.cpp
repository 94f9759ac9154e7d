#include "dal/errors.hpp"
#include "dal/ops.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>

using namespace dal;
using dal::test::gradient_error;
using dal::test::numeric_gradient;
using dal::test::random_matrix;

namespace {

Matrix mat(Index r, Index c, std::initializer_list<double> v) {
  Matrix m(r, c);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

// Checks d(sum(w * f(inputs)))/d(input) against central differences.
void check_gradients(const std::vector<Tensor>& inputs, const std::function<Tensor()>& f, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  const Tensor probe = f();
  const Tensor w = Tensor::constant(random_matrix(probe.rows(), probe.cols(), rng));
  auto loss = [&] { return sum(hadamard(f(), w)); };
  const auto analytic = gradients(loss(), inputs);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Matrix numeric = numeric_gradient(inputs[i], [&] {
      NoGradGuard g;
      return loss().item();
    });
    CHECK(gradient_error(analytic[i], numeric, 1e-7, 1e-5) <= 1.0);
  }
}

}  // namespace

TEST_CASE("matmul of a known pair") {
  const Tensor a = Tensor::constant(mat(2, 2, {1, 2, 3, 4}));
  const Tensor b = Tensor::constant(mat(2, 2, {5, 6, 7, 8}));
  CHECK(matmul(a, b).value() == mat(2, 2, {19, 22, 43, 50}));
  CHECK(matmul_nt(a, b).value() == mat(2, 2, {17, 23, 39, 53}));
  CHECK_THROWS_AS(matmul(a, Tensor::constant(Matrix::Ones(3, 1))), DimensionError);
}

TEST_CASE("softmax and log-softmax of [1, 2, 3]") {
  const Tensor x = Tensor::constant(mat(1, 3, {1, 2, 3}));
  const Matrix y = softmax_rows(x).value();
  CHECK(y(0, 0) == doctest::Approx(0.09003057).epsilon(1e-7));
  CHECK(y(0, 1) == doctest::Approx(0.24472847).epsilon(1e-7));
  CHECK(y(0, 2) == doctest::Approx(0.66524096).epsilon(1e-7));
  const Matrix ly = log_softmax_rows(x).value();
  for (Index j = 0; j < 3; ++j) CHECK(ly(0, j) == doctest::Approx(std::log(y(0, j))));
}

TEST_CASE("masked entries get exactly zero probability") {
  const Tensor x = Tensor::constant(mat(2, 3, {1, kMaskSentinel, 3, kMaskSentinel, 0.5, kMaskSentinel}));
  const Matrix y = softmax_rows(x).value();
  CHECK(y(0, 1) == 0.0);
  CHECK(y(1, 1) == 1.0);
  CHECK(y(1, 0) == 0.0);
  CHECK(y.row(0).sum() == doctest::Approx(1.0));
  const Tensor dead = Tensor::constant(mat(1, 2, {kMaskSentinel, kMaskSentinel}));
  CHECK_THROWS_AS(softmax_rows(dead), DegenerateRowError);
}

TEST_CASE("layer norm of [1, 2, 3] without epsilon") {
  const Tensor x = Tensor::constant(mat(1, 3, {1, 2, 3}));
  const Matrix y =
      layer_norm(x, Tensor::constant(Matrix::Ones(1, 3)), Tensor::constant(Matrix::Zero(1, 3)), 0.0).value();
  CHECK(y(0, 0) == doctest::Approx(-1.2247449));
  CHECK(y(0, 1) == doctest::Approx(0.0));
  CHECK(y(0, 2) == doctest::Approx(1.2247449));
  const Tensor flat = Tensor::constant(Matrix::Constant(1, 3, 4.0));
  const Matrix z =
      layer_norm(flat, Tensor::constant(Matrix::Ones(1, 3)), Tensor::constant(Matrix::Zero(1, 3)), 0.0).value();
  CHECK(z.isZero());
}

TEST_CASE("gelu against the erf form") {
  const Tensor x = Tensor::constant(mat(1, 3, {-1.0, 0.0, 2.0}));
  const Matrix y = gelu(x).value();
  for (Index j = 0; j < 3; ++j) {
    const double v = x.value()(0, j);
    CHECK(y(0, j) == doctest::Approx(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)))));
  }
}

TEST_CASE("gather along rows picks per-row columns") {
  const Tensor x = Tensor::constant(mat(2, 3, {10, 11, 12, 20, 21, 22}));
  IndexMatrix idx(2, 2);
  idx << 2, 0, 1, 1;
  CHECK(gather_along_rows(x, idx).value() == mat(2, 2, {12, 10, 21, 21}));
  idx(1, 0) = 3;
  CHECK_THROWS_AS(gather_along_rows(x, idx), BoundsError);
}

TEST_CASE("gather rows, pick, slices and reshape") {
  const Tensor t = Tensor::constant(mat(3, 2, {1, 2, 3, 4, 5, 6}));
  const std::vector<Index> rows{2, 0, 2};
  CHECK(gather_rows(t, rows).value() == mat(3, 2, {5, 6, 1, 2, 5, 6}));
  const std::vector<Index> r{0, 2}, c{1, 0};
  CHECK(pick(t, r, c).value() == mat(2, 1, {2, 5}));
  CHECK(col_slice(t, 1, 1).value() == mat(3, 1, {2, 4, 6}));
  CHECK(reshape(t, 2, 3).value() == mat(2, 3, {1, 2, 3, 4, 5, 6}));
  CHECK_THROWS_AS(col_slice(t, 1, 2), BoundsError);
  CHECK_THROWS_AS(reshape(t, 4, 2), DimensionError);
  const std::vector<Index> bad{3};
  CHECK_THROWS_AS(gather_rows(t, bad), BoundsError);
}

TEST_CASE("dropout is inverted and identity at p = 0") {
  std::mt19937_64 rng(3);
  const Tensor x = Tensor::constant(Matrix::Ones(200, 50));
  CHECK(dropout(x, 0.0, rng).value() == x.value());
  const Matrix y = dropout(x, 0.25, rng).value();
  for (Index i = 0; i < y.size(); ++i) CHECK((y.data()[i] == 0.0 || std::abs(y.data()[i] - 1.0 / 0.75) < 1e-15));
  CHECK(y.mean() == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("finite-difference gradients of every op") {
  std::mt19937_64 rng(11);
  Tensor a = Tensor::parameter(random_matrix(3, 4, rng));
  Tensor b = Tensor::parameter(random_matrix(4, 5, rng));
  Tensor c = Tensor::parameter(random_matrix(3, 4, rng));
  Tensor d = Tensor::parameter(random_matrix(5, 4, rng));
  Tensor row = Tensor::parameter(random_matrix(1, 4, rng));
  Tensor gain = Tensor::parameter(random_matrix(1, 4, rng));

  SUBCASE("matmul") { check_gradients({a, b}, [&] { return matmul(a, b); }); }
  SUBCASE("matmul_nt") { check_gradients({a, d}, [&] { return matmul_nt(a, d); }); }
  SUBCASE("transpose") { check_gradients({a}, [&] { return transpose(a); }); }
  SUBCASE("add sub hadamard scale") {
    check_gradients({a, c}, [&] { return hadamard(add(a, c) * 1.5, sub(a, c)); });
  }
  SUBCASE("row broadcasts") { check_gradients({a, row, gain}, [&] { return mul_row(add_row(a, row), gain); }); }
  SUBCASE("gelu") { check_gradients({a}, [&] { return gelu(a); }); }
  SUBCASE("softmax") { check_gradients({a}, [&] { return softmax_rows(a); }); }
  SUBCASE("masked softmax") {
    Tensor masked = Tensor::constant(mat(3, 4, {0, kMaskSentinel, 0, 0, 0, 0, kMaskSentinel, kMaskSentinel, 0, 0, 0, 0}));
    check_gradients({a}, [&] { return softmax_rows(add(a, masked)); });
  }
  SUBCASE("log softmax") { check_gradients({a}, [&] { return log_softmax_rows(a); }); }
  SUBCASE("layer norm") { check_gradients({a, gain, row}, [&] { return layer_norm(a, gain, row, 1e-7); }); }
  SUBCASE("gathers") {
    const std::vector<Index> idx{3, 0, 3, 1};
    IndexMatrix along(3, 6);
    along << 0, 1, 2, 3, 3, 0, 2, 2, 2, 1, 0, 3, 1, 0, 3, 2, 1, 0;
    check_gradients({d}, [&] { return gather_rows(d, idx); });
    check_gradients({a}, [&] { return gather_along_rows(a, along); });
    const std::vector<Index> r{0, 2, 2}, cc{1, 3, 3};
    check_gradients({a}, [&] { return pick(a, r, cc); });
  }
  SUBCASE("slices and concat") {
    check_gradients({a, c}, [&] {
      const std::vector<Tensor> parts{col_slice(a, 1, 2), c, col_slice(a, 0, 1)};
      return concat_cols(parts);
    });
    check_gradients({a}, [&] { return reshape(a, 6, 2); });
  }
  SUBCASE("reductions") {
    check_gradients({a, c}, [&] { return rowwise_dot(a, c); });
    check_gradients({a}, [&] { return add(sum(a), mean(hadamard(a, a))); });
  }
}
