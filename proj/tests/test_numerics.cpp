#include <cmath>

#include "cab/errors.hpp"
#include "cab/numerics.hpp"
#include "cab/params.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cab;
using cab::testing::check_unary_adjoint;
using cab::testing::random_matrix;

namespace {

Matrix triple_loop_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST_CASE("matmul") {
  SUBCASE("identity") {
    const Matrix b = Matrix::from_rows({{5, 6}, {7, 8}});
    CHECK(matmul(Matrix::identity(2), b) == b);
  }
  SUBCASE("scalar") { CHECK(matmul(Matrix::from_rows({{2}}), Matrix::from_rows({{3}}))[0] == 6.0); }
  SUBCASE("random against triple loop") {
    const Matrix a = random_matrix(7, 3, 1);
    const Matrix b = random_matrix(3, 5, 2);
    const Matrix ref = triple_loop_matmul(a, b);
    const Matrix got = matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK(std::abs(got[i] - ref[i]) <= 1e-12 * std::max(1.0, std::abs(ref[i])));
    CHECK(max_abs_diff(matmul_tn(transpose(a), b), ref) < 1e-12);
    CHECK(max_abs_diff(matmul_nt(a, transpose(b)), ref) < 1e-12);
  }
  SUBCASE("shape error names both shapes") {
    try {
      matmul(Matrix(2, 3), Matrix(2, 3));
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string what = e.what();
      CHECK(what.find("2x3") != std::string::npos);
    }
  }
  SUBCASE("adjoint") {
    const Matrix b = random_matrix(4, 2, 3);
    auto report = check_unary_adjoint(
        random_matrix(3, 4, 4), [&](const Matrix& a) { return matmul(a, b); },
        [&](const Matrix& a, const Matrix& g) { return matmul_backward(a, b, g).da; }, 5);
    CHECK(report.passed);
    const Matrix a = random_matrix(3, 4, 6);
    report = check_unary_adjoint(
        b, [&](const Matrix& bb) { return matmul(a, bb); },
        [&](const Matrix& bb, const Matrix& g) { return matmul_backward(a, bb, g).db; }, 7);
    CHECK(report.passed);
  }
}

TEST_CASE("softmax_cols") {
  SUBCASE("symmetric column") {
    const Matrix s = softmax_cols(Matrix(2, 1, 0.0), 1.0);
    CHECK(s[0] == 0.5);
    CHECK(s[1] == 0.5);
  }
  SUBCASE("single element") {
    CHECK(softmax_cols(Matrix::from_rows({{3.7}}), 0.2)[0] == 1.0);
    CHECK(softmax_cols(Matrix::from_rows({{-1e6}}), 5.0)[0] == 1.0);
  }
  SUBCASE("random against direct formula") {
    const Matrix a = random_matrix(4, 4, 11);
    const Matrix s = softmax_cols(a, 1.0);
    for (std::size_t j = 0; j < 4; ++j) {
      double total = 0.0;
      double denom = 0.0;
      for (std::size_t i = 0; i < 4; ++i) denom += std::exp(a(i, j));
      for (std::size_t i = 0; i < 4; ++i) {
        total += s(i, j);
        CHECK(std::abs(s(i, j) - std::exp(a(i, j)) / denom) < 1e-12);
        CHECK(s(i, j) > 0.0);
        CHECK(s(i, j) <= 1.0);
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  }
  SUBCASE("large logits stay finite") {
    const Matrix s = softmax_cols(Matrix::from_rows({{1000.0}, {999.0}}), 1.0);
    CHECK(s.all_finite());
    CHECK(std::abs(s[0] + s[1] - 1.0) < 1e-12);
  }
  SUBCASE("temperature must be positive") {
    CHECK_THROWS_AS(softmax_cols(Matrix(2, 2), 0.0), ParameterError);
    CHECK_THROWS_AS(softmax_cols(Matrix(2, 2), -1.0), ParameterError);
  }
  SUBCASE("lower temperature sharpens the unique maximum") {
    const Matrix a = Matrix::from_rows({{0.3}, {0.9}, {-0.2}});
    double prev = 0.0;
    for (double t : {4.0, 2.0, 1.0, 0.5, 0.25}) {
      const double w = softmax_cols(a, t)(1, 0);
      CHECK(w > prev);
      prev = w;
    }
  }
  SUBCASE("adjoint in the input and the temperature") {
    const double temp = 0.7;
    auto report = check_unary_adjoint(
        random_matrix(5, 3, 12), [&](const Matrix& a) { return softmax_cols(a, temp); },
        [&](const Matrix& a, const Matrix& g) {
          return softmax_cols_backward(a, softmax_cols(a, temp), g, temp).da;
        },
        13);
    CHECK(report.passed);

    const Matrix a = random_matrix(5, 3, 14);
    const Matrix g = random_matrix(5, 3, 15);
    ParamSet ps;
    const auto h = ps.add("temperature", Matrix(1, 1, temp));
    auto loss = [&] { return testing::frobenius_dot(g, softmax_cols(a, ps[h].scalar())); };
    auto analytic = [&] {
      const double t = ps[h].scalar();
      ps[h].grad[0] = softmax_cols_backward(a, softmax_cols(a, t), g, t).dtemperature;
    };
    CHECK(check_gradient(ps, loss, analytic).passed);
  }
}

TEST_CASE("softmax_rows adjoint") {
  auto report = check_unary_adjoint(
      random_matrix(4, 6, 21), [](const Matrix& a) { return softmax_rows(a); },
      [](const Matrix& a, const Matrix& g) { return softmax_rows_backward(softmax_rows(a), g); },
      22);
  CHECK(report.passed);
}

TEST_CASE("l2_normalize_cols") {
  SUBCASE("3-4-5 column") {
    const Matrix n = l2_normalize_cols(Matrix::from_rows({{3}, {4}}));
    CHECK(n[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(n[1] == doctest::Approx(0.8).epsilon(1e-15));
  }
  SUBCASE("zero column stays zero") {
    const Matrix n = l2_normalize_cols(Matrix(3, 1, 0.0), 1e-8);
    CHECK(n.all_finite());
    CHECK(n == Matrix(3, 1, 0.0));
  }
  SUBCASE("unit column unchanged") {
    const Matrix u = Matrix::from_rows({{0.6}, {0.0}, {-0.8}});
    CHECK(max_abs_diff(l2_normalize_cols(u), u) <= 1e-15);
  }
  SUBCASE("scale invariance") {
    const Matrix a = random_matrix(9, 4, 31);
    for (double s : {1e-3, 0.5, 7.0, 1e4}) {
      CHECK(max_abs_diff(l2_normalize_cols(a * s), l2_normalize_cols(a)) <= 1e-12);
    }
  }
  SUBCASE("non-positive epsilon rejected") {
    CHECK_THROWS_AS(l2_normalize_cols(Matrix(2, 2, 1.0), 0.0), ParameterError);
  }
  SUBCASE("adjoint") {
    auto report = check_unary_adjoint(
        random_matrix(6, 3, 32), [](const Matrix& a) { return l2_normalize_cols(a); },
        [](const Matrix& a, const Matrix& g) {
          return l2_normalize_cols_backward(a, l2_normalize_cols(a), g);
        },
        33);
    CHECK(report.passed);
  }
}

TEST_CASE("roll") {
  const Matrix x = Matrix::from_rows({{1}, {2}, {3}});
  CHECK(roll(x, 0) == x);
  CHECK(roll(x, 1) == Matrix::from_rows({{3}, {1}, {2}}));
  CHECK_THROWS_AS(roll(x, 3), ParameterError);

  const Matrix r = random_matrix(11, 3, 41);
  for (std::size_t a = 0; a < 11; ++a) {
    for (std::size_t b = 0; b < 11; ++b) CHECK(roll(roll(r, a), b) == roll(r, (a + b) % 11));
    CHECK(roll(roll(r, a), (11 - a) % 11) == r);
    CHECK(roll_backward(r, a) == roll(r, (11 - a) % 11));
  }

  for (std::size_t lag : {0u, 1u, 4u, 10u}) {
    auto report = check_unary_adjoint(
        random_matrix(11, 2, 42 + lag), [&](const Matrix& a) { return roll(a, lag); },
        [&](const Matrix&, const Matrix& g) { return roll_backward(g, lag); }, 43 + lag);
    CHECK(report.passed);
  }
}

TEST_CASE("gelu and layer norm adjoints") {
  auto report = check_unary_adjoint(
      random_matrix(4, 5, 51), [](const Matrix& a) { return gelu(a); },
      [](const Matrix& a, const Matrix& g) { return gelu_backward(a, g); }, 52);
  CHECK(report.passed);

  const Matrix gain = random_matrix(1, 5, 53);
  const Matrix bias = random_matrix(1, 5, 54);
  report = check_unary_adjoint(
      random_matrix(4, 5, 55), [&](const Matrix& a) { return layer_norm(a, gain, bias); },
      [&](const Matrix& a, const Matrix& g) {
        LayerNormCache cache;
        layer_norm(a, gain, bias, &cache);
        return layer_norm_backward(cache, gain, g).dx;
      },
      56);
  CHECK(report.passed);
}

TEST_CASE("scalar reparameterizations") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(softplus(softplus_inverse(1.0)) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(softplus(softplus_inverse(40.0)) == doctest::Approx(40.0).epsilon(1e-15));
  CHECK(std::isfinite(softplus(800.0)));
  CHECK(sigmoid(-800.0) >= 0.0);
}

TEST_CASE("check_gradient") {
  SUBCASE("quadratic") {
    ParamSet ps;
    const auto h = ps.add("theta", random_matrix(3, 2, 61));
    auto loss = [&] {
      double s = 0.0;
      for (double v : ps[h].value.values()) s += v * v;
      return s;
    };
    auto analytic = [&] { ps[h].grad = ps[h].value * 2.0; };
    const GradCheckReport r = check_gradient(ps, loss, analytic, {1e-5, 1e-8});
    CHECK(r.passed);
    CHECK(r.max_rel_error <= 1e-8);
  }
  SUBCASE("constant") {
    ParamSet ps;
    ps.add("theta", random_matrix(2, 2, 62));
    const GradCheckReport r = check_gradient(ps, [] { return 3.25; }, [&] { ps.zero_grad(); });
    CHECK(r.passed);
    CHECK(r.params[0].max_abs_error <= 1e-9);
  }
  SUBCASE("wrong gradient is caught") {
    ParamSet ps;
    const auto h = ps.add("theta", random_matrix(2, 2, 63));
    auto loss = [&] { return sum(hadamard(ps[h].value, ps[h].value)); };
    auto analytic = [&] { ps[h].grad = ps[h].value * 3.0; };
    CHECK_FALSE(check_gradient(ps, loss, analytic).passed);
  }
  SUBCASE("non-finite perturbation is flagged") {
    ParamSet ps;
    const auto h = ps.add("theta", Matrix(1, 1, 0.0));
    auto loss = [&] { return ps[h].scalar() > 0.0 ? INFINITY : 0.0; };
    const GradCheckReport r = check_gradient(ps, loss, [&] { ps.zero_grad(); });
    CHECK(r.non_finite);
    CHECK_FALSE(r.passed);
  }
  SUBCASE("frozen parameters are skipped") {
    ParamSet ps;
    ps.add("frozen", Matrix(1, 1, 1.0), false);
    const GradCheckReport r = check_gradient(ps, [] { return 0.0; }, [] {});
    CHECK(r.params.empty());
  }
}

TEST_CASE("param registry") {
  ParamSet ps;
  ps.add("a", Matrix(2, 3));
  CHECK_THROWS_AS(ps.add("a", Matrix(1, 1)), ConfigError);
  CHECK(ps.at("a").grad.same_shape(ps.at("a").value));
  CHECK(ps.entry_count() == 6);
  CHECK_THROWS_AS(ps.at("missing"), ConfigError);
}
