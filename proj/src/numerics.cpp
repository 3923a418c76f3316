#include "cab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "cab/errors.hpp"

namespace cab {

namespace {

void require_inner(const Matrix& a, const Matrix& b, std::size_t lhs, std::size_t rhs,
                   const char* op) {
  if (lhs != rhs) {
    throw ShapeError(std::string(op) + ": inner dimensions disagree for " + a.shape_string() +
                     " and " + b.shape_string());
  }
}

void require_positive_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("softmax temperature must be positive and finite, got " +
                         std::to_string(temperature));
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  require_inner(a, b, a.cols(), b.rows(), "matmul");
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* crow = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require_inner(a, b, a.rows(), b.rows(), "matmul_tn");
  Matrix c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* brow = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      double* crow = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require_inner(a, b, a.cols(), b.cols(), "matmul_nt");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.row(j).data();
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  return c;
}

MatmulAdjoint matmul_backward(const Matrix& a, const Matrix& b, const Matrix& dc) {
  if (dc.rows() != a.rows() || dc.cols() != b.cols()) {
    throw ShapeError("matmul_backward: cotangent " + dc.shape_string() + " does not match " +
                     a.shape_string() + " * " + b.shape_string());
  }
  return {matmul_nt(dc, b), matmul_tn(a, dc)};
}

Matrix softmax_cols(const Matrix& a, double temperature) {
  require_positive_temperature(temperature);
  Matrix out(a.rows(), a.cols());
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double mx = a(0, j);
    for (std::size_t i = 1; i < a.rows(); ++i) mx = std::max(mx, a(i, j));
    double total = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      const double e = std::exp((a(i, j) - mx) / temperature);
      out(i, j) = e;
      total += e;
    }
    for (std::size_t i = 0; i < a.rows(); ++i) out(i, j) /= total;
  }
  return out;
}

SoftmaxAdjoint softmax_cols_backward(const Matrix& a, const Matrix& out, const Matrix& dout,
                                     double temperature) {
  require_positive_temperature(temperature);
  require_same_shape(a, out, "softmax_cols_backward");
  require_same_shape(out, dout, "softmax_cols_backward");
  SoftmaxAdjoint adj{Matrix(a.rows(), a.cols()), 0.0};
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double dot = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) dot += out(i, j) * dout(i, j);
    for (std::size_t i = 0; i < a.rows(); ++i) {
      // cotangent of the scaled logits z = a / temperature
      const double dz = out(i, j) * (dout(i, j) - dot);
      adj.da(i, j) = dz / temperature;
      adj.dtemperature -= dz * a(i, j) / (temperature * temperature);
    }
  }
  return adj;
}

Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (double& v : o) v /= total;
  }
  return out;
}

Matrix softmax_rows_backward(const Matrix& out, const Matrix& dout) {
  require_same_shape(out, dout, "softmax_rows_backward");
  Matrix da(out.rows(), out.cols());
  for (std::size_t i = 0; i < out.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < out.cols(); ++j) dot += out(i, j) * dout(i, j);
    for (std::size_t j = 0; j < out.cols(); ++j) da(i, j) = out(i, j) * (dout(i, j) - dot);
  }
  return da;
}

Matrix l2_normalize_cols(const Matrix& a, double epsilon) {
  if (!(epsilon > 0.0)) throw ParameterError("l2 normalization epsilon must be positive");
  Matrix out = a;
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double sq = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) sq += a(i, j) * a(i, j);
    const double denom = std::max(std::sqrt(sq), epsilon);
    for (std::size_t i = 0; i < a.rows(); ++i) out(i, j) /= denom;
  }
  return out;
}

Matrix l2_normalize_cols_backward(const Matrix& a, const Matrix& out, const Matrix& dout,
                                  double epsilon) {
  require_same_shape(a, out, "l2_normalize_cols_backward");
  require_same_shape(out, dout, "l2_normalize_cols_backward");
  Matrix da(a.rows(), a.cols());
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double sq = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) sq += a(i, j) * a(i, j);
    const double norm = std::sqrt(sq);
    if (norm >= epsilon) {
      double dot = 0.0;
      for (std::size_t i = 0; i < a.rows(); ++i) dot += out(i, j) * dout(i, j);
      for (std::size_t i = 0; i < a.rows(); ++i)
        da(i, j) = (dout(i, j) - out(i, j) * dot) / norm;
    } else {
      // constant denominator below the floor
      for (std::size_t i = 0; i < a.rows(); ++i) da(i, j) = dout(i, j) / epsilon;
    }
  }
  return da;
}

Matrix roll(const Matrix& a, std::size_t lag) {
  const std::size_t t_len = a.rows();
  if (lag >= t_len) {
    throw ParameterError("roll lag " + std::to_string(lag) + " outside [0, " +
                         std::to_string(t_len - 1) + "]");
  }
  if (lag == 0) return a;
  Matrix out(a.rows(), a.cols());
  for (std::size_t t = 0; t < t_len; ++t) {
    const std::size_t src = (t + t_len - lag) % t_len;
    std::copy_n(a.row(src).begin(), a.cols(), out.row(t).begin());
  }
  return out;
}

Matrix roll_backward(const Matrix& dout, std::size_t lag) {
  if (lag >= dout.rows()) {
    throw ParameterError("roll lag " + std::to_string(lag) + " outside [0, " +
                         std::to_string(dout.rows() - 1) + "]");
  }
  return roll(dout, (dout.rows() - lag) % dout.rows());
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw ParameterError("softplus_inverse needs a positive argument");
  return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

namespace {
constexpr double kGeluCoeff = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

Matrix gelu(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.values()) {
    const double u = kSqrt2OverPi * (v + kGeluCoeff * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  return out;
}

Matrix gelu_backward(const Matrix& x, const Matrix& dout) {
  require_same_shape(x, dout, "gelu_backward");
  Matrix dx(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double th = std::tanh(kSqrt2OverPi * (v + kGeluCoeff * v * v * v));
    const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * v * v);
    dx[i] = dout[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
  }
  return dx;
}

Matrix add_row_bias(Matrix x, const Matrix& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw ShapeError("add_row_bias: bias " + bias.shape_string() + " for input " +
                     x.shape_string());
  }
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  return x;
}

Matrix column_sums(const Matrix& x) {
  Matrix out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x(i, j);
  return out;
}

Matrix column_means(const Matrix& x) {
  Matrix out = column_sums(x);
  out *= 1.0 / static_cast<double>(x.rows());
  return out;
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias,
                  LayerNormCache* cache) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) {
    throw ShapeError("layer_norm: gain " + gain.shape_string() + " for input " +
                     x.shape_string());
  }
  require_same_shape(gain, bias, "layer_norm");
  const std::size_t n = x.cols();
  Matrix normalized(x.rows(), n);
  std::vector<double> inv_std(x.rows());
  Matrix out(x.rows(), n);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    for (std::size_t j = 0; j < n; ++j) {
      normalized(i, j) = (r[j] - mean) * inv_std[i];
      out(i, j) = normalized(i, j) * gain[j] + bias[j];
    }
  }
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

LayerNormAdjoint layer_norm_backward(const LayerNormCache& cache, const Matrix& gain,
                                     const Matrix& dout) {
  const Matrix& xhat = cache.normalized;
  require_same_shape(xhat, dout, "layer_norm_backward");
  const std::size_t n = xhat.cols();
  LayerNormAdjoint adj{Matrix(xhat.rows(), n), Matrix(1, n), Matrix(1, n)};
  std::vector<double> dxhat(n);
  for (std::size_t i = 0; i < xhat.rows(); ++i) {
    double mean_d = 0.0;
    double mean_dx = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      adj.dgain[j] += dout(i, j) * xhat(i, j);
      adj.dbias[j] += dout(i, j);
      dxhat[j] = dout(i, j) * gain[j];
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * xhat(i, j);
    }
    mean_d /= static_cast<double>(n);
    mean_dx /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j)
      adj.dx(i, j) = cache.inv_std[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
  }
  return adj;
}

}  // namespace cab
