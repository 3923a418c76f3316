#pragma once

#include <cstddef>
#include <vector>

#include "cab/matrix.hpp"

// Dense kernels used by the attention layers, each paired with a
// hand-derived adjoint. Adjoint functions take the upstream cotangent of the
// forward output and return cotangents for the forward inputs.
namespace cab {

inline constexpr double kNormEpsilon = 1e-8;

Matrix matmul(const Matrix& a, const Matrix& b);
// aᵀ·b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a·bᵀ without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

struct MatmulAdjoint {
  Matrix da;
  Matrix db;
};
// dA = dC·Bᵀ, dB = Aᵀ·dC.
MatmulAdjoint matmul_backward(const Matrix& a, const Matrix& b, const Matrix& dc);

/// Column-stochastic softmax: out(i,j) = exp(a(i,j)/T) / Σ_i' exp(a(i',j)/T).
/// Each column is shifted by its max before exponentiation.
Matrix softmax_cols(const Matrix& a, double temperature);

struct SoftmaxAdjoint {
  Matrix da;
  double dtemperature = 0.0;
};
SoftmaxAdjoint softmax_cols_backward(const Matrix& a, const Matrix& out, const Matrix& dout,
                                     double temperature);

// Row-stochastic softmax (each row sums to one), used by the temporal heads.
Matrix softmax_rows(const Matrix& a);
Matrix softmax_rows_backward(const Matrix& out, const Matrix& dout);

/// Divides every column by max(‖column‖₂, epsilon).
Matrix l2_normalize_cols(const Matrix& a, double epsilon = kNormEpsilon);
Matrix l2_normalize_cols_backward(const Matrix& a, const Matrix& out, const Matrix& dout,
                                  double epsilon = kNormEpsilon);

/// Circular shift along time: out(t, j) = a((t - lag) mod T, j).
Matrix roll(const Matrix& a, std::size_t lag);
// The adjoint of a row permutation is its inverse permutation.
Matrix roll_backward(const Matrix& dout, std::size_t lag);

// Scalar reparameterizations used for the constrained CAB scalars.
double sigmoid(double x);
double softplus(double x);
double softplus_inverse(double y);

// tanh-approximated GELU, applied element-wise.
Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& x, const Matrix& dout);

// x + 1·biasᵀ for a 1×cols bias row.
Matrix add_row_bias(Matrix x, const Matrix& bias);
// Σ over rows, as a 1×cols row (the bias adjoint).
Matrix column_sums(const Matrix& x);
// Mean over rows, as a 1×cols row.
Matrix column_means(const Matrix& x);

struct LayerNormCache {
  Matrix normalized;  // (x - μ)/σ per row, before gain and bias
  std::vector<double> inv_std;
};
inline constexpr double kLayerNormEpsilon = 1e-5;

// Per-row normalization over the feature axis followed by gain·x̂ + bias.
Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias,
                  LayerNormCache* cache = nullptr);

struct LayerNormAdjoint {
  Matrix dx;
  Matrix dgain;
  Matrix dbias;
};
LayerNormAdjoint layer_norm_backward(const LayerNormCache& cache, const Matrix& gain,
                                     const Matrix& dout);

}  // namespace cab
