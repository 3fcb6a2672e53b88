#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "deltapress/impart.hpp"
#include "deltapress/numeric.hpp"

namespace deltapress {

using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct BitGroup {
  int count = 0;  // 0 means "all remaining columns"
  int bits = 2;
};

struct QuantConfig {
  // Applied in sigma-descending order, truncated at the kept columns.
  std::vector<BitGroup> groups{{2, 8}, {32, 3}, {0, 2}};
  int blocksize = 128;
  double damping = 0.01;  // ridge as a fraction of mean diag(2 X X^T)

  static QuantConfig uniform(int bits);
  void validate() const;
};

// Bit width of each of the first `kept_columns` singular vectors.
std::vector<int> column_bits(const QuantConfig& config,
                             Eigen::Index kept_columns);

// Upper-triangular factor R of the inverse Hessian, H^{-1} = R^T R. Row j of
// R supplies the [H^{-1}]_{j, j:} terms of the column sweep.
struct InverseHessianFactor {
  MatrixD upper;

  Eigen::Index size() const { return upper.rows(); }
  static InverseHessianFactor identity(Eigen::Index n);
};

// H = 2 X X^T + lambda I with lambda = damping * mean(diag(2 X X^T)).
// X is (input features) x (samples).
InverseHessianFactor build_hessian_inverse(const MatrixD& x, double damping);

// Factorizes a caller-supplied symmetric Hessian. NumericalError when it is
// not positive definite.
InverseHessianFactor inverse_hessian_factor(const MatrixD& hessian);

struct RtnResult {
  std::vector<std::int32_t> codes;  // signed, masked entries are 0
  float scale = 0.0f;               // f16-representable
};

// Symmetric round-to-nearest: scale = max_kept |w| / (2^(bits-1) - 1).
RtnResult rtn_quantize(std::span<const float> w, int bits,
                       std::span<const std::uint8_t> mask);

float rtn_scale(std::span<const float> w, int bits,
                std::span<const std::uint8_t> mask);
std::int32_t quantize_value(double w, float scale, int bits);

struct GptqResult {
  Matrix dequantized;                // code * scale, exact 0 where masked
  std::vector<std::int32_t> codes;   // row-major
  std::vector<float> scales;         // one per row
};

// Mask-aware GPTQ sweep over the columns of w (rows share a scale and a bit
// width). `hinv` must have one row per column of w.
GptqResult gptq_sparse(const Matrix& w, const Mask& mask,
                       const InverseHessianFactor& hinv,
                       std::span<const int> row_bits, int blocksize);

// tr((W - Q) H (W - Q)^T)
double hessian_weighted_error(const Matrix& w, const Matrix& q,
                              const MatrixD& hessian);

// ---------------------------------------------------------------------------
// Sparsity search for a combined (sparsify + quantize) compression ratio.

// Original 16-bit entries over stored ones, with kept column k of U and V
// charged bits_k / 16 per entry. For square matrices this is the
// 1 / (2 (1 - alpha_qt)) form of the binary-search criterion.
double quantized_compression_ratio(const SparsityPlan& plan,
                                   const QuantConfig& config,
                                   Eigen::Index rows, Eigen::Index cols);

struct AlphaSearchResult {
  double alpha = 0.0;
  double achieved_cr = 0.0;
  std::vector<std::pair<double, double>> trajectory;  // (alpha, cr) per step
};

// Bisection on alpha until high - low <= tol; returns the upper end so the
// achieved ratio never falls below the target.
AlphaSearchResult solve_alpha_for_cr(std::span<const double> sigma,
                                     double target_cr,
                                     const QuantConfig& quant,
                                     const SparsifyConfig& sparsify,
                                     Eigen::Index rows = 0,
                                     Eigen::Index cols = 0,
                                     double tol = 1e-4);

// ---------------------------------------------------------------------------

struct QuantizedColumn {
  float sigma = 0.0f;
  double p = 0.0;
  int bits = 0;
  float u_scale = 0.0f;
  float v_scale = 0.0f;
  std::vector<std::uint32_t> u_index;
  std::vector<std::int32_t> u_codes;
  std::vector<std::uint32_t> v_index;
  std::vector<std::int32_t> v_codes;
};

struct QuantizedFactors {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index rank = 0;
  SparsifyConfig config;
  SparsityPlan plan;
  QuantConfig quant;
  std::vector<QuantizedColumn> columns;

  // Sparse factors carrying code * scale values.
  SparseFactors dequantize() const;
};

// U columns are quantized with an identity Hessian. V uses the Hessian of
// `calibration` (n x samples) when non-empty, identity otherwise.
QuantizedFactors quantize_artifact(const SparseFactors& sparse,
                                   const QuantConfig& config,
                                   const MatrixD& calibration = MatrixD());

}  // namespace deltapress
