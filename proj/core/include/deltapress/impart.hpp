#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deltapress/numeric.hpp"
#include "deltapress/svd.hpp"

namespace deltapress {

struct SparsifyConfig {
  double alpha = 0.9;  // overall target sparsity in [0, 1)
  double beta = 0.7;   // pre-prune ratio in [0, 1)
  double c = 1.0;      // regularization exponent, > 0
  std::string salt;    // mask salt, normally the tensor name

  static constexpr std::array<double, 3> kBetaGrid{0.6, 0.7, 0.8};
  static constexpr std::array<double, 2> kCGrid{0.5, 1.0};

  void validate() const;
};

struct SparsityPlan {
  std::vector<double> p;  // per-column sparsity ratio, length q
  double gamma = 0.0;
  Eigen::Index preprune_boundary = 0;  // floor(q (1 - beta))
  Eigen::Index kept_columns = 0;       // columns with p < 1 (always a prefix)
  double factor_target = 0.0;          // per-factor sparsity target
  bool empty = false;                  // sigma_1 == 0
  bool saturated = false;              // every column pruned

  double mean() const;
};

// Per-factor sparsity that meets an overall target alpha when every column
// keeps the same fraction: solves q (1 - rho)(m + n) = (1 - alpha) m n.
// Equals (1 + alpha) / 2 for square matrices.
double factor_target(double alpha, Eigen::Index rows, Eigen::Index cols);

// p_k for a column inside the pre-prune boundary, clamped to [0, 1].
double importance_sparsity(double sigma_k, double sigma_1, double c,
                           double gamma);

// Importance-aware allocation. `sigma` must be non-increasing. rows/cols
// default to a square q x q matrix. alpha == 0 keeps every column dense.
SparsityPlan allocate_sparsity(std::span<const double> sigma,
                               const SparsifyConfig& config,
                               Eigen::Index rows = 0, Eigen::Index cols = 0);

enum class Factor { kU, kV };

// Seed for the mask of one singular vector. `sigma_k` is the 16-bit rounded
// value stored in the artifact, widened to double before hashing.
std::uint64_t mask_seed(float sigma_k, std::string_view salt, Factor which);

// Indices i in [0, length) with uniform_i < keep_probability, drawn from a
// SplitMix64 stream seeded with `seed`.
std::vector<std::uint32_t> mask_indices(std::uint64_t seed,
                                        Eigen::Index length,
                                        double keep_probability);

struct SparseColumn {
  float sigma = 0.0f;  // f16-rounded
  double p = 0.0;
  std::vector<std::uint32_t> u_index;
  std::vector<float> u_value;  // U_ik / (1 - p_k)
  std::vector<std::uint32_t> v_index;
  std::vector<float> v_value;
};

struct SparseFactors {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index rank = 0;  // q of the source decomposition
  SparsifyConfig config;
  SparsityPlan plan;
  std::vector<SparseColumn> columns;  // kept columns in sigma order

  std::size_t stored_entry_count() const;
};

struct MaskOptions {
  bool rescale = true;  // false only for the no-rescale ablation
};

SparseFactors sparsify(const SvdFactors& factors, const SparsityPlan& plan,
                       const SparsifyConfig& config,
                       const MaskOptions& options = {});

// svd -> round sigma to f16 -> allocate -> sparsify.
SparseFactors sparsify_tensor(const Matrix& delta,
                              const SparsifyConfig& config);
// Same, reusing an existing decomposition.
SparseFactors sparsify_tensor(const SvdFactors& factors,
                              const SparsifyConfig& config);

Matrix reconstruct(const SparseFactors& factors);

// f16-rounded singular values widened to double, as consumed by allocation.
std::vector<double> stored_sigma(const SvdFactors& factors);

// ---------------------------------------------------------------------------
// DARE baseline: drop each entry with probability p, rescale survivors.

std::uint64_t dare_seed(std::string_view salt);

Matrix dare_sparsify(const Matrix& delta, double p, std::string_view salt,
                     const MaskOptions& options = {});

}  // namespace deltapress
