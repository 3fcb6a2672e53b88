#pragma once

#include <string_view>
#include <vector>

#include "deltapress/numeric.hpp"

namespace deltapress {

// Thin SVD: u is m x q, v is n x q, sigma non-increasing, q = min(m, n).
// Signs are canonical: the largest-magnitude entry of every column of u is
// non-negative (first index wins ties), with v flipped alongside.
struct SvdFactors {
  ColMatrix u;
  std::vector<float> sigma;
  ColMatrix v;

  Eigen::Index rows() const { return u.rows(); }
  Eigen::Index cols() const { return v.rows(); }
  Eigen::Index rank() const { return static_cast<Eigen::Index>(sigma.size()); }
};

// Decomposition runs in double precision; factors are stored as f32.
// `name` only labels error messages.
SvdFactors svd(const Matrix& delta, std::string_view name = {});

void canonicalize_signs(SvdFactors& factors);

// r = floor((1 - alpha) m n / (m + n + 1)) clamped to q; alpha == 0 keeps all
// q components. Throws ConfigError ("rank underflow") when r would be 0.
Eigen::Index lowrank_rank(Eigen::Index rows, Eigen::Index cols, double alpha);

SvdFactors truncate_lowrank(const SvdFactors& factors, double alpha);

Matrix reconstruct(const SvdFactors& factors);

}  // namespace deltapress
