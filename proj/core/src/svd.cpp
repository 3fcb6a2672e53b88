#include "deltapress/svd.hpp"

#include <cmath>
#include <string>

#include <Eigen/SVD>

#include "deltapress/error.hpp"

namespace deltapress {
namespace {

std::string label(std::string_view name) {
  return name.empty() ? std::string("svd") : "tensor '" + std::string(name) + "'";
}

}  // namespace

SvdFactors svd(const Matrix& delta, std::string_view name) {
  if (delta.rows() == 0 || delta.cols() == 0) {
    throw DataError(label(name) + ": cannot decompose an empty matrix");
  }
  if (!delta.allFinite()) {
    throw DataError(label(name) + ": non-finite entries");
  }
  const MatrixD a = delta.cast<double>();
  Eigen::BDCSVD<MatrixD> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (dec.info() != Eigen::Success) {
    throw NumericalError(label(name) + ": SVD did not converge");
  }

  SvdFactors f;
  f.u = dec.matrixU().cast<float>();
  f.v = dec.matrixV().cast<float>();
  const auto& s = dec.singularValues();
  f.sigma.resize(static_cast<std::size_t>(s.size()));
  for (Eigen::Index k = 0; k < s.size(); ++k) {
    f.sigma[static_cast<std::size_t>(k)] = static_cast<float>(s[k]);
  }
  canonicalize_signs(f);
  return f;
}

void canonicalize_signs(SvdFactors& factors) {
  for (Eigen::Index k = 0; k < factors.u.cols(); ++k) {
    Eigen::Index best = 0;
    float best_mag = -1.0f;
    for (Eigen::Index i = 0; i < factors.u.rows(); ++i) {
      const float mag = std::abs(factors.u(i, k));
      if (mag > best_mag) {
        best_mag = mag;
        best = i;
      }
    }
    if (factors.u(best, k) < 0.0f) {
      factors.u.col(k) = -factors.u.col(k);
      factors.v.col(k) = -factors.v.col(k);
    }
  }
}

Eigen::Index lowrank_rank(Eigen::Index rows, Eigen::Index cols, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw ConfigError("lowrank: alpha must lie in [0, 1), got " + std::to_string(alpha));
  }
  if (alpha == 0.0) return std::min(rows, cols);
  const double budget = (1.0 - alpha) * static_cast<double>(rows) * static_cast<double>(cols);
  const auto r = static_cast<Eigen::Index>(
      std::floor(budget / static_cast<double>(rows + cols + 1)));
  if (r < 1) {
    throw ConfigError("lowrank: rank underflow (alpha " + std::to_string(alpha) +
                      " leaves no room for a single component of a " +
                      std::to_string(rows) + "x" + std::to_string(cols) + " matrix)");
  }
  return std::min(r, std::min(rows, cols));
}

SvdFactors truncate_lowrank(const SvdFactors& factors, double alpha) {
  const Eigen::Index r = std::min(lowrank_rank(factors.rows(), factors.cols(), alpha),
                                  factors.rank());
  SvdFactors out;
  out.u = factors.u.leftCols(r);
  out.v = factors.v.leftCols(r);
  out.sigma.assign(factors.sigma.begin(), factors.sigma.begin() + r);
  return out;
}

Matrix reconstruct(const SvdFactors& factors) {
  Matrix out = Matrix::Zero(factors.rows(), factors.cols());
  if (factors.rank() == 0) return out;
  const Eigen::Map<const Eigen::VectorXf> s(factors.sigma.data(), factors.rank());
  out.noalias() = factors.u * s.asDiagonal() * factors.v.transpose();
  return out;
}

}  // namespace deltapress
