#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "deltapress/artifact.hpp"
#include "json.hpp"

namespace deltapress {

// U diag(sigma) V^T + noise, with U and V Haar-like orthonormal factors and
// sigma_k = scale * k^(-exponent). `noise` is the Frobenius norm of the
// Gaussian term relative to the low-rank part.
Matrix power_law_delta(Eigen::Index rows, Eigen::Index cols, double exponent, double noise,
                       std::uint64_t seed, double scale = 1.0);

// Orthonormal columns from the QR of a Gaussian matrix (rows >= cols).
MatrixD random_orthonormal(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed);

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed,
                       double stddev = 1.0);

struct BenchSpec {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> sizes{{128, 128}};
  std::vector<double> exponents{1.0};
  std::vector<double> noise{0.0};
  std::vector<Method> methods{Method::kImpart, Method::kDare, Method::kLowRank};
  std::vector<double> cr_grid{8, 16, 32, 64};
  std::vector<double> cr_qt_grid{16, 32, 64, 128};
  int trials = 1;
  std::uint64_t seed = 0;
  double beta = 0.7;
  double c = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults. ConfigError on bad values.
  static BenchSpec from_json(const nlohmann::json& j);
};

struct BenchRow {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  double exponent = 0.0;
  double noise = 0.0;
  int trial = 0;
  Method method = Method::kImpart;
  double target_cr = 0.0;  // CR for sparse/low-rank methods, CR_qt for impart-qt
  double alpha = 0.0;
  double achieved_cr = 0.0;
  double rel_error = 0.0;
  std::string error;  // non-empty when the cell failed
};

struct BenchReport {
  BenchSpec spec;
  std::vector<BenchRow> rows;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

// Sparse and low-rank methods run at the nominal alpha = 1 - 1/CR; impart-qt
// solves alpha for CR_qt. Every method sees the same delta per trial.
BenchReport run_bench(const BenchSpec& spec, int threads = 1);

}  // namespace deltapress
