#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "deltapress/numeric.hpp"

namespace testing_support {

inline deltapress::Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed,
                                        double stddev = 1.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  deltapress::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(dist(gen));
  return m;
}

// Strictly decreasing positive spectrum with random gaps.
inline std::vector<double> random_spectrum(std::size_t q, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> gap(0.01, 1.0);
  std::vector<double> s(q);
  double v = 1.0 + 10.0 * gap(gen);
  for (std::size_t k = 0; k < q; ++k) {
    s[k] = v;
    v *= 1.0 - 0.5 * gap(gen);
  }
  return s;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("deltapress_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_support
