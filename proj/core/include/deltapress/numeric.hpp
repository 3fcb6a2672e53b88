#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace deltapress {

// Tensors are row-major to match the on-disk layout; singular factors are
// column-major so that a singular vector is contiguous.
using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMatrix = Eigen::MatrixXf;
using MatrixD = Eigen::MatrixXd;

// IEEE binary16 / bfloat16 conversions, round-to-nearest-even.
std::uint16_t f16_bits(float value);
float f16_value(std::uint16_t bits);
float round_to_f16(float value);

std::uint16_t bf16_bits(float value);
float bf16_value(std::uint16_t bits);

// Frobenius norm of (approx - exact) divided by that of exact; 0 when both are zero.
double relative_frobenius_error(const Matrix& approx, const Matrix& exact);

// Runs fn(i) for i in [0, count) on up to `threads` workers. Output written by
// index keeps results independent of scheduling.
void parallel_for(std::size_t count, int threads,
                  const std::function<void(std::size_t)>& fn);

// Thread bound from DELTAPRESS_THREADS, falling back to the hardware count.
int default_thread_count();

}  // namespace deltapress
