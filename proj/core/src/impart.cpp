#include "deltapress/impart.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <string>

#include "deltapress/error.hpp"
#include "deltapress/rng.hpp"

namespace deltapress {
namespace {

// Exact for the two exponents in the preset grid so plans do not depend on
// the platform's pow().
double pow_c(double x, double c) {
  if (c == 1.0) return x;
  if (c == 0.5) return std::sqrt(x);
  return std::pow(x, c);
}

}  // namespace

void SparsifyConfig::validate() const {
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw ConfigError("alpha must lie in [0, 1), got " + std::to_string(alpha));
  }
  if (!(beta >= 0.0 && beta < 1.0)) {
    throw ConfigError("beta must lie in [0, 1), got " + std::to_string(beta));
  }
  if (!(c > 0.0) || !std::isfinite(c)) {
    throw ConfigError("C must be positive, got " + std::to_string(c));
  }
}

double SparsityPlan::mean() const {
  if (p.empty()) return 0.0;
  double sum = 0.0;
  for (double v : p) sum += v;
  return sum / static_cast<double>(p.size());
}

double factor_target(double alpha, Eigen::Index rows, Eigen::Index cols) {
  if (rows == cols) return (1.0 + alpha) / 2.0;
  const auto m = static_cast<double>(rows);
  const auto n = static_cast<double>(cols);
  const double q = std::min(m, n);
  return 1.0 - (1.0 - alpha) * (m * n) / (q * (m + n));
}

double importance_sparsity(double sigma_k, double sigma_1, double c,
                           double gamma) {
  const double weight = 1.0 - pow_c(sigma_k / sigma_1, c);
  if (weight == 0.0) return 0.0;
  return std::clamp(weight * gamma, 0.0, 1.0);
}

SparsityPlan allocate_sparsity(std::span<const double> sigma,
                               const SparsifyConfig& config,
                               Eigen::Index rows, Eigen::Index cols) {
  config.validate();
  const auto q = static_cast<Eigen::Index>(sigma.size());
  if (rows == 0 || cols == 0) rows = cols = q;
  if (std::min(rows, cols) != q) {
    throw ConfigError("allocate_sparsity: " + std::to_string(q) +
                      " singular values for a " + std::to_string(rows) + "x" +
                      std::to_string(cols) + " matrix");
  }

  SparsityPlan plan;
  plan.p.assign(static_cast<std::size_t>(q), 1.0);
  if (q == 0 || !(sigma[0] > 0.0)) {
    plan.empty = true;
    return plan;
  }
  for (Eigen::Index k = 1; k < q; ++k) {
    if (sigma[k] > sigma[k - 1]) {
      throw ConfigError("allocate_sparsity: singular values must be non-increasing");
    }
  }

  // A zero target is the identity: every column dense, nothing pre-pruned.
  if (config.alpha == 0.0) {
    std::fill(plan.p.begin(), plan.p.end(), 0.0);
    plan.preprune_boundary = q;
    plan.kept_columns = q;
    return plan;
  }

  const double target = factor_target(config.alpha, rows, cols);
  plan.factor_target = target;
  // The epsilon keeps products such as 10 * (1 - 0.8) from flooring low.
  const auto r = static_cast<Eigen::Index>(
      std::floor(static_cast<double>(q) * (1.0 - config.beta) + 1e-9));
  plan.preprune_boundary = r;
  if (r == 0) {
    plan.saturated = true;
    return plan;
  }

  const double s1 = sigma[0];
  double weight_sum = 0.0;
  for (Eigen::Index i = 0; i < r; ++i) weight_sum += 1.0 - pow_c(sigma[i] / s1, config.c);

  double gamma = 0.0;
  if (weight_sum > 0.0) {
    const double scaled = ((target - config.beta) / (1.0 - config.beta)) *
                          static_cast<double>(r) / weight_sum;
    const double cap_weight = 1.0 - pow_c(sigma[r - 1] / s1, config.c);
    const double cap = cap_weight > 0.0 ? 1.0 / cap_weight
                                        : std::numeric_limits<double>::infinity();
    gamma = std::min(scaled, cap);
  }
  plan.gamma = gamma;
  for (Eigen::Index k = 0; k < r; ++k) {
    plan.p[static_cast<std::size_t>(k)] = importance_sparsity(sigma[k], s1, config.c, gamma);
  }

  // Boundary shift against the overall per-factor budget.
  auto budget_met = [&] {
    double sum = 0.0;
    for (double v : plan.p) sum += v;
    return !(sum / static_cast<double>(q) < target);
  };
  for (Eigen::Index i = r - 1; i >= 0 && !budget_met(); --i) {
    plan.p[static_cast<std::size_t>(i)] = 1.0;
  }

  plan.kept_columns = static_cast<Eigen::Index>(
      std::count_if(plan.p.begin(), plan.p.end(), [](double v) { return v < 1.0; }));
  plan.saturated = plan.kept_columns == 0;
  return plan;
}

std::uint64_t mask_seed(float sigma_k, std::string_view salt, Factor which) {
  std::uint64_t x = std::bit_cast<std::uint64_t>(static_cast<double>(sigma_k)) ^
                    fnv1a64(salt);
  if (which == Factor::kV) x += 1;
  return splitmix64_mix(x);
}

std::vector<std::uint32_t> mask_indices(std::uint64_t seed, Eigen::Index length,
                                        double keep_probability) {
  std::vector<std::uint32_t> out;
  SplitMix64 gen(seed);
  for (Eigen::Index i = 0; i < length; ++i) {
    if (gen.uniform() < keep_probability) out.push_back(static_cast<std::uint32_t>(i));
  }
  return out;
}

std::size_t SparseFactors::stored_entry_count() const {
  std::size_t n = 0;
  for (const auto& c : columns) n += c.u_index.size() + c.v_index.size();
  return n;
}

SparseFactors sparsify(const SvdFactors& factors, const SparsityPlan& plan,
                       const SparsifyConfig& config, const MaskOptions& options) {
  if (static_cast<Eigen::Index>(plan.p.size()) != factors.rank()) {
    throw ConfigError("sparsify: plan length " + std::to_string(plan.p.size()) +
                      " does not match rank " + std::to_string(factors.rank()));
  }
  SparseFactors out;
  out.rows = factors.rows();
  out.cols = factors.cols();
  out.rank = factors.rank();
  out.config = config;
  out.plan = plan;
  for (Eigen::Index k = 0; k < factors.rank(); ++k) {
    const double p = plan.p[static_cast<std::size_t>(k)];
    if (!(p < 1.0)) continue;  // dropped outright, no rescale
    SparseColumn col;
    col.sigma = round_to_f16(factors.sigma[static_cast<std::size_t>(k)]);
    col.p = p;
    const double keep = 1.0 - p;
    const double scale = options.rescale ? 1.0 / keep : 1.0;
    col.u_index = mask_indices(mask_seed(col.sigma, config.salt, Factor::kU), out.rows, keep);
    col.v_index = mask_indices(mask_seed(col.sigma, config.salt, Factor::kV), out.cols, keep);
    col.u_value.reserve(col.u_index.size());
    for (auto i : col.u_index) col.u_value.push_back(static_cast<float>(factors.u(i, k) * scale));
    col.v_value.reserve(col.v_index.size());
    for (auto j : col.v_index) col.v_value.push_back(static_cast<float>(factors.v(j, k) * scale));
    out.columns.push_back(std::move(col));
  }
  return out;
}

std::vector<double> stored_sigma(const SvdFactors& factors) {
  std::vector<double> out;
  out.reserve(factors.sigma.size());
  for (float s : factors.sigma) {
    const float r = round_to_f16(s);
    if (!std::isfinite(r)) {
      throw NumericalError("singular value " + std::to_string(s) +
                           " exceeds the 16-bit storage range");
    }
    out.push_back(r);
  }
  return out;
}

SparseFactors sparsify_tensor(const SvdFactors& factors,
                              const SparsifyConfig& config) {
  const auto sigma = stored_sigma(factors);
  const auto plan = allocate_sparsity(sigma, config, factors.rows(), factors.cols());
  return sparsify(factors, plan, config);
}

SparseFactors sparsify_tensor(const Matrix& delta, const SparsifyConfig& config) {
  config.validate();
  return sparsify_tensor(svd(delta, config.salt), config);
}

Matrix reconstruct(const SparseFactors& factors) {
  const auto k = static_cast<Eigen::Index>(factors.columns.size());
  Matrix out = Matrix::Zero(factors.rows, factors.cols);
  if (k == 0) return out;
  ColMatrix u = ColMatrix::Zero(factors.rows, k);
  ColMatrix v = ColMatrix::Zero(factors.cols, k);
  Eigen::VectorXf s(k);
  for (Eigen::Index c = 0; c < k; ++c) {
    const auto& col = factors.columns[static_cast<std::size_t>(c)];
    s[c] = col.sigma;
    for (std::size_t t = 0; t < col.u_index.size(); ++t) u(col.u_index[t], c) = col.u_value[t];
    for (std::size_t t = 0; t < col.v_index.size(); ++t) v(col.v_index[t], c) = col.v_value[t];
  }
  out.noalias() = u * s.asDiagonal() * v.transpose();
  return out;
}

// ---------------------------------------------------------------------------

std::uint64_t dare_seed(std::string_view salt) {
  return splitmix64_mix(fnv1a64("/dare", fnv1a64(salt)));
}

Matrix dare_sparsify(const Matrix& delta, double p, std::string_view salt,
                     const MaskOptions& options) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("DARE drop rate must lie in [0, 1), got " + std::to_string(p));
  }
  const double keep = 1.0 - p;
  const double scale = options.rescale ? 1.0 / keep : 1.0;
  Matrix out = Matrix::Zero(delta.rows(), delta.cols());
  SplitMix64 gen(dare_seed(salt));
  for (Eigen::Index i = 0; i < delta.size(); ++i) {
    if (gen.uniform() < keep) {
      out.data()[i] = static_cast<float>(delta.data()[i] * scale);
    }
  }
  return out;
}

}  // namespace deltapress
