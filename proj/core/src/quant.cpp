#include "deltapress/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Cholesky>

#include "deltapress/bitpack.hpp"
#include "deltapress/error.hpp"

namespace deltapress {
namespace {

std::int32_t max_code(int bits) { return (1 << (bits - 1)) - 1; }

}  // namespace

QuantConfig QuantConfig::uniform(int bits) {
  QuantConfig c;
  c.groups = {{0, bits}};
  return c;
}

void QuantConfig::validate() const {
  if (groups.empty()) throw ConfigError("quantization needs at least one bit group");
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& grp = groups[g];
    if (grp.bits != 2 && grp.bits != 3 && grp.bits != 4 && grp.bits != 8) {
      throw ConfigError("bit width must be one of 2, 3, 4, 8; got " + std::to_string(grp.bits));
    }
    if (grp.count < 0) throw ConfigError("bit group counts must be positive");
    if (grp.count == 0 && g + 1 != groups.size()) {
      throw ConfigError("only the last bit group may cover the remaining columns");
    }
  }
  if (blocksize <= 0) throw ConfigError("GPTQ blocksize must be positive");
  if (!(damping >= 0.0)) throw ConfigError("Hessian damping must be non-negative");
}

std::vector<int> column_bits(const QuantConfig& config, Eigen::Index kept_columns) {
  std::vector<int> bits;
  bits.reserve(static_cast<std::size_t>(kept_columns));
  for (const auto& grp : config.groups) {
    const auto remaining = kept_columns - static_cast<Eigen::Index>(bits.size());
    const auto take = grp.count == 0 ? remaining : std::min<Eigen::Index>(grp.count, remaining);
    bits.insert(bits.end(), static_cast<std::size_t>(take), grp.bits);
  }
  // Groups that do not cover every column extend the last width.
  while (static_cast<Eigen::Index>(bits.size()) < kept_columns) {
    bits.push_back(config.groups.back().bits);
  }
  return bits;
}

InverseHessianFactor InverseHessianFactor::identity(Eigen::Index n) {
  return {MatrixD::Identity(n, n)};
}

InverseHessianFactor inverse_hessian_factor(const MatrixD& hessian) {
  if (hessian.rows() != hessian.cols()) throw ConfigError("Hessian must be square");
  const Eigen::Index n = hessian.rows();
  Eigen::LLT<MatrixD> llt(hessian);
  if (llt.info() != Eigen::Success) {
    throw NumericalError(
        "Hessian is not positive definite; increase damping (e.g. --damping 0.1) and retry");
  }
  const MatrixD inverse = llt.solve(MatrixD::Identity(n, n));
  Eigen::LLT<MatrixD> inv_llt(inverse);
  if (inv_llt.info() != Eigen::Success) {
    throw NumericalError(
        "inverse Hessian lost definiteness; increase damping (e.g. --damping 0.1) and retry");
  }
  return {inv_llt.matrixU()};
}

InverseHessianFactor build_hessian_inverse(const MatrixD& x, double damping) {
  if (!(damping >= 0.0)) throw ConfigError("Hessian damping must be non-negative");
  MatrixD h = 2.0 * x * x.transpose();
  const double lambda = damping * h.diagonal().mean();
  h.diagonal().array() += lambda;
  return inverse_hessian_factor(h);
}

float rtn_scale(std::span<const float> w, int bits, std::span<const std::uint8_t> mask) {
  if (!is_supported_bit_width(bits)) {
    throw ConfigError("unsupported bit width " + std::to_string(bits));
  }
  if (!mask.empty() && mask.size() != w.size()) {
    throw ConfigError("mask length does not match the vector");
  }
  float peak = 0.0f;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (mask.empty() || mask[i]) peak = std::max(peak, std::abs(w[i]));
  }
  return round_to_f16(peak / static_cast<float>(max_code(bits)));
}

std::int32_t quantize_value(double w, float scale, int bits) {
  if (scale == 0.0f) return 0;
  const auto limit = static_cast<double>(max_code(bits));
  return static_cast<std::int32_t>(std::clamp(std::nearbyint(w / scale), -limit, limit));
}

RtnResult rtn_quantize(std::span<const float> w, int bits,
                       std::span<const std::uint8_t> mask) {
  RtnResult out;
  out.scale = rtn_scale(w, bits, mask);
  out.codes.assign(w.size(), 0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (mask.empty() || mask[i]) out.codes[i] = quantize_value(w[i], out.scale, bits);
  }
  return out;
}

GptqResult gptq_sparse(const Matrix& w, const Mask& mask,
                       const InverseHessianFactor& hinv,
                       std::span<const int> row_bits, int blocksize) {
  const Eigen::Index rows = w.rows();
  const Eigen::Index cols = w.cols();
  if (mask.rows() != rows || mask.cols() != cols) {
    throw ConfigError("GPTQ: mask shape does not match the weight");
  }
  if (hinv.size() != cols) {
    throw ConfigError("GPTQ: inverse Hessian is " + std::to_string(hinv.size()) +
                      " wide but the weight has " + std::to_string(cols) + " columns");
  }
  if (static_cast<Eigen::Index>(row_bits.size()) != rows) {
    throw ConfigError("GPTQ: one bit width per row required");
  }
  if (blocksize <= 0) throw ConfigError("GPTQ blocksize must be positive");

  GptqResult out;
  out.dequantized = Matrix::Zero(rows, cols);
  out.codes.assign(static_cast<std::size_t>(rows * cols), 0);
  out.scales.resize(static_cast<std::size_t>(rows));
  for (Eigen::Index t = 0; t < rows; ++t) {
    out.scales[static_cast<std::size_t>(t)] = rtn_scale(
        std::span<const float>(w.row(t).data(), static_cast<std::size_t>(cols)),
        row_bits[static_cast<std::size_t>(t)],
        std::span<const std::uint8_t>(mask.row(t).data(), static_cast<std::size_t>(cols)));
  }

  MatrixD work = w.cast<double>();
  const MatrixD& r = hinv.upper;
  for (Eigen::Index i0 = 0; i0 < cols; i0 += blocksize) {
    const Eigen::Index i1 = std::min<Eigen::Index>(i0 + blocksize, cols);
    MatrixD err = MatrixD::Zero(rows, i1 - i0);
    for (Eigen::Index j = i0; j < i1; ++j) {
      const double d = r(j, j);
      if (d == 0.0) {
        throw NumericalError("GPTQ: zero inverse-Hessian diagonal at column " +
                             std::to_string(j) + "; increase damping and retry");
      }
      for (Eigen::Index t = 0; t < rows; ++t) {
        const bool kept = mask(t, j) != 0;
        const double w_tmp = kept ? work(t, j) : 0.0;
        double q = 0.0;
        if (kept) {
          const auto ts = static_cast<std::size_t>(t);
          const auto code = quantize_value(w_tmp, out.scales[ts], row_bits[ts]);
          out.codes[static_cast<std::size_t>(t * cols + j)] = code;
          q = static_cast<double>(code) * out.scales[ts];
        }
        out.dequantized(t, j) = static_cast<float>(q);
        err(t, j - i0) = (w_tmp - q) / d;
      }
      if (j + 1 < i1) {
        work.block(0, j + 1, rows, i1 - j - 1).noalias() -=
            err.col(j - i0) * r.block(j, j + 1, 1, i1 - j - 1);
      }
    }
    if (i1 < cols) {
      work.rightCols(cols - i1).noalias() -= err * r.block(i0, i1, i1 - i0, cols - i1);
    }
  }
  return out;
}

double hessian_weighted_error(const Matrix& w, const Matrix& q, const MatrixD& hessian) {
  const MatrixD d = (w - q).cast<double>();
  return (d * hessian * d.transpose()).trace();
}

// ---------------------------------------------------------------------------

double quantized_compression_ratio(const SparsityPlan& plan, const QuantConfig& config,
                                   Eigen::Index rows, Eigen::Index cols) {
  const auto q = static_cast<Eigen::Index>(plan.p.size());
  if (rows == 0 || cols == 0) rows = cols = q;
  const auto bits = column_bits(config, plan.kept_columns);
  double stored = 0.0;
  for (Eigen::Index k = 0; k < plan.kept_columns; ++k) {
    stored += (bits[static_cast<std::size_t>(k)] / 16.0) *
              (1.0 - plan.p[static_cast<std::size_t>(k)]);
  }
  stored *= static_cast<double>(rows + cols);
  if (stored == 0.0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(rows) * static_cast<double>(cols) / stored;
}

AlphaSearchResult solve_alpha_for_cr(std::span<const double> sigma, double target_cr,
                                     const QuantConfig& quant,
                                     const SparsifyConfig& sparsify,
                                     Eigen::Index rows, Eigen::Index cols, double tol) {
  quant.validate();
  if (!(target_cr >= 1.0)) {
    throw ConfigError("target CR_qt must be at least 1, got " + std::to_string(target_cr));
  }
  if (!(tol > 0.0)) throw ConfigError("search tolerance must be positive");

  SparsifyConfig cfg = sparsify;
  auto ratio_at = [&](double alpha) {
    cfg.alpha = alpha;
    const auto plan = allocate_sparsity(sigma, cfg, rows, cols);
    return quantized_compression_ratio(plan, quant, rows, cols);
  };

  AlphaSearchResult result;
  if (sigma.empty() || !(sigma[0] > 0.0)) {
    result.achieved_cr = std::numeric_limits<double>::infinity();
    return result;
  }
  double low = 0.0;
  double high = 1.0;
  double high_cr = std::numeric_limits<double>::quiet_NaN();
  while (high - low > tol) {
    const double mid = 0.5 * (low + high);
    const double cr = ratio_at(mid);
    result.trajectory.emplace_back(mid, cr);
    if (cr < target_cr) {
      low = mid;
    } else {
      high = mid;
      high_cr = cr;
    }
  }
  if (std::isnan(high_cr)) {
    throw NumericalError("target CR_qt " + std::to_string(target_cr) +
                         " is unreachable even at sparsity " + std::to_string(low));
  }
  result.alpha = high;
  result.achieved_cr = high_cr;
  return result;
}

// ---------------------------------------------------------------------------

SparseFactors QuantizedFactors::dequantize() const {
  SparseFactors out;
  out.rows = rows;
  out.cols = cols;
  out.rank = rank;
  out.config = config;
  out.plan = plan;
  out.columns.reserve(columns.size());
  for (const auto& qc : columns) {
    SparseColumn col;
    col.sigma = qc.sigma;
    col.p = qc.p;
    col.u_index = qc.u_index;
    col.v_index = qc.v_index;
    col.u_value.reserve(qc.u_codes.size());
    for (auto c : qc.u_codes) col.u_value.push_back(static_cast<float>(c) * qc.u_scale);
    col.v_value.reserve(qc.v_codes.size());
    for (auto c : qc.v_codes) col.v_value.push_back(static_cast<float>(c) * qc.v_scale);
    out.columns.push_back(std::move(col));
  }
  return out;
}

QuantizedFactors quantize_artifact(const SparseFactors& sparse, const QuantConfig& config,
                                   const MatrixD& calibration) {
  config.validate();
  QuantizedFactors out;
  out.rows = sparse.rows;
  out.cols = sparse.cols;
  out.rank = sparse.rank;
  out.config = sparse.config;
  out.plan = sparse.plan;
  out.quant = config;
  const auto kept = static_cast<Eigen::Index>(sparse.columns.size());
  if (kept == 0) return out;
  const auto bits = column_bits(config, kept);

  out.columns.resize(static_cast<std::size_t>(kept));
  for (Eigen::Index k = 0; k < kept; ++k) {
    const auto& src = sparse.columns[static_cast<std::size_t>(k)];
    auto& dst = out.columns[static_cast<std::size_t>(k)];
    dst.sigma = src.sigma;
    dst.p = src.p;
    dst.bits = bits[static_cast<std::size_t>(k)];
    dst.u_index = src.u_index;
    dst.v_index = src.v_index;
    // Identity Hessian: the sweep reduces to per-vector RTN.
    auto u = rtn_quantize(src.u_value, dst.bits, {});
    dst.u_scale = u.scale;
    dst.u_codes = std::move(u.codes);
    if (calibration.size() == 0) {
      auto v = rtn_quantize(src.v_value, dst.bits, {});
      dst.v_scale = v.scale;
      dst.v_codes = std::move(v.codes);
    }
  }

  if (calibration.size() != 0) {
    if (calibration.rows() != sparse.cols) {
      throw ConfigError("calibration matrix has " + std::to_string(calibration.rows()) +
                        " features but the delta has " + std::to_string(sparse.cols) +
                        " input columns");
    }
    // V-hat^T acts on the layer input: rows are singular vectors.
    Matrix w = Matrix::Zero(kept, sparse.cols);
    Mask m = Mask::Zero(kept, sparse.cols);
    for (Eigen::Index k = 0; k < kept; ++k) {
      const auto& src = sparse.columns[static_cast<std::size_t>(k)];
      for (std::size_t t = 0; t < src.v_index.size(); ++t) {
        w(k, src.v_index[t]) = src.v_value[t];
        m(k, src.v_index[t]) = 1;
      }
    }
    const auto hinv = build_hessian_inverse(calibration, config.damping);
    const auto res = gptq_sparse(w, m, hinv, bits, config.blocksize);
    for (Eigen::Index k = 0; k < kept; ++k) {
      auto& dst = out.columns[static_cast<std::size_t>(k)];
      dst.v_scale = res.scales[static_cast<std::size_t>(k)];
      dst.v_codes.reserve(dst.v_index.size());
      for (auto j : dst.v_index) {
        dst.v_codes.push_back(res.codes[static_cast<std::size_t>(k * sparse.cols + j)]);
      }
    }
  }
  return out;
}

}  // namespace deltapress
