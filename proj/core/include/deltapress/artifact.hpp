#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "deltapress/impart.hpp"
#include "deltapress/quant.hpp"
#include "deltapress/tensor_store.hpp"
#include "json.hpp"

namespace deltapress {

// Compressed artifacts are ordinary containers whose "__metadata__" holds the
// manifest; the record layouts are described in docs/artifact_format.md.
inline constexpr int kFormatVersion = 1;

enum class Method { kImpart, kDare, kLowRank, kImpartQt, kDense };

std::string_view method_name(Method method);
Method parse_method(std::string_view name);

struct CompressTarget {
  enum class Kind { kAlpha, kCr, kCrQt };
  Kind kind = Kind::kAlpha;
  double value = 0.9;

  static CompressTarget alpha(double a) { return {Kind::kAlpha, a}; }
  static CompressTarget cr(double r) { return {Kind::kCr, r}; }
  static CompressTarget cr_qt(double r) { return {Kind::kCrQt, r}; }
};

struct CompressOptions {
  Method method = Method::kImpart;
  CompressTarget target;
  double beta = 0.7;
  double c = 1.0;
  QuantConfig quant;
  std::string salt;  // optional prefix; each tensor's salt ends with its name
  int threads = 1;
  // Optional per-tensor calibration inputs (cols x samples) for impart-qt.
  std::map<std::string, MatrixD> calibration;

  void validate() const;
};

struct TensorReport {
  std::string name;
  Method method = Method::kDense;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  double alpha = 0.0;           // sparsity target handed to the method
  double original_bytes = 0.0;  // 16-bit baseline
  std::size_t payload_bytes = 0;
  std::size_t stored_entries = 0;
  double achieved_cr = 0.0;
  double rel_error = 0.0;  // of the decoded record against the input delta
  // ImPart plans only.
  Eigen::Index rank = 0;
  Eigen::Index preprune_boundary = 0;
  Eigen::Index kept_columns = 0;
  double gamma = 0.0;
  std::vector<double> p_quantiles;  // min, 25%, median, 75%, max of kept p

  nlohmann::json to_json() const;
};

struct CompressResult {
  TensorContainer artifact;
  std::vector<TensorReport> tensors;

  double original_bytes() const;
  double payload_bytes() const;
  double achieved_cr() const;
  nlohmann::json report() const;
};

CompressResult compress(const DeltaSet& deltas, const CompressOptions& options,
                        const std::string& base_digest);

// ---------------------------------------------------------------------------
// Storage budgeting for --cr targets. Original size counts 16 bits/param.

struct ByteEstimate {
  double mean = 0.0;
  double stddev = 0.0;
};

ByteEstimate impart_payload_estimate(const SparsityPlan& plan, Eigen::Index rows,
                                     Eigen::Index cols);

// Smallest alpha whose expected payload plus four standard deviations fits in
// 2 m n / cr bytes.
double impart_alpha_for_budget(std::span<const double> sigma, double cr,
                               const SparsifyConfig& config, Eigen::Index rows,
                               Eigen::Index cols);

// DARE drop rate with the same four-sigma margin.
double dare_rate_for_budget(Eigen::Index rows, Eigen::Index cols, double cr);

// ---------------------------------------------------------------------------
// Record codecs. Each writes tensors named "<name>:<part>" into `out` and
// returns the manifest record.

nlohmann::json encode_sparse(const std::string& name, DType dtype,
                             const SparseFactors& factors, TensorContainer& out);
SparseFactors decode_sparse(const std::string& name, const TensorContainer& artifact,
                            const nlohmann::json& record);

nlohmann::json encode_quantized(const std::string& name, DType dtype,
                                const QuantizedFactors& factors, TensorContainer& out);
QuantizedFactors decode_quantized(const std::string& name, const TensorContainer& artifact,
                                  const nlohmann::json& record);

// FNV-1a over the kept columns' sparsity ratios.
std::string plan_digest(std::span<const double> kept_p);

// ---------------------------------------------------------------------------

bool is_artifact(const TensorContainer& container);

struct DecodedDelta {
  std::vector<std::int64_t> shape;
  DType dtype = DType::kF32;
  Matrix data;
};

std::map<std::string, DecodedDelta> decode_artifact(const TensorContainer& artifact,
                                                    int threads = 1);

// W = W_base + decoded delta for every record; other base tensors are copied.
// Throws DataError when the manifest digest differs from `base_digest`
// unless `force` is set.
TensorContainer reconstruct_checkpoint(const TensorContainer& artifact,
                                       const TensorContainer& base,
                                       const std::string& base_digest, bool force,
                                       int threads = 1);

}  // namespace deltapress
