#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deltapress/numeric.hpp"
#include "json.hpp"

namespace deltapress {

// Weights or deltas keyed by tensor name. 1-D tensors are held as 1 x N.
using TensorMap = std::map<std::string, Matrix>;

enum class MergeStrategy { kTaskArithmetic, kTies };

struct PreSparsify {
  enum class Kind { kNone, kDare, kImpart };
  Kind kind = Kind::kNone;
  double ratio = 0.0;  // DARE drop rate, or ImPart target sparsity
  double beta = 0.7;
  double c = 1.0;

  static PreSparsify none() { return {}; }
  static PreSparsify dare(double p) { return {Kind::kDare, p}; }
  static PreSparsify impart(double alpha, double beta = 0.7, double c = 1.0) {
    return {Kind::kImpart, alpha, beta, c};
  }
};

struct MergeConfig {
  MergeStrategy strategy = MergeStrategy::kTaskArithmetic;
  double lambda = 1.0;  // merge scaling term
  double retain = 1.0;  // TIES keep fraction
  PreSparsify pre;

  static constexpr std::array<double, 5> kLambdaGrid{0.4, 0.6, 0.8, 1.0, 1.2};
  static constexpr std::array<double, 3> kRetainGrid{0.4, 0.6, 0.8};
  static constexpr std::array<double, 5> kRatioGrid{0.1, 0.3, 0.5, 0.7, 0.9};

  void validate() const;
  nlohmann::json to_json() const;
};

// W_base + lambda * sum_t delta_t
TensorMap merge_ta(const TensorMap& base, std::span<const TensorMap> deltas,
                   double lambda);

// Keeps the ceil(retain * size) largest magnitudes; ties go to the lower
// row-major index.
Matrix ties_trim(const Matrix& delta, double retain);

// Trim, elect the sign of the summed trimmed deltas, then add lambda times
// the mean over models whose nonzero entry agrees with the elected sign.
// Elements with no agreeing model keep the base value.
TensorMap merge_ties(const TensorMap& base, std::span<const TensorMap> deltas,
                     double lambda, double retain);

// Applies DARE or ImPart (sparsify + reconstruct) to every tensor with more
// than one row and column. Model index is folded into the mask salt.
TensorMap presparsify(const TensorMap& delta, const PreSparsify& pre,
                      std::size_t model_index = 0);

TensorMap merge_with_presparsify(const TensorMap& base,
                                 std::span<const TensorMap> deltas,
                                 const MergeConfig& config);

// ---------------------------------------------------------------------------

struct GridSpec {
  std::vector<double> lambdas{MergeConfig::kLambdaGrid.begin(),
                              MergeConfig::kLambdaGrid.end()};
  std::vector<double> retains{MergeConfig::kRetainGrid.begin(),
                              MergeConfig::kRetainGrid.end()};
  std::vector<double> ratios{MergeConfig::kRatioGrid.begin(),
                             MergeConfig::kRatioGrid.end()};
};

struct GridRow {
  int stage = 1;
  MergeConfig config;
  double score = 0.0;
  double wall_time = 0.0;  // seconds, merge + callback
};

struct GridReport {
  std::vector<GridRow> rows;
  std::optional<MergeConfig> best;
  double best_score = 0.0;
  bool completed = true;
  std::string error;  // callback failure that aborted the search

  nlohmann::json to_json() const;
};

// Higher score is better.
using MergeEvaluator = std::function<double(const TensorMap& merged)>;

// Stage 1 picks lambda (and retain for TIES) with no pre-sparsification.
// Stage 2 keeps those and scans spec.ratios for `templ.pre.kind` (skipped
// when it is kNone). Ties keep the earlier grid point. With `threads` > 1 the
// evaluator must be reentrant.
GridReport grid_search(const TensorMap& base, std::span<const TensorMap> deltas,
                       const MergeConfig& templ, const MergeEvaluator& evaluate,
                       const GridSpec& spec = {}, int threads = 1);

}  // namespace deltapress
