#include "deltapress/merge.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

#include "deltapress/error.hpp"
#include "deltapress/impart.hpp"

namespace deltapress {
namespace {

using json = nlohmann::json;

// Sorting first makes the result independent of model order.
double ordered_sum(std::vector<float>& values) {
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (float v : values) sum += v;
  return sum;
}

int sign_of(double v) { return (v > 0.0) - (v < 0.0); }

void check_deltas(const TensorMap& base, std::span<const TensorMap> deltas) {
  for (std::size_t t = 0; t < deltas.size(); ++t) {
    for (const auto& [name, d] : deltas[t]) {
      auto it = base.find(name);
      if (it == base.end()) {
        throw DataError("model " + std::to_string(t) + ": tensor '" + name +
                        "' is not in the base checkpoint");
      }
      if (it->second.rows() != d.rows() || it->second.cols() != d.cols()) {
        throw DataError("model " + std::to_string(t) + ": tensor '" + name +
                        "': shape mismatch with base");
      }
    }
  }
}

const Matrix* find_tensor(const TensorMap& map, const std::string& name) {
  auto it = map.find(name);
  return it == map.end() ? nullptr : &it->second;
}

std::string_view kind_name(PreSparsify::Kind kind) {
  switch (kind) {
    case PreSparsify::Kind::kNone:
      return "none";
    case PreSparsify::Kind::kDare:
      return "dare";
    case PreSparsify::Kind::kImpart:
      return "impart";
  }
  return "?";
}

}  // namespace

void MergeConfig::validate() const {
  if (!std::isfinite(lambda)) throw ConfigError("merge lambda must be finite");
  if (!(retain > 0.0 && retain <= 1.0)) {
    throw ConfigError("TIES retain must lie in (0, 1], got " + std::to_string(retain));
  }
  if (pre.kind != PreSparsify::Kind::kNone && !(pre.ratio >= 0.0 && pre.ratio < 1.0)) {
    throw ConfigError("pre-sparsification ratio must lie in [0, 1), got " +
                      std::to_string(pre.ratio));
  }
}

json MergeConfig::to_json() const {
  json pre_json = {{"kind", std::string(kind_name(pre.kind))}};
  if (pre.kind != PreSparsify::Kind::kNone) pre_json["ratio"] = pre.ratio;
  if (pre.kind == PreSparsify::Kind::kImpart) {
    pre_json["beta"] = pre.beta;
    pre_json["c"] = pre.c;
  }
  json out = {{"strategy", strategy == MergeStrategy::kTies ? "ties" : "ta"},
              {"lambda", lambda},
              {"pre_sparsify", pre_json}};
  if (strategy == MergeStrategy::kTies) out["retain"] = retain;
  return out;
}

TensorMap merge_ta(const TensorMap& base, std::span<const TensorMap> deltas, double lambda) {
  check_deltas(base, deltas);
  TensorMap out;
  std::vector<float> values;
  for (const auto& [name, b] : base) {
    std::vector<const Matrix*> parts;
    for (const auto& d : deltas) {
      if (const Matrix* m = find_tensor(d, name)) parts.push_back(m);
    }
    Matrix merged = b;
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      values.clear();
      for (const Matrix* m : parts) values.push_back(m->data()[i]);
      merged.data()[i] = b.data()[i] + static_cast<float>(lambda * ordered_sum(values));
    }
    out.emplace(name, std::move(merged));
  }
  return out;
}

Matrix ties_trim(const Matrix& delta, double retain) {
  if (!(retain > 0.0 && retain <= 1.0)) {
    throw ConfigError("TIES retain must lie in (0, 1], got " + std::to_string(retain));
  }
  const auto size = delta.size();
  const auto keep = std::min<Eigen::Index>(
      size, static_cast<Eigen::Index>(std::ceil(retain * static_cast<double>(size) - 1e-9)));
  if (keep == size) return delta;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(size));
  for (Eigen::Index i = 0; i < size; ++i) order[static_cast<std::size_t>(i)] = i;
  const float* d = delta.data();
  auto before = [d](Eigen::Index a, Eigen::Index b) {
    const float ma = std::abs(d[a]);
    const float mb = std::abs(d[b]);
    return ma != mb ? ma > mb : a < b;
  };
  std::nth_element(order.begin(), order.begin() + keep, order.end(), before);
  Matrix out = Matrix::Zero(delta.rows(), delta.cols());
  for (Eigen::Index t = 0; t < keep; ++t) {
    const auto i = order[static_cast<std::size_t>(t)];
    out.data()[i] = d[i];
  }
  return out;
}

TensorMap merge_ties(const TensorMap& base, std::span<const TensorMap> deltas,
                     double lambda, double retain) {
  check_deltas(base, deltas);
  TensorMap out;
  std::vector<float> values;
  std::vector<float> agreeing;
  for (const auto& [name, b] : base) {
    std::vector<Matrix> trimmed;
    for (const auto& d : deltas) {
      if (const Matrix* m = find_tensor(d, name)) trimmed.push_back(ties_trim(*m, retain));
    }
    Matrix merged = b;
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      values.clear();
      for (const auto& m : trimmed) values.push_back(m.data()[i]);
      const int elected = sign_of(ordered_sum(values));
      agreeing.clear();
      for (float v : values) {
        if (v != 0.0f && sign_of(v) == elected) agreeing.push_back(v);
      }
      if (elected == 0 || agreeing.empty()) continue;
      const double mean = ordered_sum(agreeing) / static_cast<double>(agreeing.size());
      merged.data()[i] = b.data()[i] + static_cast<float>(lambda * mean);
    }
    out.emplace(name, std::move(merged));
  }
  return out;
}

TensorMap presparsify(const TensorMap& delta, const PreSparsify& pre, std::size_t model_index) {
  if (pre.kind == PreSparsify::Kind::kNone) return delta;
  TensorMap out;
  for (const auto& [name, m] : delta) {
    if (m.rows() < 2 || m.cols() < 2) {
      out.emplace(name, m);
      continue;
    }
    const std::string salt = name + "#" + std::to_string(model_index);
    try {
      if (pre.kind == PreSparsify::Kind::kDare) {
        out.emplace(name, dare_sparsify(m, pre.ratio, salt));
      } else {
        SparsifyConfig cfg{pre.ratio, pre.beta, pre.c, salt};
        out.emplace(name, reconstruct(sparsify_tensor(m, cfg)));
      }
    } catch (const Error& e) {
      rethrow_with_tensor(e, name);
    }
  }
  return out;
}

TensorMap merge_with_presparsify(const TensorMap& base, std::span<const TensorMap> deltas,
                                 const MergeConfig& config) {
  config.validate();
  std::vector<TensorMap> prepared;
  prepared.reserve(deltas.size());
  for (std::size_t t = 0; t < deltas.size(); ++t) {
    prepared.push_back(presparsify(deltas[t], config.pre, t));
  }
  if (config.strategy == MergeStrategy::kTies) {
    return merge_ties(base, prepared, config.lambda, config.retain);
  }
  return merge_ta(base, prepared, config.lambda);
}

// ---------------------------------------------------------------------------

json GridReport::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"stage", r.stage},
                         {"config", r.config.to_json()},
                         {"score", r.score},
                         {"wall_time", r.wall_time}});
  }
  json out = {{"schema_version", 1},
              {"rows", rows_json},
              {"best", best ? best->to_json() : json(nullptr)},
              {"best_score", best ? json(best_score) : json(nullptr)},
              {"completed", completed}};
  if (!error.empty()) out["error"] = error;
  return out;
}

namespace {

struct StageOutcome {
  std::vector<GridRow> rows;
  bool failed = false;
  std::string error;
};

StageOutcome run_stage(int stage, const std::vector<MergeConfig>& configs,
                       const TensorMap& base, std::span<const TensorMap> deltas,
                       const MergeEvaluator& evaluate, int threads) {
  std::vector<GridRow> rows(configs.size());
  std::vector<std::string> errors(configs.size());
  parallel_for(configs.size(), threads, [&](std::size_t i) {
    const auto start = std::chrono::steady_clock::now();
    rows[i].stage = stage;
    rows[i].config = configs[i];
    try {
      const auto merged = merge_with_presparsify(base, deltas, configs[i]);
      rows[i].score = evaluate(merged);
    } catch (const std::exception& e) {
      errors[i] = e.what();
      if (errors[i].empty()) errors[i] = "evaluation failed";
    }
    rows[i].wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  });
  StageOutcome out;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (!errors[i].empty()) {
      out.failed = true;
      out.error = "stage " + std::to_string(stage) + ", config " + configs[i].to_json().dump() +
                  ": " + errors[i];
      break;
    }
    out.rows.push_back(rows[i]);
  }
  return out;
}

const GridRow* best_row(const std::vector<GridRow>& rows, int stage) {
  const GridRow* best = nullptr;
  for (const auto& r : rows) {
    if (r.stage != stage || std::isnan(r.score)) continue;
    if (!best || r.score > best->score) best = &r;
  }
  return best;
}

}  // namespace

GridReport grid_search(const TensorMap& base, std::span<const TensorMap> deltas,
                       const MergeConfig& templ, const MergeEvaluator& evaluate,
                       const GridSpec& spec, int threads) {
  if (deltas.empty()) throw ConfigError("grid search needs at least one model");
  if (spec.lambdas.empty()) throw ConfigError("grid search needs at least one lambda");
  const bool ties = templ.strategy == MergeStrategy::kTies;
  if (ties && spec.retains.empty()) throw ConfigError("TIES grid needs at least one retain");

  std::vector<MergeConfig> stage1;
  for (double lambda : spec.lambdas) {
    const std::vector<double> retains = ties ? spec.retains : std::vector<double>{1.0};
    for (double retain : retains) {
      MergeConfig c = templ;
      c.lambda = lambda;
      c.retain = retain;
      c.pre = PreSparsify::none();
      stage1.push_back(c);
    }
  }

  GridReport report;
  auto finish = [&](int stage) {
    if (const GridRow* b = best_row(report.rows, stage)) {
      report.best = b->config;
      report.best_score = b->score;
    }
  };

  auto s1 = run_stage(1, stage1, base, deltas, evaluate, threads);
  report.rows = std::move(s1.rows);
  finish(1);
  if (s1.failed) {
    report.completed = false;
    report.error = s1.error;
    return report;
  }
  if (templ.pre.kind == PreSparsify::Kind::kNone || spec.ratios.empty() || !report.best) {
    return report;
  }

  std::vector<MergeConfig> stage2;
  for (double ratio : spec.ratios) {
    MergeConfig c = *report.best;
    c.pre = templ.pre;
    c.pre.ratio = ratio;
    stage2.push_back(c);
  }
  auto s2 = run_stage(2, stage2, base, deltas, evaluate, threads);
  report.rows.insert(report.rows.end(), s2.rows.begin(), s2.rows.end());
  if (best_row(report.rows, 2)) finish(2);
  if (s2.failed) {
    report.completed = false;
    report.error = s2.error;
  }
  return report;
}

}  // namespace deltapress
