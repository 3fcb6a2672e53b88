#include "deltapress/synthetic.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/QR>

#include "deltapress/error.hpp"
#include "deltapress/rng.hpp"

namespace deltapress {

using json = nlohmann::json;

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed,
                       double stddev) {
  SplitMix64 gen(seed);
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    out.data()[i] = static_cast<float>(stddev * gen.normal());
  }
  return out;
}

MatrixD random_orthonormal(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  if (cols > rows) throw ConfigError("random_orthonormal needs rows >= cols");
  SplitMix64 gen(seed);
  MatrixD g(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) g(i, j) = gen.normal();
  Eigen::HouseholderQR<MatrixD> qr(g);
  MatrixD q = qr.householderQ() * MatrixD::Identity(rows, cols);
  // Fix signs with diag(R) so the distribution does not depend on the QR convention.
  const MatrixD& r = qr.matrixQR();
  for (Eigen::Index j = 0; j < cols; ++j) {
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  }
  return q;
}

Matrix power_law_delta(Eigen::Index rows, Eigen::Index cols, double exponent, double noise,
                       std::uint64_t seed, double scale) {
  if (rows < 1 || cols < 1) throw ConfigError("synthetic delta needs positive dimensions");
  if (!(noise >= 0.0)) throw ConfigError("noise level must be non-negative");
  const auto q = std::min(rows, cols);
  const MatrixD u = random_orthonormal(rows, q, splitmix64_mix(seed ^ 0x75));
  const MatrixD v = random_orthonormal(cols, q, splitmix64_mix(seed ^ 0x76));
  Eigen::VectorXd sigma(q);
  for (Eigen::Index k = 0; k < q; ++k) {
    sigma(k) = scale * std::pow(static_cast<double>(k + 1), -exponent);
  }
  MatrixD d = u * sigma.asDiagonal() * v.transpose();
  if (noise > 0.0) {
    const Matrix g = gaussian_matrix(rows, cols, splitmix64_mix(seed ^ 0x6e));
    const MatrixD gd = g.cast<double>();
    d += gd * (noise * d.norm() / gd.norm());
  }
  return d.cast<float>();
}

// ---------------------------------------------------------------------------

void BenchSpec::validate() const {
  if (sizes.empty() || exponents.empty() || noise.empty() || methods.empty()) {
    throw ConfigError("bench spec needs at least one size, exponent, noise level and method");
  }
  for (const auto& [m, n] : sizes) {
    if (m < 2 || n < 2) throw ConfigError("bench matrices must be at least 2x2");
  }
  for (double r : cr_grid) {
    if (!(r >= 1.0)) throw ConfigError("CR grid values must be at least 1");
  }
  for (double r : cr_qt_grid) {
    if (!(r >= 1.0)) throw ConfigError("CR_qt grid values must be at least 1");
  }
  if (trials < 1) throw ConfigError("bench needs at least one trial");
  SparsifyConfig{0.5, beta, c, ""}.validate();
}

json BenchSpec::to_json() const {
  json size_list = json::array();
  for (const auto& [m, n] : sizes) size_list.push_back({m, n});
  json method_list = json::array();
  for (auto m : methods) method_list.push_back(std::string(method_name(m)));
  return {{"sizes", size_list}, {"exponents", exponents}, {"noise", noise},
          {"methods", method_list}, {"cr_grid", cr_grid}, {"cr_qt_grid", cr_qt_grid},
          {"trials", trials}, {"seed", seed}, {"beta", beta}, {"c", c}};
}

BenchSpec BenchSpec::from_json(const json& j) {
  BenchSpec s;
  try {
    if (j.contains("sizes")) {
      s.sizes.clear();
      for (const auto& e : j.at("sizes")) {
        s.sizes.emplace_back(e.at(0).get<Eigen::Index>(), e.at(1).get<Eigen::Index>());
      }
    }
    if (j.contains("methods")) {
      s.methods.clear();
      for (const auto& e : j.at("methods")) s.methods.push_back(parse_method(e.get<std::string>()));
    }
    if (j.contains("exponents")) s.exponents = j.at("exponents").get<std::vector<double>>();
    if (j.contains("noise")) s.noise = j.at("noise").get<std::vector<double>>();
    if (j.contains("cr_grid")) s.cr_grid = j.at("cr_grid").get<std::vector<double>>();
    if (j.contains("cr_qt_grid")) s.cr_qt_grid = j.at("cr_qt_grid").get<std::vector<double>>();
    if (j.contains("trials")) s.trials = j.at("trials").get<int>();
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("beta")) s.beta = j.at("beta").get<double>();
    if (j.contains("c")) s.c = j.at("c").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad bench spec: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

struct Instance {
  Eigen::Index rows;
  Eigen::Index cols;
  double exponent;
  double noise;
  int trial;
  std::uint64_t seed;
};

struct Cell {
  std::size_t instance;
  Method method;
  double target;
};

}  // namespace

json BenchReport::to_json() const {
  json list = json::array();
  for (const auto& r : rows) {
    json row = {{"shape", {r.rows, r.cols}},
                {"exponent", r.exponent},
                {"noise", r.noise},
                {"trial", r.trial},
                {"method", std::string(method_name(r.method))},
                {"target_cr", r.target_cr},
                {"alpha", r.alpha},
                {"achieved_cr", number_or_null(r.achieved_cr)},
                {"rel_error", number_or_null(r.rel_error)}};
    if (!r.error.empty()) row["error"] = r.error;
    list.push_back(std::move(row));
  }
  return {{"schema_version", 1}, {"spec", spec.to_json()}, {"rows", list}};
}

std::string BenchReport::to_csv() const {
  std::ostringstream out;
  out.precision(9);
  out << "rows,cols,exponent,noise,trial,method,target_cr,alpha,achieved_cr,rel_error,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    for (char& ch : err) {
      if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
    }
    out << r.rows << ',' << r.cols << ',' << r.exponent << ',' << r.noise << ',' << r.trial << ','
        << method_name(r.method) << ',' << r.target_cr << ',' << r.alpha << ','
        << r.achieved_cr << ',' << r.rel_error << ',' << err << '\n';
  }
  return out.str();
}

BenchReport run_bench(const BenchSpec& spec, int threads) {
  spec.validate();
  std::vector<Instance> instances;
  for (const auto& [m, n] : spec.sizes)
    for (double e : spec.exponents)
      for (double z : spec.noise)
        for (int t = 0; t < spec.trials; ++t) {
          std::ostringstream key;
          key.precision(17);
          key << m << 'x' << n << '/' << e << '/' << z << '/' << t;
          instances.push_back({m, n, e, z, t, splitmix64_mix(spec.seed ^ fnv1a64(key.str()))});
        }

  std::vector<Cell> cells;
  for (std::size_t i = 0; i < instances.size(); ++i)
    for (auto method : spec.methods) {
      const auto& grid = method == Method::kImpartQt ? spec.cr_qt_grid : spec.cr_grid;
      for (double cr : grid) cells.push_back({i, method, cr});
    }

  std::vector<Matrix> deltas(instances.size());
  parallel_for(instances.size(), threads, [&](std::size_t i) {
    const auto& in = instances[i];
    deltas[i] = power_law_delta(in.rows, in.cols, in.exponent, in.noise, in.seed);
  });

  BenchReport report;
  report.spec = spec;
  report.rows.resize(cells.size());
  parallel_for(cells.size(), threads, [&](std::size_t k) {
    const auto& cell = cells[k];
    const auto& in = instances[cell.instance];
    BenchRow& row = report.rows[k];
    row.rows = in.rows;
    row.cols = in.cols;
    row.exponent = in.exponent;
    row.noise = in.noise;
    row.trial = in.trial;
    row.method = cell.method;
    row.target_cr = cell.target;
    row.achieved_cr = std::numeric_limits<double>::quiet_NaN();
    row.rel_error = std::numeric_limits<double>::quiet_NaN();
    try {
      CompressOptions opt;
      opt.method = cell.method;
      opt.target = cell.method == Method::kImpartQt ? CompressTarget::cr_qt(cell.target)
                                                    : CompressTarget::alpha(1.0 - 1.0 / cell.target);
      opt.beta = spec.beta;
      opt.c = spec.c;
      opt.salt = "bench";
      DeltaSet set;
      set.compressible.push_back({"w", DType::kF16, {in.rows, in.cols}, deltas[cell.instance]});
      const auto result = compress(set, opt, "");
      const auto& t = result.tensors.front();
      row.alpha = t.alpha;
      row.achieved_cr = t.achieved_cr;
      row.rel_error = t.rel_error;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
  });
  return report;
}

}  // namespace deltapress
