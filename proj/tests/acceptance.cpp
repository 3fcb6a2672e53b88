// Acceptance gate: one line per criterion, followed by indented measurements.
// The process exits non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <regex>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "deltapress/artifact.hpp"
#include "deltapress/digest.hpp"
#include "deltapress/error.hpp"
#include "deltapress/impart.hpp"
#include "deltapress/merge.hpp"
#include "deltapress/quant.hpp"
#include "deltapress/synthetic.hpp"
#include "deltapress/tensor_store.hpp"
#include "oracles/oracles.hpp"

using namespace deltapress;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string summary;
  std::vector<std::string> notes;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

std::string quantiles(std::vector<double> v) {
  if (v.empty()) return "(empty)";
  std::sort(v.begin(), v.end());
  auto at = [&](double q) { return v[static_cast<std::size_t>(q * static_cast<double>(v.size() - 1) + 0.5)]; };
  return fmt("min %.4g  q25 %.4g  median %.4g  q75 %.4g  max %.4g", at(0), at(0.25), at(0.5), at(0.75),
             at(1.0));
}

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& gen, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(dist(gen));
  return m;
}

// ---------------------------------------------------------------------------
// 1 and 2: unbiasedness of the rescaled estimator, bias of the unrescaled one.

struct MomentCheck {
  double within_delta = 0.0;  // fraction of entries within 4 SE of the delta
  double within_kept = 0.0;   // ... of the kept-component expectation
  std::vector<double> bias_factor;
  std::vector<double> keep;
};

// Mean and spread of `draws` reconstructions with independent mask salts.
MomentCheck moment_check(const Matrix& delta, double alpha, int draws, bool rescale,
                         const std::string& tag) {
  const auto f = svd(delta);
  SparsifyConfig cfg;
  cfg.alpha = alpha;
  const auto sigma = stored_sigma(f);
  const auto plan = allocate_sparsity(sigma, cfg);
  const auto n = delta.size();
  std::vector<double> sum(static_cast<std::size_t>(n), 0.0);
  std::vector<double> sumsq(static_cast<std::size_t>(n), 0.0);
  MaskOptions opt;
  opt.rescale = rescale;
  for (int t = 0; t < draws; ++t) {
    cfg.salt = tag + "/" + std::to_string(t);
    const Matrix r = reconstruct(sparsify(f, plan, cfg, opt));
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = r.data()[i];
      sum[static_cast<std::size_t>(i)] += v;
      sumsq[static_cast<std::size_t>(i)] += v * v;
    }
  }
  // Expectation over kept columns only: sum of sigma_k u_k v_k^T with p_k < 1.
  Matrix kept = Matrix::Zero(delta.rows(), delta.cols());
  for (Eigen::Index k = 0; k < plan.kept_columns; ++k) {
    kept += static_cast<float>(sigma[static_cast<std::size_t>(k)]) * f.u.col(k) * f.v.col(k).transpose();
  }
  const double floor = 1e-6 * delta.cwiseAbs().maxCoeff();
  MomentCheck out;
  int ok_delta = 0;
  int ok_kept = 0;
  Matrix mean(delta.rows(), delta.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto s = static_cast<std::size_t>(i);
    const double m = sum[s] / draws;
    mean.data()[i] = static_cast<float>(m);
    const double var = std::max(0.0, sumsq[s] / draws - m * m) * draws / (draws - 1.0);
    const double tol = 4.0 * std::sqrt(var / draws) + floor;
    ok_delta += std::abs(m - delta.data()[i]) <= tol;
    ok_kept += std::abs(m - kept.data()[i]) <= tol;
  }
  out.within_delta = static_cast<double>(ok_delta) / static_cast<double>(n);
  out.within_kept = static_cast<double>(ok_kept) / static_cast<double>(n);
  for (Eigen::Index k = 0; k < plan.kept_columns; ++k) {
    const double p = plan.p[static_cast<std::size_t>(k)];
    if (p == 0.0) continue;
    const double proj = (f.u.col(k).transpose().cast<double>() * mean.cast<double>() *
                         f.v.col(k).cast<double>())(0, 0);
    out.bias_factor.push_back(proj / sigma[static_cast<std::size_t>(k)]);
    out.keep.push_back(1.0 - p);
  }
  return out;
}

struct UnbiasedFixture {
  std::vector<MomentCheck> rescaled;
  std::vector<MomentCheck> plain;
  std::vector<double> alphas;
  double seconds_rescaled = 0.0;
};

UnbiasedFixture run_unbiased_fixture() {
  UnbiasedFixture fx;
  std::mt19937_64 gen(20240601);
  std::vector<Matrix> deltas;
  for (int i = 0; i < 10; ++i) deltas.push_back(normal_matrix(32, 32, gen));
  auto t0 = Clock::now();
  for (double alpha : {0.5, 0.9}) {
    for (int i = 0; i < 10; ++i) {
      fx.rescaled.push_back(moment_check(deltas[i], alpha, 20000, true, "d" + std::to_string(i)));
      fx.alphas.push_back(alpha);
    }
  }
  fx.seconds_rescaled = seconds_since(t0);
  for (double alpha : {0.5, 0.9}) {
    for (int i = 0; i < 10; ++i) {
      fx.plain.push_back(moment_check(deltas[i], alpha, 20000, false, "d" + std::to_string(i)));
    }
  }
  return fx;
}

Outcome criterion1(const UnbiasedFixture& fx) {
  Outcome o;
  std::vector<double> vs_delta;
  std::vector<double> vs_kept;
  for (const auto& m : fx.rescaled) {
    vs_delta.push_back(m.within_delta);
    vs_kept.push_back(m.within_kept);
  }
  const double worst_delta = *std::min_element(vs_delta.begin(), vs_delta.end());
  const double worst_kept = *std::min_element(vs_kept.begin(), vs_kept.end());
  o.pass = worst_delta >= 0.99 && fx.seconds_rescaled < 120.0;
  o.summary = fmt("worst fixture has %.1f%% of entries within 4 SE of the delta (need 99%%), %.1f s",
                  100.0 * worst_delta, fx.seconds_rescaled);
  o.notes.push_back("fraction within 4 SE of the delta: " + quantiles(vs_delta));
  o.notes.push_back("fraction within 4 SE of the kept-column expectation: " + quantiles(vs_kept) +
                    (worst_kept >= 0.99 ? "  (holds)" : "  (fails)"));
  o.notes.push_back(
      "columns past the pre-prune boundary and the capped boundary column have p = 1 and contribute "
      "nothing, so the estimator is unbiased only for the kept components");
  return o;
}

Outcome criterion2(const UnbiasedFixture& fx) {
  Outcome o;
  double best_delta = 0.0;
  double best_kept = 0.0;
  std::vector<double> ratio_sq;
  std::vector<double> ratio_lin;
  int informative = 0;
  for (const auto& m : fx.plain) {
    // Fixtures whose kept columns all have p = 0 are identical with or
    // without rescale and cannot show the bias.
    if (m.keep.empty()) continue;
    ++informative;
    best_delta = std::max(best_delta, m.within_delta);
    best_kept = std::max(best_kept, m.within_kept);
    for (std::size_t k = 0; k < m.keep.size(); ++k) {
      ratio_sq.push_back(m.bias_factor[k] / (m.keep[k] * m.keep[k]));
      ratio_lin.push_back(m.bias_factor[k] / m.keep[k]);
    }
  }
  o.pass = informative > 0 && best_delta < 0.99 && best_kept < 0.99;
  o.summary = fmt("%d/%zu fixtures have a partially kept column; without rescale the best of them reaches %.1f%% vs the delta and %.1f%% vs the kept "
                  "expectation (must stay below 99%%)",
                  informative, fx.plain.size(), 100.0 * best_delta, 100.0 * best_kept);
  o.notes.push_back("measured column bias / (1-p)^2: " + quantiles(ratio_sq));
  o.notes.push_back("measured column bias / (1-p):   " + quantiles(ratio_lin));
  o.notes.push_back("both factors are masked independently, so each column shrinks by (1-p)^2");
  return o;
}

// ---------------------------------------------------------------------------
// 3: allocation against the straight-line transcription.

Outcome criterion3() {
  Outcome o;
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> gap(0.01, 1.0);
  std::uniform_real_distribution<double> alpha_dist(0.3, 0.98);
  const std::vector<int> sizes{16, 64, 128, 256, 1024};
  int instances = 0;
  int mismatches = 0;
  int invariant_failures = 0;
  int infeasible = 0;
  double min_slack = INFINITY;
  for (int s = 0; s < 100; ++s) {
    const int q = sizes[static_cast<std::size_t>(s) % sizes.size()];
    std::vector<double> sigma(static_cast<std::size_t>(q));
    double v = 1.0 + 10.0 * gap(gen);
    for (auto& x : sigma) {
      x = v;
      v *= 1.0 - 0.3 * gap(gen);
    }
    const double alpha = alpha_dist(gen);
    for (double beta : SparsifyConfig::kBetaGrid) {
      for (double c : SparsifyConfig::kCGrid) {
        ++instances;
        SparsifyConfig cfg{alpha, beta, c, ""};
        const auto plan = allocate_sparsity(sigma, cfg);
        const auto ref = oracle::allocate(sigma, alpha, beta, c);
        if (plan.p != ref.p || plan.gamma != ref.gamma) ++mismatches;
        const double target = (1.0 + alpha) / 2.0;
        // With p_1 = 0 the mean cannot exceed (q-1)/q; past that the budget
        // wins and every column saturates.
        const bool feasible = target <= (q - 1.0) / q;
        infeasible += !feasible;
        bool ok = feasible ? plan.p.front() == 0.0
                           : std::all_of(plan.p.begin(), plan.p.end(), [](double x) { return x == 1.0; });
        for (long k = ref.r; k < q; ++k) ok = ok && plan.p[static_cast<std::size_t>(k)] == 1.0;
        const double mean = std::accumulate(plan.p.begin(), plan.p.end(), 0.0) / q;
        ok = ok && mean >= target;
        min_slack = std::min(min_slack, mean - target);
        invariant_failures += !ok;
      }
    }
  }
  o.pass = mismatches == 0 && invariant_failures == 0;
  o.summary = fmt("%d instances, %d oracle mismatches, %d invariant failures", instances, mismatches,
                  invariant_failures);
  o.notes.push_back(fmt("smallest mean(p) - (1+alpha)/2 = %.3g", min_slack));
  o.notes.push_back(fmt("%d instances have (1+alpha)/2 > (q-1)/q; those must give the empty plan instead of p_1 = 0",
                        infeasible));
  return o;
}

// ---------------------------------------------------------------------------
// 4: on-disk payload against the CR budget.

std::size_t header_length(const std::vector<std::uint8_t>& file) {
  std::uint64_t len = 0;
  for (int b = 0; b < 8; ++b) len |= static_cast<std::uint64_t>(file[static_cast<std::size_t>(b)]) << (8 * b);
  return static_cast<std::size_t>(len);
}

Outcome criterion4() {
  Outcome o;
  DeltaSet set;
  const std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes{{512, 512}, {768, 512}, {512, 1024}};
  double original = 0.0;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    DeltaTensor d;
    d.name = "layer" + std::to_string(i);
    d.source_dtype = DType::kF16;
    d.data = power_law_delta(shapes[i].first, shapes[i].second, 1.0, 0.1, 100 + i, 0.01);
    d.shape = {d.data.rows(), d.data.cols()};
    original += 2.0 * static_cast<double>(d.data.size());
    set.compressible.push_back(std::move(d));
  }
  bool all = true;
  for (Method m : {Method::kImpart, Method::kDare, Method::kLowRank}) {
    std::string line = std::string(method_name(m)) + ":";
    for (double cr : {8.0, 16.0, 32.0, 64.0}) {
      CompressOptions opt;
      opt.method = m;
      opt.target = CompressTarget::cr(cr);
      const auto res = compress(set, opt, "fixture");
      const auto file = serialize_container(res.artifact);
      const std::size_t header = header_length(file);
      const double payload = static_cast<double>(file.size() - 8 - header);
      const bool ok = payload <= original / cr * 1.01;
      all = all && ok;
      line += fmt("  CR %g -> payload/budget %.4f, header %zu B%s", cr, payload / (original / cr), header,
                  ok ? "" : " OVER");
    }
    o.notes.push_back(line);
  }
  // Combined ratio for impart-qt counts code bits only; reported, not gated.
  std::string qt = "impart-qt (CR_qt target, informational):";
  for (double cr : {16.0, 32.0, 64.0, 128.0}) {
    CompressOptions opt;
    opt.method = Method::kImpartQt;
    opt.target = CompressTarget::cr_qt(cr);
    const auto res = compress(set, opt, "fixture");
    const auto file = serialize_container(res.artifact);
    const double payload = static_cast<double>(file.size() - 8 - header_length(file));
    qt += fmt("  CR_qt %g -> payload/budget %.4f", cr, payload / (original / cr));
  }
  o.notes.push_back(qt);
  o.pass = all;
  o.summary = all ? "every artifact fits original/CR + 1% by byte count"
                  : "some artifact exceeds original/CR + 1% by byte count";
  return o;
}

// ---------------------------------------------------------------------------
// 5: GPTQ identity collapse and Hessian-weighted dominance.

Mask bernoulli_mask(Eigen::Index rows, Eigen::Index cols, double keep, std::mt19937_64& gen) {
  std::bernoulli_distribution b(keep);
  Mask m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = b(gen) ? 1 : 0;
  return m;
}

Outcome criterion5() {
  Outcome o;
  std::mt19937_64 gen(55);
  int collapse_ok = 0;
  const std::vector<int> widths{2, 3, 4, 8};
  for (int t = 0; t < 100; ++t) {
    const Matrix w = normal_matrix(16, 16, gen);
    const Mask m = bernoulli_mask(16, 16, 0.5, gen);
    std::vector<int> bits(16);
    for (auto& b : bits) b = widths[gen() % widths.size()];
    const auto g = gptq_sparse(w, m, InverseHessianFactor::identity(16), bits, 1 + static_cast<int>(gen() % 16));
    bool same = true;
    for (Eigen::Index r = 0; r < 16; ++r) {
      const auto rtn = rtn_quantize(std::span<const float>(w.row(r).data(), 16), bits[static_cast<std::size_t>(r)],
                                    std::span<const std::uint8_t>(m.row(r).data(), 16));
      same = same && rtn.scale == g.scales[static_cast<std::size_t>(r)];
      for (Eigen::Index j = 0; j < 16; ++j) {
        same = same && rtn.codes[static_cast<std::size_t>(j)] == g.codes[static_cast<std::size_t>(r * 16 + j)];
      }
    }
    collapse_ok += same;
  }

  auto dominance = [&](double keep, int bits, std::uint64_t seed) {
    std::mt19937_64 g2(seed);
    int wins = 0;
    std::vector<double> rel;
    for (int t = 0; t < 100; ++t) {
      const Matrix w = normal_matrix(16, 16, g2);
      const Mask m = bernoulli_mask(16, 16, keep, g2);
      // Random SPD Hessian in calibration form: 2 X X^T plus a 1% ridge.
      const Matrix x = normal_matrix(16, 64, g2);
      MatrixD h = 2.0 * x.cast<double>() * x.cast<double>().transpose();
      h.diagonal().array() += 0.01 * h.diagonal().mean();
      const auto f = inverse_hessian_factor(h);
      const std::vector<int> bw(16, bits);
      const Matrix target = (w.array() * m.cast<float>().array()).matrix();
      const double eg = hessian_weighted_error(target, gptq_sparse(w, m, f, bw, 128).dequantized, h);
      const double er =
          hessian_weighted_error(target, gptq_sparse(w, m, InverseHessianFactor::identity(16), bw, 128).dequantized, h);
      wins += eg <= er + 1e-6;
      rel.push_back(eg / er);
    }
    return std::make_pair(wins, rel);
  };
  const auto [wins, rel] = dominance(0.5, 3, 56);
  o.pass = collapse_ok == 100 && wins >= 95;
  o.summary = fmt("identity collapse exact on %d/100; masked GPTQ <= masked RTN + 1e-6 in %d/100 (need 95)",
                  collapse_ok, wins);
  o.notes.push_back("masked (keep 0.5, 3-bit) GPTQ/RTN error ratio: " + quantiles(rel));
  for (int b : {2, 3, 8}) {
    const auto [dense_wins, dense_rel] = dominance(1.0, b, 57 + b);
    const auto [sparse_wins, sparse_rel] = dominance(0.5, b, 67 + b);
    o.notes.push_back(fmt("%d-bit: dense mask wins %d/100 (median ratio %.3f), keep-0.5 mask wins %d/100 (median %.3f)",
                          b, dense_wins, [&] { auto v = dense_rel; std::sort(v.begin(), v.end()); return v[50]; }(),
                          sparse_wins, [&] { auto v = sparse_rel; std::sort(v.begin(), v.end()); return v[50]; }()));
  }
  o.notes.push_back(
      "compensation propagated onto masked positions is discarded when those positions are zeroed, "
      "so the sweep loses its optimality guarantee once the mask is sparse");
  return o;
}

// ---------------------------------------------------------------------------
// 6: binary search for the combined ratio.

Outcome criterion6() {
  Outcome o;
  std::mt19937_64 gen(66);
  std::uniform_real_distribution<double> gap(0.01, 1.0);
  std::vector<double> rel_err;
  int within = 0;
  int monotone = 0;
  int cells = 0;
  int failures = 0;
  std::vector<double> steps;
  for (int s = 0; s < 50; ++s) {
    std::vector<double> sigma(512);
    double v = 1.0 + 10.0 * gap(gen);
    for (auto& x : sigma) {
      x = v;
      v *= 1.0 - 0.05 * gap(gen);
    }
    SparsifyConfig cfg;
    cfg.beta = SparsifyConfig::kBetaGrid[static_cast<std::size_t>(s) % 3];
    cfg.c = SparsifyConfig::kCGrid[static_cast<std::size_t>(s) % 2];
    for (double target : {16.0, 32.0, 64.0, 128.0}) {
      ++cells;
      try {
        const auto res = solve_alpha_for_cr(sigma, target, QuantConfig{}, cfg);
        const double e = std::abs(res.achieved_cr - target) / target;
        rel_err.push_back(e);
        within += e <= 0.02;
        auto traj = res.trajectory;
        std::sort(traj.begin(), traj.end());
        bool mono = true;
        for (std::size_t i = 1; i < traj.size(); ++i) mono = mono && traj[i].second >= traj[i - 1].second;
        monotone += mono;
        if (e > 0.02) {
          // Width of the CR step the bracket converged onto.
          SparsifyConfig below = cfg;
          below.alpha = std::max(0.0, res.alpha - 1e-4);
          const double cr_below = quantized_compression_ratio(allocate_sparsity(sigma, below), QuantConfig{}, 512, 512);
          steps.push_back(res.achieved_cr / cr_below);
        }
      } catch (const Error& e) {
        ++failures;
        o.notes.push_back(fmt("spectrum %d, CR_qt %g: %s", s, target, e.what()));
      }
    }
  }
  o.pass = within == cells && monotone == cells;
  o.summary = fmt("%d/%d within 2%% of target, %d/%d monotone trajectories, %d errors", within, cells, monotone,
                  cells, failures);
  o.notes.push_back("relative CR error: " + quantiles(rel_err));
  o.notes.push_back("misses: CR(alpha) / CR(alpha - 1e-4) across the final bracket: " + quantiles(steps));
  o.notes.push_back(
      "CR_qt(alpha) is a step function once gamma hits its cap (whole columns drop) and jumps at alpha = 0+ "
      "when the pre-prune boundary engages, so targets inside a step cannot be met within 2%");
  return o;
}

// ---------------------------------------------------------------------------
// 7: determinism of artifacts and reconstructions.

int run_cli(const std::string& args, const std::string& env = "") {
#ifdef DELTAPRESS_CLI
  const std::string cmd = env + " " + DELTAPRESS_CLI + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
#else
  (void)args;
  (void)env;
  return -1;
#endif
}

// Sylvester-Hadamard factors and f16-exact singular values: the decomposition
// is exact in binary, so the artifact bytes should not depend on the platform.
Matrix hadamard_delta(int n) {
  MatrixD h = MatrixD::Ones(1, 1);
  while (h.rows() < n) {
    MatrixD next(2 * h.rows(), 2 * h.rows());
    next << h, h, h, -h;
    h = next;
  }
  h /= std::sqrt(static_cast<double>(n));
  MatrixD s = MatrixD::Zero(n, n);
  for (int k = 0; k < n; ++k) s(k, k) = 1.0 - k / 128.0;
  MatrixD p = MatrixD::Identity(n, n);
  // Row permutation so U and V differ.
  for (int k = 0; k < n; ++k) p.col(k).swap(p.col((k * 5) % n));
  return (p * h * s * h.transpose()).cast<float>();
}

Outcome criterion7() {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "deltapress_acceptance_c7";
  fs::remove_all(dir);
  fs::create_directories(dir);
  TensorContainer base;
  TensorContainer ft;
  std::mt19937_64 gen(77);
  const Matrix w0 = normal_matrix(64, 64, gen, 0.02);
  const Matrix w1 = normal_matrix(96, 48, gen, 0.02);
  base.tensors["a"] = TensorEntry::from_matrix(w0, DType::kF16);
  base.tensors["b"] = TensorEntry::from_matrix(w1, DType::kF16);
  ft.tensors["a"] = TensorEntry::from_matrix(Matrix(w0 + 0.01f * hadamard_delta(64)), DType::kF16);
  ft.tensors["b"] = TensorEntry::from_matrix(Matrix(w1 + power_law_delta(96, 48, 1.0, 0.1, 78, 0.01)), DType::kF16);
  write_container(dir / "base.dp", base);
  write_container(dir / "ft.dp", ft);
  const std::string pair = " --base " + (dir / "base.dp").string() + " --finetuned " + (dir / "ft.dp").string();
  bool ok = true;
  std::vector<std::string> digests;
  for (const std::string method : {"impart --cr 16", "impart-qt --cr-qt 32", "dare --cr 16"}) {
    std::vector<std::vector<std::uint8_t>> arts;
    std::vector<std::vector<std::uint8_t>> recs;
    int run = 0;
    for (const std::string threads : {"--threads 1", "--threads 3", ""}) {
      const auto art = dir / ("art" + std::to_string(run) + ".dp");
      const auto rec = dir / ("rec" + std::to_string(run) + ".dp");
      const std::string env = threads.empty() ? "DELTAPRESS_THREADS=2" : "";
      ok = ok && run_cli("compress" + pair + " --method " + method + " " + threads + " --output " + art.string() +
                             " --report " + (dir / "r.json").string(), env) == 0;
      ok = ok && run_cli("reconstruct --artifact " + art.string() + " --base " + (dir / "base.dp").string() + " " +
                             threads + " --output " + rec.string(), env) == 0;
      if (!ok) break;
      arts.push_back(read_file_bytes(art));
      recs.push_back(read_file_bytes(rec));
      ++run;
    }
    if (!ok) {
      o.notes.push_back("CLI run failed for method " + method);
      break;
    }
    const bool same = std::all_of(arts.begin(), arts.end(), [&](const auto& a) { return a == arts[0]; }) &&
                      std::all_of(recs.begin(), recs.end(), [&](const auto& r) { return r == recs[0]; });
    ok = ok && same;
    o.notes.push_back(fmt("%-20s 3 processes: artifacts %s, reconstructions %s, artifact sha256 %.16s",
                          method.c_str(), same ? "identical" : "DIFFER", same ? "identical" : "DIFFER",
                          sha256_hex(arts[0]).c_str()));
  }

  // Platform anchor: the Hadamard tensor alone, compressed in-process.
  DeltaSet set;
  DeltaTensor d;
  d.name = "h";
  d.source_dtype = DType::kF16;
  d.data = hadamard_delta(64);
  d.shape = {64, 64};
  set.compressible.push_back(d);
  CompressOptions opt;
  opt.target = CompressTarget::cr(8);
  const std::string anchor = sha256_hex(serialize_container(compress(set, opt, "").artifact));
  // Frozen from the reference build; a different value on another platform
  // means the artifact bytes are not portable.
  const std::string frozen = "dd0c1ef826ea6ecc4a6a05a65184e62d571453daf60cd31b01762a096db435b2";
  const bool anchor_ok = anchor == frozen;
  o.notes.push_back("exact-SVD anchor artifact sha256 " + anchor + (anchor_ok ? " (matches frozen)" : " (DIFFERS from frozen)"));
  o.notes.push_back("scope: one machine and OS here; cross-platform identity rests on integer-only mask "
                    "seeding plus the frozen anchor above");
  o.pass = ok && anchor_ok;
  o.summary = ok ? "byte-identical artifacts and checkpoints across processes and thread counts"
                 : "outputs differ across runs";
  fs::remove_all(dir);
  return o;
}

// ---------------------------------------------------------------------------
// 8: merging identities.

Outcome criterion8() {
  Outcome o;
  std::mt19937_64 gen(88);
  TensorMap base;
  TensorMap ft;
  TensorMap delta;
  for (const std::string name : {"q", "k", "mlp"}) {
    const Matrix b = TensorEntry::from_matrix(normal_matrix(24, 16, gen, 0.1), DType::kF16).to_matrix();
    const Matrix f = TensorEntry::from_matrix(Matrix(b + normal_matrix(24, 16, gen, 0.01)), DType::kF16).to_matrix();
    base[name] = b;
    ft[name] = f;
    delta[name] = f - b;
  }
  auto rounds_back = [&](const TensorMap& merged) {
    for (const auto& [name, m] : merged) {
      if (TensorEntry::from_matrix(m, DType::kF16).to_matrix() != ft.at(name)) return false;
    }
    return true;
  };
  const bool ta = rounds_back(merge_ta(base, std::vector<TensorMap>{delta}, 1.0));
  const bool ties = rounds_back(merge_ties(base, std::vector<TensorMap>{delta, delta, delta}, 1.0, 1.0));

  int violations = 0;
  long checked = 0;
  for (int fixture = 0; fixture < 20; ++fixture) {
    std::vector<TensorMap> models(3);
    TensorMap b;
    for (const std::string name : {"x", "y"}) {
      b[name] = normal_matrix(12, 10, gen);
      for (auto& m : models) m[name] = normal_matrix(12, 10, gen);
    }
    const double retain = MergeConfig::kRetainGrid[static_cast<std::size_t>(fixture) % 3];
    const auto merged = merge_ties(b, models, 1.0, retain);
    for (const auto& [name, m] : merged) {
      std::vector<Matrix> trimmed;
      for (const auto& d : models) trimmed.push_back(ties_trim(d.at(name), retain));
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        double total = 0.0;
        for (const auto& t : trimmed) total += t.data()[i];
        const double moved = static_cast<double>(m.data()[i]) - b.at(name).data()[i];
        ++checked;
        if (moved != 0.0 && (moved > 0.0) != (total > 0.0)) ++violations;
      }
    }
  }
  o.pass = ta && ties && violations == 0;
  o.summary = fmt("TA identity %s, TIES identity %s, sign coherence %d violations in %ld elements",
                  ta ? "exact after f16 rounding" : "FAILED", ties ? "exact after f16 rounding" : "FAILED",
                  violations, checked);
  return o;
}

// ---------------------------------------------------------------------------
// 9: method comparison on power-law deltas.

Outcome criterion9() {
  Outcome o;
  std::mt19937_64 gen(99);
  std::uniform_real_distribution<double> exponent(0.8, 1.5);
  std::vector<double> impart;
  std::vector<double> dare;
  std::vector<double> lowrank;
  int beats_dare = 0;
  int beats_lowrank = 0;
  const double cr = 32.0;
  const double alpha = 1.0 - 1.0 / cr;
  for (int t = 0; t < 50; ++t) {
    const double e = exponent(gen);
    const Matrix d = power_law_delta(256, 256, e, 0.0, 900 + t);
    const auto f = svd(d);
    SparsifyConfig cfg;
    cfg.alpha = alpha;
    cfg.salt = "trial" + std::to_string(t);
    const double ei = relative_frobenius_error(reconstruct(sparsify_tensor(f, cfg)), d);
    const double ed = relative_frobenius_error(dare_sparsify(d, alpha, cfg.salt), d);
    const double el = relative_frobenius_error(reconstruct(truncate_lowrank(f, alpha)), d);
    impart.push_back(ei);
    dare.push_back(ed);
    lowrank.push_back(el);
    beats_dare += ei <= ed;
    beats_lowrank += ei <= el;
  }
  o.pass = beats_dare >= 40 && beats_lowrank >= 30;
  o.summary = fmt("ImPart <= DARE in %d/50 (need 40), ImPart <= LowRank in %d/50 (need 30)", beats_dare,
                  beats_lowrank);
  o.notes.push_back("ImPart  rel. error: " + quantiles(impart));
  o.notes.push_back("DARE    rel. error: " + quantiles(dare));
  o.notes.push_back("LowRank rel. error: " + quantiles(lowrank));
  o.notes.push_back("256x256, nominal alpha = 1 - 1/32 for every method, noise-free spectra");
  return o;
}

// ---------------------------------------------------------------------------
// 10: end-to-end toy model.

struct Mlp {
  MatrixD w1, w2;  // hidden x in, out x hidden
  Eigen::VectorXd b1, b2;

  MatrixD forward(const MatrixD& x, MatrixD* hidden = nullptr) const {
    MatrixD h = ((w1 * x).colwise() + b1).array().tanh().matrix();
    MatrixD y = (w2 * h).colwise() + b2;
    if (hidden) *hidden = std::move(h);
    return y;
  }
  double loss(const MatrixD& x, const MatrixD& y) const {
    return (forward(x) - y).squaredNorm() / static_cast<double>(x.cols());
  }
  std::size_t params() const {
    return static_cast<std::size_t>(w1.size() + w2.size() + b1.size() + b2.size());
  }
};

// Full-batch Adam on mean squared error.
void train(Mlp& net, const MatrixD& x, const MatrixD& y, int steps, double lr) {
  struct Slot {
    MatrixD m, v;
  };
  auto init = [](const MatrixD& p) { return Slot{MatrixD::Zero(p.rows(), p.cols()), MatrixD::Zero(p.rows(), p.cols())}; };
  Slot s1 = init(net.w1), s2 = init(net.w2), s3 = init(net.b1), s4 = init(net.b2);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double n = static_cast<double>(x.cols());
  for (int t = 1; t <= steps; ++t) {
    MatrixD h;
    const MatrixD out = net.forward(x, &h);
    const MatrixD g_out = 2.0 * (out - y) / n;
    const MatrixD g_w2 = g_out * h.transpose();
    const MatrixD g_b2 = g_out.rowwise().sum();
    const MatrixD g_h = (net.w2.transpose() * g_out).array() * (1.0 - h.array().square());
    const MatrixD g_w1 = g_h * x.transpose();
    const MatrixD g_b1 = g_h.rowwise().sum();
    auto step = [&](auto& p, const MatrixD& g, Slot& s) {
      s.m = b1 * s.m + (1 - b1) * g;
      s.v = b2 * s.v + (1 - b2) * g.cwiseProduct(g);
      const double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
      const MatrixD upd = ((s.m / c1).array() / ((s.v / c2).array().sqrt() + eps)).matrix();
      p -= lr * upd;
    };
    step(net.w1, g_w1, s1);
    step(net.w2, g_w2, s2);
    MatrixD b1m = net.b1;
    step(b1m, g_b1, s3);
    net.b1 = b1m.col(0);
    MatrixD b2m = net.b2;
    step(b2m, g_b2, s4);
    net.b2 = b2m.col(0);
  }
}

TensorContainer to_checkpoint(const Mlp& net) {
  TensorContainer c;
  c.tensors["fc1.weight"] = TensorEntry::from_matrix(net.w1.cast<float>(), DType::kF32);
  c.tensors["fc2.weight"] = TensorEntry::from_matrix(net.w2.cast<float>(), DType::kF32);
  const Eigen::VectorXf b1 = net.b1.cast<float>();
  const Eigen::VectorXf b2 = net.b2.cast<float>();
  c.tensors["fc1.bias"] = TensorEntry::from_floats(std::span<const float>(b1.data(), b1.size()),
                                                   {b1.size()}, DType::kF32);
  c.tensors["fc2.bias"] = TensorEntry::from_floats(std::span<const float>(b2.data(), b2.size()),
                                                   {b2.size()}, DType::kF32);
  return c;
}

Mlp from_checkpoint(const TensorContainer& c) {
  Mlp net;
  net.w1 = c.at("fc1.weight").to_matrix().cast<double>();
  net.w2 = c.at("fc2.weight").to_matrix().cast<double>();
  const auto b1 = c.at("fc1.bias").to_floats();
  const auto b2 = c.at("fc2.bias").to_floats();
  net.b1 = Eigen::Map<const Eigen::VectorXf>(b1.data(), static_cast<Eigen::Index>(b1.size())).cast<double>();
  net.b2 = Eigen::Map<const Eigen::VectorXf>(b2.data(), static_cast<Eigen::Index>(b2.size())).cast<double>();
  return net;
}

Outcome criterion10() {
  Outcome o;
  const auto t0 = Clock::now();
  const Eigen::Index in = 64, hidden = 128, out = 64;
  std::mt19937_64 gen(1010);
  auto normal = [&](Eigen::Index r, Eigen::Index c, double sd) -> MatrixD {
    return normal_matrix(r, c, gen, sd).cast<double>();
  };

  // Teachers: task B shifts task A's first layer by a rank-2 update.
  Mlp teacher_a{normal(hidden, in, 1.0 / std::sqrt(in)), normal(out, hidden, 1.0 / std::sqrt(hidden)),
                Eigen::VectorXd::Zero(hidden), Eigen::VectorXd::Zero(out)};
  Mlp teacher_b = teacher_a;
  teacher_b.w1 += 0.8 * normal(hidden, 2, 1.0 / std::sqrt(2.0)) * normal(2, in, 1.0 / std::sqrt(in));
  const MatrixD x_train = normal(in, 2048, 1.0);
  const MatrixD x_test = normal(in, 1024, 1.0);
  const MatrixD ya = teacher_a.forward(x_train);
  const MatrixD yb = teacher_b.forward(x_train);
  const MatrixD yb_test = teacher_b.forward(x_test);

  Mlp base{normal(hidden, in, 1.0 / std::sqrt(in)), normal(out, hidden, 1.0 / std::sqrt(hidden)),
           Eigen::VectorXd::Zero(hidden), Eigen::VectorXd::Zero(out)};
  train(base, x_train, ya, 1500, 3e-3);
  Mlp tuned = base;
  train(tuned, x_train, yb, 600, 1e-3);

  const auto base_ckpt = to_checkpoint(base);
  const auto ft_ckpt = to_checkpoint(tuned);
  const double loss_base = base.loss(x_test, yb_test);
  const double loss_ft = from_checkpoint(ft_ckpt).loss(x_test, yb_test);

  auto compressed_loss = [&](Method m, double cr) {
    DeltaFilter filter;
    filter.include = std::regex("weight$");
    const auto deltas = compute_delta(base_ckpt, ft_ckpt, filter);
    CompressOptions opt;
    opt.method = m;
    opt.target = CompressTarget::cr(cr);
    const auto res = compress(deltas, opt, "toy");
    const auto rec = reconstruct_checkpoint(res.artifact, base_ckpt, "toy", false);
    double weight_bytes = 0.0;
    double weight_payload = 0.0;
    for (const auto& t : res.tensors) {
      if (t.method == Method::kDense) continue;
      weight_bytes += t.original_bytes;
      weight_payload += static_cast<double>(t.payload_bytes);
    }
    return std::make_pair(from_checkpoint(rec).loss(x_test, yb_test), weight_bytes / weight_payload);
  };
  const auto [loss_impart, cr_impart] = compressed_loss(Method::kImpart, 16);
  const auto [loss_dare, cr_dare] = compressed_loss(Method::kDare, 16);
  const auto [loss_low, cr_low] = compressed_loss(Method::kLowRank, 16);
  const double secs = seconds_since(t0);

  o.pass = loss_impart <= 1.1 * loss_ft && loss_base >= 2.0 * loss_ft && secs < 300.0;
  o.summary = fmt("ImPart loss %.4g vs fine-tuned %.4g (ratio %.3f, need <= 1.10); base %.4g (%.1fx, need >= 2)",
                  loss_impart, loss_ft, loss_impart / loss_ft, loss_base, loss_base / loss_ft);
  o.notes.push_back(fmt("%zu parameters, %.1f s", tuned.params(), secs));
  o.notes.push_back(fmt("weight CR achieved: ImPart %.1f, DARE %.1f, LowRank %.1f", cr_impart, cr_dare, cr_low));
  o.notes.push_back(fmt("loss ratio to fine-tuned: ImPart %.3f, DARE %.3f, LowRank %.3f", loss_impart / loss_ft,
                        loss_dare / loss_ft, loss_low / loss_ft));
  std::string sweep = "ImPart loss ratio by CR:";
  for (double cr : {2.0, 4.0, 8.0}) sweep += fmt("  CR %g -> %.3f", cr, compressed_loss(Method::kImpart, cr).first / loss_ft);
  o.notes.push_back(sweep);
  const auto delta = compute_delta(base_ckpt, ft_ckpt).compressible;
  for (const auto& d : delta) {
    if (d.data.rows() < 2) continue;
    const auto f = svd(d.data);
    double total = 0.0;
    double top = 0.0;
    for (std::size_t k = 0; k < f.sigma.size(); ++k) {
      total += static_cast<double>(f.sigma[k]) * f.sigma[k];
      if (k < 4) top += static_cast<double>(f.sigma[k]) * f.sigma[k];
    }
    o.notes.push_back(fmt("%s delta: top-4 singular values carry %.1f%% of its energy", d.name.c_str(),
                          100.0 * top / total));
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  // Optional list of criterion numbers to run.
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };

  struct Entry {
    int number;
    const char* name;
    std::function<Outcome()> run;
  };
  std::unique_ptr<UnbiasedFixture> fixture;
  auto unbiased = [&]() -> const UnbiasedFixture& {
    if (!fixture) fixture = std::make_unique<UnbiasedFixture>(run_unbiased_fixture());
    return *fixture;
  };
  const std::vector<Entry> entries{
      {1, "unbiasedness", [&] { return criterion1(unbiased()); }},
      {2, "rescale ablation", [&] { return criterion2(unbiased()); }},
      {3, "allocation oracle", criterion3},
      {4, "budget accounting", criterion4},
      {5, "GPTQ collapse and dominance", criterion5},
      {6, "binary search", criterion6},
      {7, "seed determinism", criterion7},
      {8, "merging identities", criterion8},
      {9, "method comparison", criterion9},
      {10, "toy model", criterion10},
  };
  int failed = 0;
  for (const auto& e : entries) {
    if (!wanted(e.number)) continue;
    Outcome o;
    try {
      o = e.run();
    } catch (const std::exception& ex) {
      o.pass = false;
      o.summary = std::string("threw: ") + ex.what();
    }
    failed += !o.pass;
    std::cout << "criterion " << e.number << " [" << (o.pass ? "PASS" : "FAIL") << "] " << e.name << ": "
              << o.summary << "\n";
    for (const auto& n : o.notes) std::cout << "    " << n << "\n";
    std::cout.flush();
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << "\n";
  return failed == 0 ? 0 : 1;
}
