#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>

#include "deltapress/error.hpp"
#include "deltapress/impart.hpp"
#include "deltapress/merge.hpp"
#include "deltapress/tensor_store.hpp"
#include "support.hpp"

using namespace deltapress;

namespace {

Matrix row(std::initializer_list<float> v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (float x : v) m(0, i++) = x;
  return m;
}

TensorMap random_map(std::uint64_t seed, double scale = 1.0) {
  return {{"a", testing_support::random_matrix(6, 5, seed, scale)},
          {"b", testing_support::random_matrix(1, 7, seed + 1, scale)}};
}

bool maps_equal(const TensorMap& x, const TensorMap& y, float tol = 0.0f) {
  if (x.size() != y.size()) return false;
  for (const auto& [k, v] : x) {
    auto it = y.find(k);
    if (it == y.end() || (v - it->second).cwiseAbs().maxCoeff() > tol) return false;
  }
  return true;
}

}  // namespace

TEST(TaskArithmetic, HandExample) {
  const TensorMap base{{"w", row({0, 0})}};
  const std::vector<TensorMap> deltas{{{"w", row({1, -1})}}, {{"w", row({3, 1})}}};
  EXPECT_EQ(merge_ta(base, deltas, 0.5).at("w"), row({2, 0}));
}

TEST(TaskArithmetic, LambdaZeroIsBase) {
  const auto base = random_map(1);
  const std::vector<TensorMap> deltas{random_map(2), random_map(3)};
  EXPECT_TRUE(maps_equal(merge_ta(base, deltas, 0.0), base));
}

TEST(TaskArithmetic, SingleModelRecoversFineTuned) {
  const auto base = random_map(4);
  const auto d = random_map(5, 0.01);
  TensorMap ft;
  for (const auto& [k, v] : base) {
    ft[k] = TensorEntry::from_matrix(Matrix(v + d.at(k)), DType::kF16).to_matrix();
  }
  TensorMap delta;
  for (const auto& [k, v] : base) delta[k] = ft.at(k) - v;
  const auto merged = merge_ta(base, std::vector<TensorMap>{delta}, 1.0);
  for (const auto& [k, v] : merged) {
    EXPECT_EQ(TensorEntry::from_matrix(v, DType::kF16).to_matrix(), ft.at(k)) << k;
  }
}

TEST(TaskArithmetic, Linearity) {
  const auto base = random_map(6);
  const std::vector<TensorMap> d{random_map(7)};
  const auto once = merge_ta(base, d, 0.7);
  const auto twice = merge_ta(merge_ta(base, d, 0.3), d, 0.4);
  EXPECT_TRUE(maps_equal(once, twice, 1e-5f));
}

TEST(TaskArithmetic, PermutationInvariantExactly) {
  const auto base = random_map(8);
  const std::vector<TensorMap> abc{random_map(9), random_map(10), random_map(11)};
  const std::vector<TensorMap> cab{abc[2], abc[0], abc[1]};
  EXPECT_TRUE(maps_equal(merge_ta(base, abc, 0.8), merge_ta(base, cab, 0.8)));
}

TEST(TaskArithmetic, ShapeMismatchAndUnknownTensor) {
  const TensorMap base{{"w", row({0, 0})}};
  EXPECT_THROW(merge_ta(base, std::vector<TensorMap>{{{"w", row({1, 2, 3})}}}, 1.0), DataError);
  EXPECT_THROW(merge_ta(base, std::vector<TensorMap>{{{"x", row({1, 2})}}}, 1.0), DataError);
}

TEST(TiesTrim, HandExample) {
  Matrix d(2, 2);
  d << 3, -1, 0.5, 2;
  Matrix want(2, 2);
  want << 3, 0, 0, 2;
  EXPECT_EQ(ties_trim(d, 0.5), want);
  EXPECT_EQ(ties_trim(d, 1.0), d);
}

TEST(TiesTrim, EqualMagnitudesKeepIndexOrder) {
  const Matrix d = row({1, -1, 1, -1, 1});
  EXPECT_EQ(ties_trim(d, 0.4), row({1, -1, 0, 0, 0}));
  EXPECT_EQ(ties_trim(d, 0.5), row({1, -1, 1, 0, 0}));  // ceil(2.5)
  EXPECT_THROW(ties_trim(d, 0.0), ConfigError);
}

TEST(Ties, ElectionHandExample) {
  const TensorMap base{{"w", row({10})}};
  const std::vector<TensorMap> deltas{{{"w", row({2})}}, {{"w", row({-1})}}};
  EXPECT_EQ(merge_ties(base, deltas, 0.5, 1.0).at("w"), row({11}));
}

TEST(Ties, IdenticalModelsRecoverFineTuned) {
  const auto base = random_map(12);
  const auto d = random_map(13);
  const std::vector<TensorMap> deltas{d, d, d};
  const auto merged = merge_ties(base, deltas, 1.0, 1.0);
  for (const auto& [k, v] : merged) EXPECT_TRUE(v.isApprox(base.at(k) + d.at(k), 1e-6f)) << k;
}

TEST(Ties, AllZeroKeepsBase) {
  const TensorMap base{{"w", row({1, 2})}};
  const std::vector<TensorMap> deltas{{{"w", row({0, 5})}}, {{"w", row({0, -5})}}};
  // Element 0: no nonzero model. Element 1: +5 and -5 cancel, no elected sign.
  EXPECT_EQ(merge_ties(base, deltas, 1.0, 1.0).at("w"), row({1, 2}));
}

TEST(Ties, SignCoherenceOnRandomFixtures) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto base = random_map(100 + seed);
    const std::vector<TensorMap> deltas{random_map(200 + seed), random_map(300 + seed),
                                        random_map(400 + seed)};
    const double retain = MergeConfig::kRetainGrid[seed % 3];
    const auto merged = merge_ties(base, deltas, 1.0, retain);
    for (const auto& [k, m] : merged) {
      std::vector<Matrix> trimmed;
      for (const auto& d : deltas) trimmed.push_back(ties_trim(d.at(k), retain));
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        double total = 0.0;
        for (const auto& t : trimmed) total += t.data()[i];
        const double moved = static_cast<double>(m.data()[i]) - base.at(k).data()[i];
        if (moved != 0.0) EXPECT_EQ(moved > 0.0, total > 0.0) << k << "[" << i << "]";
      }
    }
    const std::vector<TensorMap> shuffled{deltas[1], deltas[2], deltas[0]};
    EXPECT_TRUE(maps_equal(merged, merge_ties(base, shuffled, 1.0, retain)));
  }
}

TEST(PreSparsify, NoneAndDareZeroAreIdentity) {
  const auto base = random_map(20);
  const std::vector<TensorMap> deltas{random_map(21), random_map(22)};
  MergeConfig cfg;
  const auto plain = merge_ta(base, deltas, 1.0);
  EXPECT_TRUE(maps_equal(merge_with_presparsify(base, deltas, cfg), plain));
  cfg.pre = PreSparsify::dare(0.0);
  EXPECT_TRUE(maps_equal(merge_with_presparsify(base, deltas, cfg), plain));
  cfg.strategy = MergeStrategy::kTies;
  cfg.retain = 0.6;
  EXPECT_TRUE(maps_equal(merge_with_presparsify(base, deltas, cfg), merge_ties(base, deltas, 1.0, 0.6)));
}

TEST(PreSparsify, SkipsVectorsAndUsesModelSalt) {
  const auto d = random_map(23);
  const auto a = presparsify(d, PreSparsify::dare(0.5), 0);
  const auto b = presparsify(d, PreSparsify::dare(0.5), 1);
  EXPECT_EQ(a.at("b"), d.at("b"));
  EXPECT_NE(a.at("a"), b.at("a"));
  EXPECT_EQ(a.at("a"), presparsify(d, PreSparsify::dare(0.5), 0).at("a"));
}

TEST(PreSparsify, ImpartSingleModelIsUnbiasedOverKeptComponents) {
  // Mean over salts of the merged delta approaches the fine-tuned delta restricted
  // to the columns with p < 1; pruned columns contribute nothing by construction.
  const Matrix d = testing_support::random_matrix(8, 8, 24);
  const TensorMap base{{"w", Matrix::Zero(8, 8)}};
  MergeConfig cfg;
  cfg.pre = PreSparsify::impart(0.5);
  Matrix sum = Matrix::Zero(8, 8);
  const int draws = 4000;
  const TensorMap delta{{"w", d}};
  for (int t = 0; t < draws; ++t) {
    const auto sparse = presparsify(delta, cfg.pre, static_cast<std::size_t>(t));
    sum += merge_ta(base, std::vector<TensorMap>{sparse}, 1.0).at("w");
  }
  const Matrix mean = sum / static_cast<float>(draws);
  SparsifyConfig sc{0.5, 0.7, 1.0, "w#0"};
  const auto sparse = sparsify_tensor(d, sc);
  Matrix expected = Matrix::Zero(8, 8);
  const auto f = svd(d);
  for (std::size_t k = 0; k < sparse.columns.size(); ++k) {
    expected += (f.u.col(static_cast<Eigen::Index>(k)) * sparse.columns[k].sigma *
                 f.v.col(static_cast<Eigen::Index>(k)).transpose());
  }
  EXPECT_LE(relative_frobenius_error(mean, expected), 0.05);
}

TEST(MergeConfig, ValidationAndJson) {
  MergeConfig c;
  c.retain = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.retain = 1.0;
  c.pre = PreSparsify::dare(1.0);
  EXPECT_THROW(c.validate(), ConfigError);
  c.pre = PreSparsify::impart(0.5, 0.6, 0.5);
  c.strategy = MergeStrategy::kTies;
  const auto j = c.to_json();
  EXPECT_EQ(j["strategy"], "ties");
  EXPECT_EQ(j["pre_sparsify"]["kind"], "impart");
  EXPECT_EQ(j["pre_sparsify"]["beta"], 0.6);
}

TEST(GridSearch, SingletonGridReturnsThatConfig) {
  const auto base = random_map(30);
  const std::vector<TensorMap> deltas{random_map(31)};
  GridSpec spec;
  spec.lambdas = {0.8};
  spec.retains = {0.6};
  spec.ratios = {0.3};
  MergeConfig templ;
  templ.strategy = MergeStrategy::kTies;
  templ.pre = PreSparsify::dare(0.0);
  const auto r = grid_search(base, deltas, templ, [](const TensorMap&) { return 1.0; }, spec);
  ASSERT_TRUE(r.best.has_value());
  EXPECT_EQ(r.best->lambda, 0.8);
  EXPECT_EQ(r.best->retain, 0.6);
  EXPECT_EQ(r.best->pre.ratio, 0.3);
  EXPECT_EQ(r.rows.size(), 2u);
  EXPECT_TRUE(r.completed);
}

TEST(GridSearch, QuadraticToyMatchesBruteForce) {
  // Two least-squares tasks: task t wants the weight at target_t.
  const Matrix target1 = testing_support::random_matrix(4, 4, 40);
  const Matrix target2 = testing_support::random_matrix(4, 4, 41);
  const Matrix w0 = testing_support::random_matrix(4, 4, 42);
  const TensorMap base{{"w", w0}};
  const std::vector<TensorMap> deltas{{{"w", Matrix(target1 - w0)}}, {{"w", Matrix(target2 - w0)}}};
  auto score = [&](const TensorMap& m) {
    const Matrix& w = m.at("w");
    return -static_cast<double>((w - target1).squaredNorm() + (w - target2).squaredNorm());
  };
  for (MergeStrategy s : {MergeStrategy::kTaskArithmetic, MergeStrategy::kTies}) {
    MergeConfig templ;
    templ.strategy = s;
    const auto r = grid_search(base, deltas, templ, score);
    ASSERT_TRUE(r.best.has_value());
    double brute = -INFINITY;
    MergeConfig arg;
    const std::vector<double> retains =
        s == MergeStrategy::kTies ? std::vector<double>(MergeConfig::kRetainGrid.begin(), MergeConfig::kRetainGrid.end())
                                  : std::vector<double>{1.0};
    for (double lambda : MergeConfig::kLambdaGrid) {
      for (double retain : retains) {
        MergeConfig c = templ;
        c.lambda = lambda;
        c.retain = retain;
        const double v = score(merge_with_presparsify(base, deltas, c));
        if (v > brute) {
          brute = v;
          arg = c;
        }
      }
    }
    EXPECT_EQ(r.best_score, brute);
    EXPECT_EQ(r.best->lambda, arg.lambda);
    EXPECT_EQ(r.best->retain, arg.retain);
  }
}

TEST(GridSearch, DeterministicAcrossThreads) {
  const auto base = random_map(50);
  const std::vector<TensorMap> deltas{random_map(51), random_map(52)};
  MergeConfig templ;
  templ.pre = PreSparsify::dare(0.0);
  auto score = [](const TensorMap& m) { return -static_cast<double>(m.at("a").squaredNorm()); };
  const auto a = grid_search(base, deltas, templ, score, {}, 1);
  const auto b = grid_search(base, deltas, templ, score, {}, 3);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].config.to_json(), b.rows[i].config.to_json());
    EXPECT_EQ(a.rows[i].score, b.rows[i].score);
  }
  EXPECT_EQ(a.best->to_json(), b.best->to_json());
  EXPECT_EQ(a.rows.size(), 5u + 5u);
}

TEST(GridSearch, CallbackFailureGivesPartialReport) {
  const auto base = random_map(60);
  const std::vector<TensorMap> deltas{random_map(61)};
  int calls = 0;
  auto score = [&](const TensorMap&) -> double {
    if (++calls == 3) throw std::runtime_error("evaluator crashed");
    return static_cast<double>(calls);
  };
  const auto r = grid_search(base, deltas, MergeConfig{}, score);
  EXPECT_FALSE(r.completed);
  EXPECT_EQ(r.rows.size(), 2u);
  EXPECT_NE(r.error.find("evaluator crashed"), std::string::npos);
  ASSERT_TRUE(r.best.has_value());
  EXPECT_EQ(r.best->lambda, MergeConfig::kLambdaGrid[1]);
  const auto j = r.to_json();
  EXPECT_FALSE(j["completed"].get<bool>());
  EXPECT_EQ(j["rows"].size(), 2u);
}
