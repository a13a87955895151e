#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "ehtune/analysis.hpp"
#include "ehtune/error.hpp"
#include "ehtune/optim.hpp"
#include "ehtune/rng.hpp"

using namespace ehtune;
using namespace ehtune::analysis;

namespace {

template <typename F>
ErrorKind kind_of(F&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an ehtune::Error";
  return ErrorKind::Io;
}

nc::Tensor random_matrix(int n, int d, Rng& rng) {
  nc::Tensor t = nc::Tensor::zeros({n, d});
  for (float& x : t.data) x = static_cast<float>(rng.normal());
  return t;
}

FeatureSnapshot snap(nc::Tensor t, std::uint64_t probe = 1) { return {"s", probe, std::move(t)}; }

}  // namespace

// ---- feature_change ----------------------------------------------------------

TEST(FeatureChange, HandCases) {
  nc::Tensor a = nc::Tensor::zeros({1, 5});
  nc::Tensor b({1, 5}, {3, 4, 0, 0, 0});
  EXPECT_EQ(feature_change(snap(a), snap(a)), 0.0);
  EXPECT_DOUBLE_EQ(feature_change(snap(a), snap(b)), 5.0);
  nc::Tensor c = nc::Tensor::zeros({2, 2});
  nc::Tensor d({2, 2}, {1, 0, 0, 3});
  EXPECT_DOUBLE_EQ(feature_change(snap(c), snap(d)), 2.0);
}

TEST(FeatureChange, RejectsMismatchedProbeSets) {
  nc::Tensor a = nc::Tensor::zeros({2, 2});
  EXPECT_EQ(kind_of([&] { feature_change(snap(a, 1), snap(a, 2)); }), ErrorKind::Contract);
  EXPECT_EQ(kind_of([&] { feature_change(snap(a), snap(nc::Tensor::zeros({3, 2}))); }), ErrorKind::Contract);
}

TEST(FeatureChange, IsAPseudometric) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = snap(random_matrix(6, 4, rng)), y = snap(random_matrix(6, 4, rng)), z = snap(random_matrix(6, 4, rng));
    const double xy = feature_change(x, y), yx = feature_change(y, x), yz = feature_change(y, z),
                 xz = feature_change(x, z);
    EXPECT_GT(xy, 0.0);
    EXPECT_EQ(xy, yx);
    EXPECT_LE(xz, xy + yz + 1e-12);
    EXPECT_EQ(feature_change(x, x), 0.0);
  }
}

// ---- param_distance ----------------------------------------------------------

TEST(ParamDistance, HandCasesAndOrderInvariance) {
  ParamStore a, b;
  a.add("x", nc::Tensor({2}, {1, 2}));
  a.add("y", nc::Tensor({1}, {5}));
  b.add("y", nc::Tensor({1}, {5}));
  b.add("x", nc::Tensor({2}, {1, 2}));
  EXPECT_EQ(param_distance(a, b), 0.0);
  b.at("x").data[1] = 4.0f;
  EXPECT_EQ(param_distance(a, b), 4.0);
  EXPECT_EQ(param_distance(b, a), 4.0);
  ParamStore c;
  c.add("x", nc::Tensor({2}, {1, 2}));
  EXPECT_EQ(kind_of([&] { param_distance(a, c); }), ErrorKind::Contract);
  c.add("z", nc::Tensor({1}, {5}));
  EXPECT_EQ(kind_of([&] { param_distance(a, c); }), ErrorKind::Contract);
}

// ---- PCA -----------------------------------------------------------------------

TEST(Pca, TopEigenvaluesMatchDenseSolver) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(10 + seed);
    nc::Tensor x = random_matrix(10, 5, rng);
    Eigen::MatrixXd m(10, 5);
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 5; ++j) m(i, j) = x.data[i * 5 + j];
    Eigen::MatrixXd centered = m.rowwise() - m.colwise().mean();
    Eigen::MatrixXd cov = centered.transpose() * centered / 9.0;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const auto ev = es.eigenvalues();  // ascending
    Projection p = pca_project_2d(x);
    EXPECT_NEAR(p.explained[0], ev(4), 1e-6);
    EXPECT_NEAR(p.explained[1], ev(3), 1e-6);
    EXPECT_NEAR(p.total_variance, cov.trace(), 1e-9);
    for (int c = 0; c < 2; ++c) {
      Eigen::VectorXd want = es.eigenvectors().col(4 - c);
      double dot = 0.0;
      for (int j = 0; j < 5; ++j) dot += want(j) * p.components[c * 5 + j];
      EXPECT_NEAR(std::abs(dot), 1.0, 1e-5);
    }
  }
}

TEST(Pca, TwoDimensionalInputIsAnIsometry) {
  Rng rng(3);
  nc::Tensor x = nc::Tensor::zeros({8, 2});
  for (int i = 0; i < 8; ++i) {
    x.data[i * 2] = static_cast<float>(3.0 * rng.normal());
    x.data[i * 2 + 1] = static_cast<float>(rng.normal());
  }
  Projection p = pca_project_2d(x);
  for (int i = 0; i < 8; ++i)
    for (int j = i + 1; j < 8; ++j) {
      const double dx = x.data[i * 2] - x.data[j * 2], dy = x.data[i * 2 + 1] - x.data[j * 2 + 1];
      const double px = p.points[i * 2] - p.points[j * 2], py = p.points[i * 2 + 1] - p.points[j * 2 + 1];
      EXPECT_NEAR(std::hypot(dx, dy), std::hypot(px, py), 1e-5);
    }
}

TEST(Pca, RankOneDataHasNoSecondComponent) {
  nc::Tensor x = nc::Tensor::zeros({6, 4});
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 4; ++j) x.data[i * 4 + j] = static_cast<float>((i - 2) * (j + 1));
  Projection p = pca_project_2d(x);
  EXPECT_GT(p.explained[0], 1.0);
  EXPECT_NEAR(p.explained[1], 0.0, 1e-6);
}

TEST(Pca, RowOrderInvariantUpToSign) {
  Rng rng(4);
  nc::Tensor x = random_matrix(12, 6, rng);
  nc::Tensor rev = nc::Tensor::zeros({12, 6});
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 6; ++j) rev.data[(11 - i) * 6 + j] = x.data[i * 6 + j];
  Projection a = pca_project_2d(x), b = pca_project_2d(rev);
  for (int i = 0; i < 12; ++i)
    for (int c = 0; c < 2; ++c)
      EXPECT_NEAR(std::abs(a.points[i * 2 + c]), std::abs(b.points[(11 - i) * 2 + c]), 1e-4);
}

TEST(Pca, Contracts) {
  EXPECT_EQ(kind_of([] { pca_project_2d(nc::Tensor::zeros({2, 3})); }), ErrorKind::Contract);
  EXPECT_EQ(kind_of([] { pca_project_2d(nc::Tensor::full({4, 3}, 2.0f)); }), ErrorKind::Contract);
}

// ---- convergence -----------------------------------------------------------------

TEST(StepsToThreshold, Definition) {
  std::vector<double> above(50, 2.0);
  EXPECT_FALSE(steps_to_threshold(above, 1.0).has_value());
  std::vector<double> curve;
  for (int i = 0; i < 100; ++i) curve.push_back(100.0 - i);
  // 100 - 57 = 43 < 43.5
  EXPECT_EQ(steps_to_threshold(curve, 43.5, 1), 57);
  // Window 3 at step i averages 100 - (i - 1).
  EXPECT_EQ(steps_to_threshold(curve, 43.5, 3), 58);
  EXPECT_EQ(kind_of([&] { steps_to_threshold(curve, 0.0); }), ErrorKind::Contract);
}

TEST(StepsToThreshold, MonotoneInPointwiseOrder) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a, b;
    double level = 3.0;
    for (int i = 0; i < 80; ++i) {
      level *= 0.97;
      const double x = level + 0.3 * rng.uniform();
      a.push_back(x);
      b.push_back(x + 0.2 * rng.uniform());
    }
    const auto sa = steps_to_threshold(a, 1.0, 20), sb = steps_to_threshold(b, 1.0, 20);
    if (sb) {
      ASSERT_TRUE(sa.has_value());
      EXPECT_LE(*sa, *sb);
    }
  }
}

TEST(GradNorms, Summaries) {
  std::vector<GradNormEntry> zeros(5);
  auto z = grad_norm_summary(zeros, 10);
  EXPECT_EQ(z.head_mean, 0.0);
  EXPECT_EQ(z.backbone_mean, 0.0);
  EXPECT_FALSE(z.ratio.has_value());
  std::vector<GradNormEntry> log{{1.0, 2.0}, {3.0, 6.0}, {100.0, 100.0}};
  auto s = grad_norm_summary(log, 2);
  EXPECT_EQ(s.head_mean, 2.0);
  EXPECT_EQ(s.backbone_mean, 4.0);
  EXPECT_EQ(*s.ratio, 0.5);
  EXPECT_EQ(kind_of([] { grad_norm_summary({}, 10); }), ErrorKind::Contract);
}

// ---- optimizer ---------------------------------------------------------------------

using namespace ehtune::train;

TEST(Schedule, WarmupApexAndDecay) {
  OptimConfig c;
  c.lr_peak = 1.0;
  EXPECT_EQ(lr_at(0, 1000, c), 0.0);
  EXPECT_EQ(lr_at(50, 1000, c), 0.5);
  EXPECT_EQ(lr_at(100, 1000, c), 1.0);
  EXPECT_EQ(lr_at(550, 1000, c), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(999, 1000, c), 1.0 / 900.0);
  EXPECT_EQ(lr_at(1000, 1000, c), 0.0);
}

TEST(Schedule, SplitBudget) {
  EXPECT_EQ(split_budget(1000, 0.1), std::make_pair(100, 900));
  EXPECT_EQ(split_budget(1000, 0.0), std::make_pair(0, 1000));
  EXPECT_EQ(split_budget(999, 0.1), std::make_pair(100, 899));
  EXPECT_EQ(split_budget(5, 0.5), std::make_pair(3, 2));
  for (int total : {0, 1, 7, 400, 2400})
    for (double f : {0.0, 0.1, 0.3, 0.5, 0.9}) {
      auto [a, b] = split_budget(total, f);
      EXPECT_EQ(a + b, total);
      EXPECT_GE(a, 0);
      EXPECT_GE(b, 0);
    }
  EXPECT_EQ(kind_of([] { split_budget(10, 1.0); }), ErrorKind::Config);
}

TEST(AdamW, SingleScalarHandComputation) {
  OptimConfig c;
  nc::Tensor w({1, 1}, {0.5f});
  w.grad = {0.2f};
  AdamW opt(c);
  NamedParam p{"w", &w};
  const double lr = 1e-3;
  opt.step({&p, 1}, lr);
  // m = 0.1 * 0.2 = 0.02, v = 0.02 * 0.04 = 8e-4; m_hat = 0.2, v_hat = 0.04
  double want = 0.5 * (1.0 - lr * 0.1);
  want -= lr * 0.2 / (std::sqrt(0.04) + 1e-6);
  EXPECT_NEAR(w.data[0], want, 1e-7);
  // Second step with the same gradient: moments accumulate with bias correction.
  opt.step({&p, 1}, lr);
  const double m2 = 0.9 * 0.02 + 0.1 * 0.2, v2 = 0.98 * 8e-4 + 0.02 * 0.04;
  const double m_hat = m2 / (1 - 0.81), v_hat = v2 / (1 - 0.98 * 0.98);
  want = want * (1.0 - lr * 0.1) - lr * m_hat / (std::sqrt(v_hat) + 1e-6);
  EXPECT_NEAR(w.data[0], want, 1e-7);
}

TEST(AdamW, DecoupledDecayOnlyOnMatrices) {
  OptimConfig c;
  nc::Tensor w({2, 2}, {1.0f, -2.0f, 3.0f, 0.5f});
  nc::Tensor b({2}, {1.0f, -2.0f});
  w.zero_grad();
  b.zero_grad();
  const nc::Tensor w0 = w, b0 = b;
  AdamW opt(c);
  NamedParam ps[] = {{"w", &w}, {"b", &b}};
  opt.step(ps, 0.01);
  for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(w.data[i], static_cast<float>(w0.data[i] * (1.0 - 0.01 * 0.1)));
  EXPECT_TRUE(nc::bit_equal(b, b0));
}

TEST(AdamW, RejectsNonFiniteGradients) {
  nc::Tensor w({1}, {1.0f});
  w.grad = {std::nanf("")};
  AdamW opt(OptimConfig{});
  NamedParam p{"w", &w};
  EXPECT_EQ(kind_of([&] { opt.step({&p, 1}, 1e-3); }), ErrorKind::Training);
}

TEST(AdamW, ConfigValidation) {
  OptimConfig c;
  c.warmup_fraction = 1.0;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::Config);
  c = OptimConfig{};
  c.lr_peak = 0.0;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::Config);
}
