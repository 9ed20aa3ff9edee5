#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <random>

#include "emdiff/data_eval.hpp"
#include "emdiff/score_models.hpp"
#include "test_support.hpp"

using namespace emdiff;

namespace {

GmmPrior two_component_gmm() {
  std::array<std::array<double, 2>, 2> means{{{-1.5, 0.5}, {1.0, -1.0}}};
  std::array<std::array<double, 3>, 2> covs{{{0.3, 0.1, 0.5}, {0.6, -0.2, 0.4}}};
  std::array<double, 2> w{0.4, 0.6};
  return gmm2d(means, covs, w);
}

// log p_t(x) of the diffused mixture, summed explicitly component by component.
double gmm_log_density(const GmmPrior& p, const NoiseSchedule& s, double x, double y, int t) {
  const double ab = s.alpha_bar(t), sa = std::sqrt(ab);
  double acc = 0.0;
  for (const auto& c : p.components) {
    acc += c.weight * emdiff::testing::normal2_pdf(x, y, sa * c.mean[0], sa * c.mean[1], ab * c.cov(0, 0) + 1 - ab,
                                                   ab * c.cov(0, 1), ab * c.cov(1, 1) + 1 - ab);
  }
  return std::log(acc);
}

Tensor row(std::initializer_list<float> v) { return Tensor({1, v.size()}, std::vector<float>(v)); }

}  // namespace

TEST(GaussianScore, StandardNormalScoreIsMinusX) {
  auto s = linear_beta_schedule(100);
  ScoreModel m = GaussianScore(GaussianPrior::standard(3), s);
  Tensor x({2, 3}, {1, -2, 0.5f, 3, 0, -1});
  for (int t : {1, 50, 100}) {
    auto sc = eval_score(m, x, t);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(sc[i], -x[i], 1e-6);
  }
}

TEST(GaussianScore, VanishesAtDiffusedMean) {
  auto s = linear_beta_schedule(1000);
  GaussianPrior p{Eigen::Vector2d(0.5, -1.0), Eigen::Matrix2d{{2.0, 0.3}, {0.3, 0.5}}};
  ScoreModel m = GaussianScore(p, s);
  for (int t : {1, 300, 1000}) {
    const double sa = std::sqrt(s.alpha_bar(t));
    auto sc = eval_score(m, row({static_cast<float>(sa * 0.5), static_cast<float>(-sa)}), t);
    EXPECT_NEAR(sc[0], 0.0, 1e-6);
    EXPECT_NEAR(sc[1], 0.0, 1e-6);
  }
}

TEST(GaussianScore, MatchesClosedForm) {
  auto s = linear_beta_schedule(1000);
  Eigen::Matrix2d cov{{2.0, 0.3}, {0.3, 0.5}};
  Eigen::Vector2d mu(0.5, -1.0);
  ScoreModel m = GaussianScore({mu, cov}, s);
  const int t = 400;
  const double ab = s.alpha_bar(t);
  Eigen::Matrix2d C = ab * cov + (1 - ab) * Eigen::Matrix2d::Identity();
  Eigen::Vector2d x(0.7, 0.2);
  Eigen::Vector2d want = -C.inverse() * (x - std::sqrt(ab) * mu);
  auto sc = eval_score(m, row({0.7f, 0.2f}), t);
  EXPECT_NEAR(sc[0], want[0], 1e-6);
  EXPECT_NEAR(sc[1], want[1], 1e-6);
}

TEST(GaussianScore, InvalidPriorRejected) {
  auto s = linear_beta_schedule(10);
  GaussianPrior bad{Eigen::Vector2d(0, 0), Eigen::Matrix2d{{1.0, 2.0}, {2.0, 1.0}}};
  EXPECT_THROW(GaussianScore(bad, s), PreconditionError);
  GaussianPrior wrong{Eigen::Vector3d(0, 0, 0), Eigen::Matrix2d::Identity()};
  EXPECT_THROW(GaussianScore(wrong, s), ShapeError);
}

TEST(GmmScore, MatchesNumericalGradientOfExplicitDensity) {
  auto s = linear_beta_schedule(1000);
  auto prior = two_component_gmm();
  ScoreModel m = GmmScore(prior, s);
  const double h = 1e-5;
  for (int t : {1, 50, 200, 600, 1000}) {
    for (double x = -3.0; x <= 3.0; x += 1.0) {
      for (double y = -3.0; y <= 3.0; y += 1.5) {
        const double gx = (gmm_log_density(prior, s, x + h, y, t) - gmm_log_density(prior, s, x - h, y, t)) / (2 * h);
        const double gy = (gmm_log_density(prior, s, x, y + h, t) - gmm_log_density(prior, s, x, y - h, t)) / (2 * h);
        auto sc = std::get<GmmScore>(m).score(Eigen::Vector2d(x, y), t);
        const double err = std::hypot(sc[0] - gx, sc[1] - gy) / std::max(std::hypot(gx, gy), 1e-8);
        EXPECT_LT(err, 1e-5) << "t=" << t << " x=" << x << " y=" << y;
      }
    }
  }
}

TEST(GmmScore, InvalidWeightsRejected) {
  std::array<std::array<double, 2>, 2> means{{{0, 0}, {1, 1}}};
  std::array<std::array<double, 3>, 2> covs{{{1, 0, 1}, {1, 0, 1}}};
  std::array<double, 2> w{0.5, 0.6};
  EXPECT_THROW(gmm2d(means, covs, w), PreconditionError);
  std::array<double, 2> neg{1.2, -0.2};
  EXPECT_THROW(gmm2d(means, covs, neg), PreconditionError);
}

TEST(GridScore, PointMassGivesGaussianScore) {
  auto s = linear_beta_schedule(1000);
  const std::size_t n = 601;
  std::vector<double> p(n, 0.0);
  p[300] = 1.0;
  GridScore g({{-3.0, 3.0, n}}, p, s);
  for (int t : {20, 200, 800}) {
    const double var = 1.0 - s.alpha_bar(t);
    for (double x : {-2.0, -0.5, 0.3, 1.7}) {
      EXPECT_NEAR(g.score(Eigen::VectorXd::Constant(1, x), t)[0], -x / var, 1e-6 * (1 + std::abs(x / var)));
    }
  }
}

TEST(GridScore, TabulatedStandardNormalMatchesAnalytic) {
  auto s = linear_beta_schedule(1000);
  const std::size_t n = 1201;
  GridScore::Axis ax{-6.0, 6.0, n};
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = std::exp(-0.5 * ax.at(i) * ax.at(i));
  GridScore g({ax}, p, s);
  const double h = ax.spacing();
  for (int t : {100, 500, 1000}) {
    for (double x : {-2.0, -1.0, 0.0, 0.5, 2.5}) {
      EXPECT_NEAR(g.score(Eigen::VectorXd::Constant(1, x), t)[0], -x, 10 * h * h) << "t=" << t << " x=" << x;
    }
  }
}

TEST(GridScore, UniformBoxShape) {
  auto s = linear_beta_schedule(1000);
  const std::size_t n = 801;
  GridScore::Axis ax{-2.0, 2.0, n};
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = std::abs(ax.at(i)) <= 1.0 ? 1.0 : 0.0;
  GridScore g({ax}, p, s);
  const int t = 5;  // 1 - abar ~ 5e-4, sd ~ 0.02
  for (double x : {-0.5, 0.0, 0.6}) EXPECT_NEAR(g.score(Eigen::VectorXd::Constant(1, x), t)[0], 0.0, 1e-3);
  for (double x : {1.05, 1.2, 1.5}) {
    const double v = g.score(Eigen::VectorXd::Constant(1, x), t)[0];
    EXPECT_LT(v, -10.0);
    EXPECT_GT(g.score(Eigen::VectorXd::Constant(1, -x), t)[0], 10.0);
  }
}

TEST(GridScore, OutsideGridRejected) {
  auto s = linear_beta_schedule(10);
  GridScore g({{-1.0, 1.0, 21}}, std::vector<double>(21, 1.0), s);
  EXPECT_THROW(g.score(Eigen::VectorXd::Constant(1, 1.5), 3), PreconditionError);
}

TEST(GridScore, AgreesWithAnalyticGmm) {
  auto s = linear_beta_schedule(1000);
  auto prior = two_component_gmm();
  GmmScore exact(prior, s);
  GridScore::Axis ax{-5.0, 5.0, 201};
  std::vector<double> p(ax.n * ax.n);
  for (std::size_t i = 0; i < ax.n; ++i)
    for (std::size_t j = 0; j < ax.n; ++j) {
      for (const auto& c : prior.components) {
        p[i * ax.n + j] += c.weight * emdiff::testing::normal2_pdf(ax.at(i), ax.at(j), c.mean[0], c.mean[1], c.cov(0, 0),
                                                                   c.cov(0, 1), c.cov(1, 1));
      }
    }
  GridScore g({ax, ax}, p, s);
  for (int t : {100, 500, 900}) {
    for (double x = -2.5; x <= 2.5; x += 1.25) {
      for (double y = -2.5; y <= 2.5; y += 1.25) {
        Eigen::Vector2d v(x, y);
        const auto a = exact.score(v, t), b = g.score(v, t);
        EXPECT_NEAR(a[0], b[0], 1e-3) << "t=" << t;
        EXPECT_NEAR(a[1], b[1], 1e-3) << "t=" << t;
      }
    }
  }
}

TEST(ScoreVjp, AnalyticVariantsMatchFiniteDifferences) {
  auto s = linear_beta_schedule(1000);
  std::vector<ScoreModel> models{GaussianScore({Eigen::Vector2d(0.5, -1.0), Eigen::Matrix2d{{2.0, 0.3}, {0.3, 0.5}}}, s),
                                 GmmScore(two_component_gmm(), s)};
  for (const auto& m : models) {
    for (int t : {10, 300, 900}) {
      Tensor x = row({0.4f, -0.8f});
      Tensor v = row({1.0f, 2.0f});
      auto sv = eval_score_with_vjp(m, x, t);
      auto jt = sv.vjp(v);
      const double h = 1e-3;
      for (int k = 0; k < 2; ++k) {
        std::vector<float> xp{0.4f, -0.8f}, xm{0.4f, -0.8f};
        xp[k] += static_cast<float>(h);
        xm[k] -= static_cast<float>(h);
        auto sp = eval_score(m, Tensor({1, 2}, xp), t), sm = eval_score(m, Tensor({1, 2}, xm), t);
        const double dk = (1.0 * (sp[0] - sm[0]) + 2.0 * (sp[1] - sm[1])) / (xp[k] - xm[k]);
        EXPECT_NEAR(jt[k], dk, 2e-3 * (1 + std::abs(dk)));
      }
    }
  }
}

TEST(NeuralScore, ScoreIsScaledNetworkOutput) {
  auto s = linear_beta_schedule(100);
  MlpConfig cfg;
  cfg.data_dim = 3;
  cfg.hidden = {16};
  auto net = std::make_shared<const MlpScoreNet>(cfg, 4);
  ScoreModel m = NeuralScore(net, s);
  Tensor x({2, 3}, {0.1f, 0.2f, 0.3f, -1, 0, 1});
  for (int t : {1, 40, 100}) {
    auto out = net->forward(x, t);
    auto sc = eval_score(m, x, t);
    const double c = 1.0 / std::sqrt(1.0 - s.alpha_bar(t));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(sc[i], out[i] * c, 1e-5 * (1 + std::abs(out[i] * c)));
  }
}

TEST(NeuralScore, VjpMatchesFiniteDifferences) {
  auto s = linear_beta_schedule(100);
  MlpConfig cfg;
  cfg.data_dim = 3;
  cfg.hidden = {16, 16};
  auto net = std::make_shared<const MlpScoreNet>(cfg, 5);
  ScoreModel m = NeuralScore(net, s);
  const auto params = emdiff::testing::to_double(net->parameter_values());
  const int t = 30;
  const double c = 1.0 / std::sqrt(1.0 - s.alpha_bar(t));
  std::vector<double> x0{0.3, -0.2, 0.9}, v{0.5, -1.0, 2.0};
  Tensor x({1, 3}, {0.3f, -0.2f, 0.9f});
  auto jt = eval_score_with_vjp(m, x, t).vjp(Tensor({1, 3}, {0.5f, -1.0f, 2.0f}));
  auto f = [&](const std::vector<double>& xv) {
    auto o = emdiff::testing::ref_mlp_forward(cfg, params, xv, t);
    return c * (o[0] * v[0] + o[1] * v[1] + o[2] * v[2]);
  };
  std::vector<double> fd(3), g(3);
  for (int k = 0; k < 3; ++k) {
    auto a = x0, b = x0;
    a[k] += 1e-3;
    b[k] -= 1e-3;
    fd[k] = (f(a) - f(b)) / 2e-3;
    g[k] = jt[k];
  }
  EXPECT_LT(emdiff::testing::rel_err(g, fd), 1e-4);
}

TEST(EvalScore, DimensionAndTimestepChecked) {
  auto s = linear_beta_schedule(10);
  ScoreModel m = GaussianScore(GaussianPrior::standard(2), s);
  EXPECT_THROW(eval_score(m, Tensor({1, 3}, std::vector<float>(3)), 1), ShapeError);
  EXPECT_THROW(eval_score(m, Tensor({1, 2}, std::vector<float>(2)), 0), PreconditionError);
  EXPECT_THROW(eval_score(m, Tensor({1, 2}, std::vector<float>(2)), 11), PreconditionError);
}
