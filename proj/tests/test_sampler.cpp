#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "emdiff/rng.hpp"
#include "emdiff/sampler.hpp"

using namespace emdiff;

namespace {

GaussianPrior prior2() {
  GaussianPrior p;
  p.mean = Eigen::Vector2d(0.5, -1.0);
  p.cov.resize(2, 2);
  p.cov << 1.5, 0.3, 0.3, 0.6;
  return p;
}

double sample_mean(const std::vector<ChainResult>& r, std::size_t j) {
  double s = 0.0;
  for (const auto& c : r) s += c.x0[j];
  return s / static_cast<double>(r.size());
}

double sample_var(const std::vector<ChainResult>& r, std::size_t j) {
  const double m = sample_mean(r, j);
  double s = 0.0;
  for (const auto& c : r) s += (c.x0[j] - m) * (c.x0[j] - m);
  return s / static_cast<double>(r.size() - 1);
}

}  // namespace

TEST(Tweedie, GaussianPriorPosteriorMean) {
  // For a N(0, I) prior, E[x0 | x_t] = sqrt(abar) x_t.
  auto sched = linear_beta_schedule(100);
  ScoreModel m = GaussianScore(GaussianPrior::standard(3), sched);
  Tensor x({2, 3}, {0.4f, -1.0f, 2.0f, 0.0f, 3.0f, -0.5f});
  for (int t : {1, 37, 100}) {
    auto x0 = tweedie_x0(m, x, t);
    const double a = std::sqrt(sched.alpha_bar(t));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(x0[i], a * x[i], 1e-5);
  }
}

TEST(Tweedie, RecoversCleanPointFromPointMassLimit) {
  // A nearly degenerate prior at mu makes x0_hat collapse onto mu.
  auto sched = linear_beta_schedule(50);
  GaussianPrior p{Eigen::Vector2d(1.0, -2.0), 1e-8 * Eigen::Matrix2d::Identity()};
  ScoreModel m = GaussianScore(p, sched);
  Tensor x({1, 2}, {3.0f, 0.7f});
  auto x0 = tweedie_x0(m, x, 25);
  EXPECT_NEAR(x0[0], 1.0, 1e-4);
  EXPECT_NEAR(x0[1], -2.0, 1e-4);
}

TEST(Tweedie, ShapeMismatch) {
  EXPECT_THROW(tweedie_from_score(Tensor::zeros({2, 2}), Tensor::zeros({2, 3}), 0.5), ShapeError);
}

TEST(ReverseStep, HandComputed) {
  auto s = linear_beta_schedule(10, 0.01, 0.1);
  Tensor x({1, 2}, {1.0f, -2.0f});
  Tensor score({1, 2}, {0.5f, 0.25f});
  Tensor lik({1, 2}, {-1.0f, 2.0f});
  Tensor z({1, 2}, {0.3f, -0.1f});
  auto y = reverse_step(s, x, 5, score, lik, 2.0, z);
  const double b = s.beta(5);
  EXPECT_NEAR(y[0], 1.0 + b * (0.5 + 0.5 - 2.0) + std::sqrt(b) * 0.3, 1e-6);
  EXPECT_NEAR(y[1], -2.0 + b * (-1.0 + 0.25 + 4.0) - std::sqrt(b) * 0.1, 1e-6);
}

TEST(ReverseStep, LastStepAddsNoNoise) {
  auto s = linear_beta_schedule(10, 0.01, 0.1);
  Tensor x({1, 1}, {1.0f});
  auto y = reverse_step(s, x, 1, Tensor({1, 1}, {0.0f}), Tensor(), 0.0, Tensor({1, 1}, {100.0f}));
  EXPECT_NEAR(y[0], 1.0 + 0.01 * 0.5, 1e-7);
}

TEST(LikelihoodScore, MatchesClosedFormForGaussianPrior) {
  auto sched = linear_beta_schedule(200);
  auto p = prior2();
  ScoreModel m = GaussianScore(p, sched);
  auto op = ForwardOperator::mask({1, 0});
  std::vector<float> y{0.8f};
  const double sigma = 0.3;
  Rng rng(3);
  for (int t : {1, 20, 120, 200}) {
    std::vector<float> xv(2);
    fill_normal(rng, xv);
    Tensor x({1, 2}, xv);
    ChainTarget tg{y, &op};
    auto le = posterior_likelihood_score(m, x, t, std::span<const ChainTarget>(&tg, 1), sigma);

    const double ab = sched.alpha_bar(t);
    const Eigen::Matrix2d C = ab * p.cov + (1.0 - ab) * Eigen::Matrix2d::Identity();
    const Eigen::Matrix2d J = (Eigen::Matrix2d::Identity() - (1.0 - ab) * C.inverse()) / std::sqrt(ab);
    const Eigen::Vector2d xe(xv[0], xv[1]);
    const Eigen::Vector2d x0 = (xe - (1.0 - ab) * C.inverse() * (xe - std::sqrt(ab) * p.mean)) / std::sqrt(ab);
    const Eigen::Vector2d r(x0(0) - y[0], 0.0);
    const Eigen::Vector2d g = -(J.transpose() * r) / (sigma * sigma);
    EXPECT_NEAR(le.x0_hat[0], x0(0), 1e-4 * (1 + std::abs(x0(0))));
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(le.grad[i], g(i), 1e-4 * (1 + g.norm())) << "t=" << t;
  }
}

TEST(LikelihoodScore, MatchesFiniteDifferenceForGmm) {
  auto sched = linear_beta_schedule(100);
  GmmPrior p;
  p.components.push_back({0.4, Eigen::Vector2d(-1, 0.5), Eigen::Matrix2d::Identity() * 0.3});
  p.components.push_back({0.6, Eigen::Vector2d(1.5, -0.5), Eigen::Matrix2d::Identity() * 0.6});
  ScoreModel m = GmmScore(p, sched);
  auto op = ForwardOperator::identity(2);
  std::vector<float> y{0.2f, -0.4f};
  ChainTarget tg{y, &op};
  const double sigma = 0.5;
  auto energy = [&](double a, double b) {
    Tensor x({1, 2}, {static_cast<float>(a), static_cast<float>(b)});
    auto x0 = tweedie_x0(m, x, 60);
    const double r0 = x0[0] - y[0], r1 = x0[1] - y[1];
    return -(r0 * r0 + r1 * r1) / (2 * sigma * sigma);
  };
  const double xa = 0.3, xb = -0.2, h = 1e-2;
  Tensor x({1, 2}, {static_cast<float>(xa), static_cast<float>(xb)});
  auto le = posterior_likelihood_score(m, x, 60, std::span<const ChainTarget>(&tg, 1), sigma);
  const double ga = (energy(xa + h, xb) - energy(xa - h, xb)) / (2 * h);
  const double gb = (energy(xa, xb + h) - energy(xa, xb - h)) / (2 * h);
  EXPECT_NEAR(le.grad[0], ga, 2e-3 * (1 + std::abs(ga)));
  EXPECT_NEAR(le.grad[1], gb, 2e-3 * (1 + std::abs(gb)));
}

TEST(LikelihoodScore, RejectsBadInputs) {
  auto sched = linear_beta_schedule(10);
  ScoreModel m = GaussianScore(GaussianPrior::standard(2), sched);
  auto op = ForwardOperator::identity(2);
  std::vector<float> y{0, 0};
  ChainTarget tg{y, &op};
  Tensor x({1, 2}, {0, 0});
  EXPECT_THROW(posterior_likelihood_score(m, x, 5, std::span<const ChainTarget>(&tg, 1), 0.0), PreconditionError);
  EXPECT_THROW(posterior_likelihood_score(m, x, 5, {}, 0.1), ShapeError);
}

TEST(Sampler, UnconditionalStandardNormal) {
  auto sched = linear_beta_schedule(200);
  ScoreModel m = GaussianScore(GaussianPrior::standard(2), sched);
  SamplerConfig cfg;
  auto r = sample_unconditional(m, chain_seeds(5, stream::kEval, 4000), cfg);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_LT(std::abs(sample_mean(r, j)), 0.06);
    EXPECT_NEAR(sample_var(r, j), 1.0, 0.08);
  }
}

TEST(Sampler, ZeroLambdaMatchesUnconditionalBitwise) {
  auto sched = linear_beta_schedule(30);
  ScoreModel m = GaussianScore(prior2(), sched);
  auto op = ForwardOperator::identity(2);
  std::vector<float> y{1, 1};
  std::vector<ChainTarget> tg(7, ChainTarget{y, &op});
  auto seeds = chain_seeds(9, stream::kChain, 7);
  SamplerConfig cfg;
  cfg.lambda = 0.0;
  auto a = sample_posterior(m, tg, seeds, cfg);
  auto b = sample_unconditional(m, seeds, cfg);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(a[i].x0, b[i].x0);
}

TEST(Sampler, DeterministicAndThreadIndependent) {
  auto sched = linear_beta_schedule(40);
  ScoreModel m = GaussianScore(prior2(), sched);
  auto op = ForwardOperator::mask({0, 1});
  std::vector<float> y{0.3f};
  std::vector<ChainTarget> tg(20, ChainTarget{y, &op});
  auto seeds = chain_seeds(1, stream::kChain, 20);
  SamplerConfig cfg;
  cfg.lambda = 1.0;
  cfg.sigma = 0.5;
  cfg.batch_size = 4;
  auto a = sample_posterior(m, tg, seeds, cfg);
  auto b = sample_posterior(m, tg, seeds, cfg);
  cfg.threads = 3;
  auto c = sample_posterior(m, tg, seeds, cfg);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(a[i].x0, b[i].x0);
    EXPECT_EQ(a[i].x0, c[i].x0);
    EXPECT_DOUBLE_EQ(a[i].data_loss, c[i].data_loss);
  }
}

TEST(Sampler, LikelihoodPullsTowardObservation) {
  auto sched = linear_beta_schedule(200);
  ScoreModel m = GaussianScore(GaussianPrior::standard(1), sched);
  auto op = ForwardOperator::identity(1);
  std::vector<float> y{2.0f};
  std::vector<ChainTarget> tg(500, ChainTarget{y, &op});
  auto seeds = chain_seeds(2, stream::kChain, 500);
  SamplerConfig cfg;
  cfg.sigma = 0.5;
  cfg.lambda = 0.0;
  auto free = sample_posterior(m, tg, seeds, cfg);
  cfg.lambda = 1.0;
  auto cond = sample_posterior(m, tg, seeds, cfg);
  double lf = 0, lc = 0;
  for (std::size_t i = 0; i < 500; ++i) {
    lf += free[i].data_loss;
    lc += cond[i].data_loss;
  }
  EXPECT_LT(lc, 0.5 * lf);
  EXPECT_GT(sample_mean(cond, 0), 1.0);
}

TEST(Sampler, DivergedChainsAreFlagged) {
  auto sched = linear_beta_schedule(50);
  ScoreModel m = GaussianScore(GaussianPrior::standard(2), sched);
  auto op = ForwardOperator::identity(2);
  std::vector<float> y{5, 5};
  std::vector<ChainTarget> tg(3, ChainTarget{y, &op});
  SamplerConfig cfg;
  cfg.sigma = 1e-3;
  cfg.lambda = 1e4;
  auto r = sample_posterior(m, tg, chain_seeds(0, stream::kChain, 3), cfg);
  for (const auto& c : r) {
    EXPECT_TRUE(c.diverged);
    EXPECT_EQ(c.data_loss, std::numeric_limits<double>::infinity());
  }
}

TEST(Sampler, RejectsInvalidConfiguration) {
  auto sched = linear_beta_schedule(5);
  ScoreModel m = GaussianScore(GaussianPrior::standard(2), sched);
  auto op = ForwardOperator::identity(3);
  std::vector<float> y{0, 0, 0};
  std::vector<ChainTarget> tg{{y, &op}};
  auto seeds = chain_seeds(0, 1, 1);
  SamplerConfig cfg;
  EXPECT_THROW(sample_posterior(m, tg, seeds, cfg), ShapeError);
  cfg.lambda = -1;
  EXPECT_THROW(sample_posterior(m, tg, seeds, cfg), PreconditionError);
  cfg.lambda = 1;
  cfg.sigma = 0;
  EXPECT_THROW(sample_posterior(m, tg, seeds, cfg), PreconditionError);
  cfg.sigma = 1;
  EXPECT_THROW(sample_posterior(m, tg, chain_seeds(0, 1, 2), cfg), ShapeError);
}

TEST(ChainSeeds, DistinctAndOffset) {
  auto a = chain_seeds(3, 7, 5), b = chain_seeds(3, 7, 3, 2);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = i + 1; j < 5; ++j) EXPECT_NE(a[i], a[j]);
  EXPECT_EQ(b[0], a[2]);
  EXPECT_EQ(b[2], a[4]);
}

TEST(LambdaArgmin, Examples) {
  std::vector<double> grid{0.5, 1, 2};
  EXPECT_EQ(argmin_lambda(grid, std::vector<double>{3, 1, 2}, {true, true, true}), 1u);
  EXPECT_EQ(argmin_lambda(grid, std::vector<double>{3, 1, 2}, {true, false, true}), 2u);
  // Ties resolve to the smaller lambda whatever the grid order.
  std::vector<double> rev{2, 1, 0.5};
  EXPECT_EQ(argmin_lambda(rev, std::vector<double>{1, 1, 1}, {true, true, true}), 2u);
  EXPECT_THROW(argmin_lambda(grid, std::vector<double>{1, 1, 1}, {false, false, false}), DivergenceError);
  EXPECT_THROW(argmin_lambda(grid, std::vector<double>{1, 1}, {true, true}), ShapeError);
}

TEST(LambdaGrid, Validation) {
  EXPECT_THROW(validate_lambda_grid(std::vector<double>{}), PreconditionError);
  EXPECT_THROW(validate_lambda_grid(std::vector<double>{1, -1}), PreconditionError);
  EXPECT_THROW(validate_lambda_grid(std::vector<double>{1, 2, 1}), PreconditionError);
  EXPECT_THROW(validate_lambda_grid(std::vector<double>{1, std::numeric_limits<double>::infinity()}),
               PreconditionError);
  EXPECT_NO_THROW(validate_lambda_grid(std::vector<double>{0, 1}));
}

TEST(LambdaSelection, PicksGridMinimumAndIsDeterministic) {
  auto sched = linear_beta_schedule(100);
  ScoreModel m = GaussianScore(GaussianPrior::standard(2), sched);
  auto op = ForwardOperator::identity(2);
  std::vector<float> y{1.5f, -1.0f};
  std::vector<ChainTarget> tg(16, ChainTarget{y, &op});
  auto seeds = chain_seeds(4, stream::kLambdaChain, 16);
  SamplerConfig cfg;
  cfg.sigma = 0.3;
  LambdaSearchConfig lc;
  lc.grid = {0, 0.5, 1, 2};
  auto a = select_lambda(m, tg, seeds, lc, cfg);
  auto b = select_lambda(m, tg, seeds, lc, cfg);
  ASSERT_EQ(a.mean_loss.size(), 4u);
  EXPECT_EQ(a.lambda_star, b.lambda_star);
  EXPECT_EQ(a.mean_loss, b.mean_loss);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_LE(a.mean_loss[a.best_index], a.mean_loss[i]);
  EXPECT_GT(a.lambda_star, 0.0);

  // Each candidate loss equals a direct run with the same seeds.
  cfg.lambda = a.grid[2];
  auto direct = sample_posterior(m, tg, seeds, cfg);
  double s = 0;
  for (const auto& c : direct) s += c.data_loss;
  EXPECT_DOUBLE_EQ(a.mean_loss[2], s / 16.0);
}

TEST(LambdaSelection, DivergentCandidatesInvalid) {
  auto sched = linear_beta_schedule(50);
  ScoreModel m = GaussianScore(GaussianPrior::standard(2), sched);
  auto op = ForwardOperator::identity(2);
  std::vector<float> y{5, 5};
  std::vector<ChainTarget> tg(4, ChainTarget{y, &op});
  SamplerConfig cfg;
  cfg.sigma = 1e-3;
  LambdaSearchConfig lc;
  lc.grid = {0, 1e4};
  auto r = select_lambda(m, tg, chain_seeds(0, 1, 4), lc, cfg);
  EXPECT_FALSE(r.valid[1]);
  EXPECT_TRUE(std::isnan(r.mean_loss[1]));
  EXPECT_EQ(r.lambda_star, 0.0);
  lc.grid = {1e4};
  EXPECT_THROW(select_lambda(m, tg, chain_seeds(0, 1, 4), lc, cfg), DivergenceError);
}
