#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "emdiff/em.hpp"

using namespace emdiff;

namespace {

double l2_distance(const std::vector<std::vector<float>>& a, const std::vector<std::vector<float>>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) s += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
  return std::sqrt(s);
}

ObservationSet denoise_obs(std::size_t n, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  fill_normal(rng, v);
  OperatorSpec spec;
  spec.kind = OpKind::identity;
  return make_observations(SampleSet(1, v), spec, sigma, seed + 1);
}

EmConfig small_em() {
  EmConfig c;
  c.iterations = 2;
  c.subset_size = 40;
  c.lambda_subset = 8;
  c.lambda.grid = {0.5, 1, 2};
  c.sampler.sigma = 0.5;
  c.seed = 5;
  return c;
}

MlpConfig tiny_net() {
  MlpConfig c;
  c.data_dim = 2;
  c.time_embed_dim = 4;
  c.hidden = {8};
  return c;
}

SampleSet rows2(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(2 * n);
  fill_normal(rng, v);
  return SampleSet(2, v);
}

}  // namespace

TEST(PhaseRule, LambdaBelowOneResets) {
  EXPECT_EQ(phase_transition_check(std::vector<double>{20, 10, 5, 0.8}), Phase::reset);
}

TEST(PhaseRule, FourNonDecreasesReset) {
  EXPECT_EQ(phase_transition_check(std::vector<double>{10, 10, 10, 10}), Phase::resume);
  EXPECT_EQ(phase_transition_check(std::vector<double>{10, 10, 10, 10, 10}), Phase::reset);
}

TEST(PhaseRule, DecreasingHistoryResumes) {
  EXPECT_EQ(phase_transition_check(std::vector<double>{20, 15, 12}), Phase::resume);
  EXPECT_EQ(phase_transition_check(std::vector<double>{}), Phase::resume);
}

TEST(PhaseRule, ResetIsAbsorbing) {
  EXPECT_EQ(phase_transition_check(Phase::reset, std::vector<double>{20, 15, 12}), Phase::reset);
}

TEST(PhaseRule, IncreasesCountAsNonDecreases) {
  EXPECT_EQ(trailing_non_decreases(std::vector<double>{5, 6, 7, 8}), 3u);
  EXPECT_EQ(trailing_non_decreases(std::vector<double>{5, 6, 7, 8, 9}), 4u);
  EXPECT_EQ(trailing_non_decreases(std::vector<double>{9, 6, 7}), 1u);
  EXPECT_EQ(trailing_non_decreases(std::vector<double>{9, 6}), 0u);
  EXPECT_EQ(phase_transition_check(std::vector<double>{5, 6, 7, 8, 9}), Phase::reset);
}

TEST(PhaseRule, Names) {
  EXPECT_EQ(to_string(Phase::resume), "resume");
  EXPECT_EQ(phase_from_string("reset"), Phase::reset);
  EXPECT_THROW(phase_from_string("restart"), FormatError);
}

TEST(PhaseRule, FixedIterationOverride) {
  EmConfig c;
  c.reset_after = 2;
  EmState st;
  st.lambda_history = {0.1};
  EXPECT_EQ(phase_for_iteration(st, c, 1), Phase::resume);
  EXPECT_EQ(phase_for_iteration(st, c, 2), Phase::reset);
  c.reset_after = 0;
  EXPECT_EQ(phase_for_iteration(st, c, 1), Phase::reset);
}

TEST(Subset, DrawsSortedDistinctIndices) {
  auto a = draw_subset(100, 10, make_rng(1, stream::kSubset));
  auto b = draw_subset(100, 10, make_rng(1, stream::kSubset));
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 10u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::adjacent_find(a.begin(), a.end()), a.end());
  for (auto i : a) EXPECT_LT(i, 100u);
  EXPECT_EQ(draw_subset(5, 10, make_rng(1, 2)), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(MetricsCsv, Format) {
  IterationMetrics m;
  m.iteration = 3;
  m.phase = Phase::reset;
  m.lambda_star = 2;
  m.mean_data_loss = 0.125;
  m.psnr_mean = 21.5;
  m.swd = 0.03;
  m.wall_clock_s = 9.75;
  std::ostringstream a, b;
  write_metrics_csv(a, std::vector<IterationMetrics>{m});
  write_metrics_csv(b, std::vector<IterationMetrics>{m}, true);
  EXPECT_EQ(a.str(),
            "iteration,phase,lambda_star,mean_data_loss,psnr_mean,swd,wall_clock_s\n"
            "3,reset,2,0.125,21.5,0.03,0\n");
  EXPECT_EQ(b.str(),
            "iteration,phase,lambda_star,mean_data_loss,psnr_mean,swd,wall_clock_s\n"
            "3,reset,2,0.125,21.5,0.03,9.75\n");
}

TEST(EStep, OneSamplePerItemMatchingDirectSampling) {
  auto sched = linear_beta_schedule(50);
  ScoreModel m = GaussianScore(GaussianPrior::standard(1), sched);
  auto obs = denoise_obs(30, 0.5, 3);
  auto cfg = small_em();
  std::vector<std::size_t> items{2, 5, 7, 11}, lam{0, 1, 2};
  auto r = e_step(m, obs, items, lam, cfg, 4);
  EXPECT_EQ(r.indices, items);
  EXPECT_EQ(r.samples.size(), 4u);
  EXPECT_EQ(r.diverged, 0u);
  EXPECT_NE(std::find(cfg.lambda.grid.begin(), cfg.lambda.grid.end(), r.lambda.lambda_star), cfg.lambda.grid.end());

  // Same draws as running the sampler with the documented per-item seeds.
  auto targets = chain_targets(obs, items);
  const auto root = derive_seed(cfg.seed, stream::kChain, 4);
  std::vector<std::uint64_t> seeds;
  for (auto i : items) seeds.push_back(derive_seed(root, stream::kChain, i));
  SamplerConfig sc = cfg.sampler;
  sc.lambda = r.lambda.lambda_star;
  auto direct = sample_posterior(m, targets, seeds, sc);
  double total = 0.0;
  for (std::size_t j = 0; j < items.size(); ++j) {
    EXPECT_EQ(r.samples.rows()[j], direct[j].x0);
    total += direct[j].data_loss;
  }
  EXPECT_DOUBLE_EQ(r.mean_data_loss, total / 4.0);

  auto again = e_step(m, obs, items, lam, cfg, 4);
  EXPECT_EQ(again.samples.values, r.samples.values);
  auto other = e_step(m, obs, items, lam, cfg, 5);
  EXPECT_NE(other.samples.values, r.samples.values);
}

TEST(EStep, PreconditionsAndDivergence) {
  auto sched = linear_beta_schedule(20);
  ScoreModel m = GaussianScore(GaussianPrior::standard(1), sched);
  auto obs = denoise_obs(10, 0.5, 3);
  auto cfg = small_em();
  std::vector<std::size_t> items{0, 1}, none;
  EXPECT_THROW(e_step(m, ObservationSet{}, items, items, cfg, 0), PreconditionError);
  EXPECT_THROW(e_step(m, obs, none, items, cfg, 0), PreconditionError);
  EXPECT_THROW(e_step(m, obs, items, none, cfg, 0), PreconditionError);
  std::vector<std::size_t> out_of_range{10};
  EXPECT_THROW(e_step(m, obs, out_of_range, items, cfg, 0), PreconditionError);
  ScoreModel m2 = GaussianScore(GaussianPrior::standard(2), sched);
  EXPECT_THROW(e_step(m2, obs, items, items, cfg, 0), ShapeError);
  cfg.sampler.sigma = 1e-4;
  cfg.lambda.grid = {1e6};
  EXPECT_THROW(e_step(m, obs, items, items, cfg, 0), DivergenceError);
}

TEST(MStep, ZeroLearningRateLeavesParameters) {
  auto sched = linear_beta_schedule(20);
  auto st = TrainerState::fresh(tiny_net(), 3, 0.99);
  const auto before = st.net.parameter_values();
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 8;
  c.lr = 0.0;
  m_step(st, rows2(16, 1), Phase::resume, sched, tiny_net(), c, 77);
  EXPECT_EQ(st.net.parameter_values(), before);
}

TEST(MStep, ResumeStaysCloserToWarmStartThanReset) {
  auto sched = linear_beta_schedule(20);
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 8;
  auto warm = TrainerState::fresh(tiny_net(), 3, 0.99);
  train(warm, rows2(32, 9), sched, c);
  const auto start = warm.net.parameter_values();
  auto a = warm, b = warm;
  a.net = warm.net.deep_copy();
  b.net = warm.net.deep_copy();
  m_step(a, rows2(32, 2), Phase::resume, sched, tiny_net(), c, 77);
  m_step(b, rows2(32, 2), Phase::reset, sched, tiny_net(), c, 77);
  EXPECT_LT(l2_distance(a.net.parameter_values(), start), l2_distance(b.net.parameter_values(), start));
}

TEST(MStep, ResetIgnoresPreviousParameters) {
  auto sched = linear_beta_schedule(20);
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 8;
  auto a = TrainerState::fresh(tiny_net(), 1, 0.99);
  auto b = TrainerState::fresh(tiny_net(), 2, 0.99);
  train(b, rows2(16, 4), sched, c);
  m_step(a, rows2(16, 5), Phase::reset, sched, tiny_net(), c, 99);
  m_step(b, rows2(16, 5), Phase::reset, sched, tiny_net(), c, 99);
  EXPECT_EQ(a.net.parameter_values(), b.net.parameter_values());
  EXPECT_EQ(a.ema.shadow, b.ema.shadow);
  EXPECT_THROW(m_step(a, SampleSet(2, {}), Phase::reset, sched, tiny_net(), c, 99), PreconditionError);
}

TEST(RunEm, ZeroIterationsReturnsInitialModel) {
  auto sched = linear_beta_schedule(20);
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  NeuralFamily fam(tiny_net(), c, c, 3), ref(tiny_net(), c, c, 3);
  auto clean = rows2(8, 1);
  OperatorSpec spec;
  spec.kind = OpKind::identity;
  auto obs = make_observations(rows2(20, 2), spec, 0.1, 3);
  EmConfig ec = small_em();
  ec.iterations = 0;
  auto st = run_em(fam, obs, clean, sched, ec);
  ref.init(clean, sched);
  EXPECT_EQ(st.iteration, 0);
  EXPECT_TRUE(st.metrics.empty());
  EXPECT_EQ(fam.state.net.parameter_values(), ref.state.net.parameter_values());
  EXPECT_EQ(fam.state.ema.shadow, ref.state.ema.shadow);
}

TEST(RunEm, GaussianFamilyInvariants) {
  auto sched = linear_beta_schedule(50);
  auto obs = denoise_obs(200, 0.5, 11);
  EmConfig ec = small_em();
  ec.iterations = 4;
  ec.subset_size = 60;
  GaussianFamily fam(GaussianPrior{Eigen::VectorXd::Constant(1, 0.5), Eigen::MatrixXd::Constant(1, 1, 3.0)});
  std::size_t calls = 0;
  EmHooks<GaussianFamily> hooks;
  hooks.on_iteration = [&](const EmState& s, const GaussianFamily&) {
    ++calls;
    EXPECT_EQ(s.lambda_history.size(), static_cast<std::size_t>(s.iteration));
  };
  auto st = run_em(fam, obs, obs.truth.subset(std::vector<std::size_t>{0, 1, 2}), sched, ec, hooks);
  EXPECT_EQ(calls, 4u);
  EXPECT_EQ(st.iteration, 4);
  ASSERT_EQ(st.metrics.size(), 4u);
  bool reset_seen = false;
  for (std::size_t k = 0; k < st.metrics.size(); ++k) {
    const auto& m = st.metrics[k];
    EXPECT_EQ(m.iteration, static_cast<int>(k));
    if (reset_seen) {
      EXPECT_EQ(m.phase, Phase::reset);
    }
    reset_seen = reset_seen || m.phase == Phase::reset;
    EXPECT_EQ(m.lambda_losses.size(), ec.lambda.grid.size());
    EXPECT_TRUE(std::isfinite(m.psnr_mean));
    EXPECT_GE(m.swd, 0.0);
    if (m.phase == Phase::resume) {
      EXPECT_EQ(m.samples, ec.subset_size);
    }
  }

  GaussianFamily again(GaussianPrior{Eigen::VectorXd::Constant(1, 0.5), Eigen::MatrixXd::Constant(1, 1, 3.0)});
  auto st2 = run_em(again, obs, obs.truth.subset(std::vector<std::size_t>{0, 1, 2}), sched, ec);
  std::ostringstream a, b;
  write_metrics_csv(a, st.metrics);
  write_metrics_csv(b, st2.metrics);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(fam.prior.cov, again.prior.cov);
}

TEST(RunEm, ResetSamplesEveryObservation) {
  auto sched = linear_beta_schedule(20);
  auto obs = denoise_obs(100, 0.5, 2);
  EmConfig ec = small_em();
  ec.iterations = 3;
  ec.subset_size = 20;
  ec.reset_after = 2;
  GaussianFamily fam(GaussianPrior::standard(1));
  auto st = run_em(fam, obs, obs.truth, sched, ec);
  EXPECT_EQ(st.metrics[0].phase, Phase::resume);
  EXPECT_EQ(st.metrics[1].phase, Phase::resume);
  EXPECT_EQ(st.metrics[2].phase, Phase::reset);
  EXPECT_EQ(st.metrics[0].samples, 20u);
  EXPECT_EQ(st.metrics[2].samples, obs.size());
}

TEST(RunEm, AbortHookSeesLastConsistentState) {
  auto sched = linear_beta_schedule(20);
  auto obs = denoise_obs(20, 0.5, 2);
  EmConfig ec = small_em();
  ec.iterations = 1;
  ec.sampler.sigma = 1e-4;
  ec.lambda.grid = {1e6};
  GaussianFamily fam(GaussianPrior::standard(1));
  bool aborted = false;
  EmHooks<GaussianFamily> hooks;
  hooks.on_abort = [&](const EmState& s, const GaussianFamily&) {
    aborted = true;
    EXPECT_EQ(s.iteration, 0);
  };
  EXPECT_THROW(run_em(fam, obs, obs.truth, sched, ec, hooks), DivergenceError);
  EXPECT_TRUE(aborted);
}

TEST(RunEm, RejectsBadInputs) {
  auto sched = linear_beta_schedule(20);
  auto obs = denoise_obs(20, 0.5, 2);
  GaussianFamily fam(GaussianPrior::standard(1));
  EmConfig ec = small_em();
  EXPECT_THROW(run_em(fam, ObservationSet{}, obs.truth, sched, ec), PreconditionError);
  EXPECT_THROW(run_em(fam, obs, SampleSet(1, {}), sched, ec), PreconditionError);
  EXPECT_THROW(run_em(fam, obs, rows2(3, 1), sched, ec), ShapeError);
  ec.iterations = -1;
  EXPECT_THROW(run_em(fam, obs, obs.truth, sched, ec), ConfigError);
}

TEST(EmConfigValidation, RejectsOutOfRange) {
  EmConfig c;
  EXPECT_NO_THROW(c.validate());
  c.max_diverged_fraction = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = EmConfig{};
  c.lambda.grid = {1, 1};
  EXPECT_THROW(c.validate(), ConfigError);
  c = EmConfig{};
  c.sampler.sigma = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = EmConfig{};
  c.subset_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}
