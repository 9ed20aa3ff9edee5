#pragma once

// Expectation-maximization over corrupted observations: posterior sampling
// with the current prior (E), refitting the prior to those samples (M).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "emdiff/data_eval.hpp"
#include "emdiff/error.hpp"
#include "emdiff/forward_ops.hpp"
#include "emdiff/mlp.hpp"
#include "emdiff/rng.hpp"
#include "emdiff/sampler.hpp"
#include "emdiff/samples.hpp"
#include "emdiff/schedule.hpp"
#include "emdiff/score_models.hpp"
#include "emdiff/trainer.hpp"

namespace emdiff {

enum class Phase { resume, reset };

inline std::string to_string(Phase p) { return p == Phase::resume ? "resume" : "reset"; }

inline Phase phase_from_string(const std::string& s) {
  if (s == "resume") return Phase::resume;
  if (s == "reset") return Phase::reset;
  throw FormatError("unknown phase '" + s + "'");
}

/// Number of trailing entries of `history` that are not strictly below
/// their predecessor.
inline std::size_t trailing_non_decreases(std::span<const double> history) {
  std::size_t n = 0;
  for (std::size_t i = history.size(); i >= 2; --i) {
    if (history[i - 1] < history[i - 2]) break;
    ++n;
  }
  return n;
}

/// Reset once lambda* drops below 1 or has failed to strictly decrease more
/// than three times in a row. Reset is absorbing.
inline Phase phase_transition_check(Phase current, std::span<const double> lambda_history) {
  if (current == Phase::reset) return Phase::reset;
  if (!lambda_history.empty() && lambda_history.back() < 1.0) return Phase::reset;
  if (trailing_non_decreases(lambda_history) > 3) return Phase::reset;
  return Phase::resume;
}

inline Phase phase_transition_check(std::span<const double> lambda_history) {
  return phase_transition_check(Phase::resume, lambda_history);
}

struct EmConfig {
  int iterations = 10;
  std::size_t subset_size = 5000;    // observations sampled per E-step
  std::size_t lambda_subset = 32;    // observations used to pick lambda*
  LambdaSearchConfig lambda;
  SamplerConfig sampler;
  // > 0: the first `reset_after` iterations resume, later ones reset; the
  // lambda* rule is then ignored.
  int reset_after = 0;
  double max_diverged_fraction = 0.1;
  std::size_t swd_projections = 128;
  std::uint64_t seed = 0;

  void validate() const {
    if (iterations < 0) throw ConfigError("em.iterations must be >= 0");
    if (subset_size == 0) throw ConfigError("em.subset_size must be >= 1");
    if (lambda_subset == 0) throw ConfigError("em.lambda_subset must be >= 1");
    if (reset_after < 0) throw ConfigError("em.reset_after must be >= 0");
    if (!(max_diverged_fraction >= 0.0 && max_diverged_fraction < 1.0)) {
      throw ConfigError("em.max_diverged_fraction must lie in [0,1)");
    }
    if (!(lambda.max_diverged_fraction >= 0.0 && lambda.max_diverged_fraction < 1.0)) {
      throw ConfigError("sampler.lambda_max_diverged_fraction must lie in [0,1)");
    }
    if (swd_projections == 0) throw ConfigError("em.swd_projections must be >= 1");
    if (!(sampler.sigma > 0.0)) throw ConfigError("sampler.sigma must be > 0");
    if (sampler.batch_size == 0) throw ConfigError("sampler.batch_size must be >= 1");
    if (sampler.threads < 1) throw ConfigError("sampler.threads must be >= 1");
    try {
      validate_lambda_grid(lambda.grid);
    } catch (const Error& e) {
      throw ConfigError(std::string("sampler.lambda_grid: ") + e.what());
    }
  }
};

struct IterationMetrics {
  int iteration = 0;
  Phase phase = Phase::resume;
  double lambda_star = 0.0;
  double mean_data_loss = 0.0;
  double psnr_mean = std::numeric_limits<double>::quiet_NaN();
  double swd = std::numeric_limits<double>::quiet_NaN();
  double wall_clock_s = 0.0;
  std::size_t samples = 0;
  std::size_t diverged = 0;
  std::vector<double> lambda_losses;  // per grid entry; NaN when invalid
};

struct EmState {
  int iteration = 0;  // completed iterations
  Phase phase = Phase::resume;
  std::vector<double> lambda_history;
  std::vector<IterationMetrics> metrics;
  std::uint64_t seed = 0;
  std::string config_json;
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

/// iteration,phase,lambda_star,mean_data_loss,psnr_mean,swd,wall_clock_s.
/// Timing is written only when asked for so that reruns compare equal.
inline void write_metrics_csv(std::ostream& os, std::span<const IterationMetrics> rows, bool wall_clock = false) {
  os << "iteration,phase,lambda_star,mean_data_loss,psnr_mean,swd,wall_clock_s\n";
  for (const auto& m : rows) {
    os << m.iteration << ',' << to_string(m.phase) << ',' << format_double(m.lambda_star) << ','
       << format_double(m.mean_data_loss) << ',' << format_double(m.psnr_mean) << ',' << format_double(m.swd) << ','
       << format_double(wall_clock ? m.wall_clock_s : 0.0) << '\n';
  }
}

// ---------------------------------------------------------------------------
// E-step

struct EStepResult {
  std::vector<std::size_t> indices;  // observation index of each sample
  SampleSet samples;
  std::vector<double> data_loss;
  LambdaSearchResult lambda;
  std::size_t diverged = 0;
  double mean_data_loss = 0.0;
};

inline std::vector<ChainTarget> chain_targets(const ObservationSet& obs, std::span<const std::size_t> idx) {
  std::vector<ChainTarget> t;
  t.reserve(idx.size());
  for (auto i : idx) {
    if (i >= obs.size()) throw PreconditionError("observation index out of range");
    t.push_back({obs.items[i].y, obs.items[i].op.get()});
  }
  return t;
}

/// Picks lambda* on `lambda_items`, then draws one posterior sample per
/// entry of `items`. Diverged chains are dropped; more than
/// cfg.max_diverged_fraction of them is an error.
inline EStepResult e_step(const ScoreModel& m, const ObservationSet& obs, std::span<const std::size_t> items,
                          std::span<const std::size_t> lambda_items, const EmConfig& cfg, int iteration) {
  if (obs.size() == 0 || items.empty()) throw PreconditionError("E-step needs a nonempty observation set");
  if (lambda_items.empty()) throw PreconditionError("E-step needs a nonempty lambda selection subset");
  if (obs.dim != score_dim(m)) throw ShapeError("E-step: observation dimension does not match the model");
  const auto k = static_cast<std::uint64_t>(iteration);
  EStepResult r;

  auto ltargets = chain_targets(obs, lambda_items);
  auto lseeds = chain_seeds(derive_seed(cfg.seed, stream::kLambdaChain, k), stream::kLambdaChain, ltargets.size());
  r.lambda = select_lambda(m, ltargets, lseeds, cfg.lambda, cfg.sampler);

  auto targets = chain_targets(obs, items);
  const auto root = derive_seed(cfg.seed, stream::kChain, k);
  std::vector<std::uint64_t> seeds;
  seeds.reserve(items.size());
  for (auto i : items) seeds.push_back(derive_seed(root, stream::kChain, i));
  SamplerConfig sc = cfg.sampler;
  sc.lambda = r.lambda.lambda_star;
  auto chains = sample_posterior(m, targets, seeds, sc);

  r.samples.dim = obs.dim;
  double total = 0.0;
  for (std::size_t j = 0; j < chains.size(); ++j) {
    if (chains[j].diverged) {
      ++r.diverged;
      continue;
    }
    r.indices.push_back(items[j]);
    r.samples.push_back(chains[j].x0);
    r.data_loss.push_back(chains[j].data_loss);
    total += chains[j].data_loss;
  }
  if (static_cast<double>(r.diverged) > cfg.max_diverged_fraction * static_cast<double>(chains.size()) ||
      r.samples.empty()) {
    std::ostringstream os;
    os << r.diverged << " of " << chains.size() << " posterior chains diverged at lambda=" << sc.lambda;
    throw DivergenceError(os.str());
  }
  r.mean_data_loss = total / static_cast<double>(r.samples.size());
  return r;
}

// ---------------------------------------------------------------------------
// M-step

/// Resume: continue training from `st`. Reset: discard `st` and train a
/// network initialised from `reset_seed`.
inline TrainReport m_step(TrainerState& st, const SampleSet& samples, Phase phase, const NoiseSchedule& schedule,
                          const MlpConfig& net, const TrainConfig& cfg, std::uint64_t reset_seed) {
  if (samples.empty()) throw PreconditionError("M-step needs a nonempty sample set");
  if (phase == Phase::reset) st = TrainerState::fresh(net, reset_seed, cfg.ema_decay);
  return train(st, samples, schedule, cfg);
}

/// Neural score model trained by denoising score matching.
class NeuralFamily {
 public:
  NeuralFamily(MlpConfig net, TrainConfig train, TrainConfig init_train, std::uint64_t seed)
      : net_(std::move(net)), train_(std::move(train)), init_train_(std::move(init_train)), seed_(seed) {
    train_.validate();
    init_train_.validate();
  }

  void init(const SampleSet& clean, const NoiseSchedule& schedule) {
    if (clean.empty()) throw PreconditionError("initial training needs at least one clean sample");
    state = TrainerState::fresh(net_, derive_seed(seed_, stream::kInit, 0), init_train_.ema_decay);
    TrainConfig c = init_train_;
    c.seed = derive_seed(seed_, stream::kInitTrain, 0);
    last_report = init_train_on_clean(state, clean, schedule, c);
  }

  ScoreModel model(const NoiseSchedule& schedule) const {
    return NeuralScore(std::make_shared<const MlpScoreNet>(state.ema_network()), schedule);
  }

  void fit(const SampleSet& samples, Phase phase, int iteration, const NoiseSchedule& schedule) {
    TrainConfig c = train_;
    c.seed = derive_seed(seed_, stream::kMStep, static_cast<std::uint64_t>(iteration));
    last_report = m_step(state, samples, phase, schedule, net_, c, derive_seed(seed_, stream::kReset, 0));
  }

  const MlpConfig& net_config() const noexcept { return net_; }

  TrainerState state;
  TrainReport last_report;

 private:
  MlpConfig net_;
  TrainConfig train_;
  TrainConfig init_train_;
  std::uint64_t seed_;
};

/// Analytic Gaussian prior refitted by moment matching.
class GaussianFamily {
 public:
  explicit GaussianFamily(GaussianPrior initial, double variance_floor = 1e-6)
      : prior(std::move(initial)), floor_(variance_floor) {
    prior.validate();
  }

  void init(const SampleSet& clean, const NoiseSchedule&) {
    if (clean.size() >= 2) fit_moments(clean);
  }

  ScoreModel model(const NoiseSchedule& schedule) const { return GaussianScore(prior, schedule); }

  void fit(const SampleSet& samples, Phase, int, const NoiseSchedule&) {
    if (samples.size() < 2) throw PreconditionError("moment matching needs at least two samples");
    fit_moments(samples);
  }

  GaussianPrior prior;

 private:
  void fit_moments(const SampleSet& s) {
    auto [mu, cov] = sample_moments(s);
    cov = 0.5 * (cov + cov.transpose());
    cov.diagonal().array() += floor_;
    prior.mean = mu;
    prior.cov = cov;
  }

  double floor_;
};

// ---------------------------------------------------------------------------
// orchestration

template <class Family>
struct EmHooks {
  // After each completed iteration (checkpointing, logging).
  std::function<void(const EmState&, const Family&)> on_iteration;
  // Before an exception escapes; receives the last consistent state.
  std::function<void(const EmState&, const Family&)> on_abort;
};

inline std::vector<std::size_t> draw_subset(std::size_t n, std::size_t k, Rng rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (k < n) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

/// Phase used by iteration number `iteration` (0-based) given the state.
inline Phase phase_for_iteration(const EmState& st, const EmConfig& cfg, int iteration) {
  if (cfg.reset_after > 0) return iteration >= cfg.reset_after ? Phase::reset : Phase::resume;
  return phase_transition_check(st.phase, st.lambda_history);
}

/// Runs iterations st.iteration .. cfg.iterations-1 on an initialised family.
template <class Family>
EmState run_em_iterations(Family& fam, EmState st, const ObservationSet& obs, const NoiseSchedule& schedule,
                          const EmConfig& cfg, const EmHooks<Family>& hooks = {}) {
  cfg.validate();
  if (obs.size() == 0) throw PreconditionError("EM needs a nonempty observation set");
  for (int k = st.iteration; k < cfg.iterations; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto uk = static_cast<std::uint64_t>(k);
    IterationMetrics im;
    try {
      const Phase phase = phase_for_iteration(st, cfg, k);
      auto subset = draw_subset(obs.size(), cfg.subset_size, make_rng(cfg.seed, stream::kSubset, uk));
      auto lambda_items = draw_subset(subset.size(), cfg.lambda_subset, make_rng(cfg.seed, stream::kLambdaSubset, uk));
      for (auto& i : lambda_items) i = subset[i];
      // Resume fine-tunes on the subset; reset retrains on every observation.
      std::vector<std::size_t> all;
      if (phase == Phase::reset) {
        all.resize(obs.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
      }
      const auto& items = phase == Phase::reset ? all : subset;

      auto model = fam.model(schedule);
      auto es = e_step(model, obs, items, lambda_items, cfg, k);

      im.iteration = k;
      im.phase = phase;
      im.lambda_star = es.lambda.lambda_star;
      im.lambda_losses = es.lambda.mean_loss;
      im.mean_data_loss = es.mean_data_loss;
      im.samples = es.samples.size();
      im.diverged = es.diverged;
      if (obs.has_truth()) {
        const auto truth = obs.truth.subset(es.indices);
        im.psnr_mean = mean_psnr(es.samples, truth);
        im.swd = sliced_wasserstein(es.samples, truth, cfg.swd_projections, derive_seed(cfg.seed, stream::kSwd, uk));
      }
      fam.fit(es.samples, phase, k, schedule);
      st.phase = phase;
    } catch (...) {
      if (hooks.on_abort) hooks.on_abort(st, fam);
      throw;
    }
    im.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    st.lambda_history.push_back(im.lambda_star);
    st.metrics.push_back(std::move(im));
    st.iteration = k + 1;
    if (hooks.on_iteration) hooks.on_iteration(st, fam);
  }
  return st;
}

/// Initial fit on `init_clean`, then cfg.iterations EM iterations.
template <class Family>
EmState run_em(Family& fam, const ObservationSet& obs, const SampleSet& init_clean, const NoiseSchedule& schedule,
               const EmConfig& cfg, const EmHooks<Family>& hooks = {}) {
  cfg.validate();
  if (obs.size() == 0) throw PreconditionError("EM needs a nonempty observation set");
  if (init_clean.empty()) throw PreconditionError("EM needs a nonempty initial clean set");
  if (init_clean.dim != obs.dim) throw ShapeError("initial clean set and observations differ in dimension");
  fam.init(init_clean, schedule);
  EmState st;
  st.seed = cfg.seed;
  return run_em_iterations(fam, std::move(st), obs, schedule, cfg, hooks);
}

}  // namespace emdiff
