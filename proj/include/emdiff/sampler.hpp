#pragma once

// Reverse-time sampling: Tweedie estimate, ancestral reverse step, the
// likelihood-weighted posterior sampler and the data-loss driven choice of
// the likelihood weight lambda.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <thread>
#include <vector>

#include "emdiff/error.hpp"
#include "emdiff/forward_ops.hpp"
#include "emdiff/rng.hpp"
#include "emdiff/schedule.hpp"
#include "emdiff/score_models.hpp"
#include "emdiff/tensor.hpp"

namespace emdiff {

struct SamplerConfig {
  double lambda = 1.0;
  double sigma = 0.01;
  // Chains advanced together through one network evaluation. Results do not
  // depend on `threads`, but may differ in the last bit across batch sizes.
  std::size_t batch_size = 256;
  int threads = 1;
  double divergence_norm = 1e6;
  double alpha_bar_floor = 1e-8;
};

/// x0_hat = (x_t + (1 - abar_t) s(x_t, t)) / sqrt(abar_t), abar clamped below.
inline Tensor tweedie_from_score(const Tensor& x_t, const Tensor& score, double alpha_bar, double floor = 1e-8) {
  if (x_t.shape() != score.shape()) throw ShapeError("tweedie: score shape mismatch");
  const double ab = std::max(alpha_bar, floor);
  const double inv = 1.0 / std::sqrt(ab);
  const double var = 1.0 - alpha_bar;
  std::vector<float> out(x_t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>((x_t[i] + var * score[i]) * inv);
  return Tensor(x_t.shape(), std::move(out));
}

inline Tensor tweedie_x0(const ScoreModel& m, const Tensor& x_t, int t, double floor = 1e-8) {
  return tweedie_from_score(x_t, eval_score(m, x_t, t), score_schedule(m).alpha_bar(t), floor);
}

/// x_{t-1} = x_t + beta_t [x_t / 2 + score + lambda * lik] + sqrt(beta_t) z,
/// with z ignored at t = 1. `lik` may be undefined (unconditional step).
inline Tensor reverse_step(const NoiseSchedule& s, const Tensor& x_t, int t, const Tensor& score, const Tensor& lik,
                           double lambda, const Tensor& z) {
  if (score.shape() != x_t.shape() || z.shape() != x_t.shape()) throw ShapeError("reverse_step: shape mismatch");
  if (lik.defined() && lik.shape() != x_t.shape()) throw ShapeError("reverse_step: likelihood shape mismatch");
  const double beta = s.beta(t);
  const double noise = t > 1 ? std::sqrt(beta) : 0.0;
  const bool use_lik = lik.defined() && lambda != 0.0;
  std::vector<float> out(x_t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double drift = 0.5 * x_t[i] + score[i];
    if (use_lik) drift += lambda * lik[i];
    out[i] = static_cast<float>(x_t[i] + beta * drift + noise * z[i]);
  }
  return Tensor(x_t.shape(), std::move(out));
}

/// Observation data for one chain; op == nullptr means unconditional.
struct ChainTarget {
  std::span<const float> y;
  const ForwardOperator* op = nullptr;
};

struct LikelihoodEval {
  Tensor score;
  Tensor x0_hat;
  Tensor grad;  // -(1 / 2 sigma^2) grad_{x_t} ||y - A x0_hat(x_t)||^2
};

/// Likelihood score through the Tweedie estimate, exact VJP included.
inline LikelihoodEval posterior_likelihood_score(const ScoreModel& m, const Tensor& x_t, int t,
                                                 std::span<const ChainTarget> targets, double sigma,
                                                 double floor = 1e-8) {
  if (!(sigma > 0.0)) throw PreconditionError("posterior sampling requires sigma > 0");
  if (targets.size() != x_t.rows()) throw ShapeError("posterior_likelihood_score: one target per row required");
  const double ab = score_schedule(m).alpha_bar(t);
  const double inv = 1.0 / std::sqrt(std::max(ab, floor));
  auto sv = eval_score_with_vjp(m, x_t, t);
  Tensor x0 = tweedie_from_score(x_t, sv.score, ab, floor);
  const auto B = x_t.rows(), d = x_t.cols();
  std::vector<float> u(B * d, 0.0f);
  for (std::size_t r = 0; r < B; ++r) {
    const auto* op = targets[r].op;
    if (!op) continue;
    std::span<const float> xr = x0.data().subspan(r * d, d);
    auto res = op->apply(xr);
    if (res.size() != targets[r].y.size()) throw ShapeError("posterior_likelihood_score: observation size mismatch");
    for (std::size_t i = 0; i < res.size(); ++i) res[i] -= targets[r].y[i];
    op->adjoint(res, std::span<float>(u).subspan(r * d, d));
  }
  Tensor ut({B, d}, u);
  Tensor jt = sv.vjp(ut);
  const double c = -1.0 / (sigma * sigma);
  const double var = 1.0 - ab;
  std::vector<float> g(B * d);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(c * (u[i] + var * jt[i]) * inv);
  return {sv.score, x0, Tensor({B, d}, std::move(g))};
}

struct ChainResult {
  std::vector<float> x0;
  double data_loss = 0.0;  // ||y - A x0||^2 of the final state; 0 when unconditional
  bool diverged = false;
};

namespace detail {

inline double row_norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

// One batch of chains from x_T ~ N(0, I) down to x_0. Each chain draws its
// initial state and then its per-step noise from its own generator.
inline std::vector<ChainResult> run_chain_batch(const ScoreModel& m, std::span<const ChainTarget> targets,
                                                std::span<const std::uint64_t> seeds, double lambda,
                                                const SamplerConfig& cfg) {
  const auto& sched = score_schedule(m);
  const std::size_t B = seeds.size();
  const std::size_t d = score_dim(m);
  const bool conditional = lambda != 0.0;
  std::vector<Rng> rngs;
  rngs.reserve(B);
  for (auto s : seeds) rngs.emplace_back(s);
  std::vector<float> x(B * d);
  for (std::size_t r = 0; r < B; ++r) fill_normal(rngs[r], std::span<float>(x).subspan(r * d, d));
  std::vector<char> dead(B, 0);
  std::vector<float> z(B * d, 0.0f);

  for (int t = sched.T(); t >= 1; --t) {
    Tensor xt({B, d}, x);
    Tensor score, lik;
    if (conditional) {
      auto le = posterior_likelihood_score(m, xt, t, targets, cfg.sigma, cfg.alpha_bar_floor);
      score = le.score;
      lik = le.grad;
    } else {
      score = eval_score(m, xt, t);
    }
    if (t > 1) {
      for (std::size_t r = 0; r < B; ++r) fill_normal(rngs[r], std::span<float>(z).subspan(r * d, d));
    } else {
      std::fill(z.begin(), z.end(), 0.0f);
    }
    const double beta = sched.beta(t);
    const double noise = t > 1 ? std::sqrt(beta) : 0.0;
    for (std::size_t r = 0; r < B; ++r) {
      if (dead[r]) continue;
      bool bad = false;
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t i = r * d + j;
        double drift = 0.5 * x[i] + score[i];
        if (conditional) drift += lambda * lik[i];
        const double nx = x[i] + beta * drift + noise * z[i];
        bad = bad || !std::isfinite(nx);
        x[i] = static_cast<float>(nx);
      }
      if (bad || row_norm(std::span<const float>(x).subspan(r * d, d)) > cfg.divergence_norm) {
        dead[r] = 1;
        std::fill_n(x.begin() + static_cast<long>(r * d), d, 0.0f);
      }
    }
  }

  std::vector<ChainResult> out(B);
  for (std::size_t r = 0; r < B; ++r) {
    out[r].x0.assign(x.begin() + static_cast<long>(r * d), x.begin() + static_cast<long>((r + 1) * d));
    out[r].diverged = dead[r] != 0;
    if (!dead[r] && targets[r].op) out[r].data_loss = data_loss(targets[r].y, out[r].x0, *targets[r].op);
    if (dead[r]) out[r].data_loss = std::numeric_limits<double>::infinity();
  }
  return out;
}

template <class F>
void parallel_for(std::size_t n, int threads, F&& f) {
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1))));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += workers) f(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Runs one chain per target (targets with op == nullptr are unconditional).
/// Chain i uses generator seeds[i]; lambda == 0 reproduces unconditional
/// sampling bit for bit.
inline std::vector<ChainResult> sample_posterior(const ScoreModel& m, std::span<const ChainTarget> targets,
                                                 std::span<const std::uint64_t> seeds, const SamplerConfig& cfg) {
  if (!(cfg.lambda >= 0.0) || !std::isfinite(cfg.lambda)) throw PreconditionError("lambda must be finite and >= 0");
  if (cfg.lambda > 0.0 && !(cfg.sigma > 0.0)) throw PreconditionError("posterior sampling requires sigma > 0");
  if (targets.size() != seeds.size()) throw ShapeError("sample_posterior: one seed per chain required");
  if (cfg.batch_size == 0) throw PreconditionError("sampler batch size must be positive");
  for (const auto& tg : targets) {
    if (tg.op && (tg.op->input_dim() != score_dim(m) || tg.op->output_dim() != tg.y.size())) {
      throw ShapeError("sample_posterior: operator/observation shapes do not match the model");
    }
  }
  const std::size_t n = targets.size();
  const std::size_t nb = (n + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<ChainResult> out(n);
  detail::parallel_for(nb, cfg.threads, [&](std::size_t b) {
    const std::size_t lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
    auto part = detail::run_chain_batch(m, targets.subspan(lo, hi - lo), seeds.subspan(lo, hi - lo), cfg.lambda, cfg);
    std::move(part.begin(), part.end(), out.begin() + static_cast<long>(lo));
  });
  return out;
}

inline std::vector<ChainResult> sample_unconditional(const ScoreModel& m, std::span<const std::uint64_t> seeds,
                                                     const SamplerConfig& cfg) {
  std::vector<ChainTarget> targets(seeds.size());
  SamplerConfig c = cfg;
  c.lambda = 0.0;
  return sample_posterior(m, targets, seeds, c);
}

/// Per-chain seeds for a run of n chains under (root, tag, offset).
inline std::vector<std::uint64_t> chain_seeds(std::uint64_t root, std::uint64_t tag, std::size_t n,
                                              std::size_t offset = 0) {
  std::vector<std::uint64_t> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = derive_seed(root, tag, offset + i);
  return s;
}

// ---------------------------------------------------------------------------
// lambda selection

struct LambdaSearchResult {
  std::vector<double> grid;
  std::vector<double> mean_loss;  // NaN for invalid candidates
  std::vector<std::size_t> diverged;
  std::vector<bool> valid;
  double lambda_star = 0.0;
  std::size_t best_index = 0;
};

inline void validate_lambda_grid(std::span<const double> grid) {
  if (grid.empty()) throw PreconditionError("lambda grid must not be empty");
  std::vector<double> g(grid.begin(), grid.end());
  for (double l : g)
    if (!(l >= 0.0) || !std::isfinite(l)) throw PreconditionError("lambda grid values must be finite and >= 0");
  std::sort(g.begin(), g.end());
  if (std::adjacent_find(g.begin(), g.end()) != g.end()) throw PreconditionError("lambda grid values must be distinct");
}

/// Index of the smallest valid loss; ties go to the smaller lambda.
inline std::size_t argmin_lambda(std::span<const double> grid, std::span<const double> losses,
                                 const std::vector<bool>& valid) {
  validate_lambda_grid(grid);
  if (losses.size() != grid.size() || valid.size() != grid.size()) throw ShapeError("argmin_lambda: size mismatch");
  std::size_t best = grid.size();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!valid[i]) continue;
    if (best == grid.size() || losses[i] < losses[best] || (losses[i] == losses[best] && grid[i] < grid[best])) {
      best = i;
    }
  }
  if (best == grid.size()) throw DivergenceError("every lambda candidate diverged");
  return best;
}

struct LambdaSearchConfig {
  std::vector<double> grid{0.5, 1, 2, 5, 10, 20};
  // A candidate is invalid when more than this fraction of its chains diverge.
  double max_diverged_fraction = 0.1;
};

/// Samples the subset once per candidate with shared chain seeds and picks
/// the lambda with the smallest mean data loss.
inline LambdaSearchResult select_lambda(const ScoreModel& m, std::span<const ChainTarget> subset,
                                        std::span<const std::uint64_t> seeds, const LambdaSearchConfig& lcfg,
                                        const SamplerConfig& cfg) {
  validate_lambda_grid(lcfg.grid);
  if (subset.empty()) throw PreconditionError("lambda selection needs a nonempty observation subset");
  LambdaSearchResult res;
  res.grid = lcfg.grid;
  for (double lambda : lcfg.grid) {
    SamplerConfig c = cfg;
    c.lambda = lambda;
    auto chains = sample_posterior(m, subset, seeds, c);
    std::size_t dead = 0;
    double total = 0.0;
    for (const auto& ch : chains) {
      if (ch.diverged) {
        ++dead;
      } else {
        total += ch.data_loss;
      }
    }
    const bool ok = dead < chains.size() &&
                    static_cast<double>(dead) <= lcfg.max_diverged_fraction * static_cast<double>(chains.size());
    res.diverged.push_back(dead);
    res.valid.push_back(ok);
    res.mean_loss.push_back(ok ? total / static_cast<double>(chains.size() - dead)
                               : std::numeric_limits<double>::quiet_NaN());
  }
  res.best_index = argmin_lambda(res.grid, res.mean_loss, res.valid);
  res.lambda_star = res.grid[res.best_index];
  return res;
}

}  // namespace emdiff
