#pragma once

// Denoising score matching on the eps scale: the network output r(x_t, t)
// is trained so that r ~ -eps, i.e. loss = ||eps + r(sqrt(abar) x0 + sqrt(1-abar) eps, t)||^2.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <vector>

#include "emdiff/error.hpp"
#include "emdiff/mlp.hpp"
#include "emdiff/optim.hpp"
#include "emdiff/rng.hpp"
#include "emdiff/samples.hpp"
#include "emdiff/schedule.hpp"
#include "emdiff/tensor.hpp"

namespace emdiff {

struct TrainConfig {
  int epochs = 300;
  std::size_t batch_size = 128;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double ema_decay = 0.999;
  // Effective decay min(decay, (1 + n) / (10 + n)) after n EMA updates.
  bool ema_warmup = true;
  std::uint64_t seed = 0;
  // Random horizontal flips of h x w images; off unless both dims are set.
  bool hflip = false;
  std::size_t image_height = 0;
  std::size_t image_width = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("train.ema_decay must lie in (0,1)");
    if (hflip && image_height * image_width == 0) throw ConfigError("train.hflip needs image dimensions");
  }
};

/// Everything that persists between consecutive training calls.
struct TrainerState {
  MlpScoreNet net;
  OptimizerState opt;
  EmaState ema;
  std::uint64_t ema_updates = 0;

  static TrainerState fresh(const MlpConfig& cfg, std::uint64_t init_seed, double ema_decay) {
    TrainerState s;
    s.net = MlpScoreNet(cfg, init_seed);
    s.ema = make_ema(s.net.parameters(), ema_decay);
    return s;
  }

  /// Network carrying the EMA weights, for sampling.
  MlpScoreNet ema_network() const {
    MlpScoreNet n = net.deep_copy();
    n.load_parameters(ema.shadow);
    return n;
  }
};

struct TrainReport {
  std::vector<double> epoch_loss;
  std::vector<std::vector<float>> ema_params;
  std::uint64_t steps = 0;
  double wall_clock_s = 0.0;

  void write_csv(std::ostream& os) const {
    os << "epoch,mean_loss\n";
    for (std::size_t e = 0; e < epoch_loss.size(); ++e) {
      std::ostringstream v;
      v.precision(9);
      v << epoch_loss[e];
      os << (e + 1) << ',' << v.str() << '\n';
    }
  }
};

/// Timestep per row (uniform on 1..T) then eps per row, both from `rng`.
struct DsmDraw {
  std::vector<int> t;
  Tensor eps;
  Tensor x_t;
};

inline DsmDraw draw_dsm_inputs(const Tensor& x0, const NoiseSchedule& s, Rng& rng) {
  if (x0.rank() != 2 || x0.dim(0) == 0) throw PreconditionError("dsm: empty batch");
  const auto B = x0.dim(0), d = x0.dim(1);
  std::uniform_int_distribution<int> ut(1, s.T());
  DsmDraw out;
  out.t.resize(B);
  for (auto& t : out.t) t = ut(rng);
  std::vector<float> eps(B * d);
  fill_normal(rng, eps);
  std::vector<float> xt(B * d);
  for (std::size_t r = 0; r < B; ++r) {
    const double ab = s.alpha_bar(out.t[r]);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (std::size_t j = 0; j < d; ++j) {
      xt[r * d + j] = static_cast<float>(a * x0[r * d + j] + b * eps[r * d + j]);
    }
  }
  out.eps = Tensor({B, d}, std::move(eps));
  out.x_t = Tensor({B, d}, std::move(xt));
  return out;
}

/// Mean over the batch of ||eps + r(x_t, t)||^2. `predict(x_t, t)` returns
/// the raw network output on the tape.
template <class Predictor>
Tensor dsm_loss(Predictor&& predict, const Tensor& x0, const NoiseSchedule& s, Rng& rng) {
  auto draw = draw_dsm_inputs(x0, s, rng);
  Tensor out = predict(draw.x_t, std::span<const int>(draw.t));
  if (out.shape() != draw.eps.shape()) throw ShapeError("dsm: predictor output shape mismatch");
  return scale(sum(square(add(draw.eps, out))), 1.0f / static_cast<float>(x0.dim(0)));
}

namespace detail {

inline void hflip_rows(std::vector<float>& batch, std::size_t d, std::size_t h, std::size_t w, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  for (std::size_t r = 0; r < batch.size() / d; ++r) {
    if (!coin(rng)) continue;
    float* img = batch.data() + r * d;
    for (std::size_t i = 0; i < h; ++i) std::reverse(img + i * w, img + (i + 1) * w);
  }
}

}  // namespace detail

/// Minibatch AdamW with EMA on the dataset rows; continues from `state`.
inline TrainReport train(TrainerState& state, const SampleSet& data, const NoiseSchedule& schedule,
                         const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw PreconditionError("training set is empty");
  if (data.dim != state.net.config().data_dim) throw ShapeError("training data dimension does not match the network");
  if (state.ema.shadow.size() != state.net.parameters().size()) {
    state.ema = make_ema(state.net.parameters(), cfg.ema_decay);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n = data.size(), d = data.dim;
  if (cfg.batch_size > n) throw ConfigError("train.batch_size exceeds the dataset size");
  const std::size_t bs = cfg.batch_size;
  AdamWConfig acfg;
  acfg.lr = cfg.lr;
  acfg.weight_decay = cfg.weight_decay;

  Rng shuffle_rng = make_rng(cfg.seed, stream::kTrainShuffle);
  Rng noise_rng = make_rng(cfg.seed, stream::kTrainNoise);
  Rng drop_rng = make_rng(cfg.seed, stream::kTrainDropout);
  std::vector<std::size_t> perm(n);
  TrainReport rep;
  auto& params = state.net.parameters();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), shuffle_rng);
    double total = 0.0;
    for (std::size_t lo = 0; lo < n; lo += bs) {
      const std::size_t hi = std::min(n, lo + bs), B = hi - lo;
      std::vector<float> batch(B * d);
      for (std::size_t r = 0; r < B; ++r) {
        auto row = data.row(perm[lo + r]);
        std::copy(row.begin(), row.end(), batch.begin() + static_cast<long>(r * d));
      }
      if (cfg.hflip) detail::hflip_rows(batch, d, cfg.image_height, cfg.image_width, shuffle_rng);
      Tensor x0({B, d}, std::move(batch));
      ForwardOptions fo;
      fo.dropout_rng = &drop_rng;
      Tensor loss;
      try {
        loss = dsm_loss([&](const Tensor& x, std::span<const int> t) { return state.net.forward(x, t, fo); }, x0,
                        schedule, noise_rng);
      } catch (const NonFiniteError& e) {
        std::ostringstream os;
        os << "training diverged at epoch " << epoch + 1 << ", batch starting at " << lo << ": " << e.what();
        throw NonFiniteError(os.str());
      }
      const auto grads = backward(loss);
      adamw_step(params, grads, state.opt, acfg);
      double decay = cfg.ema_decay;
      if (cfg.ema_warmup) {
        const double k = static_cast<double>(state.ema_updates);
        decay = std::min(decay, (1.0 + k) / (10.0 + k));
      }
      ema_update(state.ema, params, decay);
      ++state.ema_updates;
      ++rep.steps;
      total += static_cast<double>(loss.item()) * static_cast<double>(B);
    }
    rep.epoch_loss.push_back(total / static_cast<double>(n));
  }
  rep.ema_params = state.ema.shadow;
  rep.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

/// Initial fit on a handful of clean samples; same contract as train().
inline TrainReport init_train_on_clean(TrainerState& state, const SampleSet& few_clean, const NoiseSchedule& schedule,
                                       const TrainConfig& cfg) {
  if (few_clean.empty()) throw PreconditionError("initial training needs at least one clean sample");
  return train(state, few_clean, schedule, cfg);
}

}  // namespace emdiff
