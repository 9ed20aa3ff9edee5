#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "emdiff/error.hpp"
#include "emdiff/tensor.hpp"

namespace emdiff {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct OptimizerState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::uint64_t step = 0;
};

/// Decoupled weight decay followed by the bias-corrected Adam update.
/// Moments are lazily sized on the first call.
inline void adamw_step(std::span<const std::span<float>> params, std::span<const std::span<const float>> grads,
                       OptimizerState& st, const AdamWConfig& cfg) {
  if (params.size() != grads.size()) throw ShapeError("adamw: parameter/gradient count mismatch");
  if (!(cfg.lr >= 0.0)) throw PreconditionError("adamw: learning rate must be non-negative");
  if (st.m.empty()) {
    for (auto p : params) {
      st.m.emplace_back(p.size(), 0.0f);
      st.v.emplace_back(p.size(), 0.0f);
    }
  }
  if (st.m.size() != params.size()) throw ShapeError("adamw: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size() || st.m[i].size() != params[i].size()) {
      throw ShapeError("adamw: shape mismatch at parameter " + std::to_string(i));
    }
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto g = grads[i];
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<float>(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj);
      v[j] = static_cast<float>(cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] = static_cast<float>(p[j] * decay - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

/// Convenience overload for tape parameters and a backward result.
inline void adamw_step(std::vector<Tensor>& params, const Gradients& grads, OptimizerState& st,
                       const AdamWConfig& cfg) {
  std::vector<std::span<float>> p;
  std::vector<std::span<const float>> g;
  std::vector<std::vector<float>> zero;
  zero.reserve(params.size());
  for (auto& t : params) {
    p.push_back(t.mutable_data());
    if (grads.has(t)) {
      g.push_back(grads.of(t));
    } else {
      zero.emplace_back(t.numel(), 0.0f);
      g.push_back(zero.back());
    }
  }
  adamw_step(p, g, st, cfg);
}

struct EmaState {
  std::vector<std::vector<float>> shadow;
  double decay = 0.999;
};

inline EmaState make_ema(std::span<const Tensor> params, double decay) {
  if (!(decay > 0.0 && decay < 1.0)) throw PreconditionError("ema decay must lie in (0,1)");
  EmaState e;
  e.decay = decay;
  for (const auto& p : params) e.shadow.emplace_back(p.data().begin(), p.data().end());
  return e;
}

/// shadow <- decay * shadow + (1 - decay) * params
inline void ema_update(EmaState& ema, std::span<const std::span<const float>> params, double decay) {
  if (!(decay > 0.0 && decay < 1.0)) throw PreconditionError("ema decay must lie in (0,1)");
  if (params.size() != ema.shadow.size()) throw ShapeError("ema: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& s = ema.shadow[i];
    if (s.size() != params[i].size()) throw ShapeError("ema: shape mismatch at parameter " + std::to_string(i));
    for (std::size_t j = 0; j < s.size(); ++j) {
      s[j] = static_cast<float>(decay * s[j] + (1.0 - decay) * params[i][j]);
    }
  }
}

inline void ema_update(EmaState& ema, std::span<const std::span<const float>> params) {
  ema_update(ema, params, ema.decay);
}

inline void ema_update(EmaState& ema, std::span<const Tensor> params, double decay) {
  std::vector<std::span<const float>> p;
  for (const auto& t : params) p.push_back(t.data());
  ema_update(ema, p, decay);
}

}  // namespace emdiff
