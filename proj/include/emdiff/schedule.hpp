#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "emdiff/error.hpp"
#include "emdiff/tensor.hpp"

namespace emdiff {

/// Discrete variance-preserving schedule, timesteps 1..T. Coefficients are
/// held in double; consumers convert to float at the point of use.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  explicit NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
    if (beta_.empty()) throw PreconditionError("schedule needs at least one timestep");
    alpha_bar_.resize(beta_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < beta_.size(); ++i) {
      if (!(beta_[i] > 0.0 && beta_[i] < 1.0)) throw PreconditionError("beta must lie in (0,1)");
      prod *= 1.0 - beta_[i];
      alpha_bar_[i] = prod;
    }
  }

  int T() const noexcept { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_.at(index(t)); }
  double alpha_bar(int t) const { return alpha_bar_.at(index(t)); }
  const std::vector<double>& betas() const noexcept { return beta_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

  // VP-SDE drift f(x,t) = -beta(t) x / 2 and diffusion g(t) = sqrt(beta(t)).
  double drift_coef(int t) const { return -0.5 * beta(t); }
  double diffusion(int t) const { return std::sqrt(beta(t)); }

  void check_timestep(int t) const {
    if (t < 1 || t > T()) {
      throw PreconditionError("timestep " + std::to_string(t) + " outside [1," + std::to_string(T()) + "]");
    }
  }

 private:
  std::size_t index(int t) const {
    check_timestep(t);
    return static_cast<std::size_t>(t - 1);
  }

  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

/// Betas linearly spaced from beta1 to betaT inclusive.
inline NoiseSchedule linear_beta_schedule(int T = 1000, double beta1 = 1e-4, double betaT = 0.02) {
  if (T < 1) throw PreconditionError("schedule length T must be >= 1");
  if (!(beta1 > 0.0 && beta1 <= betaT && betaT < 1.0)) {
    throw PreconditionError("schedule bounds must satisfy 0 < beta1 <= betaT < 1");
  }
  std::vector<double> b(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    b[i] = T == 1 ? beta1 : beta1 + (betaT - beta1) * static_cast<double>(i) / static_cast<double>(T - 1);
  }
  return NoiseSchedule(std::move(b));
}

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor forward_diffuse(const NoiseSchedule& s, const Tensor& x0, int t, const Tensor& eps) {
  if (x0.shape() != eps.shape()) throw ShapeError("forward_diffuse: x0 and eps shapes differ");
  const double ab = s.alpha_bar(t);
  const float a = static_cast<float>(std::sqrt(ab));
  const float b = static_cast<float>(std::sqrt(1.0 - ab));
  std::vector<float> out(x0.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return Tensor(x0.shape(), std::move(out));
}

}  // namespace emdiff
