#pragma once

// Time-dependent score functions s(x, t) ~ grad_x log p_t(x).
//
// NeuralScore wraps a trained network; GaussianScore, GmmScore and GridScore
// are exact or brute-force references used to verify the sampler and the
// trainer. Every variant also exposes a vector-Jacobian product of the score
// with respect to x, which the posterior sampler needs for the likelihood
// gradient through the Tweedie estimate.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <variant>
#include <vector>

#include "emdiff/error.hpp"
#include "emdiff/mlp.hpp"
#include "emdiff/schedule.hpp"
#include "emdiff/tensor.hpp"

namespace emdiff {

struct GaussianPrior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  static GaussianPrior standard(std::size_t d) {
    return {Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d)),
            Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d))};
  }

  void validate() const {
    if (mean.size() == 0 || cov.rows() != mean.size() || cov.cols() != mean.size()) {
      throw ShapeError("gaussian prior: mean/covariance dimensions disagree");
    }
    if (!cov.isApprox(cov.transpose(), 1e-12)) throw PreconditionError("gaussian prior: covariance not symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw PreconditionError("gaussian prior: covariance not positive definite");
  }
};

struct GmmComponent {
  double weight;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

struct GmmPrior {
  std::vector<GmmComponent> components;

  std::size_t dim() const { return components.empty() ? 0 : static_cast<std::size_t>(components[0].mean.size()); }

  void validate() const {
    if (components.empty()) throw PreconditionError("gmm prior needs at least one component");
    double total = 0.0;
    for (const auto& c : components) {
      if (c.weight < 0.0) throw PreconditionError("gmm prior: negative weight");
      total += c.weight;
      GaussianPrior{c.mean, c.cov}.validate();
      if (static_cast<std::size_t>(c.mean.size()) != dim()) throw ShapeError("gmm prior: component dimensions differ");
    }
    if (std::abs(total - 1.0) > 1e-9) throw PreconditionError("gmm prior: weights must sum to 1");
  }
};

namespace detail {

// Spectral form of a covariance, so the diffused covariance
// abar * cov + (1 - abar) I shares the same eigenvectors for every t.
struct Spectral {
  Eigen::MatrixXd Q;
  Eigen::VectorXd lambda;

  explicit Spectral(const Eigen::MatrixXd& cov) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    Q = es.eigenvectors();
    lambda = es.eigenvalues();
  }

  Eigen::VectorXd diffused_eigs(double abar) const {
    return (abar * lambda.array() + (1.0 - abar)).matrix();
  }

  // C^{-1} v with C = abar * cov + (1 - abar) I
  Eigen::VectorXd solve(double abar, const Eigen::VectorXd& v) const {
    Eigen::VectorXd w = Q.transpose() * v;
    w.array() /= diffused_eigs(abar).array();
    return Q * w;
  }

  double logdet(double abar) const { return diffused_eigs(abar).array().log().sum(); }
};

inline Eigen::VectorXd row_vec(const Tensor& x, std::size_t r) {
  const auto d = x.cols();
  Eigen::VectorXd v(static_cast<Eigen::Index>(d));
  for (std::size_t j = 0; j < d; ++j) v[static_cast<Eigen::Index>(j)] = x[r * d + j];
  return v;
}

inline void require_batch(const Tensor& x, std::size_t d, const char* who) {
  if (x.rank() != 2 || x.dim(1) != d) {
    throw ShapeError(std::string(who) + ": input " + shape_str(x.shape()) + " does not match dimension " +
                     std::to_string(d));
  }
}

}  // namespace detail

/// Exact score of a Gaussian prior pushed through the VP transition kernel.
class GaussianScore {
 public:
  GaussianScore(GaussianPrior prior, NoiseSchedule schedule)
      : prior_(std::move(prior)), schedule_(std::move(schedule)), spec_((prior_.validate(), prior_.cov)) {}

  std::size_t dim() const { return static_cast<std::size_t>(prior_.mean.size()); }
  const GaussianPrior& prior() const noexcept { return prior_; }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }

  /// Mean and covariance of p_t.
  std::pair<Eigen::VectorXd, Eigen::MatrixXd> marginal(int t) const {
    const double ab = schedule_.alpha_bar(t);
    const auto n = prior_.mean.size();
    return {std::sqrt(ab) * prior_.mean, ab * prior_.cov + (1.0 - ab) * Eigen::MatrixXd::Identity(n, n)};
  }

  Eigen::VectorXd score(const Eigen::VectorXd& x, int t) const {
    const double ab = schedule_.alpha_bar(t);
    return -spec_.solve(ab, x - std::sqrt(ab) * prior_.mean);
  }

  // The score Jacobian is -C^{-1}, which is symmetric.
  Eigen::VectorXd score_vjp(const Eigen::VectorXd&, int t, const Eigen::VectorXd& v) const {
    return -spec_.solve(schedule_.alpha_bar(t), v);
  }

 private:
  GaussianPrior prior_;
  NoiseSchedule schedule_;
  detail::Spectral spec_;
};

/// Exact score of a Gaussian mixture prior pushed through the VP kernel.
class GmmScore {
 public:
  GmmScore(GmmPrior prior, NoiseSchedule schedule) : prior_(std::move(prior)), schedule_(std::move(schedule)) {
    prior_.validate();
    for (const auto& c : prior_.components) spec_.emplace_back(c.cov);
  }

  std::size_t dim() const { return prior_.dim(); }
  const GmmPrior& prior() const noexcept { return prior_; }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }

  double log_density(const Eigen::VectorXd& x, int t) const {
    std::vector<double> logp;
    std::vector<Eigen::VectorXd> g;
    return evaluate(x, t, logp, g);
  }

  Eigen::VectorXd score(const Eigen::VectorXd& x, int t) const {
    std::vector<double> logr;
    std::vector<Eigen::VectorXd> g;
    const double lse = evaluate(x, t, logr, g);
    Eigen::VectorXd s = Eigen::VectorXd::Zero(x.size());
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (std::isfinite(logr[k])) s += std::exp(logr[k] - lse) * g[k];
    }
    return s;
  }

  // Hessian of log p_t is sum_k r_k (-C_k^{-1} + g_k g_k^T) - s s^T, symmetric.
  Eigen::VectorXd score_vjp(const Eigen::VectorXd& x, int t, const Eigen::VectorXd& v) const {
    const double ab = schedule_.alpha_bar(t);
    std::vector<double> logr;
    std::vector<Eigen::VectorXd> g;
    const double lse = evaluate(x, t, logr, g);
    Eigen::VectorXd s = Eigen::VectorXd::Zero(x.size());
    Eigen::VectorXd hv = Eigen::VectorXd::Zero(x.size());
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (!std::isfinite(logr[k])) continue;
      const double r = std::exp(logr[k] - lse);
      s += r * g[k];
      hv += r * (-spec_[k].solve(ab, v) + g[k] * g[k].dot(v));
    }
    return hv - s * s.dot(v);
  }

 private:
  // Fills per-component log(w_k N_k(x)) and g_k = -C_k^{-1}(x - m_k);
  // returns log p_t(x).
  double evaluate(const Eigen::VectorXd& x, int t, std::vector<double>& logr, std::vector<Eigen::VectorXd>& g) const {
    const double ab = schedule_.alpha_bar(t);
    const double d = static_cast<double>(x.size());
    logr.clear();
    g.clear();
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < prior_.components.size(); ++k) {
      const auto& c = prior_.components[k];
      const Eigen::VectorXd diff = x - std::sqrt(ab) * c.mean;
      const Eigen::VectorXd sol = spec_[k].solve(ab, diff);
      const double lw = c.weight > 0.0 ? std::log(c.weight) : -std::numeric_limits<double>::infinity();
      logr.push_back(lw - 0.5 * (d * std::log(2.0 * std::numbers::pi) + spec_[k].logdet(ab) + diff.dot(sol)));
      g.push_back(-sol);
      mx = std::max(mx, logr.back());
    }
    double acc = 0.0;
    for (double l : logr)
      if (std::isfinite(l)) acc += std::exp(l - mx);
    return mx + std::log(acc);
  }

  GmmPrior prior_;
  NoiseSchedule schedule_;
  std::vector<detail::Spectral> spec_;
};

/// Tabulated p_0 on a uniform 1-D or 2-D grid. p_t is evaluated by summing
/// the VP transition kernel over every grid cell; the score is the centered
/// difference of log p_t with a step of 1% of the grid spacing.
class GridScore {
 public:
  struct Axis {
    double lo;
    double hi;
    std::size_t n;
    double spacing() const { return (hi - lo) / static_cast<double>(n - 1); }
    double at(std::size_t i) const { return lo + spacing() * static_cast<double>(i); }
  };

  /// density0 is row-major over (axis0, axis1) for 2-D grids.
  GridScore(std::vector<Axis> axes, std::vector<double> density0, NoiseSchedule schedule)
      : axes_(std::move(axes)), p0_(std::move(density0)), schedule_(std::move(schedule)) {
    if (axes_.empty() || axes_.size() > 2) throw PreconditionError("grid score supports 1-D or 2-D grids");
    std::size_t n = 1;
    double cell = 1.0;
    for (const auto& a : axes_) {
      if (a.n < 3 || !(a.hi > a.lo)) throw PreconditionError("grid axis needs >= 3 points and hi > lo");
      n *= a.n;
      cell *= a.spacing();
    }
    if (p0_.size() != n) throw ShapeError("grid density size does not match the axes");
    double mass = 0.0;
    for (double p : p0_) {
      if (p < 0.0) throw PreconditionError("grid density must be non-negative");
      mass += p * cell;
    }
    if (!(mass > 0.0)) throw PreconditionError("grid density has zero mass");
    // Normalize, and keep only occupied cells.
    for (std::size_t i = 0; i < n; ++i) {
      if (p0_[i] <= 0.0) continue;
      std::vector<double> pt(axes_.size());
      if (axes_.size() == 1) {
        pt[0] = axes_[0].at(i);
      } else {
        pt[0] = axes_[0].at(i / axes_[1].n);
        pt[1] = axes_[1].at(i % axes_[1].n);
      }
      support_.push_back(std::move(pt));
      log_mass_.push_back(std::log(p0_[i] * cell / mass));
    }
  }

  std::size_t dim() const noexcept { return axes_.size(); }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }
  const std::vector<Axis>& axes() const noexcept { return axes_; }

  double log_density(const Eigen::VectorXd& x, int t) const {
    const double ab = schedule_.alpha_bar(t);
    const double var = 1.0 - ab;
    const double sa = std::sqrt(ab);
    const double d = static_cast<double>(dim());
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(support_.size());
    for (std::size_t i = 0; i < support_.size(); ++i) {
      double r2 = 0.0;
      for (std::size_t k = 0; k < dim(); ++k) {
        const double dk = x[static_cast<Eigen::Index>(k)] - sa * support_[i][k];
        r2 += dk * dk;
      }
      terms[i] = log_mass_[i] - 0.5 * r2 / var;
      mx = std::max(mx, terms[i]);
    }
    double acc = 0.0;
    for (double l : terms) acc += std::exp(l - mx);
    return mx + std::log(acc) - 0.5 * d * std::log(2.0 * std::numbers::pi * var);
  }

  Eigen::VectorXd score(const Eigen::VectorXd& x, int t) const {
    check_inside(x);
    Eigen::VectorXd s(x.size());
    for (std::size_t k = 0; k < dim(); ++k) {
      const double h = diff_step(k);
      Eigen::VectorXd xp = x, xm = x;
      xp[static_cast<Eigen::Index>(k)] += h;
      xm[static_cast<Eigen::Index>(k)] -= h;
      s[static_cast<Eigen::Index>(k)] = (log_density(xp, t) - log_density(xm, t)) / (2.0 * h);
    }
    return s;
  }

  // Jacobian by centered differences of the score.
  Eigen::VectorXd score_vjp(const Eigen::VectorXd& x, int t, const Eigen::VectorXd& v) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(x.size());
    for (std::size_t k = 0; k < dim(); ++k) {
      const double h = diff_step(k);
      Eigen::VectorXd xp = x, xm = x;
      xp[static_cast<Eigen::Index>(k)] += h;
      xm[static_cast<Eigen::Index>(k)] -= h;
      const Eigen::VectorXd col = (score(xp, t) - score(xm, t)) / (2.0 * h);  // d s / d x_k
      out[static_cast<Eigen::Index>(k)] = col.dot(v);
    }
    return out;
  }

 private:
  // p_t is smooth in x, so the difference step can be much finer than the grid.
  double diff_step(std::size_t k) const { return 1e-2 * axes_[k].spacing(); }

  void check_inside(const Eigen::VectorXd& x) const {
    if (static_cast<std::size_t>(x.size()) != dim()) throw ShapeError("grid score: dimension mismatch");
    for (std::size_t k = 0; k < dim(); ++k) {
      const double v = x[static_cast<Eigen::Index>(k)];
      if (v < axes_[k].lo || v > axes_[k].hi) throw PreconditionError("grid score: point outside the grid");
    }
  }

  std::vector<Axis> axes_;
  std::vector<double> p0_;
  NoiseSchedule schedule_;
  std::vector<std::vector<double>> support_;
  std::vector<double> log_mass_;
};

/// Network trained to output -eps; score = output / sqrt(1 - abar_t).
class NeuralScore {
 public:
  NeuralScore(std::shared_ptr<const MlpScoreNet> net, NoiseSchedule schedule)
      : net_(std::move(net)), schedule_(std::move(schedule)) {
    if (!net_) throw PreconditionError("neural score needs a network");
  }

  std::size_t dim() const { return net_->config().data_dim; }
  const MlpScoreNet& net() const noexcept { return *net_; }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }

  float output_to_score(int t) const {
    return static_cast<float>(1.0 / std::sqrt(std::max(1.0 - schedule_.alpha_bar(t), 1e-12)));
  }

  /// Score on the tape with parameters held constant; x may require grad.
  Tensor score_tensor(const Tensor& x, int t) const {
    ForwardOptions opt;
    opt.track_params = false;
    return scale(net_->forward(x, t, opt), output_to_score(t));
  }

 private:
  std::shared_ptr<const MlpScoreNet> net_;
  NoiseSchedule schedule_;
};

using ScoreModel = std::variant<NeuralScore, GaussianScore, GmmScore, GridScore>;

inline std::size_t score_dim(const ScoreModel& m) {
  return std::visit([](const auto& v) { return v.dim(); }, m);
}

inline const NoiseSchedule& score_schedule(const ScoreModel& m) {
  return std::visit([](const auto& v) -> const NoiseSchedule& { return v.schedule(); }, m);
}

namespace detail {

template <class Analytic, class F>
Tensor rowwise(const Tensor& x, std::size_t d, F&& f) {
  const auto B = x.rows();
  std::vector<float> out(B * d);
  for (std::size_t r = 0; r < B; ++r) {
    const Eigen::VectorXd s = f(row_vec(x, r), r);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<float>(s[static_cast<Eigen::Index>(j)]);
  }
  return Tensor({B, d}, std::move(out));
}

}  // namespace detail

/// s(x, t) for every row of x[batch, d].
inline Tensor eval_score(const ScoreModel& m, const Tensor& x, int t) {
  const auto d = score_dim(m);
  detail::require_batch(x, d, "eval_score");
  score_schedule(m).check_timestep(t);
  return std::visit(
      [&](const auto& v) -> Tensor {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, NeuralScore>) {
          return v.score_tensor(x.detach(), t).detach();
        } else {
          return detail::rowwise<V>(x, d, [&](const Eigen::VectorXd& xr, std::size_t) { return v.score(xr, t); });
        }
      },
      m);
}

/// Score at x together with a closure computing J_s(x)^T v, row by row.
struct ScoreWithVjp {
  Tensor score;
  std::function<Tensor(const Tensor& v)> vjp;
};

inline ScoreWithVjp eval_score_with_vjp(const ScoreModel& m, const Tensor& x, int t) {
  const auto d = score_dim(m);
  detail::require_batch(x, d, "eval_score_with_vjp");
  score_schedule(m).check_timestep(t);
  return std::visit(
      [&](const auto& v) -> ScoreWithVjp {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, NeuralScore>) {
          Tensor leaf = x.clone(true);
          Tensor s = v.score_tensor(leaf, t);
          return {s.detach(), [leaf, s](const Tensor& w) {
                    if (w.shape() != s.shape()) throw ShapeError("score vjp: cotangent shape mismatch");
                    return backward(dot(s, w.detach())).as_tensor(leaf);
                  }};
        } else {
          Tensor s = detail::rowwise<V>(x, d, [&](const Eigen::VectorXd& xr, std::size_t) { return v.score(xr, t); });
          Tensor xc = x.detach();
          return {s, [&v, xc, t, d](const Tensor& w) {
                    if (w.shape() != xc.shape()) throw ShapeError("score vjp: cotangent shape mismatch");
                    return detail::rowwise<V>(xc, d, [&](const Eigen::VectorXd& xr, std::size_t r) {
                      return v.score_vjp(xr, t, detail::row_vec(w, r));
                    });
                  }};
        }
      },
      m);
}

}  // namespace emdiff
