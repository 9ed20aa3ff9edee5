#pragma once

// Synthetic datasets, reconstruction metrics and the conjugate-Gaussian
// posterior used as a reference.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "emdiff/error.hpp"
#include "emdiff/forward_ops.hpp"
#include "emdiff/rng.hpp"
#include "emdiff/samples.hpp"
#include "emdiff/score_models.hpp"

namespace emdiff {

struct Dataset {
  SampleSet samples;
  std::string kind;  // "gmm" | "toyimage"
  std::string family;
  std::uint64_t seed = 0;
  std::string split = "all";
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t first_index = 0;  // offset of this split in the generated sequence
};

/// n draws from a Gaussian mixture (any dimension), deterministic per seed.
inline Dataset gen_gmm(const GmmPrior& prior, std::size_t n, std::uint64_t seed) {
  prior.validate();
  const auto d = prior.dim();
  std::vector<double> w;
  std::vector<Eigen::MatrixXd> chol;
  for (const auto& c : prior.components) {
    w.push_back(c.weight);
    chol.push_back(Eigen::LLT<Eigen::MatrixXd>(c.cov).matrixL());
  }
  Rng rng = make_rng(seed, stream::kData);
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  std::normal_distribution<double> n01;
  Dataset ds;
  ds.kind = "gmm";
  ds.seed = seed;
  ds.samples.dim = d;
  ds.samples.values.reserve(n * d);
  Eigen::VectorXd z(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = pick(rng);
    for (auto& v : z) v = n01(rng);
    const Eigen::VectorXd x = prior.components[k].mean + chol[k] * z;
    for (std::size_t j = 0; j < d; ++j) ds.samples.values.push_back(static_cast<float>(x[static_cast<Eigen::Index>(j)]));
  }
  return ds;
}

inline GmmPrior gmm2d(std::span<const std::array<double, 2>> means, std::span<const std::array<double, 3>> covs,
                      std::span<const double> weights) {
  if (means.size() != covs.size() || means.size() != weights.size()) {
    throw PreconditionError("gmm2d: means, covariances and weights must have equal counts");
  }
  GmmPrior p;
  for (std::size_t k = 0; k < means.size(); ++k) {
    Eigen::Vector2d m(means[k][0], means[k][1]);
    Eigen::Matrix2d c;
    c << covs[k][0], covs[k][1], covs[k][1], covs[k][2];
    p.components.push_back({weights[k], m, c});
  }
  p.validate();
  return p;
}

/// 2-D Gaussian mixture dataset; covs are (xx, xy, yy).
inline Dataset gen_gmm2d(std::span<const std::array<double, 2>> means, std::span<const std::array<double, 3>> covs,
                         std::span<const double> weights, std::size_t n, std::uint64_t seed) {
  return gen_gmm(gmm2d(means, covs, weights), n, seed);
}

// ---------------------------------------------------------------------------
// toy images

/// Expected fraction of nonzero pixels for the "bars" family: thickness is
/// uniform on {1, 2} and the bar spans the full image.
inline double bars_coverage(std::size_t h, std::size_t w) {
  return 0.75 * (1.0 / static_cast<double>(h) + 1.0 / static_cast<double>(w));
}

/// Families: "background" (all zero), "bars" (one full-length horizontal or
/// vertical bar, thickness 1-2, intensity U[0.5,1]), "blobs" (one Gaussian
/// bump with random centre, width and intensity). Pixels lie in [0, 1].
inline Dataset gen_toyimages(std::size_t h, std::size_t w, const std::string& family, std::size_t n,
                             std::uint64_t seed) {
  if (h < 4 || w < 4) throw PreconditionError("toy images need h, w >= 4");
  if (family != "background" && family != "bars" && family != "blobs") {
    throw PreconditionError("unknown toy image family '" + family + "'");
  }
  Rng rng = make_rng(seed, stream::kData);
  Dataset ds;
  ds.kind = "toyimage";
  ds.family = family;
  ds.seed = seed;
  ds.height = h;
  ds.width = w;
  ds.samples.dim = h * w;
  ds.samples.values.assign(n * h * w, 0.0f);
  std::uniform_real_distribution<double> intensity(0.5, 1.0);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < n; ++i) {
    auto img = ds.samples.row(i);
    if (family == "background") continue;
    if (family == "bars") {
      const bool horizontal = coin(rng);
      const std::size_t thick = coin(rng) ? 2 : 1;
      const std::size_t span = horizontal ? h : w;
      std::uniform_int_distribution<std::size_t> off(0, span - thick);
      const std::size_t o = off(rng);
      const float v = static_cast<float>(intensity(rng));
      for (std::size_t k = o; k < o + thick; ++k) {
        for (std::size_t j = 0; j < (horizontal ? w : h); ++j) {
          if (horizontal) {
            img[k * w + j] = v;
          } else {
            img[j * w + k] = v;
          }
        }
      }
    } else {
      std::uniform_real_distribution<double> cy(1.0, static_cast<double>(h) - 2.0);
      std::uniform_real_distribution<double> cx(1.0, static_cast<double>(w) - 2.0);
      std::uniform_real_distribution<double> width(0.8, 1.6);
      const double y0 = cy(rng), x0 = cx(rng), s = width(rng), v = intensity(rng);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
          const double r2 = (r - y0) * (r - y0) + (c - x0) * (c - x0);
          img[r * w + c] = static_cast<float>(v * std::exp(-r2 / (2.0 * s * s)));
        }
    }
  }
  return ds;
}

/// Consecutive, disjoint index ranges of `ds`.
inline Dataset take_split(const Dataset& ds, std::size_t first, std::size_t count, const std::string& name) {
  if (first + count > ds.samples.size()) throw PreconditionError("split '" + name + "' exceeds the dataset");
  Dataset out = ds;
  out.split = name;
  out.first_index = ds.first_index + first;
  out.samples.values.assign(ds.samples.values.begin() + static_cast<long>(first * ds.samples.dim),
                            ds.samples.values.begin() + static_cast<long>((first + count) * ds.samples.dim));
  return out;
}

// ---------------------------------------------------------------------------
// metrics

inline double mse(std::span<const float> x, std::span<const float> ref) {
  if (x.size() != ref.size() || x.empty()) throw ShapeError("mse: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = static_cast<double>(x[i]) - ref[i];
    s += e * e;
  }
  return s / static_cast<double>(x.size());
}

/// 10 log10(peak^2 / MSE); +infinity when x == ref.
inline double psnr(std::span<const float> x, std::span<const float> ref, double peak = 1.0) {
  if (!(peak > 0.0)) throw PreconditionError("psnr: peak must be positive");
  const double m = mse(x, ref);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / m);
}

inline double mean_psnr(const SampleSet& x, const SampleSet& ref, double peak = 1.0) {
  if (x.size() != ref.size() || x.dim != ref.dim || x.empty()) throw ShapeError("mean_psnr: set shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += psnr(x.row(i), ref.row(i), peak);
  return s / static_cast<double>(x.size());
}

/// Mean over random unit directions of the 1-D 2-Wasserstein distance between
/// the projected empirical distributions. The larger set is subsampled so
/// both have the same count.
inline double sliced_wasserstein(const SampleSet& a, const SampleSet& b, std::size_t n_projections = 128,
                                 std::uint64_t seed = 0) {
  if (a.dim == 0 || b.dim == 0) throw PreconditionError("sliced_wasserstein: dimension must be positive");
  if (a.dim != b.dim) throw ShapeError("sliced_wasserstein: dimensions differ");
  if (a.empty() || b.empty()) throw PreconditionError("sliced_wasserstein: sets must be nonempty");
  if (n_projections == 0) throw PreconditionError("sliced_wasserstein: need at least one projection");
  Rng rng = make_rng(seed, stream::kSwd);
  const std::size_t n = std::min(a.size(), b.size()), d = a.dim;
  auto pick = [&](const SampleSet& s) {
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (s.size() > n) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(n);
    }
    return idx;
  };
  const auto ia = pick(a), ib = pick(b);
  std::normal_distribution<double> n01;
  std::vector<double> dir(d), pa(n), pb(n);
  double total = 0.0;
  for (std::size_t p = 0; p < n_projections; ++p) {
    double norm = 0.0;
    for (auto& v : dir) {
      v = n01(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : dir) v /= norm;
    for (std::size_t i = 0; i < n; ++i) {
      double sa = 0.0, sb = 0.0;
      auto ra = a.row(ia[i]), rb = b.row(ib[i]);
      for (std::size_t j = 0; j < d; ++j) {
        sa += dir[j] * ra[j];
        sb += dir[j] * rb[j];
      }
      pa[i] = sa;
      pb[i] = sb;
    }
    std::sort(pa.begin(), pa.end());
    std::sort(pb.begin(), pb.end());
    double w2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) w2 += (pa[i] - pb[i]) * (pa[i] - pb[i]);
    total += std::sqrt(w2 / static_cast<double>(n));
  }
  return total / static_cast<double>(n_projections);
}

// ---------------------------------------------------------------------------
// conjugate Gaussian posterior

struct GaussianPosterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Posterior of x ~ N(mu0, Sigma0) given y = A x + sigma n:
/// Sigma_p = (Sigma0^{-1} + A^T A / sigma^2)^{-1},
/// mu_p = Sigma_p (Sigma0^{-1} mu0 + A^T y / sigma^2).
inline GaussianPosterior gaussian_posterior_oracle(const GaussianPrior& prior, const ForwardOperator& op,
                                                   std::span<const float> y, double sigma) {
  prior.validate();
  if (!(sigma > 0.0)) throw PreconditionError("posterior oracle needs sigma > 0");
  const auto d = static_cast<Eigen::Index>(op.input_dim()), m = static_cast<Eigen::Index>(op.output_dim());
  if (d != prior.mean.size()) throw ShapeError("posterior oracle: operator/prior dimensions differ");
  if (static_cast<Eigen::Index>(y.size()) != m) throw ShapeError("posterior oracle: observation size mismatch");
  const auto dense = op.dense();
  Eigen::MatrixXd A(m, d);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < d; ++j) A(i, j) = dense[static_cast<std::size_t>(i * d + j)];
  Eigen::VectorXd yv(m);
  for (Eigen::Index i = 0; i < m; ++i) yv[i] = y[static_cast<std::size_t>(i)];
  Eigen::LLT<Eigen::MatrixXd> prior_llt(prior.cov);
  const Eigen::MatrixXd prec0 = prior_llt.solve(Eigen::MatrixXd::Identity(d, d));
  const double s2 = sigma * sigma;
  const Eigen::MatrixXd prec = prec0 + A.transpose() * A / s2;
  Eigen::LLT<Eigen::MatrixXd> llt(prec);
  if (llt.info() != Eigen::Success) throw PreconditionError("posterior oracle: singular precision matrix");
  GaussianPosterior post;
  post.cov = llt.solve(Eigen::MatrixXd::Identity(d, d));
  post.mean = post.cov * (prec0 * prior.mean + A.transpose() * yv / s2);
  return post;
}

/// Sample mean and (unbiased) covariance of a set.
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> sample_moments(const SampleSet& s) {
  const auto d = static_cast<Eigen::Index>(s.dim);
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
  for (std::size_t i = 0; i < s.size(); ++i)
    for (Eigen::Index j = 0; j < d; ++j) mu[j] += s.row(i)[static_cast<std::size_t>(j)];
  mu /= static_cast<double>(s.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd c(d);
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (Eigen::Index j = 0; j < d; ++j) c[j] = s.row(i)[static_cast<std::size_t>(j)] - mu[j];
    cov += c * c.transpose();
  }
  cov /= static_cast<double>(std::max<std::size_t>(s.size(), 2) - 1);
  return {mu, cov};
}

}  // namespace emdiff
