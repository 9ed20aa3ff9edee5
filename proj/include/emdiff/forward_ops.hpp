#pragma once

// Linear corruption operators y = A x + sigma z and their exact adjoints.

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emdiff/error.hpp"
#include "emdiff/rng.hpp"
#include "emdiff/samples.hpp"
#include "emdiff/tensor.hpp"

namespace emdiff {

enum class OpKind { identity, mask, blur };
enum class Boundary { circular, zero };

inline std::string to_string(OpKind k) {
  switch (k) {
    case OpKind::identity: return "identity";
    case OpKind::mask: return "mask";
    case OpKind::blur: return "blur";
  }
  return "?";
}

inline OpKind op_kind_from_string(const std::string& s) {
  if (s == "identity") return OpKind::identity;
  if (s == "mask") return OpKind::mask;
  if (s == "blur") return OpKind::blur;
  throw ConfigError("unknown operator kind '" + s + "'");
}

inline std::string to_string(Boundary b) { return b == Boundary::circular ? "circular" : "zero"; }

inline Boundary boundary_from_string(const std::string& s) {
  if (s == "circular") return Boundary::circular;
  if (s == "zero") return Boundary::zero;
  throw ConfigError("unknown blur boundary '" + s + "'");
}

class ForwardOperator {
 public:
  static ForwardOperator identity(std::size_t d) {
    ForwardOperator op;
    op.kind_ = OpKind::identity;
    op.in_ = op.out_ = d;
    return op;
  }

  /// keep[i] != 0 marks an observed coordinate. Output is the compacted
  /// vector of kept coordinates in index order.
  static ForwardOperator mask(std::vector<std::uint8_t> keep) {
    ForwardOperator op;
    op.kind_ = OpKind::mask;
    op.in_ = keep.size();
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (keep[i]) op.kept_.push_back(i);
    op.out_ = op.kept_.size();
    op.keep_ = std::move(keep);
    return op;
  }

  /// Correlation of an h x w image with a k x k kernel (row-major).
  static ForwardOperator blur(std::size_t h, std::size_t w, std::vector<float> kernel, std::size_t k,
                              Boundary boundary = Boundary::circular) {
    if (k % 2 == 0) throw PreconditionError("blur kernel size must be odd");
    if (kernel.size() != k * k) throw ShapeError("blur kernel has wrong number of weights");
    ForwardOperator op;
    op.kind_ = OpKind::blur;
    op.h_ = h;
    op.w_ = w;
    op.k_ = k;
    op.kernel_ = std::move(kernel);
    op.boundary_ = boundary;
    op.in_ = op.out_ = h * w;
    return op;
  }

  OpKind kind() const noexcept { return kind_; }
  std::size_t input_dim() const noexcept { return in_; }
  std::size_t output_dim() const noexcept { return out_; }
  const std::vector<std::uint8_t>& keep_mask() const noexcept { return keep_; }
  const std::vector<float>& kernel() const noexcept { return kernel_; }
  std::size_t kernel_size() const noexcept { return k_; }
  Boundary boundary() const noexcept { return boundary_; }
  // Number of times an all-masked draw was rejected while building this op.
  std::uint32_t redraws = 0;

  void apply(std::span<const float> x, std::span<float> y) const { apply_impl(x, y); }
  void apply(std::span<const double> x, std::span<double> y) const { apply_impl(x, y); }
  void adjoint(std::span<const float> y, std::span<float> x) const { adjoint_impl(y, x); }
  void adjoint(std::span<const double> y, std::span<double> x) const { adjoint_impl(y, x); }

  std::vector<float> apply(std::span<const float> x) const {
    std::vector<float> y(out_);
    apply(x, y);
    return y;
  }

  std::vector<float> adjoint(std::span<const float> y) const {
    std::vector<float> x(in_);
    adjoint(y, x);
    return x;
  }

  std::vector<double> apply(std::span<const double> x) const {
    std::vector<double> y(out_);
    apply(x, y);
    return y;
  }

  std::vector<double> adjoint(std::span<const double> y) const {
    std::vector<double> x(in_);
    adjoint(y, x);
    return x;
  }

  /// Dense matrix (out x in, row-major) by applying to basis vectors.
  std::vector<double> dense() const {
    std::vector<double> m(out_ * in_);
    std::vector<double> e(in_, 0.0), col(out_);
    for (std::size_t j = 0; j < in_; ++j) {
      e[j] = 1.0;
      apply(e, col);
      for (std::size_t i = 0; i < out_; ++i) m[i * in_ + j] = col[i];
      e[j] = 0.0;
    }
    return m;
  }

 private:
  static void check(std::size_t got, std::size_t want, const char* what) {
    if (got != want) {
      throw ShapeError(std::string("operator ") + what + ": expected " + std::to_string(want) + " values, got " +
                       std::to_string(got));
    }
  }

  template <class T>
  void apply_impl(std::span<const T> x, std::span<T> y) const {
    check(x.size(), in_, "apply input");
    check(y.size(), out_, "apply output");
    switch (kind_) {
      case OpKind::identity:
        std::copy(x.begin(), x.end(), y.begin());
        break;
      case OpKind::mask:
        for (std::size_t i = 0; i < kept_.size(); ++i) y[i] = x[kept_[i]];
        break;
      case OpKind::blur:
        correlate(x, y, false);
        break;
    }
  }

  template <class T>
  void adjoint_impl(std::span<const T> y, std::span<T> x) const {
    check(y.size(), out_, "adjoint input");
    check(x.size(), in_, "adjoint output");
    switch (kind_) {
      case OpKind::identity:
        std::copy(y.begin(), y.end(), x.begin());
        break;
      case OpKind::mask:
        std::fill(x.begin(), x.end(), T(0));
        for (std::size_t i = 0; i < kept_.size(); ++i) x[kept_[i]] = y[i];
        break;
      case OpKind::blur:
        correlate(y, x, true);
        break;
    }
  }

  // forward: out[i,j] = sum_ab K[a,b] in[i+a-c, j+b-c]
  // adjoint: out[p,q] = sum_ab K[a,b] in[p-a+c, q-b+c]
  template <class T>
  void correlate(std::span<const T> in, std::span<T> out, bool transpose) const {
    const long c = static_cast<long>(k_ / 2);
    const long H = static_cast<long>(h_), W = static_cast<long>(w_), K = static_cast<long>(k_);
    for (long i = 0; i < H; ++i) {
      for (long j = 0; j < W; ++j) {
        double acc = 0.0;
        for (long a = 0; a < K; ++a) {
          for (long b = 0; b < K; ++b) {
            long r = transpose ? i - a + c : i + a - c;
            long s = transpose ? j - b + c : j + b - c;
            if (boundary_ == Boundary::circular) {
              r = ((r % H) + H) % H;
              s = ((s % W) + W) % W;
            } else if (r < 0 || r >= H || s < 0 || s >= W) {
              continue;
            }
            acc += static_cast<double>(kernel_[a * K + b]) * in[r * W + s];
          }
        }
        out[i * W + j] = static_cast<T>(acc);
      }
    }
  }

  OpKind kind_ = OpKind::identity;
  std::size_t in_ = 0, out_ = 0;
  std::vector<std::uint8_t> keep_;
  std::vector<std::size_t> kept_;
  std::size_t h_ = 0, w_ = 0, k_ = 0;
  std::vector<float> kernel_;
  Boundary boundary_ = Boundary::circular;
};

/// Independent Bernoulli mask hiding each coordinate with probability
/// mask_prob. An all-hidden draw is rejected and redrawn from the next
/// sub-stream of the same seed.
inline ForwardOperator make_mask_op(std::size_t d, double mask_prob, std::uint64_t seed) {
  if (!(mask_prob >= 0.0 && mask_prob < 1.0)) throw PreconditionError("mask probability must lie in [0,1)");
  if (d == 0) throw PreconditionError("mask operator needs a positive dimension");
  for (std::uint32_t attempt = 0;; ++attempt) {
    Rng rng = make_rng(seed, stream::kMask, attempt);
    std::bernoulli_distribution hidden(mask_prob);
    std::vector<std::uint8_t> keep(d);
    bool any = false;
    for (auto& k : keep) {
      k = hidden(rng) ? 0 : 1;
      any = any || k;
    }
    if (any) {
      auto op = ForwardOperator::mask(std::move(keep));
      op.redraws = attempt;
      return op;
    }
  }
}

/// Normalized, sampled 2-D Gaussian kernel of odd size k.
inline std::vector<float> gaussian_kernel(std::size_t k, double sigma) {
  if (k % 2 == 0) throw PreconditionError("blur kernel size must be odd");
  if (!(sigma > 0.0)) throw PreconditionError("blur sigma must be positive");
  const long c = static_cast<long>(k / 2);
  std::vector<double> w(k * k);
  double total = 0.0;
  for (long a = 0; a < static_cast<long>(k); ++a)
    for (long b = 0; b < static_cast<long>(k); ++b) {
      const double r2 = static_cast<double>((a - c) * (a - c) + (b - c) * (b - c));
      w[a * k + b] = std::exp(-r2 / (2.0 * sigma * sigma));
      total += w[a * k + b];
    }
  std::vector<float> out(k * k);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(w[i] / total);
  return out;
}

inline ForwardOperator make_blur_op(std::size_t h, std::size_t w, std::size_t k, double sigma_blur,
                                    Boundary boundary = Boundary::circular) {
  return ForwardOperator::blur(h, w, gaussian_kernel(k, sigma_blur), k, boundary);
}

/// y = A x + sigma z
inline std::vector<float> corrupt(std::span<const float> x, const ForwardOperator& op, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw PreconditionError("noise sigma must be non-negative");
  auto y = op.apply(x);
  if (sigma > 0.0) {
    std::normal_distribution<double> n01;
    for (auto& v : y) v = static_cast<float>(v + sigma * n01(rng));
  }
  return y;
}

/// ||y - A x0_hat||^2
inline double data_loss(std::span<const float> y, std::span<const float> x0_hat, const ForwardOperator& op) {
  if (y.size() != op.output_dim()) throw ShapeError("data_loss: observation size mismatch");
  const auto ax = op.apply(x0_hat);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = static_cast<double>(y[i]) - ax[i];
    s += r * r;
  }
  return s;
}

/// How an observation set was produced; persisted in its manifest.
struct OperatorSpec {
  OpKind kind = OpKind::mask;
  double mask_prob = 0.6;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t blur_kernel = 9;
  double blur_sigma = 2.0;
  Boundary boundary = Boundary::circular;
};

struct Observation {
  std::vector<float> y;
  std::shared_ptr<const ForwardOperator> op;
};

struct ObservationSet {
  OperatorSpec spec;
  double sigma = 0.01;
  std::uint64_t seed = 0;
  std::size_t dim = 0;
  std::vector<Observation> items;
  // Held-out clean signals, one row per observation; empty when unknown.
  SampleSet truth;

  std::size_t size() const noexcept { return items.size(); }
  bool has_truth() const noexcept { return truth.size() == items.size() && !items.empty(); }
};

/// Operator for item `index` of a set built from `spec` and `seed`.
inline std::shared_ptr<const ForwardOperator> build_operator(const OperatorSpec& spec, std::size_t d,
                                                             std::uint64_t seed, std::size_t index,
                                                             std::shared_ptr<const ForwardOperator> shared = nullptr) {
  switch (spec.kind) {
    case OpKind::identity:
      return shared ? shared : std::make_shared<ForwardOperator>(ForwardOperator::identity(d));
    case OpKind::mask:
      return std::make_shared<ForwardOperator>(make_mask_op(d, spec.mask_prob, derive_seed(seed, stream::kMask, index)));
    case OpKind::blur:
      if (spec.height * spec.width != d) throw ShapeError("blur operator: image shape does not match data dimension");
      return shared ? shared
                    : std::make_shared<ForwardOperator>(
                          make_blur_op(spec.height, spec.width, spec.blur_kernel, spec.blur_sigma, spec.boundary));
  }
  throw PreconditionError("unknown operator kind");
}

/// Corrupts every row of `clean`; item i uses its own operator and noise stream.
inline ObservationSet make_observations(const SampleSet& clean, const OperatorSpec& spec, double sigma,
                                        std::uint64_t seed, bool keep_truth = true) {
  if (clean.empty()) throw PreconditionError("cannot corrupt an empty dataset");
  ObservationSet set;
  set.spec = spec;
  set.sigma = sigma;
  set.seed = seed;
  set.dim = clean.dim;
  std::shared_ptr<const ForwardOperator> shared;
  if (spec.kind != OpKind::mask) shared = build_operator(spec, set.dim, seed, 0);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    auto op = build_operator(spec, set.dim, seed, i, shared);
    Rng rng = make_rng(seed, stream::kCorrupt, i);
    set.items.push_back({corrupt(clean.row(i), *op, sigma, rng), op});
  }
  if (keep_truth) set.truth = clean;
  return set;
}

}  // namespace emdiff
