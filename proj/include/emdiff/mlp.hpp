#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "emdiff/error.hpp"
#include "emdiff/rng.hpp"
#include "emdiff/tensor.hpp"

namespace emdiff {

enum class Activation { silu, tanh };

inline Activation activation_from_string(const std::string& s) {
  if (s == "silu") return Activation::silu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

inline std::string to_string(Activation a) { return a == Activation::silu ? "silu" : "tanh"; }

struct MlpConfig {
  std::size_t data_dim = 2;
  std::size_t time_embed_dim = 32;
  std::vector<std::size_t> hidden{128, 128, 128};
  Activation activation = Activation::silu;
  float dropout = 0.0f;

  void validate() const {
    if (data_dim == 0) throw ConfigError("net.data_dim must be positive");
    if (time_embed_dim % 2 != 0) throw ConfigError("net.time_embed_dim must be even");
    for (auto h : hidden)
      if (h == 0) throw ConfigError("net.hidden widths must be positive");
    if (!(dropout >= 0.0f && dropout < 1.0f)) throw ConfigError("net.dropout must lie in [0,1)");
  }
};

/// Sinusoidal timestep embedding, one row per timestep: [sin(t w_k) | cos(t w_k)].
inline Tensor time_embedding(std::span<const int> t, std::size_t dim) {
  if (dim % 2 != 0) throw PreconditionError("time embedding dimension must be even");
  const std::size_t half = dim / 2;
  std::vector<float> out(t.size() * dim);
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                   static_cast<double>(half > 1 ? half - 1 : 1));
      const double arg = static_cast<double>(t[r]) * freq;
      out[r * dim + k] = static_cast<float>(std::sin(arg));
      out[r * dim + half + k] = static_cast<float>(std::cos(arg));
    }
  }
  return Tensor({t.size(), dim}, std::move(out));
}

struct ForwardOptions {
  // When false the parameters enter the graph as constants, so a backward
  // pass produces input gradients only.
  bool track_params = true;
  // Dropout is applied only when an RNG is supplied.
  Rng* dropout_rng = nullptr;
};

/// Time-conditioned feedforward network: input [x | emb(t)], hidden layers
/// with a smooth activation, linear output of width data_dim.
class MlpScoreNet {
 public:
  MlpScoreNet() = default;

  MlpScoreNet(MlpConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::vector<std::size_t> widths{cfg_.data_dim + cfg_.time_embed_dim};
    widths.insert(widths.end(), cfg_.hidden.begin(), cfg_.hidden.end());
    widths.push_back(cfg_.data_dim);
    Rng rng = make_rng(seed, stream::kInit);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const auto in = widths[l], out = widths[l + 1];
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> u(-bound, bound);
      std::vector<float> w(in * out), b(out);
      for (auto& v : w) v = static_cast<float>(u(rng));
      for (auto& v : b) v = static_cast<float>(u(rng));
      params_.emplace_back(Shape{in, out}, std::move(w), true);
      params_.emplace_back(Shape{out}, std::move(b), true);
    }
  }

  const MlpConfig& config() const noexcept { return cfg_; }
  std::size_t num_layers() const noexcept { return params_.size() / 2; }

  std::vector<Tensor>& parameters() noexcept { return params_; }
  const std::vector<Tensor>& parameters() const noexcept { return params_; }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < num_layers(); ++l) {
      names.push_back("layer" + std::to_string(l) + ".weight");
      names.push_back("layer" + std::to_string(l) + ".bias");
    }
    return names;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  /// x: [batch, d]; t: one timestep per row, or a single timestep for all rows.
  Tensor forward(const Tensor& x, std::span<const int> t, const ForwardOptions& opt = {}) const {
    if (x.rank() != 2 || x.dim(1) != cfg_.data_dim) {
      throw ShapeError("mlp input " + shape_str(x.shape()) + " does not match data dimension " +
                       std::to_string(cfg_.data_dim));
    }
    const std::size_t batch = x.dim(0);
    std::vector<int> ts;
    if (t.size() == 1) {
      ts.assign(batch, t[0]);
    } else if (t.size() == batch) {
      ts.assign(t.begin(), t.end());
    } else {
      throw ShapeError("mlp: need one timestep or one per row");
    }
    Tensor h = cfg_.time_embed_dim > 0 ? concat_cols(x, time_embedding(ts, cfg_.time_embed_dim)) : x;
    for (std::size_t l = 0; l < num_layers(); ++l) {
      const Tensor& w = opt.track_params ? params_[2 * l] : params_[2 * l].detach();
      const Tensor& b = opt.track_params ? params_[2 * l + 1] : params_[2 * l + 1].detach();
      h = add_rowvec(matmul(h, w), b);
      if (l + 1 < num_layers()) {
        h = cfg_.activation == Activation::silu ? silu(h) : emdiff::tanh(h);
        if (opt.dropout_rng && cfg_.dropout > 0.0f) h = dropout(h, cfg_.dropout, *opt.dropout_rng);
      }
    }
    return h;
  }

  Tensor forward(const Tensor& x, int t, const ForwardOptions& opt = {}) const {
    return forward(x, std::span<const int>(&t, 1), opt);
  }

  /// Overwrites every parameter value; shapes must agree.
  void load_parameters(const std::vector<std::vector<float>>& values) {
    if (values.size() != params_.size()) throw ShapeError("parameter count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto dst = params_[i].mutable_data();
      if (values[i].size() != dst.size()) throw ShapeError("parameter size mismatch at index " + std::to_string(i));
      std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
  }

  std::vector<std::vector<float>> parameter_values() const {
    std::vector<std::vector<float>> out;
    for (const auto& p : params_) out.emplace_back(p.data().begin(), p.data().end());
    return out;
  }

  /// Independent copy with its own parameter storage.
  MlpScoreNet deep_copy() const {
    MlpScoreNet n;
    n.cfg_ = cfg_;
    for (const auto& p : params_) n.params_.push_back(p.clone(true));
    return n;
  }

 private:
  MlpConfig cfg_;
  std::vector<Tensor> params_;
};

}  // namespace emdiff
