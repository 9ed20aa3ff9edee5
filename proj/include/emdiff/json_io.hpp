#pragma once

// JSON mapping of the configuration structs. Readers are strict: unknown
// keys and wrong types are ConfigErrors naming the full key path.

#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "emdiff/em.hpp"
#include "emdiff/error.hpp"
#include "emdiff/forward_ops.hpp"
#include "emdiff/mlp.hpp"
#include "emdiff/sampler.hpp"
#include "emdiff/trainer.hpp"

namespace emdiff {

using json = nlohmann::json;

/// Doubles that survive a JSON round trip bit for bit, non-finite included.
inline json jnum(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double jdouble(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto& s = j.get_ref<const std::string&>();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  throw FormatError("expected a number, got " + j.dump());
}

class JsonFields {
 public:
  JsonFields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void get(const std::string& key, T& dst) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("expected true/false");
        dst = v.get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_unsigned() || v.get<std::int64_t>() >= 0) {
            dst = v.get<T>();
          } else {
            throw ConfigError("expected a non-negative integer");
          }
        } else {
          dst = v.get<T>();
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("expected a number");
        dst = v.get<T>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("expected a string");
        dst = v.get<std::string>();
      } else {
        if (!v.is_array()) throw ConfigError("expected an array");
        T out;
        for (std::size_t i = 0; i < v.size(); ++i) {
          typename T::value_type x{};
          const std::string k = "[" + std::to_string(i) + "]";
          json wrapped = json::object();
          wrapped[k] = v[i];
          JsonFields tmp(wrapped, "");
          tmp.get(k, x);
          out.push_back(x);
        }
        dst = std::move(out);
      }
    } catch (const ConfigError& e) {
      throw ConfigError(path_ + key + ": " + e.what());
    }
  }

  const json& sub(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void done() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + path_ + it.key() + "'");
    }
  }

  const std::string& path() const noexcept { return path_; }

 private:
  std::string where() const { return path_.empty() ? "" : path_ + ": "; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------

inline json to_json(const MlpConfig& c) {
  return {{"data_dim", c.data_dim},
          {"time_embed_dim", c.time_embed_dim},
          {"hidden", c.hidden},
          {"activation", to_string(c.activation)},
          {"dropout", c.dropout}};
}

inline void from_json(const json& j, MlpConfig& c, const std::string& path = "net.") {
  JsonFields f(j, path);
  f.get("data_dim", c.data_dim);
  f.get("time_embed_dim", c.time_embed_dim);
  f.get("hidden", c.hidden);
  std::string act = to_string(c.activation);
  f.get("activation", act);
  c.activation = activation_from_string(act);
  f.get("dropout", c.dropout);
  f.done();
}

inline json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"lr", c.lr},
          {"weight_decay", c.weight_decay}, {"ema_decay", c.ema_decay},   {"ema_warmup", c.ema_warmup},
          {"hflip", c.hflip}};
}

inline void from_json(const json& j, TrainConfig& c, const std::string& path = "train.") {
  JsonFields f(j, path);
  f.get("epochs", c.epochs);
  f.get("batch_size", c.batch_size);
  f.get("lr", c.lr);
  f.get("weight_decay", c.weight_decay);
  f.get("ema_decay", c.ema_decay);
  f.get("ema_warmup", c.ema_warmup);
  f.get("hflip", c.hflip);
  f.done();
}

/// Sampler and lambda-search settings live together under "sampler".
inline json sampler_to_json(const EmConfig& c) {
  return {{"sigma", c.sampler.sigma},
          {"lambda_grid", c.lambda.grid},
          {"lambda_subset", c.lambda_subset},
          {"lambda_max_diverged_fraction", c.lambda.max_diverged_fraction},
          {"batch_size", c.sampler.batch_size},
          {"threads", c.sampler.threads},
          {"divergence_norm", c.sampler.divergence_norm},
          {"alpha_bar_floor", c.sampler.alpha_bar_floor}};
}

inline void sampler_from_json(const json& j, EmConfig& c, const std::string& path = "sampler.") {
  JsonFields f(j, path);
  f.get("sigma", c.sampler.sigma);
  f.get("lambda_grid", c.lambda.grid);
  f.get("lambda_subset", c.lambda_subset);
  f.get("lambda_max_diverged_fraction", c.lambda.max_diverged_fraction);
  f.get("batch_size", c.sampler.batch_size);
  f.get("threads", c.sampler.threads);
  f.get("divergence_norm", c.sampler.divergence_norm);
  f.get("alpha_bar_floor", c.sampler.alpha_bar_floor);
  f.done();
}

inline json em_to_json(const EmConfig& c) {
  return {{"iterations", c.iterations},
          {"subset_size", c.subset_size},
          {"reset_after", c.reset_after},
          {"max_diverged_fraction", c.max_diverged_fraction},
          {"swd_projections", c.swd_projections}};
}

inline void em_from_json(const json& j, EmConfig& c, const std::string& path = "em.") {
  JsonFields f(j, path);
  f.get("iterations", c.iterations);
  f.get("subset_size", c.subset_size);
  f.get("reset_after", c.reset_after);
  f.get("max_diverged_fraction", c.max_diverged_fraction);
  f.get("swd_projections", c.swd_projections);
  f.done();
}

inline json to_json(const OperatorSpec& s) {
  return {{"kind", to_string(s.kind)},         {"mask_prob", s.mask_prob},   {"height", s.height},
          {"width", s.width},                  {"blur_kernel", s.blur_kernel}, {"blur_sigma", s.blur_sigma},
          {"boundary", to_string(s.boundary)}};
}

inline OperatorSpec operator_spec_from_json(const json& j) {
  OperatorSpec s;
  JsonFields f(j, "operator.");
  std::string kind = to_string(s.kind), boundary = to_string(s.boundary);
  f.get("kind", kind);
  f.get("mask_prob", s.mask_prob);
  f.get("height", s.height);
  f.get("width", s.width);
  f.get("blur_kernel", s.blur_kernel);
  f.get("blur_sigma", s.blur_sigma);
  f.get("boundary", boundary);
  f.done();
  s.kind = op_kind_from_string(kind);
  s.boundary = boundary_from_string(boundary);
  return s;
}

/// Wall-clock time is left out so that a checkpoint depends only on the
/// config and seed; it reads back as 0.
inline json to_json(const IterationMetrics& m) {
  json losses = json::array();
  for (double l : m.lambda_losses) losses.push_back(jnum(l));
  return {{"iteration", m.iteration},
          {"phase", to_string(m.phase)},
          {"lambda_star", jnum(m.lambda_star)},
          {"mean_data_loss", jnum(m.mean_data_loss)},
          {"psnr_mean", jnum(m.psnr_mean)},
          {"swd", jnum(m.swd)},
          {"samples", m.samples},
          {"diverged", m.diverged},
          {"lambda_losses", losses}};
}

inline IterationMetrics metrics_from_json(const json& j) {
  IterationMetrics m;
  m.iteration = j.at("iteration").get<int>();
  m.phase = phase_from_string(j.at("phase").get<std::string>());
  m.lambda_star = jdouble(j.at("lambda_star"));
  m.mean_data_loss = jdouble(j.at("mean_data_loss"));
  m.psnr_mean = jdouble(j.at("psnr_mean"));
  m.swd = jdouble(j.at("swd"));
  m.samples = j.at("samples").get<std::size_t>();
  m.diverged = j.at("diverged").get<std::size_t>();
  for (const auto& l : j.at("lambda_losses")) m.lambda_losses.push_back(jdouble(l));
  return m;
}

}  // namespace emdiff
