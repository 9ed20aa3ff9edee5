#pragma once

// Run configuration for the command-line pipeline.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "emdiff/data_eval.hpp"
#include "emdiff/em.hpp"
#include "emdiff/error.hpp"
#include "emdiff/forward_ops.hpp"
#include "emdiff/io.hpp"
#include "emdiff/json_io.hpp"
#include "emdiff/mlp.hpp"
#include "emdiff/schedule.hpp"
#include "emdiff/trainer.hpp"

namespace emdiff {

struct DatasetSpec {
  std::string kind = "toyimage";  // toyimage | gmm
  std::string family = "bars";
  std::size_t height = 8;
  std::size_t width = 8;
  GmmPrior gmm;  // used when kind == "gmm"
  std::size_t n_train = 5000;
  std::size_t n_init = 50;
  std::size_t n_test = 500;
  std::uint64_t seed = 7;

  std::size_t dim() const { return kind == "gmm" ? gmm.dim() : height * width; }
};

struct RunConfig {
  std::string name = "run";
  std::string task = "inpaint";  // inpaint | denoise | deblur
  std::uint64_t seed = 0;
  std::string output_dir;  // empty: $EMDIFF_OUT/<name> or runs/<name>
  DatasetSpec dataset;
  OperatorSpec op;
  double noise_sigma = 0.01;
  std::uint64_t corrupt_seed = 11;
  int T = 1000;
  double beta1 = 1e-4;
  double betaT = 0.02;
  MlpConfig net;
  TrainConfig train;
  TrainConfig init_train;
  EmConfig em;
  bool wall_clock_in_metrics = false;

  NoiseSchedule schedule() const { return linear_beta_schedule(T, beta1, betaT); }

  /// Range checks for every field; runs before any file is written.
  void validate() const {
    if (name.empty()) throw ConfigError("name must not be empty");
    if (task != "inpaint" && task != "denoise" && task != "deblur") {
      throw ConfigError("task must be inpaint, denoise or deblur (got '" + task + "')");
    }
    const OpKind want = task == "inpaint" ? OpKind::mask : task == "denoise" ? OpKind::identity : OpKind::blur;
    if (op.kind != want) throw ConfigError("operator.kind '" + to_string(op.kind) + "' does not match task '" + task + "'");
    if (dataset.kind == "toyimage") {
      if (dataset.height < 4 || dataset.width < 4) throw ConfigError("dataset.height and dataset.width must be >= 4");
      if (dataset.family != "bars" && dataset.family != "blobs" && dataset.family != "background") {
        throw ConfigError("dataset.family must be bars, blobs or background");
      }
    } else if (dataset.kind == "gmm") {
      try {
        dataset.gmm.validate();
      } catch (const Error& e) {
        throw ConfigError(std::string("dataset.components: ") + e.what());
      }
    } else {
      throw ConfigError("dataset.kind must be toyimage or gmm");
    }
    if (dataset.n_train == 0) throw ConfigError("dataset.n_train must be >= 1");
    if (dataset.n_init == 0) throw ConfigError("dataset.n_init must be >= 1");
    if (op.kind == OpKind::mask && !(op.mask_prob >= 0.0 && op.mask_prob < 1.0)) {
      throw ConfigError("operator.mask_prob must lie in [0,1)");
    }
    if (op.kind == OpKind::blur) {
      if (dataset.kind != "toyimage") throw ConfigError("deblurring needs an image dataset");
      if (op.blur_kernel % 2 == 0) throw ConfigError("operator.blur_kernel must be odd");
      if (!(op.blur_sigma > 0.0)) throw ConfigError("operator.blur_sigma must be > 0");
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("operator.noise_sigma must be >= 0");
    if (T < 1) throw ConfigError("schedule.T must be >= 1");
    if (!(beta1 > 0.0 && beta1 <= betaT && betaT < 1.0)) throw ConfigError("schedule needs 0 < beta1 <= betaT < 1");
    MlpConfig n = net;
    n.data_dim = dataset.dim();
    n.validate();
    train.validate();
    init_train.validate();
    if (init_train.batch_size > dataset.n_init) throw ConfigError("init_train.batch_size exceeds dataset.n_init");
    if (train.batch_size > std::min(em.subset_size, dataset.n_train)) {
      throw ConfigError("train.batch_size exceeds the E-step sample count");
    }
    if ((train.hflip || init_train.hflip) && dataset.kind != "toyimage") throw ConfigError("hflip needs image data");
    em.validate();
    if (em.lambda_subset > std::min(em.subset_size, dataset.n_train)) {
      throw ConfigError("sampler.lambda_subset exceeds the E-step observation count");
    }
  }
};

inline json gmm_to_json(const GmmPrior& p) {
  json comps = json::array();
  for (const auto& c : p.components) {
    json cov = json::array();
    for (Eigen::Index i = 0; i < c.cov.rows(); ++i) {
      json row = json::array();
      for (Eigen::Index j = 0; j < c.cov.cols(); ++j) row.push_back(c.cov(i, j));
      cov.push_back(row);
    }
    std::vector<double> mean(c.mean.data(), c.mean.data() + c.mean.size());
    comps.push_back({{"weight", c.weight}, {"mean", mean}, {"cov", cov}});
  }
  return comps;
}

inline GmmPrior gmm_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw ConfigError("dataset.components must be a nonempty array");
  GmmPrior p;
  for (std::size_t k = 0; k < j.size(); ++k) {
    JsonFields f(j[k], "dataset.components[" + std::to_string(k) + "].");
    GmmComponent c;
    std::vector<double> mean;
    f.get("weight", c.weight);
    f.get("mean", mean);
    const json& cov = f.sub("cov");
    f.done();
    const auto d = static_cast<Eigen::Index>(mean.size());
    if (d == 0) throw ConfigError(f.path() + "mean must be nonempty");
    c.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), d);
    if (!cov.is_array() || static_cast<Eigen::Index>(cov.size()) != d) throw ConfigError(f.path() + "cov must be d x d");
    c.cov.resize(d, d);
    for (Eigen::Index r = 0; r < d; ++r) {
      const auto& row = cov[static_cast<std::size_t>(r)];
      if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != d) throw ConfigError(f.path() + "cov must be d x d");
      for (Eigen::Index col = 0; col < d; ++col) {
        if (!row[static_cast<std::size_t>(col)].is_number()) throw ConfigError(f.path() + "cov entries must be numbers");
        c.cov(r, col) = row[static_cast<std::size_t>(col)].get<double>();
      }
    }
    p.components.push_back(std::move(c));
  }
  return p;
}

inline json to_json(const RunConfig& c) {
  json ds = {{"kind", c.dataset.kind}, {"n_train", c.dataset.n_train}, {"n_init", c.dataset.n_init},
             {"n_test", c.dataset.n_test}, {"seed", c.dataset.seed}};
  if (c.dataset.kind == "gmm") {
    ds["components"] = gmm_to_json(c.dataset.gmm);
  } else {
    ds["family"] = c.dataset.family;
    ds["height"] = c.dataset.height;
    ds["width"] = c.dataset.width;
  }
  json op = {{"kind", to_string(c.op.kind)}, {"noise_sigma", c.noise_sigma}, {"seed", c.corrupt_seed}};
  if (c.op.kind == OpKind::mask) op["mask_prob"] = c.op.mask_prob;
  if (c.op.kind == OpKind::blur) {
    op["blur_kernel"] = c.op.blur_kernel;
    op["blur_sigma"] = c.op.blur_sigma;
    op["boundary"] = to_string(c.op.boundary);
  }
  json net = to_json(c.net);
  net.erase("data_dim");
  json em = em_to_json(c.em);
  em["wall_clock_in_metrics"] = c.wall_clock_in_metrics;
  return {{"name", c.name},
          {"task", c.task},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"dataset", ds},
          {"operator", op},
          {"schedule", {{"T", c.T}, {"beta1", c.beta1}, {"betaT", c.betaT}}},
          {"net", net},
          {"train", to_json(c.train)},
          {"init_train", to_json(c.init_train)},
          {"sampler", sampler_to_json(c.em)},
          {"em", em}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  JsonFields f(j, "");
  f.get("name", c.name);
  f.get("task", c.task);
  f.get("seed", c.seed);
  f.get("output_dir", c.output_dir);
  c.op.kind = c.task == "denoise" ? OpKind::identity : c.task == "deblur" ? OpKind::blur : OpKind::mask;
  if (f.has("dataset")) {
    JsonFields d(f.sub("dataset"), "dataset.");
    d.get("kind", c.dataset.kind);
    d.get("family", c.dataset.family);
    d.get("height", c.dataset.height);
    d.get("width", c.dataset.width);
    d.get("n_train", c.dataset.n_train);
    d.get("n_init", c.dataset.n_init);
    d.get("n_test", c.dataset.n_test);
    d.get("seed", c.dataset.seed);
    if (d.has("components")) c.dataset.gmm = gmm_from_json(d.sub("components"));
    d.done();
  }
  if (f.has("operator")) {
    JsonFields o(f.sub("operator"), "operator.");
    std::string kind = to_string(c.op.kind), boundary = to_string(c.op.boundary);
    o.get("kind", kind);
    o.get("mask_prob", c.op.mask_prob);
    o.get("noise_sigma", c.noise_sigma);
    o.get("seed", c.corrupt_seed);
    o.get("blur_kernel", c.op.blur_kernel);
    o.get("blur_sigma", c.op.blur_sigma);
    o.get("boundary", boundary);
    o.done();
    c.op.kind = op_kind_from_string(kind);
    c.op.boundary = boundary_from_string(boundary);
  }
  c.op.height = c.dataset.height;
  c.op.width = c.dataset.width;
  if (f.has("schedule")) {
    JsonFields s(f.sub("schedule"), "schedule.");
    s.get("T", c.T);
    s.get("beta1", c.beta1);
    s.get("betaT", c.betaT);
    s.done();
  }
  if (f.has("net")) {
    json n = f.sub("net");
    if (n.contains("data_dim")) throw ConfigError("net.data_dim is derived from the dataset; remove it");
    from_json(n, c.net);
  }
  c.net.data_dim = c.dataset.dim();
  if (f.has("train")) from_json(f.sub("train"), c.train, "train.");
  if (f.has("init_train")) {
    from_json(f.sub("init_train"), c.init_train, "init_train.");
  } else {
    c.init_train = c.train;
  }
  if (f.has("sampler")) sampler_from_json(f.sub("sampler"), c.em);
  if (f.has("em")) {
    json e = f.sub("em");
    if (e.contains("wall_clock_in_metrics")) {
      if (!e["wall_clock_in_metrics"].is_boolean()) throw ConfigError("em.wall_clock_in_metrics: expected true/false");
      c.wall_clock_in_metrics = e["wall_clock_in_metrics"].get<bool>();
      e.erase("wall_clock_in_metrics");
    }
    em_from_json(e, c.em);
  }
  f.done();
  c.em.seed = c.seed;
  if (c.train.hflip || c.init_train.hflip) {
    c.train.image_height = c.init_train.image_height = c.dataset.height;
    c.train.image_width = c.init_train.image_width = c.dataset.width;
  }
  return c;
}

/// Applies "a.b.c=value" to a JSON document; value is parsed as JSON when
/// possible and taken as a string otherwise.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override key '" + path + "' is malformed");
    if (!node->is_object()) throw ConfigError("override key '" + path + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

/// "name" resolves to <config_dir>/name.json when no such file exists.
inline std::filesystem::path resolve_config_path(const std::string& arg, const std::filesystem::path& config_dir) {
  std::filesystem::path p(arg);
  if (std::filesystem::exists(p)) return p;
  if (p.extension().empty()) {
    auto q = config_dir / (arg + ".json");
    if (std::filesystem::exists(q)) return q;
  }
  throw ConfigError("config '" + arg + "' not found (looked in the working directory and " + config_dir.string() + ")");
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  json doc;
  try {
    doc = json::parse(read_file(path), nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  for (const auto& o : overrides) apply_override(doc, o);
  auto cfg = run_config_from_json(doc);
  cfg.validate();
  return cfg;
}

/// Run directory: explicit output_dir, else $EMDIFF_OUT/<name>, else runs/<name>.
inline std::filesystem::path run_directory(const RunConfig& c) {
  if (!c.output_dir.empty()) return c.output_dir;
  const char* root = std::getenv("EMDIFF_OUT");
  return std::filesystem::path(root && *root ? root : "runs") / c.name;
}

}  // namespace emdiff
