// emdiff: command-line pipeline for EM-trained diffusion priors.
//
//   gen-data    clean train/init/test splits
//   corrupt     observations y = A x + sigma n of the train split
//   init-train  initial score model on the clean init split
//   em-run      alternating posterior sampling and score-model refits
//   sample      unconditional or posterior samples from a checkpoint
//   evaluate    PSNR and sliced Wasserstein between two sample sets
//   plot        SVG charts of the metrics and loss curves

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "emdiff/checkpoint.hpp"
#include "emdiff/config.hpp"
#include "emdiff/container.hpp"
#include "emdiff/em.hpp"
#include "emdiff/svg_plot.hpp"

#ifndef EMDIFF_DEFAULT_CONFIG_DIR
#define EMDIFF_DEFAULT_CONFIG_DIR "configs"
#endif

namespace fs = std::filesystem;
using namespace emdiff;

namespace {

struct UsageError : Error {
  explicit UsageError(const std::string& d) : Error("usage", d) {}
};

int exit_code(const std::string& category) {
  static const std::map<std::string, int> codes{{"usage", 2},     {"config", 3},   {"io", 4},
                                                {"format", 5},    {"version", 5},  {"checksum", 5},
                                                {"divergence", 6}, {"non_finite", 6}};
  auto it = codes.find(category);
  return it == codes.end() ? 1 : it->second;
}

int fail(const std::string& category, std::string detail) {
  for (auto& c : detail)
    if (c == '\n' || c == '\r') c = ' ';
  std::cerr << "error: " << category << ": " << detail << std::endl;
  return exit_code(category);
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

fs::path config_dir() {
  const char* env = std::getenv("EMDIFF_CONFIG_DIR");
  return env && *env ? fs::path(env) : fs::path(EMDIFF_DEFAULT_CONFIG_DIR);
}

void log(const std::string& cmd, const std::string& msg) { std::cerr << "[" << cmd << "] " << msg << std::endl; }

// Options shared by every config-driven command.
struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;

  void add_to(CLI::App* app) {
    app->add_option("-c,--config", config, "config name (resolved in the config directory) or path")->required();
    app->add_option("-s,--set", overrides, "override a config field, e.g. --set em.iterations=3");
    app->add_option("-o,--out", out, "run directory (overrides output_dir and $EMDIFF_OUT)");
  }
};

// A loaded configuration plus the run directory it writes to.
struct Run {
  RunConfig cfg;
  fs::path dir;
  std::string config_text;
};

Run open_run(const Common& c) {
  Run r;
  r.cfg = load_run_config(resolve_config_path(c.config, config_dir()), c.overrides);
  if (!c.out.empty()) r.cfg.output_dir = c.out;
  r.dir = run_directory(r.cfg);
  r.config_text = to_json(r.cfg).dump(2) + "\n";
  return r;
}

// Echoes the effective config; a run directory holds exactly one config.
void write_config(const Run& r) {
  const auto path = r.dir / "config.json";
  if (fs::exists(path) && read_file(path) != r.config_text) {
    log("config", "replacing " + path.string() + " (effective config changed)");
  }
  write_file(path, r.config_text);
}

// Manifest of one command: outputs with sizes and checksums; wall-clock
// information lives only under "timestamps".
class Manifest {
 public:
  Manifest(std::string command, fs::path dir) : command_(std::move(command)), dir_(std::move(dir)), started_(utc_now()) {}

  void input(const fs::path& p) { inputs_.push_back(rel(p)); }

  void output(const fs::path& p) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file()) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) output(f);
      return;
    }
    const auto bytes = read_file(p);
    outputs_.push_back({{"path", rel(p)}, {"bytes", bytes.size()}, {"fnv1a64", hex64(fnv1a64(bytes))}});
  }

  void info(const std::string& key, json v) { info_[key] = std::move(v); }
  void timing(const std::string& key, json v) { timing_[key] = std::move(v); }

  void write() {
    json ins = json::array();
    for (const auto& i : inputs_) ins.push_back(i);
    json m = {{"command", command_}, {"config", "config.json"}, {"inputs", ins}, {"outputs", outputs_}};
    if (!info_.empty()) m["info"] = info_;
    json ts = {{"started", started_}, {"finished", utc_now()}};
    for (auto& [k, v] : timing_.items()) ts[k] = v;
    m["timestamps"] = ts;
    write_file(dir_ / "manifests" / (command_ + ".json"), m.dump(2) + "\n");
  }

 private:
  std::string rel(const fs::path& p) const { return fs::relative(p, dir_).generic_string(); }

  std::string command_;
  fs::path dir_;
  std::string started_;
  std::vector<std::string> inputs_;
  json outputs_ = json::array();
  json info_ = json::object();
  json timing_ = json::object();
};

fs::path require_path(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p)) throw IoError("'" + p.string() + "' does not exist; " + hint);
  return p;
}

// ---------------------------------------------------------------------------
// gen-data

Dataset generate_all(const RunConfig& c) {
  const std::size_t n = c.dataset.n_train + c.dataset.n_init + c.dataset.n_test;
  if (c.dataset.kind == "gmm") return gen_gmm(c.dataset.gmm, n, c.dataset.seed);
  return gen_toyimages(c.dataset.height, c.dataset.width, c.dataset.family, n, c.dataset.seed);
}

int cmd_gen_data(const Common& opt) {
  Run r = open_run(opt);
  write_config(r);
  Manifest man("gen-data", r.dir);
  const auto all = generate_all(r.cfg);
  const auto& d = r.cfg.dataset;
  const std::array<std::pair<const char*, std::pair<std::size_t, std::size_t>>, 3> splits{
      {{"train", {0, d.n_train}}, {"init", {d.n_train, d.n_init}}, {"test", {d.n_train + d.n_init, d.n_test}}}};
  for (const auto& [name, range] : splits) {
    if (range.second == 0) continue;
    const auto dir = r.dir / "data" / name;
    save_dataset(dir, take_split(all, range.first, range.second, name));
    man.output(dir);
    log("gen-data", std::string(name) + ": " + std::to_string(range.second) + " samples of dimension " +
                        std::to_string(all.samples.dim));
  }
  man.write();
  return 0;
}

// ---------------------------------------------------------------------------
// corrupt

int cmd_corrupt(const Common& opt) {
  Run r = open_run(opt);
  const auto train_dir = require_path(r.dir / "data" / "train", "run `gen-data` first");
  write_config(r);
  Manifest man("corrupt", r.dir);
  man.input(train_dir);
  const auto train = load_dataset(train_dir);
  auto obs = make_observations(train.samples, r.cfg.op, r.cfg.noise_sigma, r.cfg.corrupt_seed);
  const auto out = r.dir / "observations";
  save_observations(out, obs);
  man.output(out);
  std::size_t redraws = 0;
  for (const auto& it : obs.items) redraws += it.op->redraws;
  man.info("mask_redraws", redraws);
  man.write();
  log("corrupt", std::to_string(obs.size()) + " observations (" + to_string(r.cfg.op.kind) + ")");
  return 0;
}

// ---------------------------------------------------------------------------
// init-train and em-run

NeuralFamily make_family(const RunConfig& c) { return NeuralFamily(c.net, c.train, c.init_train, c.seed); }

void write_curve(const fs::path& path, const TrainReport& rep) {
  std::ostringstream os;
  rep.write_csv(os);
  write_file(path, os.str());
}

// Config content that must match for a checkpoint to be reused; the fields
// dropped here change neither the trajectory nor the outputs.
std::string resume_identity(const std::string& config_text) {
  json j = json::parse(config_text);
  j.erase("output_dir");
  j["em"].erase("iterations");
  j["em"].erase("wall_clock_in_metrics");
  j["sampler"].erase("threads");
  return j.dump();
}

Checkpoint load_matching(const Run& r, const fs::path& path, const std::string& hint) {
  auto ck = load_checkpoint(path);
  if (resume_identity(ck.em.config_json) != resume_identity(r.config_text)) {
    throw ConfigError("'" + path.string() + "' was written under a different config; " + hint);
  }
  return ck;
}

EmState initial_state(const Run& r) {
  EmState st;
  st.seed = r.cfg.em.seed;
  st.config_json = r.config_text;
  return st;
}

// Trains the initial model and stores it as checkpoints/init.ckpt.
NeuralFamily run_init(const Run& r, Manifest& man) {
  const auto init_dir = require_path(r.dir / "data" / "init", "run `gen-data` first");
  man.input(init_dir);
  const auto init = load_dataset(init_dir);
  auto fam = make_family(r.cfg);
  log("init-train", "training on " + std::to_string(init.samples.size()) + " clean samples for " +
                        std::to_string(r.cfg.init_train.epochs) + " epochs");
  fam.init(init.samples, r.cfg.schedule());
  const auto curve = r.dir / "curves" / "init_loss.csv";
  write_curve(curve, fam.last_report);
  const auto ck = r.dir / "checkpoints" / "init.ckpt";
  save_checkpoint(ck, initial_state(r), fam.state);
  man.output(curve);
  man.output(ck);
  man.timing("train_s", fam.last_report.wall_clock_s);
  return fam;
}

int cmd_init_train(const Common& opt) {
  Run r = open_run(opt);
  write_config(r);
  Manifest man("init-train", r.dir);
  auto fam = run_init(r, man);
  man.info("final_loss", jnum(fam.last_report.epoch_loss.back()));
  man.write();
  log("init-train", "final epoch loss " + format_double(fam.last_report.epoch_loss.back()));
  return 0;
}

std::string iter_name(int k) {
  std::ostringstream os;
  os << std::setw(3) << std::setfill('0') << k;
  return os.str();
}

void write_metrics(const Run& r, const EmState& st) {
  std::ostringstream os;
  write_metrics_csv(os, st.metrics, r.cfg.wall_clock_in_metrics);
  write_file(r.dir / "metrics.csv", os.str());
}

int cmd_em_run(const Common& opt, bool resume) {
  Run r = open_run(opt);
  const auto obs_dir = require_path(r.dir / "observations", "run `corrupt` first");
  const auto latest = r.dir / "checkpoints" / "latest.ckpt";
  const auto init_ck = r.dir / "checkpoints" / "init.ckpt";
  std::optional<Checkpoint> start;
  fs::path start_path;
  if (resume && fs::exists(latest)) {
    start_path = latest;
    start = load_matching(r, latest, "start a fresh run directory");
  } else if (fs::exists(init_ck)) {
    start_path = init_ck;
    start = load_matching(r, init_ck, "rerun init-train");
  }
  const auto obs = load_observations(obs_dir);
  if (obs.dim != r.cfg.dataset.dim()) throw ShapeError("observation dimension does not match the config");
  const auto sched = r.cfg.schedule();

  write_config(r);
  Manifest man("em-run", r.dir);
  man.input(obs_dir);
  auto fam = make_family(r.cfg);
  EmState st = initial_state(r);
  if (start) {
    man.input(start_path);
    fam.state = std::move(start->trainer);
    if (start_path == latest) {
      st = std::move(start->em);
      st.config_json = r.config_text;
      log("em-run", "resuming after iteration " + std::to_string(st.iteration));
    }
  } else {
    fam = run_init(r, man);
  }

  json timings = json::array();  // iterations run by this invocation
  EmHooks<NeuralFamily> hooks;
  hooks.on_iteration = [&](const EmState& s, const NeuralFamily& f) {
    const auto& m = s.metrics.back();
    const auto k = iter_name(m.iteration);
    write_curve(r.dir / "curves" / ("mstep_" + k + ".csv"), f.last_report);
    save_checkpoint(r.dir / "checkpoints" / ("iter_" + k + ".ckpt"), s, f.state);
    save_checkpoint(latest, s, f.state);
    write_metrics(r, s);
    timings.push_back(jnum(m.wall_clock_s));
    std::ostringstream os;
    os << "iteration " << m.iteration + 1 << "/" << r.cfg.em.iterations << " phase=" << to_string(m.phase)
       << " lambda*=" << format_double(m.lambda_star) << " data_loss=" << format_double(m.mean_data_loss)
       << " psnr=" << format_double(m.psnr_mean) << " swd=" << format_double(m.swd) << " diverged=" << m.diverged
       << " (" << std::fixed << std::setprecision(1) << m.wall_clock_s << " s)";
    log("em-run", os.str());
  };
  hooks.on_abort = [&](const EmState& s, const NeuralFamily& f) {
    save_checkpoint(r.dir / "checkpoints" / "abort.ckpt", s, f.state);
    log("em-run", "state after iteration " + std::to_string(s.iteration) + " saved to checkpoints/abort.ckpt");
  };
  st = run_em_iterations(fam, std::move(st), obs, sched, r.cfg.em, hooks);
  write_metrics(r, st);
  save_checkpoint(r.dir / "checkpoints" / "final.ckpt", st, fam.state);

  man.output(r.dir / "metrics.csv");
  man.output(r.dir / "checkpoints" / "final.ckpt");
  for (int k = 0; k < st.iteration; ++k) man.output(r.dir / "curves" / ("mstep_" + iter_name(k) + ".csv"));
  man.info("iterations", st.iteration);
  man.info("final_phase", to_string(st.phase));
  man.timing("iteration_wall_clock_s", timings);
  man.write();
  return 0;
}

// ---------------------------------------------------------------------------
// sample

int cmd_sample(const Common& opt, std::size_t n, const std::string& checkpoint, bool posterior,
               std::optional<double> lambda) {
  Run r = open_run(opt);
  const fs::path ck_path = checkpoint.empty() ? r.dir / "checkpoints" / "final.ckpt" : fs::path(checkpoint);
  require_path(ck_path, "run `em-run` or `init-train` first, or pass --checkpoint");
  write_config(r);
  Manifest man("sample", r.dir);
  man.input(ck_path);
  auto ck = load_checkpoint(ck_path);
  if (ck.trainer.net.config().data_dim != r.cfg.dataset.dim()) {
    throw ShapeError("checkpoint network dimension does not match the config");
  }
  const auto sched = r.cfg.schedule();
  ScoreModel model = NeuralScore(std::make_shared<const MlpScoreNet>(ck.trainer.ema_network()), sched);
  SamplerConfig sc = r.cfg.em.sampler;
  const auto root = derive_seed(r.cfg.seed, stream::kEval, 0);

  if (!posterior) {
    if (n == 0) n = r.cfg.dataset.n_test;
    auto chains = sample_unconditional(model, chain_seeds(root, stream::kEval, n), sc);
    SampleSet s;
    s.dim = r.cfg.dataset.dim();
    std::size_t dead = 0;
    for (const auto& c : chains) {
      if (c.diverged) {
        ++dead;
        continue;
      }
      s.push_back(c.x0);
    }
    const auto out = r.dir / "samples";
    save_samples(out, s, {{"source", ck_path.filename().string()}, {"diverged", dead}});
    man.output(out);
    log("sample", std::to_string(s.size()) + " unconditional samples (" + std::to_string(dead) + " diverged)");
  } else {
    const auto obs_dir = require_path(r.dir / "observations", "run `corrupt` first");
    man.input(obs_dir);
    const auto obs = load_observations(obs_dir);
    if (n == 0 || n > obs.size()) n = obs.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (lambda) {
      sc.lambda = *lambda;
    } else if (!ck.em.lambda_history.empty()) {
      sc.lambda = ck.em.lambda_history.back();
    } else {
      throw UsageError("checkpoint has no selected lambda; pass --lambda");
    }
    auto chains = sample_posterior(model, chain_targets(obs, idx), chain_seeds(root, stream::kChain, n), sc);
    SampleSet s;
    s.dim = obs.dim;
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < n; ++i) {
      if (chains[i].diverged) continue;
      s.push_back(chains[i].x0);
      kept.push_back(i);
    }
    const auto out = r.dir / "reconstructions";
    save_samples(out, s, {{"source", ck_path.filename().string()}, {"lambda", jnum(sc.lambda)}, {"indices", kept}});
    man.output(out);
    if (obs.has_truth()) {
      const auto ref = r.dir / "reconstructions_truth";
      save_samples(ref, obs.truth.subset(kept));
      man.output(ref);
    }
    log("sample", std::to_string(s.size()) + " posterior samples at lambda=" + format_double(sc.lambda));
  }
  man.write();
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

json evaluate_sets(const SampleSet& recon, const SampleSet& ref, std::size_t projections, std::uint64_t seed) {
  json out;
  out["n_recon"] = recon.size();
  out["n_reference"] = ref.size();
  out["psnr_mean"] = recon.size() == ref.size() ? jnum(mean_psnr(recon, ref)) : json(nullptr);
  out["swd"] = jnum(sliced_wasserstein(recon, ref, projections, seed));
  out["swd_projections"] = projections;
  return out;
}

int cmd_evaluate(const Common& opt, const std::string& recon, const std::string& reference, const std::string& out) {
  std::optional<Run> r;
  if (!opt.config.empty()) r = open_run(opt);
  if (!r && (recon.empty() || reference.empty())) throw UsageError("evaluate needs --config or both --recon and --reference");
  const fs::path rp = !recon.empty() ? fs::path(recon) : r->dir / "samples";
  const fs::path fp = !reference.empty() ? fs::path(reference) : r->dir / "data" / "test";
  require_path(rp, "nothing to evaluate");
  require_path(fp, "no reference set");
  const auto a = load_rows(rp), b = load_rows(fp);
  const std::size_t projections = r ? r->cfg.em.swd_projections : 128;
  const std::uint64_t seed = r ? r->cfg.seed : 0;
  json res = evaluate_sets(a, b, projections, seed);
  res["recon"] = rp.generic_string();
  res["reference"] = fp.generic_string();
  const std::string text = res.dump(2) + "\n";
  std::cout << text;
  fs::path dest = !out.empty() ? fs::path(out) : r ? r->dir / "evaluation.json" : fs::path();
  if (!dest.empty()) {
    write_file(dest, text);
    if (r) {
      write_config(*r);
      Manifest man("evaluate", r->dir);
      man.input(rp);
      man.input(fp);
      man.output(dest);
      man.write();
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// plot

std::vector<std::map<std::string, std::string>> read_csv(const fs::path& p) {
  std::istringstream in(read_file(p));
  std::string line;
  std::vector<std::string> header;
  std::vector<std::map<std::string, std::string>> rows;
  auto split = [](const std::string& s) {
    std::vector<std::string> f;
    std::stringstream ss(s);
    std::string x;
    while (std::getline(ss, x, ',')) f.push_back(x);
    return f;
  };
  if (!std::getline(in, line)) throw FormatError("'" + p.string() + "' is empty");
  header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split(line);
    if (f.size() != header.size()) throw FormatError("'" + p.string() + "' has a malformed row: " + line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < f.size(); ++i) row[header[i]] = f[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

double field(const std::map<std::string, std::string>& row, const std::string& key) {
  auto it = row.find(key);
  if (it == row.end()) throw FormatError("CSV is missing column '" + key + "'");
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    if (it->second == "nan" || it->second == "-nan") return std::numeric_limits<double>::quiet_NaN();
    if (it->second == "inf") return std::numeric_limits<double>::infinity();
    throw FormatError("column '" + key + "' holds a non-number: " + it->second);
  }
}

Series csv_series(const std::vector<std::map<std::string, std::string>>& rows, const std::string& x,
                  const std::string& y, const std::string& label) {
  Series s{label, {}, {}};
  for (const auto& r : rows) {
    s.x.push_back(field(r, x));
    s.y.push_back(field(r, y));
  }
  return s;
}

int cmd_plot(const Common& opt, const std::string& run) {
  fs::path dir;
  std::optional<Run> r;
  if (!opt.config.empty()) {
    r = open_run(opt);
    dir = r->dir;
  } else if (!run.empty()) {
    dir = run;
  } else {
    throw UsageError("plot needs --config or --run");
  }
  const auto metrics_path = require_path(dir / "metrics.csv", "run `em-run` first");
  const auto rows = read_csv(metrics_path);
  const auto plots = dir / "plots";
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::vector<Series>& series, const PlotSpec& spec) {
    write_file(plots / name, render_line_chart(series, spec));
    written.push_back(plots / name);
  };
  emit("lambda.svg", {csv_series(rows, "iteration", "lambda_star", "lambda*")},
       {"Selected likelihood weight", "EM iteration", "lambda*", true});
  emit("psnr.svg", {csv_series(rows, "iteration", "psnr_mean", "posterior samples")},
       {"Mean PSNR of posterior samples", "EM iteration", "PSNR (dB)", false});
  emit("data_loss.svg", {csv_series(rows, "iteration", "mean_data_loss", "E-step")},
       {"Mean data loss", "EM iteration", "||y - A x||^2", true});

  std::vector<Series> curves;
  const auto cdir = dir / "curves";
  if (fs::exists(cdir)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(cdir))
      if (e.path().extension() == ".csv") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) curves.push_back(csv_series(read_csv(f), "epoch", "mean_loss", f.stem().string()));
  }
  if (!curves.empty()) emit("loss.svg", curves, {"Training loss", "epoch", "mean DSM loss", true});

  if (r) {
    write_config(*r);
    Manifest man("plot", dir);
    man.input(metrics_path);
    for (const auto& w : written) man.output(w);
    man.write();
  }
  for (const auto& w : written) log("plot", w.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EM training of diffusion priors from corrupted observations"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand help for every subcommand");

  Common common;
  auto* gen = app.add_subcommand("gen-data", "generate clean train/init/test splits");
  auto* cor = app.add_subcommand("corrupt", "corrupt the train split with the configured operator");
  auto* ini = app.add_subcommand("init-train", "train the initial model on the clean init split");
  auto* em = app.add_subcommand("em-run", "run the EM iterations");
  auto* smp = app.add_subcommand("sample", "draw samples from a checkpoint");
  auto* ev = app.add_subcommand("evaluate", "PSNR and sliced Wasserstein of a sample set");
  auto* pl = app.add_subcommand("plot", "render metrics and loss curves as SVG");
  for (auto* s : {gen, cor, ini, em, smp}) common.add_to(s);

  bool resume = false;
  em->add_flag("--resume", resume, "continue from checkpoints/latest.ckpt when present");

  std::size_t n = 0;
  std::string checkpoint;
  bool posterior = false;
  std::optional<double> lambda;
  smp->add_option("-n,--n", n, "number of samples (default: dataset.n_test, or all observations)");
  smp->add_option("--checkpoint", checkpoint, "checkpoint to sample from (default: checkpoints/final.ckpt)");
  smp->add_flag("--posterior", posterior, "posterior samples for the stored observations");
  smp->add_option("--lambda", lambda, "likelihood weight for --posterior (default: last selected)");

  std::string recon, reference, eval_out;
  ev->add_option("-c,--config", common.config, "config of the run to evaluate");
  ev->add_option("-s,--set", common.overrides, "override a config field");
  ev->add_option("-o,--out", common.out, "run directory");
  ev->add_option("--recon", recon, "sample container to score (default: <run>/samples)");
  ev->add_option("--reference", reference, "reference container (default: <run>/data/test)");
  ev->add_option("--write", eval_out, "write the JSON result here (default: <run>/evaluation.json)");

  std::string run;
  pl->add_option("-c,--config", common.config, "config of the run to plot");
  pl->add_option("-s,--set", common.overrides, "override a config field");
  pl->add_option("-o,--out", common.out, "run directory");
  pl->add_option("--run", run, "run directory to plot without a config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*cor) return cmd_corrupt(common);
    if (*ini) return cmd_init_train(common);
    if (*em) return cmd_em_run(common, resume);
    if (*smp) return cmd_sample(common, n, checkpoint, posterior, lambda);
    if (*ev) return cmd_evaluate(common, recon, reference, eval_out);
    if (*pl) return cmd_plot(common, run);
  } catch (const Error& e) {
    return fail(e.category(), e.what());
  } catch (const fs::filesystem_error& e) {
    return fail("io", e.what());
  } catch (const json::exception& e) {
    return fail("format", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
