#pragma once

// Directory container: manifest.json plus one little-endian float32 file per
// named array. Used for datasets, observation sets and sample dumps.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "emdiff/data_eval.hpp"
#include "emdiff/error.hpp"
#include "emdiff/forward_ops.hpp"
#include "emdiff/io.hpp"
#include "emdiff/json_io.hpp"
#include "emdiff/samples.hpp"

namespace emdiff {

inline constexpr int kContainerVersion = 1;

struct Container {
  std::string kind;  // "dataset" | "observations" | "samples"
  json meta = json::object();
  std::map<std::string, std::vector<float>> arrays;
};

inline std::string encode_f32(std::span<const float> v) {
  std::string out(v.size() * 4, '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(v[i]);
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xff);
  }
  return out;
}

inline std::vector<float> decode_f32(std::string_view s) {
  if (s.size() % 4 != 0) throw FormatError("float payload size is not a multiple of 4");
  std::vector<float> v(s.size() / 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i * 4 + b])) << (8 * b);
    v[i] = std::bit_cast<float>(u);
  }
  return v;
}

inline void write_container(const std::filesystem::path& dir, const Container& c) {
  std::filesystem::create_directories(dir);
  json arrays = json::object();
  for (const auto& [name, values] : c.arrays) {
    const std::string file = name + ".f32";
    write_file(dir / file, encode_f32(values));
    arrays[name] = {{"file", file}, {"count", values.size()}};
  }
  json m = {{"format", "emdiff-container"}, {"version", kContainerVersion}, {"kind", c.kind},
            {"meta", c.meta},               {"arrays", arrays}};
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

inline Container read_container(const std::filesystem::path& dir, const std::string& expected_kind = "") {
  const auto mpath = dir / "manifest.json";
  if (!std::filesystem::exists(mpath)) throw IoError("no container manifest at '" + mpath.string() + "'");
  json m;
  try {
    m = json::parse(read_file(mpath));
  } catch (const json::exception& e) {
    throw FormatError("container manifest '" + mpath.string() + "' is not valid JSON: " + e.what());
  }
  Container c;
  try {
    if (m.at("format") != "emdiff-container") throw FormatError("'" + mpath.string() + "' is not an emdiff container");
    if (m.at("version").get<int>() != kContainerVersion) {
      throw VersionError("container version " + m.at("version").dump() + " is not supported");
    }
    c.kind = m.at("kind").get<std::string>();
    c.meta = m.at("meta");
    for (auto it = m.at("arrays").begin(); it != m.at("arrays").end(); ++it) {
      auto v = decode_f32(read_file(dir / it.value().at("file").get<std::string>()));
      if (v.size() != it.value().at("count").get<std::size_t>()) {
        throw FormatError("array '" + it.key() + "' has " + std::to_string(v.size()) + " values, manifest says " +
                          it.value().at("count").dump());
      }
      c.arrays[it.key()] = std::move(v);
    }
  } catch (const json::exception& e) {
    throw FormatError("container manifest '" + mpath.string() + "' is incomplete: " + e.what());
  }
  if (!expected_kind.empty() && c.kind != expected_kind) {
    throw FormatError("'" + dir.string() + "' holds " + c.kind + ", expected " + expected_kind);
  }
  return c;
}

inline const std::vector<float>& container_array(const Container& c, const std::string& name) {
  auto it = c.arrays.find(name);
  if (it == c.arrays.end()) throw FormatError("container is missing array '" + name + "'");
  return it->second;
}

// ---------------------------------------------------------------------------

inline void save_samples(const std::filesystem::path& dir, const SampleSet& s, json meta = json::object()) {
  Container c;
  c.kind = "samples";
  meta["dim"] = s.dim;
  meta["n"] = s.size();
  c.meta = std::move(meta);
  c.arrays["values"] = s.values;
  write_container(dir, c);
}

/// Rows of any container kind: samples/dataset "values", observations "truth".
inline SampleSet load_rows(const std::filesystem::path& dir) {
  auto c = read_container(dir);
  const auto d = c.meta.at("dim").get<std::size_t>();
  const std::string key = c.kind == "observations" ? "truth" : "values";
  return SampleSet(d, container_array(c, key));
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  Container c;
  c.kind = "dataset";
  c.meta = {{"dataset_kind", ds.kind}, {"family", ds.family},     {"seed", ds.seed},
            {"split", ds.split},       {"height", ds.height},     {"width", ds.width},
            {"first_index", ds.first_index}, {"dim", ds.samples.dim}, {"n", ds.samples.size()}};
  c.arrays["values"] = ds.samples.values;
  write_container(dir, c);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  auto c = read_container(dir, "dataset");
  Dataset ds;
  try {
    ds.kind = c.meta.at("dataset_kind").get<std::string>();
    ds.family = c.meta.at("family").get<std::string>();
    ds.seed = c.meta.at("seed").get<std::uint64_t>();
    ds.split = c.meta.at("split").get<std::string>();
    ds.height = c.meta.at("height").get<std::size_t>();
    ds.width = c.meta.at("width").get<std::size_t>();
    ds.first_index = c.meta.at("first_index").get<std::size_t>();
    ds.samples = SampleSet(c.meta.at("dim").get<std::size_t>(), container_array(c, "values"));
  } catch (const json::exception& e) {
    throw FormatError("dataset manifest is incomplete: " + std::string(e.what()));
  }
  return ds;
}

/// Masks are stored per item (n x d of 0/1); other operators are rebuilt
/// from the spec. Observations are concatenated in item order.
inline void save_observations(const std::filesystem::path& dir, const ObservationSet& obs, bool include_truth = true) {
  Container c;
  c.kind = "observations";
  c.meta = {{"operator", to_json(obs.spec)}, {"sigma", obs.sigma}, {"seed", obs.seed},
            {"dim", obs.dim},                {"n", obs.size()},    {"has_truth", include_truth && obs.has_truth()}};
  std::vector<float> y, masks;
  std::uint64_t redraws = 0;
  for (const auto& it : obs.items) {
    redraws += it.op->redraws;
    y.insert(y.end(), it.y.begin(), it.y.end());
    if (obs.spec.kind == OpKind::mask) {
      for (auto k : it.op->keep_mask()) masks.push_back(k ? 1.0f : 0.0f);
    }
  }
  c.meta["mask_redraws"] = redraws;
  c.arrays["y"] = std::move(y);
  if (obs.spec.kind == OpKind::mask) c.arrays["mask"] = std::move(masks);
  if (include_truth && obs.has_truth()) c.arrays["truth"] = obs.truth.values;
  write_container(dir, c);
}

inline ObservationSet load_observations(const std::filesystem::path& dir) {
  auto c = read_container(dir, "observations");
  ObservationSet obs;
  std::size_t n = 0;
  try {
    obs.spec = operator_spec_from_json(c.meta.at("operator"));
    obs.sigma = c.meta.at("sigma").get<double>();
    obs.seed = c.meta.at("seed").get<std::uint64_t>();
    obs.dim = c.meta.at("dim").get<std::size_t>();
    n = c.meta.at("n").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError("observation manifest is incomplete: " + std::string(e.what()));
  }
  const auto& y = container_array(c, "y");
  std::size_t off = 0;
  std::shared_ptr<const ForwardOperator> shared;
  if (obs.spec.kind != OpKind::mask) shared = build_operator(obs.spec, obs.dim, obs.seed, 0);
  const std::vector<float>* masks = obs.spec.kind == OpKind::mask ? &container_array(c, "mask") : nullptr;
  if (masks && masks->size() != n * obs.dim) throw FormatError("mask array has the wrong size");
  for (std::size_t i = 0; i < n; ++i) {
    std::shared_ptr<const ForwardOperator> op = shared;
    if (masks) {
      std::vector<std::uint8_t> keep(obs.dim);
      for (std::size_t j = 0; j < obs.dim; ++j) keep[j] = (*masks)[i * obs.dim + j] != 0.0f;
      op = std::make_shared<ForwardOperator>(ForwardOperator::mask(std::move(keep)));
    }
    const auto m = op->output_dim();
    if (off + m > y.size()) throw FormatError("observation payload is shorter than the operators require");
    obs.items.push_back({std::vector<float>(y.begin() + static_cast<long>(off), y.begin() + static_cast<long>(off + m)), op});
    off += m;
  }
  if (off != y.size()) throw FormatError("observation payload has trailing values");
  if (c.arrays.count("truth")) obs.truth = SampleSet(obs.dim, c.arrays.at("truth"));
  return obs;
}

}  // namespace emdiff
