#pragma once

// Binary checkpoint:
//   "EMDIFF" | u8 version | u64 n | n bytes of JSON (state scalars, network
//   config, run config) | u32 count | count x (u32 len, name, u64 n, n x f32)
//   | u64 FNV-1a of every preceding byte.
// Integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "emdiff/em.hpp"
#include "emdiff/error.hpp"
#include "emdiff/io.hpp"
#include "emdiff/json_io.hpp"
#include "emdiff/mlp.hpp"
#include "emdiff/trainer.hpp"

namespace emdiff {

inline constexpr char kCheckpointMagic[6] = {'E', 'M', 'D', 'I', 'F', 'F'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::string& bytes() noexcept { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view b) : b_(b) {}
  std::string_view take(std::size_t n) {
    if (n > b_.size() - pos_) throw FormatError("checkpoint is truncated");
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <class U>
  U uint() {
    auto s = take(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  std::string str() {
    auto n = uint<std::uint32_t>();
    return std::string(take(n));
  }
  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return b_.size() - pos_; }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

struct NamedArray {
  std::string name;
  std::vector<float> values;
};

/// Everything needed to continue a neural EM run.
struct Checkpoint {
  EmState em;
  TrainerState trainer;
};

inline std::string encode_checkpoint(const EmState& st, const TrainerState& tr) {
  json meta;
  json hist = json::array();
  for (double l : st.lambda_history) hist.push_back(jnum(l));
  json metrics = json::array();
  for (const auto& m : st.metrics) metrics.push_back(to_json(m));
  meta["state"] = {{"iteration", st.iteration},
                   {"phase", to_string(st.phase)},
                   {"seed", st.seed},
                   {"lambda_history", hist},
                   {"metrics", metrics},
                   {"ema_updates", tr.ema_updates},
                   {"ema_decay", jnum(tr.ema.decay)},
                   {"opt_step", tr.opt.step}};
  meta["net"] = to_json(tr.net.config());
  meta["config"] = st.config_json;
  const std::string text = meta.dump();

  std::vector<NamedArray> arrays;
  const auto names = tr.net.parameter_names();
  const auto values = tr.net.parameter_values();
  for (std::size_t i = 0; i < names.size(); ++i) arrays.push_back({"param/" + names[i], values[i]});
  if (tr.ema.shadow.size() != names.size()) throw PreconditionError("checkpoint: EMA shadow does not match network");
  for (std::size_t i = 0; i < names.size(); ++i) arrays.push_back({"ema/" + names[i], tr.ema.shadow[i]});
  if (!tr.opt.m.empty()) {
    if (tr.opt.m.size() != names.size() || tr.opt.v.size() != names.size()) {
      throw PreconditionError("checkpoint: optimizer state does not match network");
    }
    for (std::size_t i = 0; i < names.size(); ++i) arrays.push_back({"adam_m/" + names[i], tr.opt.m[i]});
    for (std::size_t i = 0; i < names.size(); ++i) arrays.push_back({"adam_v/" + names[i], tr.opt.v[i]});
  }

  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.uint(kCheckpointVersion);
  w.uint(static_cast<std::uint64_t>(text.size()));
  w.raw(text.data(), text.size());
  w.uint(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    w.str(a.name);
    w.uint(static_cast<std::uint64_t>(a.values.size()));
    for (float v : a.values) w.f32(v);
  }
  w.uint(fnv1a64(w.bytes()));
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < sizeof kCheckpointMagic + 1) throw FormatError("checkpoint is truncated");
  if (std::memcmp(r.take(sizeof kCheckpointMagic).data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const auto version = r.uint<std::uint8_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (reader version " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() < 8 + r.pos()) throw FormatError("checkpoint is truncated");
  {
    const std::size_t body = bytes.size() - 8;
    detail::ByteReader tail(bytes.substr(body));
    if (tail.uint<std::uint64_t>() != fnv1a64(bytes.substr(0, body))) {
      throw ChecksumError("checkpoint checksum mismatch (file is corrupted or truncated)");
    }
    bytes = bytes.substr(0, body);
  }
  detail::ByteReader br(bytes);
  br.take(sizeof kCheckpointMagic + 1);
  const auto text_len = br.uint<std::uint64_t>();
  if (text_len > br.remaining()) throw FormatError("checkpoint header length exceeds the file");
  json meta;
  try {
    meta = json::parse(br.take(static_cast<std::size_t>(text_len)));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  try {
    const auto& s = meta.at("state");
    ck.em.iteration = s.at("iteration").get<int>();
    ck.em.phase = phase_from_string(s.at("phase").get<std::string>());
    ck.em.seed = s.at("seed").get<std::uint64_t>();
    for (const auto& l : s.at("lambda_history")) ck.em.lambda_history.push_back(jdouble(l));
    for (const auto& m : s.at("metrics")) ck.em.metrics.push_back(metrics_from_json(m));
    ck.em.config_json = meta.at("config").get<std::string>();
    MlpConfig net;
    from_json(meta.at("net"), net);
    ck.trainer.net = MlpScoreNet(net, 0);
    ck.trainer.ema_updates = s.at("ema_updates").get<std::uint64_t>();
    ck.trainer.ema.decay = jdouble(s.at("ema_decay"));
    ck.trainer.opt.step = s.at("opt_step").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is incomplete: ") + e.what());
  }

  const auto count = br.uint<std::uint32_t>();
  std::vector<NamedArray> arrays;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = br.str();
    const auto n = br.uint<std::uint64_t>();
    if (n > br.remaining() / 4) throw FormatError("checkpoint array '" + a.name + "' exceeds the file");
    a.values.resize(static_cast<std::size_t>(n));
    for (auto& v : a.values) v = br.f32();
    arrays.push_back(std::move(a));
  }
  if (br.remaining() != 0) throw FormatError("checkpoint has trailing bytes");

  const auto names = ck.trainer.net.parameter_names();
  auto find = [&](const std::string& prefix, std::vector<std::vector<float>>& out, bool required) {
    out.clear();
    for (const auto& n : names) {
      auto it = std::find_if(arrays.begin(), arrays.end(), [&](const NamedArray& a) { return a.name == prefix + n; });
      if (it == arrays.end()) {
        if (required || !out.empty()) throw FormatError("checkpoint is missing array '" + prefix + n + "'");
        return;
      }
      out.push_back(it->values);
    }
  };
  std::vector<std::vector<float>> params;
  find("param/", params, true);
  ck.trainer.net.load_parameters(params);
  find("ema/", ck.trainer.ema.shadow, true);
  find("adam_m/", ck.trainer.opt.m, false);
  find("adam_v/", ck.trainer.opt.v, false);
  if (ck.trainer.opt.m.size() != ck.trainer.opt.v.size()) throw FormatError("checkpoint optimizer state is incomplete");
  for (std::size_t i = 0; i < ck.trainer.ema.shadow.size(); ++i) {
    if (ck.trainer.ema.shadow[i].size() != params[i].size()) throw FormatError("checkpoint EMA shape mismatch");
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const EmState& st, const TrainerState& tr) {
  write_file(path, encode_checkpoint(st, tr));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace emdiff
