#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "latent_inpaint/config.hpp"
#include "latent_inpaint/networks.hpp"
#include "latent_inpaint/wgan.hpp"

// Binary checkpoint layout (all integers little-endian):
//
//   "LIWG" | u32 version | u32 record count | records...
//   record: u64 byte length of the rest | u32 name length | name
//           | u8 dtype (0 f64, 1 u64, 2 utf-8 text) | u32 rank | u64 dims[rank]
//           | payload
//
// Records are written in a fixed order, so saving a loaded checkpoint
// reproduces the original bytes.

namespace latent_inpaint {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'L', 'I', 'W', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class RecordType : std::uint8_t { f64 = 0, u64 = 1, text = 2 };

struct Record {
  std::string name;
  RecordType type = RecordType::f64;
  Shape dims;
  std::vector<double> f64;
  std::vector<std::uint64_t> u64;
  std::string text;

  std::size_t count() const { return dims.empty() ? 0 : shape_numel(dims); }
  bool operator==(const Record&) const = default;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u32(std::uint32_t v) {
    for (int k = 0; k < 4; ++k) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  void u64(std::uint64_t v) {
    for (int k = 0; k < 8; ++k) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const std::string& s) { bytes.insert(bytes.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    const auto* p = take(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(p[k]) << (8 * k);
    return v;
  }
  std::uint64_t u64() {
    const auto* p = take(8);
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(p[k]) << (8 * k);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    const auto* p = take(n);
    return {reinterpret_cast<const char*>(p), n};
  }

  std::size_t remaining() const { return size_ - pos_; }
  std::size_t position() const { return pos_; }

 private:
  const std::uint8_t* take(std::size_t n) {
    if (n > remaining()) throw CheckpointError("checkpoint truncated");
    const auto* p = data_ + pos_;
    pos_ += n;
    return p;
  }

  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> encode_record(const Record& r) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(r.name.size()));
  w.raw(r.name);
  w.u8(static_cast<std::uint8_t>(r.type));
  w.u32(static_cast<std::uint32_t>(r.dims.size()));
  for (auto d : r.dims) w.u64(d);
  switch (r.type) {
    case RecordType::f64:
      if (r.f64.size() != r.count()) throw CheckpointError("record " + r.name + ": payload size mismatch");
      for (double v : r.f64) w.f64(v);
      break;
    case RecordType::u64:
      if (r.u64.size() != r.count()) throw CheckpointError("record " + r.name + ": payload size mismatch");
      for (auto v : r.u64) w.u64(v);
      break;
    case RecordType::text:
      if (r.text.size() != r.count()) throw CheckpointError("record " + r.name + ": payload size mismatch");
      w.raw(r.text);
      break;
  }
  return std::move(w.bytes);
}

inline Record decode_record(ByteReader& in) {
  const auto length = in.u64();
  if (length > in.remaining()) throw CheckpointError("checkpoint truncated");
  const auto start = in.position();
  Record r;
  r.name = in.raw(in.u32());
  const auto tag = in.u8();
  if (tag > 2) throw CheckpointError("record " + r.name + ": unknown dtype " + std::to_string(tag));
  r.type = static_cast<RecordType>(tag);
  const auto rank = in.u32();
  if (rank > 8) throw CheckpointError("record " + r.name + ": implausible rank");
  for (std::uint32_t k = 0; k < rank; ++k) r.dims.push_back(in.u64());
  const auto width = r.type == RecordType::text ? 1u : 8u;
  std::size_t count = 1;
  for (auto d : r.dims) {
    if (d != 0 && count > in.remaining() / d) throw CheckpointError("checkpoint truncated");
    count *= d;
  }
  if (r.dims.empty()) count = 0;
  if (count > in.remaining() / width) throw CheckpointError("checkpoint truncated");
  switch (r.type) {
    case RecordType::f64:
      r.f64.resize(count);
      for (auto& v : r.f64) v = in.f64();
      break;
    case RecordType::u64:
      r.u64.resize(count);
      for (auto& v : r.u64) v = in.u64();
      break;
    case RecordType::text:
      r.text = in.raw(count);
      break;
  }
  if (in.position() - start != length) throw CheckpointError("record " + r.name + ": length mismatch");
  return r;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_records(const std::vector<Record>& records) {
  detail::ByteWriter w;
  w.raw(std::string(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    const auto body = detail::encode_record(r);
    w.u64(body.size());
    w.bytes.insert(w.bytes.end(), body.begin(), body.end());
  }
  return std::move(w.bytes);
}

inline std::vector<Record> decode_records(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes.data(), bytes.size());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  in.raw(4);
  const auto version = in.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = in.u32();
  std::vector<Record> records;
  for (std::uint32_t k = 0; k < count; ++k) records.push_back(detail::decode_record(in));
  if (in.remaining() != 0) throw CheckpointError("trailing bytes after last record");
  return records;
}

/// Everything needed to continue a training run.
struct Checkpoint {
  NetworkConfig network;
  TrainConfig train;
  NamedTensors generator;
  NamedTensors critic;
  AdamState generator_opt;
  AdamState critic_opt;
  std::uint64_t iteration = 0;
  // Training randomness is a pure function of (seed, iteration, step).
  std::uint64_t rng_seed = 0;
};

namespace detail {

inline NamedTensors detached_copy(const NamedTensors& src) {
  NamedTensors out;
  for (const auto& [name, t] : src) {
    auto d = t.data();
    out.emplace_back(name, Tensor(t.shape(), std::vector<double>(d.begin(), d.end())));
  }
  return out;
}

inline void push_tensors(std::vector<Record>& out, const NamedTensors& params) {
  for (const auto& [name, t] : params) {
    auto d = t.data();
    out.push_back({name, RecordType::f64, t.shape(), {d.begin(), d.end()}, {}, {}});
  }
}

inline void push_adam(std::vector<Record>& out, const std::string& prefix, const AdamState& s) {
  out.push_back({prefix + ".t", RecordType::u64, {1}, {}, {s.t}, {}});
  out.push_back({prefix + ".slots", RecordType::u64, {1}, {}, {s.m.size()}, {}});
  for (std::size_t k = 0; k < s.m.size(); ++k) {
    out.push_back({prefix + ".m" + std::to_string(k), RecordType::f64, {s.m[k].size()}, s.m[k], {}, {}});
    out.push_back({prefix + ".v" + std::to_string(k), RecordType::f64, {s.v[k].size()}, s.v[k], {}, {}});
  }
}

class RecordCursor {
 public:
  explicit RecordCursor(const std::vector<Record>& r) : records_(r) {}

  const Record& next(const std::string& name, RecordType type) {
    if (pos_ >= records_.size()) throw CheckpointError("missing record " + name);
    const auto& r = records_[pos_++];
    if (r.name != name) throw CheckpointError("expected record " + name + ", found " + r.name);
    if (r.type != type) throw CheckpointError("record " + name + " has the wrong dtype");
    return r;
  }

  std::uint64_t scalar(const std::string& name) {
    const auto& r = next(name, RecordType::u64);
    if (r.u64.size() != 1) throw CheckpointError("record " + name + " must hold one value");
    return r.u64[0];
  }

  bool done() const { return pos_ == records_.size(); }

  void read_tensors(const NamedTensors& layout, NamedTensors& out) {
    for (const auto& [name, t] : layout) {
      const auto& r = next(name, RecordType::f64);
      if (r.dims != t.shape()) throw CheckpointError("record " + name + " has shape " + shape_str(r.dims));
      out.emplace_back(name, Tensor(r.dims, r.f64));
    }
  }

  AdamState read_adam(const std::string& prefix, const NamedTensors& layout) {
    AdamState s;
    s.t = scalar(prefix + ".t");
    const auto slots = scalar(prefix + ".slots");
    if (slots != layout.size()) throw CheckpointError(prefix + ": optimizer slots do not match parameters");
    for (std::size_t k = 0; k < slots; ++k) {
      const auto want = layout[k].second.numel();
      const auto& m = next(prefix + ".m" + std::to_string(k), RecordType::f64);
      const auto& v = next(prefix + ".v" + std::to_string(k), RecordType::f64);
      if (m.f64.size() != want || v.f64.size() != want) throw CheckpointError(prefix + ": slot size mismatch");
      s.m.push_back(m.f64);
      s.v.push_back(v.f64);
    }
    return s;
  }

 private:
  const std::vector<Record>& records_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Checkpoint snapshot(const TrainState& state, const TrainConfig& cfg) {
  return {state.generator.config(),
          cfg,
          detail::detached_copy(state.generator.named_parameters()),
          detail::detached_copy(state.critic.named_parameters()),
          state.generator_opt,
          state.critic_opt,
          state.iteration,
          cfg.seed};
}

/// Rebuilds an independent TrainState (no tensors shared with the checkpoint).
inline TrainState restore(const Checkpoint& ck) {
  auto state = make_train_state(ck.network, 0);
  assign_parameters(state.generator.named_parameters(), ck.generator);
  assign_parameters(state.critic.named_parameters(), ck.critic);
  state.generator_opt = ck.generator_opt;
  state.critic_opt = ck.critic_opt;
  state.iteration = ck.iteration;
  return state;
}

inline std::vector<Record> to_records(const Checkpoint& ck) {
  Json config{{"network", to_json(ck.network)}, {"train", to_json(ck.train)}};
  const auto text = config.dump();
  std::vector<Record> out;
  out.push_back({"config", RecordType::text, {text.size()}, {}, {}, text});
  out.push_back({"iteration", RecordType::u64, {1}, {}, {ck.iteration}, {}});
  out.push_back({"rng", RecordType::u64, {2}, {}, {ck.rng_seed, ck.iteration}, {}});
  detail::push_tensors(out, ck.generator);
  detail::push_tensors(out, ck.critic);
  detail::push_adam(out, "adam.generator", ck.generator_opt);
  detail::push_adam(out, "adam.critic", ck.critic_opt);
  return out;
}

inline Checkpoint from_records(const std::vector<Record>& records) {
  detail::RecordCursor cur(records);
  Checkpoint ck;
  const auto& cfg = cur.next("config", RecordType::text);
  try {
    const auto j = Json::parse(cfg.text);
    merge_json(j.at("network"), ck.network);
    merge_json(j.at("train"), ck.train);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint config record: ") + e.what());
  }
  ck.network.validate();
  ck.iteration = cur.scalar("iteration");
  const auto& rng = cur.next("rng", RecordType::u64);
  if (rng.u64.size() != 2 || rng.u64[1] != ck.iteration) throw CheckpointError("rng record is inconsistent");
  ck.rng_seed = rng.u64[0];

  // Parameter names and shapes follow from the stored architecture.
  const auto layout = init_params(ck.network, 0);
  const auto gen_layout = layout.generator.named_parameters();
  const auto critic_layout = layout.critic.named_parameters();
  cur.read_tensors(gen_layout, ck.generator);
  cur.read_tensors(critic_layout, ck.critic);
  ck.generator_opt = cur.read_adam("adam.generator", gen_layout);
  ck.critic_opt = cur.read_adam("adam.critic", critic_layout);
  if (!cur.done()) throw CheckpointError("unexpected extra records");
  return ck;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a temporary sibling and renames, so an interrupted save never
/// replaces a good checkpoint with a partial one.
inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_bytes(path, encode_records(to_records(ck)));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return from_records(decode_records(read_file_bytes(path)));
}

/// Generator weights only, for inpainting and sampling.
inline Generator load_generator(const std::filesystem::path& path) {
  const auto ck = load_checkpoint(path);
  return restore(ck).generator;
}

}  // namespace latent_inpaint
