#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "memscan/model.hpp"
#include "memscan/optim.hpp"

namespace memscan {

// Checkpoint container, version 1. Little-endian binary layout:
//   byte[8]  magic "MSCKPT1\n"
//   u32      format version (1)
//   u64      training step
//   string   config echo (u32 byte length + raw bytes, structured text)
//   string   random-generator state
//   u32      parameter count
//   each parameter, in the model's canonical order:
//     string   name
//     u8       trainable flag
//     u8       rank
//     i32[rank] dims
//     f64[numel] values
//   u8       optimizer-state-present flag
//   if present: i64 optimizer step, then per parameter (same order):
//     f64[numel] first moment, f64[numel] second moment
namespace ckpt_detail {

constexpr char kMagic[8] = {'M', 'S', 'C', 'K', 'P', 'T', '1', '\n'};
constexpr std::uint32_t kVersion = 1;

inline void write_raw(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename U>
void write_pod(std::ostream& os, U v) {
  write_raw(os, &v, sizeof v);
}

inline void write_str(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  write_raw(os, s.data(), s.size());
}

inline void read_raw(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw IoError("checkpoint: truncated file");
}

template <typename U>
U read_pod(std::istream& is) {
  U v;
  read_raw(is, &v, sizeof v);
  return v;
}

inline std::string read_str(std::istream& is) {
  std::uint32_t n = read_pod<std::uint32_t>(is);
  if (n > (1u << 26)) throw IoError("checkpoint: implausible string length");
  std::string s(n, '\0');
  read_raw(is, s.data(), n);
  return s;
}

template <typename T>
void write_tensor_values(std::ostream& os, const Tensor<T>& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    write_pod<double>(os, static_cast<double>(t[i]));
}

template <typename T>
void read_tensor_values(std::istream& is, Tensor<T>& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(read_pod<double>(is));
}

inline Shape read_shape(std::istream& is) {
  int rank = read_pod<std::uint8_t>(is);
  if (rank < 1 || rank > 4) throw IoError("checkpoint: parameter rank out of range");
  std::vector<int> dims;
  std::int64_t numel = 1;
  for (int i = 0; i < rank; ++i) {
    std::int32_t d = read_pod<std::int32_t>(is);
    if (d < 1 || numel * d > (std::int64_t{1} << 31)) throw IoError("checkpoint: bad dims");
    numel *= d;
    dims.push_back(d);
  }
  switch (rank) {
    case 1: return Shape{dims[0]};
    case 2: return Shape{dims[0], dims[1]};
    case 3: return Shape{dims[0], dims[1], dims[2]};
    default: return Shape{dims[0], dims[1], dims[2], dims[3]};
  }
}

}  // namespace ckpt_detail

struct CheckpointMeta {
  std::uint64_t step = 0;
  std::string config_json;
  std::string rng_state;
  bool has_optimizer = false;
};

// Reads only the header of a checkpoint — enough to learn the training step
// and the stored config echo (which names the architecture) without a model
// to load into. The optimizer flag lives after the parameter table, so the
// peek leaves has_optimizer = false; a full load_checkpoint fills it in.
inline CheckpointMeta peek_checkpoint_meta(const std::string& path) {
  namespace d = ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  d::read_raw(is, magic, sizeof magic);
  if (std::memcmp(magic, d::kMagic, sizeof magic) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  std::uint32_t version = d::read_pod<std::uint32_t>(is);
  if (version != d::kVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  CheckpointMeta meta;
  meta.step = d::read_pod<std::uint64_t>(is);
  meta.config_json = d::read_str(is);
  meta.rng_state = d::read_str(is);
  return meta;
}

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, const CheckpointMeta& meta,
                     const AdamState<T>* adam = nullptr) {
  namespace d = ckpt_detail;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  d::write_raw(os, d::kMagic, sizeof d::kMagic);
  d::write_pod<std::uint32_t>(os, d::kVersion);
  d::write_pod<std::uint64_t>(os, meta.step);
  d::write_str(os, meta.config_json);
  d::write_str(os, meta.rng_state);

  auto params = named_params(model);
  d::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    d::write_str(os, name);
    bool trainable = !(model.encoder_frozen && is_encoder_param(name));
    d::write_pod<std::uint8_t>(os, trainable ? 1 : 0);
    const Shape& s = tensor->shape();
    d::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(s.ndim()));
    for (int i = 0; i < s.ndim(); ++i) d::write_pod<std::int32_t>(os, s[i]);
    d::write_tensor_values(os, *tensor);
  }

  bool with_opt = adam != nullptr && !adam->empty();
  d::write_pod<std::uint8_t>(os, with_opt ? 1 : 0);
  if (with_opt) {
    if (adam->m.size() != params.size() || adam->v.size() != params.size())
      throw ConfigError("checkpoint: optimizer state size does not match parameter count");
    d::write_pod<std::int64_t>(os, adam->step);
    for (std::size_t i = 0; i < params.size(); ++i) {
      d::write_tensor_values(os, adam->m[i]);
      d::write_tensor_values(os, adam->v[i]);
    }
  }
  os.flush();
  if (!os) throw IoError("checkpoint: write to " + path + " failed");
}

// Loads a checkpoint into an already-constructed model of the same topology:
// the stored name set must match the model's parameters exactly, shape
// included. The frozen flag is reconstructed from the stored trainable bits.
// Optimizer moments are loaded into `adam` when present and requested.
template <typename T>
CheckpointMeta load_checkpoint(const std::string& path, Model<T>& model,
                               AdamState<T>* adam = nullptr) {
  namespace d = ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  d::read_raw(is, magic, sizeof magic);
  if (std::memcmp(magic, d::kMagic, sizeof magic) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  std::uint32_t version = d::read_pod<std::uint32_t>(is);
  if (version != d::kVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));

  CheckpointMeta meta;
  meta.step = d::read_pod<std::uint64_t>(is);
  meta.config_json = d::read_str(is);
  meta.rng_state = d::read_str(is);

  std::uint32_t count = d::read_pod<std::uint32_t>(is);
  auto params = named_params(model);
  if (count != params.size())
    throw ConfigError("checkpoint: file has " + std::to_string(count) + " parameters, model has " +
                      std::to_string(params.size()));

  std::map<std::string, std::pair<Tensor<T>, bool>> stored;
  std::map<std::string, Shape> stored_shapes;
  std::vector<std::string> order;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = d::read_str(is);
    bool trainable = d::read_pod<std::uint8_t>(is) != 0;
    Tensor<T> t(d::read_shape(is));
    d::read_tensor_values(is, t);
    stored_shapes.emplace(name, t.shape());
    if (!stored.emplace(name, std::make_pair(std::move(t), trainable)).second)
      throw ConfigError("checkpoint: duplicate parameter " + name);
    order.push_back(std::move(name));
  }

  bool all_encoder_frozen = true;
  bool any_encoder = false;
  for (auto& [name, tensor] : params) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ConfigError("checkpoint: missing parameter " + name);
    if (!(it->second.first.shape() == tensor->shape()))
      throw ConfigError("checkpoint: shape mismatch for " + name + ": file " +
                        it->second.first.shape().str() + " vs model " + tensor->shape().str());
    *tensor = std::move(it->second.first);
    if (is_encoder_param(name)) {
      any_encoder = true;
      all_encoder_frozen = all_encoder_frozen && !it->second.second;
    }
  }
  model.encoder_frozen = any_encoder && all_encoder_frozen;

  meta.has_optimizer = d::read_pod<std::uint8_t>(is) != 0;
  if (meta.has_optimizer) {
    std::int64_t opt_step = d::read_pod<std::int64_t>(is);
    // Moments appear in file parameter order; re-key by name so the loaded
    // state aligns with the model's canonical order.
    std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> moments;
    for (const std::string& name : order) {
      const Shape& s = stored_shapes.at(name);
      Tensor<T> m(s), v(s);
      d::read_tensor_values(is, m);
      d::read_tensor_values(is, v);
      moments.emplace(name, std::make_pair(std::move(m), std::move(v)));
    }
    if (adam != nullptr) {
      adam->step = opt_step;
      adam->m.clear();
      adam->v.clear();
      for (const auto& [name, tensor] : params) {
        auto& mv = moments.at(name);
        adam->m.push_back(std::move(mv.first));
        adam->v.push_back(std::move(mv.second));
      }
    }
  }
  return meta;
}

}  // namespace memscan
