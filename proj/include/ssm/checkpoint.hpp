#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "ssm/config.hpp"
#include "ssm/model.hpp"
#include "ssm/optim.hpp"

namespace ssm {

// Little-endian binary container:
//   magic "SSMLAB\xB1\x0B" (8 bytes)
//   u32 version (currently 1)
//   u32 scalar bits (32 or 64)
//   u32 completed epochs
//   u64 training seed (per-epoch RNG streams are derived from seed + epoch,
//       so no separate generator state is stored)
//   u64 config length + canonical config text
//   u64 tensor count, then per tensor:
//     u64 name length + name, u32 ndim, i64 dims, raw scalar payload
// Tensors cover all trainable parameters, BN running statistics, and the
// optimizer momentum buffers (named "opt." + parameter path). Round-trip is
// bitwise lossless.

inline constexpr char kCheckpointMagic[8] = {'S', 'S', 'M', 'L', 'A', 'B', '\xB1', '\x0B'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw IoError("checkpoint: truncated file " + path);
  return v;
}

inline void write_str(std::ostream& out, const std::string& s) {
  write_le<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& in, const std::string& path) {
  auto len = read_le<std::uint64_t>(in, path);
  std::string s(len, '\0');
  if (len && !in.read(s.data(), static_cast<std::streamsize>(len)))
    throw IoError("checkpoint: truncated file " + path);
  return s;
}

template <typename Scalar>
void write_tensor(std::ostream& out, const std::string& name, const Shape& shape,
                  const Vec<Scalar>& data) {
  write_str(out, name);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) write_le<std::int64_t>(out, d);
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(sizeof(Scalar) * std::size_t(data.size())));
}

}  // namespace detail

template <typename Scalar>
void save_checkpoint(const std::string& path, const Model<Scalar>& model,
                     const SGDState<Scalar>& opt, const RunConfig& config, int epoch) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write " + path);
  out.write(kCheckpointMagic, 8);
  detail::write_le<std::uint32_t>(out, kCheckpointVersion);
  detail::write_le<std::uint32_t>(out, sizeof(Scalar) * 8);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(epoch));
  detail::write_le<std::uint64_t>(out, config.train.seed);
  detail::write_str(out, to_text(config));

  auto params = model.named_params();
  auto buffers = model.named_buffers();
  std::vector<std::pair<std::string, const Vec<Scalar>*>> velocities;
  for (auto& [name, p] : params) {
    auto it = opt.velocity.find(p.get());
    if (it != opt.velocity.end()) velocities.emplace_back("opt." + name, &it->second);
  }

  detail::write_le<std::uint64_t>(out, params.size() + buffers.size() + velocities.size());
  for (auto& [name, p] : params) detail::write_tensor(out, name, p->shape, p->data);
  for (auto& [name, p] : buffers) detail::write_tensor(out, name, p->shape, p->data);
  for (auto& [name, v] : velocities) detail::write_tensor(out, name, Shape{v->size()}, *v);
  if (!out) throw IoError("checkpoint: write failed for " + path);
}

// Header peek so callers can pick the scalar type before a full load.
struct CheckpointInfo {
  std::uint32_t version = 0;
  int scalar_bits = 0;
  int epoch = 0;
  std::uint64_t seed = 0;
  std::string config_text;
};

inline CheckpointInfo read_checkpoint_info(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  CheckpointInfo info;
  info.version = detail::read_le<std::uint32_t>(in, path);
  if (info.version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(info.version) + " in " +
                  path + " (expected " + std::to_string(kCheckpointVersion) + ")");
  info.scalar_bits = static_cast<int>(detail::read_le<std::uint32_t>(in, path));
  info.epoch = static_cast<int>(detail::read_le<std::uint32_t>(in, path));
  info.seed = detail::read_le<std::uint64_t>(in, path);
  info.config_text = detail::read_str(in, path);
  return info;
}

template <typename Scalar>
struct LoadedCheckpoint {
  RunConfig config;
  int epoch = 0;
  Model<Scalar> model;
  SGDState<Scalar> opt;
};

template <typename Scalar>
LoadedCheckpoint<Scalar> load_checkpoint(const std::string& path) {
  auto info = read_checkpoint_info(path);
  if (info.scalar_bits != int(sizeof(Scalar) * 8))
    throw IoError("checkpoint: " + path + " stores " + std::to_string(info.scalar_bits) +
                  "-bit scalars, loader expects " + std::to_string(sizeof(Scalar) * 8));

  LoadedCheckpoint<Scalar> ckpt;
  ckpt.config = parse_config_text(info.config_text);
  ckpt.epoch = info.epoch;
  ckpt.model = Model<Scalar>(ckpt.config.model);

  std::ifstream in(path, std::ios::binary);
  in.seekg(8 + 4 + 4 + 4 + 8);
  detail::read_str(in, path);  // config echo, already parsed

  std::map<std::string, TensorPtr<Scalar>> by_name;
  for (auto& [name, p] : ckpt.model.named_params()) by_name[name] = p;
  for (auto& [name, p] : ckpt.model.named_buffers()) by_name[name] = p;
  std::map<std::string, bool> loaded;
  for (auto& [name, p] : by_name) loaded[name] = false;

  auto count = detail::read_le<std::uint64_t>(in, path);
  for (std::uint64_t t = 0; t < count; ++t) {
    std::string name = detail::read_str(in, path);
    auto ndim = detail::read_le<std::uint32_t>(in, path);
    Shape shape;
    Index numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<Index>(detail::read_le<std::int64_t>(in, path)));
      numel *= shape.back();
    }
    Vec<Scalar> data(numel);
    if (!in.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(sizeof(Scalar) * std::size_t(numel))))
      throw IoError("checkpoint: truncated tensor '" + name + "' in " + path);

    if (name.rfind("opt.", 0) == 0) {
      auto it = by_name.find(name.substr(4));
      if (it == by_name.end())
        throw IoError("checkpoint: momentum buffer '" + name + "' has no matching parameter");
      if (numel != it->second->numel())
        throw IoError("checkpoint: momentum buffer '" + name + "' size mismatch");
      ckpt.opt.velocity[it->second.get()] = std::move(data);
    } else {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw IoError("checkpoint: unexpected tensor '" + name + "'");
      if (it->second->shape != shape)
        throw IoError("checkpoint: shape mismatch for '" + name + "'");
      it->second->data = std::move(data);
      loaded[name] = true;
    }
  }
  for (auto& [name, ok] : loaded)
    if (!ok) throw IoError("checkpoint: missing tensor '" + name + "' in " + path);
  return ckpt;
}

}  // namespace ssm
