// SPDX-License-Identifier: Apache-2.0
//
// CKPT parameter files:
//   "CKPT", u32 version, u32 meta_count, meta_count x (string key, string value),
//   u32 entry_count, entry_count x (string name, u32 rank, rank x u32 extent,
//   u64 offset), u64 payload_count, payload_count x f32.
// Strings are u32 length + bytes. Offsets count f32 elements.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "efps/diffcore/tensor.hpp"
#include "efps/io/binary.hpp"

namespace efps::diff {

struct CheckpointEntry {
  std::string name;
  std::vector<int> shape;
  std::uint64_t offset = 0;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<CheckpointEntry> entries;
  std::vector<float> payload;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
Checkpoint make_checkpoint(const ParamList<T>& params, std::map<std::string, std::string> meta) {
  Checkpoint ck;
  ck.meta = std::move(meta);
  for (const auto& p : params) {
    CheckpointEntry e{p.name, p.tensor->shape, ck.payload.size()};
    for (const T v : p.tensor->data) ck.payload.push_back(static_cast<float>(v));
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

/// Copies checkpoint values into the parameter list; names and shapes must
/// match exactly.
template <typename T>
void restore_checkpoint(const Checkpoint& ck, ParamList<T>& params) {
  if (ck.entries.size() != params.size())
    throw Error("checkpoint has " + std::to_string(ck.entries.size()) + " tensors, model expects " +
                std::to_string(params.size()));
  for (auto& p : params) {
    const CheckpointEntry* e = ck.find(p.name);
    if (!e) throw Error("checkpoint is missing tensor " + p.name);
    if (e->shape != p.tensor->shape)
      throw Error("checkpoint tensor " + p.name + " has shape " + shape_str(e->shape) +
                  ", model expects " + shape_str(p.tensor->shape));
    for (std::size_t k = 0; k < p.tensor->size(); ++k)
      p.tensor->data[k] = static_cast<T>(ck.payload[e->offset + k]);
  }
}

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
  io::ByteWriter w;
  w.magic("CKPT");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.meta.size()));
  for (const auto& [k, v] : ck.meta) {
    w.string(k);
    w.string(v);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    w.string(e.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.shape.size()));
    for (int d : e.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put<std::uint64_t>(e.offset);
  }
  w.put<std::uint64_t>(ck.payload.size());
  w.array(ck.payload.data(), ck.payload.size());
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes, const std::string& origin = "<ckpt>") {
  io::ByteReader r(std::move(bytes), origin);
  r.expect_magic("CKPT");
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw Error(origin + ": unsupported checkpoint version");
  Checkpoint ck;
  const auto meta_count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string k = r.string();
    ck.meta[k] = r.string();
  }
  const auto entry_count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < entry_count; ++i) {
    CheckpointEntry e;
    e.name = r.string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw Error(origin + ": implausible tensor rank");
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<int>(r.get<std::uint32_t>()));
    e.offset = r.get<std::uint64_t>();
    ck.entries.push_back(std::move(e));
  }
  const auto count = r.get<std::uint64_t>();
  if (count * 4 != r.remaining()) throw Error(origin + ": payload size does not match header");
  ck.payload.resize(count);
  r.array(ck.payload.data(), count);
  for (const auto& e : ck.entries)
    if (e.offset + Tensor<float>::count(e.shape) > count)
      throw Error(origin + ": tensor " + e.name + " exceeds payload");
  return ck;
}

}  // namespace efps::diff
