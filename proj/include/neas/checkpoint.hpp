#pragma once

// Little-endian binary checkpoint of parameter blocks:
//   header  : magic "NEASCKPT" (8 bytes), u32 version, u32 block count
//   per block: u32 kind, i32 layer, i32 op id, u64 steps,
//              u32 tensor count, then per tensor
//                u32 rank, i32 dims[rank], f64 weights[], f64 velocity[]
//              u32 bn count, then per bn
//                u32 channels, f64 mean[], f64 var[]

#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "neas/errors.hpp"
#include "neas/netcore.hpp"

namespace neas {

inline constexpr char kCheckpointMagic[8] = {'N', 'E', 'A', 'S',
                                             'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace le {
void write_u32(std::ostream& os, std::uint32_t v);
void write_i32(std::ostream& os, std::int32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
std::uint32_t read_u32(std::istream& is);
std::int32_t read_i32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
}  // namespace le

template <typename T>
void write_checkpoint(std::ostream& os,
                      std::span<const ParamBlock<T>* const> blocks) {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  le::write_u32(os, kCheckpointVersion);
  le::write_u32(os, static_cast<std::uint32_t>(blocks.size()));
  for (const ParamBlock<T>* b : blocks) {
    le::write_u32(os, static_cast<std::uint32_t>(b->kind));
    le::write_i32(os, b->layer);
    le::write_i32(os, b->op_id);
    le::write_u64(os, b->steps);
    le::write_u32(os, static_cast<std::uint32_t>(b->weights.size()));
    for (std::size_t t = 0; t < b->weights.size(); ++t) {
      le::write_u32(os, static_cast<std::uint32_t>(b->shapes[t].size()));
      for (int d : b->shapes[t]) le::write_i32(os, d);
      for (Eigen::Index i = 0; i < b->weights[t].size(); ++i) {
        le::write_f64(os, static_cast<double>(b->weights[t][i]));
      }
      for (Eigen::Index i = 0; i < b->velocity[t].size(); ++i) {
        le::write_f64(os, static_cast<double>(b->velocity[t][i]));
      }
    }
    le::write_u32(os, static_cast<std::uint32_t>(b->bn.size()));
    for (const auto& s : b->bn) {
      le::write_u32(os, static_cast<std::uint32_t>(s.mean.size()));
      for (Eigen::Index i = 0; i < s.mean.size(); ++i) {
        le::write_f64(os, static_cast<double>(s.mean[i]));
      }
      for (Eigen::Index i = 0; i < s.var.size(); ++i) {
        le::write_f64(os, static_cast<double>(s.var[i]));
      }
    }
  }
  if (!os) throw Error("checkpoint write failed");
}

/// Loads into already-constructed blocks; layer ids, op ids and every shape
/// must match exactly.
template <typename T>
void read_checkpoint(std::istream& is, std::span<ParamBlock<T>* const> blocks) {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::string(magic, 8) != std::string(kCheckpointMagic, 8)) {
    throw InputError("not a checkpoint file (bad magic)");
  }
  const auto version = le::read_u32(is);
  if (version != kCheckpointVersion) {
    throw InputError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = le::read_u32(is);
  if (count != blocks.size()) {
    throw InputError("checkpoint holds " + std::to_string(count) +
                     " blocks, network has " + std::to_string(blocks.size()));
  }
  for (ParamBlock<T>* b : blocks) {
    const auto kind = le::read_u32(is);
    const auto layer = le::read_i32(is);
    const auto op = le::read_i32(is);
    if (kind != static_cast<std::uint32_t>(b->kind) || layer != b->layer ||
        op != b->op_id) {
      throw InputError("checkpoint block (layer " + std::to_string(layer) +
                       ", op " + std::to_string(op) +
                       ") does not match network block (layer " +
                       std::to_string(b->layer) + ", op " +
                       std::to_string(b->op_id) + ")");
    }
    b->steps = le::read_u64(is);
    if (le::read_u32(is) != b->weights.size()) {
      throw InputError("checkpoint tensor count mismatch");
    }
    for (std::size_t t = 0; t < b->weights.size(); ++t) {
      const auto rank = le::read_u32(is);
      std::vector<int> dims(rank);
      for (auto& d : dims) d = le::read_i32(is);
      if (dims != b->shapes[t]) throw InputError("checkpoint shape mismatch");
      for (Eigen::Index i = 0; i < b->weights[t].size(); ++i) {
        b->weights[t][i] = static_cast<T>(le::read_f64(is));
      }
      for (Eigen::Index i = 0; i < b->velocity[t].size(); ++i) {
        b->velocity[t][i] = static_cast<T>(le::read_f64(is));
      }
      b->grads[t].setZero();
    }
    if (le::read_u32(is) != b->bn.size()) {
      throw InputError("checkpoint batch-norm count mismatch");
    }
    for (auto& s : b->bn) {
      if (le::read_u32(is) != s.mean.size()) {
        throw InputError("checkpoint batch-norm width mismatch");
      }
      for (Eigen::Index i = 0; i < s.mean.size(); ++i) {
        s.mean[i] = static_cast<T>(le::read_f64(is));
      }
      for (Eigen::Index i = 0; i < s.var.size(); ++i) {
        s.var[i] = static_cast<T>(le::read_f64(is));
      }
    }
  }
  if (!is) throw InputError("truncated checkpoint");
}

}  // namespace neas
