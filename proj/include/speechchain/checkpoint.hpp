#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "speechchain/tensor.hpp"

namespace speechchain {

// Checkpoint container: named tensors plus a seed and a step counter, in a
// little-endian binary layout. Doubles are stored bit-for-bit, so a write
// followed by a read reproduces values exactly.
//
//   magic   8 bytes  "SCHKPT1\n"
//   seed    u64
//   step    u64
//   count   u64
//   entry*  u16 name length, name bytes, u8 rank, u64 dims[rank], f64 data
struct CheckpointEntry {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::vector<CheckpointEntry> entries;

  void add(std::string name, Tensor t) {
    entries.push_back({std::move(name), std::move(t)});
  }

  const Tensor* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e.tensor;
    return nullptr;
  }
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'S', 'C', 'H', 'K',
                                             'P', 'T', '1', '\n'};

inline void write_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, 8);
}

inline void write_u16(std::ostream& os, std::uint16_t v) {
  char buf[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(buf, 2);
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline std::uint16_t read_u16(std::istream& is) {
  unsigned char buf[2];
  is.read(reinterpret_cast<char*>(buf), 2);
  return static_cast<std::uint16_t>(buf[0] | (buf[1] << 8));
}

inline double read_f64(std::istream& is) {
  const std::uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt,
                            const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os.write(detail::kCheckpointMagic, 8);
  detail::write_u64(os, ckpt.seed);
  detail::write_u64(os, ckpt.step);
  detail::write_u64(os, ckpt.entries.size());
  for (const auto& e : ckpt.entries) {
    if (e.name.size() > 0xffff)
      throw std::invalid_argument("checkpoint entry name too long: " + e.name);
    detail::write_u16(os, static_cast<std::uint16_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    os.put(static_cast<char>(e.tensor.rank()));
    for (std::size_t d : e.tensor.shape) detail::write_u64(os, d);
    for (double v : e.tensor.data) detail::write_f64(os, v);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for read: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path.string());
  Checkpoint ckpt;
  ckpt.seed = detail::read_u64(is);
  ckpt.step = detail::read_u64(is);
  const std::uint64_t count = detail::read_u64(is);
  ckpt.entries.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = detail::read_u16(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const int rank = is.get();
    if (rank < 1 || rank > 2)
      throw std::runtime_error("corrupt checkpoint (bad rank): " +
                               path.string());
    Shape shape;
    for (int d = 0; d < rank; ++d)
      shape.push_back(static_cast<std::size_t>(detail::read_u64(is)));
    Tensor t(shape);
    for (double& v : t.data) v = detail::read_f64(is);
    if (!is)
      throw std::runtime_error("truncated checkpoint: " + path.string());
    ckpt.entries.push_back({std::move(name), std::move(t)});
  }
  return ckpt;
}

}  // namespace speechchain
