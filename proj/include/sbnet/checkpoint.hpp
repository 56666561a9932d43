#pragma once

// SBNT checkpoint container:
//   "SBNT" | version u32
//   repeated: name_len u32 | name bytes | dtype u32 (0 = f32) | rank u32 |
//             dims u32 x rank | payload (f32 x prod(dims))
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbnet/nn.hpp"

namespace sbnet {

inline constexpr char kCheckpointMagic[4] = {'S', 'B', 'N', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 0;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                            std::to_string(pos_));
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  for (const auto& e : entries) {
    if (numel(e.shape) != e.values.size()) throw CheckpointError("entry '" + e.name + "' shape/data mismatch");
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put_u32(out, kDtypeF32);
    detail::put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : e.values) detail::put_f32(out, f);
  }
  return out;
}

inline std::vector<CheckpointEntry> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError("not an SBNT checkpoint (bad magic)");
  }
  detail::Reader in(bytes);
  in.raw(4, "magic");
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  std::vector<CheckpointEntry> entries;
  while (!in.done()) {
    CheckpointEntry e;
    const std::uint32_t name_len = in.u32("name length");
    e.name = in.raw(name_len, "name");
    const std::uint32_t dtype = in.u32("dtype");
    if (dtype != kDtypeF32) throw CheckpointError("tensor '" + e.name + "' has unsupported dtype " + std::to_string(dtype));
    const std::uint32_t rank = in.u32("rank");
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(in.u32("dims"));
    const std::string payload = in.raw(numel(e.shape) * 4, "payload");
    e.values.resize(numel(e.shape));
    for (std::size_t i = 0; i < e.values.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[4 * i + b])) << (8 * b);
      e.values[i] = std::bit_cast<float>(bits);
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

template <typename T>
std::vector<CheckpointEntry> snapshot(const ParamList<T>& params) {
  std::vector<CheckpointEntry> entries;
  for (const auto& p : params) {
    entries.push_back({p.name, p.tensor.shape(), std::vector<float>(p.tensor.data().begin(), p.tensor.data().end())});
  }
  return entries;
}

/// Copies stored values into the named tensors; every tensor must be present
/// with a matching shape.
template <typename T>
void restore(const std::vector<CheckpointEntry>& entries, ParamList<T>& params) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint is missing tensor '" + p.name + "'");
    if (it->second->shape != p.tensor.shape()) {
      throw CheckpointError("tensor '" + p.name + "' has shape " + to_string(it->second->shape) + ", expected " +
                            to_string(p.tensor.shape()));
    }
    auto dst = p.tensor.data();
    std::copy(it->second->values.begin(), it->second->values.end(), dst.begin());
  }
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamList<T>& params) {
  write_file(path, encode_checkpoint(snapshot(params)));
}

template <typename T>
void load_checkpoint(const std::string& path, ParamList<T>& params) {
  restore(decode_checkpoint(read_file(path)), params);
}

}  // namespace sbnet
