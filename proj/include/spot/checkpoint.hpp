#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "spot/nn.hpp"

// Checkpoint layout (all integers little-endian):
//   "SPOTCKPT1"
//   u64 entry count
//   per entry: u32 name length, name bytes, u32 rank, u64 dims[rank]
//   per entry, in table order: float64 values, row-major

namespace spot {

inline constexpr std::string_view kCheckpointMagic = "SPOTCKPT1";

namespace detail {

template <typename T>
void put_le(std::string& buf, T value) {
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& buf, double v) { put_le(buf, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }

  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw LoadError(source_ + ": truncated file");
  }

  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path);
}

}  // namespace detail

inline std::string encode_checkpoint(const ParamList& params) {
  std::string buf(kCheckpointMagic);
  detail::put_le<std::uint64_t>(buf, params.size());
  for (const auto& p : params) {
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(p.name.size()));
    buf += p.name;
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) detail::put_le<std::uint64_t>(buf, d);
  }
  for (const auto& p : params)
    for (double v : p.tensor.data()) detail::put_f64(buf, v);
  return buf;
}

inline ParamList decode_checkpoint(const std::string& bytes, const std::string& source = "checkpoint") {
  detail::Reader r(bytes, source);
  if (r.get_bytes(kCheckpointMagic.size()) != kCheckpointMagic) throw LoadError(source + ": bad magic header");
  const auto count = r.get<std::uint64_t>();
  ParamList out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.get_bytes(name_len);
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    out.push_back({std::move(name), Tensor(shape)});
  }
  for (auto& p : out)
    for (double& v : p.tensor.mutable_data()) v = r.get_f64();
  if (!r.done()) throw LoadError(source + ": trailing bytes after the last array");
  return out;
}

inline void save_checkpoint(const std::string& path, const ParamList& params) {
  detail::write_file(path, encode_checkpoint(params));
}

inline ParamList read_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path), path); }

/// Copies stored arrays into `params` by name. Every parameter must be
/// present with a matching shape; extra stored arrays are an error too.
inline void load_into(const ParamList& stored, const ParamList& params) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& s : stored) by_name[s.name] = &s.tensor;
  if (by_name.size() != params.size()) {
    throw LoadError("checkpoint holds " + std::to_string(by_name.size()) + " arrays, model expects " +
                    std::to_string(params.size()));
  }
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw LoadError("checkpoint is missing " + p.name);
    if (it->second->shape() != p.tensor.shape()) {
      throw LoadError("checkpoint array " + p.name + " has shape " + shape_str(it->second->shape()) + ", expected " +
                      shape_str(p.tensor.shape()));
    }
    Tensor dst = p.tensor;
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

}  // namespace spot
