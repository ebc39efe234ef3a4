#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pointlap/errors.hpp"
#include "pointlap/param_store.hpp"
#include "pointlap/tensor.hpp"

namespace pointlap {

// Flat binary checkpoint. Byte layout (all integers and floats little-endian,
// documented in docs/formats.md):
//
//   bytes 0..7   magic "PLCKPT01"
//   u64          entry count
//   per entry:
//     u16        name length L
//     L bytes    name (UTF-8, no terminator)
//     u8         rank R
//     R x u64    dimensions
//     N x f64    row-major values, N = product of dimensions
//
// Values round-trip bit-exactly.
namespace checkpoint {

constexpr char kMagic[8] = {'P', 'L', 'C', 'K', 'P', 'T', '0', '1'};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

class Reader {
 public:
  Reader(const char* data, std::size_t size) : data_(data), size_(size) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(
        static_cast<unsigned char>(data_[pos_]) |
        (static_cast<unsigned char>(data_[pos_ + 1]) << 8));
    pos_ += 2;
    return v;
  }

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }

  double f64() {
    std::uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == size_; }

 private:
  void need(std::size_t n) {
    if (pos_ + n > size_) throw ParseError("checkpoint truncated");
  }

  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const ParamStore& store) {
  std::string out(kMagic, 8);
  detail::put_u64(out, store.entries().size());
  for (const auto& [name, e] : store.entries()) {
    if (name.size() > 0xffff) throw IoError("parameter name too long: " + name);
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(e.tensor.rank()));
    for (auto dim : e.tensor.shape()) detail::put_u64(out, dim);
    for (double v : e.tensor.values()) detail::put_f64(out, v);
  }
  return out;
}

inline std::map<std::string, Tensor> decode(const std::string& bytes) {
  detail::Reader r(bytes.data(), bytes.size());
  if (r.bytes(8) != std::string(kMagic, 8)) {
    throw ParseError("not a checkpoint file (bad magic)");
  }
  const std::uint64_t count = r.u64();
  std::map<std::string, Tensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    std::string name = r.bytes(name_len);
    const std::uint8_t rank = r.u8();
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (auto& dim : shape) {
      dim = static_cast<std::size_t>(r.u64());
      numel *= dim;
    }
    std::vector<double> values(numel);
    for (auto& v : values) v = r.f64();
    out.emplace(std::move(name), Tensor::from_data(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw ParseError("checkpoint has trailing bytes");
  return out;
}

inline void save(const ParamStore& store, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  const std::string bytes = encode(store);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

inline std::map<std::string, Tensor> load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

inline void load_into(ParamStore& store, const std::string& path) {
  store.load_values(load(path));
}

}  // namespace checkpoint
}  // namespace pointlap
