// tensor_io.hpp - QSIM tensor binary format.
//
// Layout: magic "QSIM", u32 version=1, u32 rank, u64 dims[rank],
// u8 precision tag, then little-endian 32-bit floats. This format is
// shared with checkpoint files; keep it stable.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "quantfuse/errors.hpp"
#include "quantfuse/tensor.hpp"

namespace qf {

namespace detail {

template <typename T>
inline void put_le(std::string& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
  }
}

template <typename T>
inline T get_le(const char* p) {
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  return static_cast<T>(v);
}

inline void put_f32(std::string& out, float f) {
  uint32_t u;
  std::memcpy(&u, &f, 4);
  put_le<uint32_t>(out, u);
}

inline float get_f32(const char* p) {
  const uint32_t u = get_le<uint32_t>(p);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace detail

inline constexpr uint32_t kTensorFormatVersion = 1;

inline std::string serialize_tensor(const Tensor& t) {
  std::string out;
  out.reserve(17 + 8 * t.shape.size() + 4 * t.data.size());
  out.append("QSIM", 4);
  detail::put_le<uint32_t>(out, kTensorFormatVersion);
  detail::put_le<uint32_t>(out, static_cast<uint32_t>(t.shape.size()));
  for (int64_t d : t.shape) detail::put_le<uint64_t>(out, static_cast<uint64_t>(d));
  out.push_back(static_cast<char>(t.precision));
  for (float f : t.data) detail::put_f32(out, f);
  return out;
}

// Parses one tensor starting at `offset`; advances `offset` past it.
inline Tensor parse_tensor(const std::string& buf, size_t& offset) {
  auto need = [&](size_t n) {
    if (offset + n > buf.size()) throw IoError("tensor blob truncated");
  };
  need(12);
  if (std::memcmp(buf.data() + offset, "QSIM", 4) != 0) {
    throw IoError("bad tensor magic (expected QSIM)");
  }
  const uint32_t ver = detail::get_le<uint32_t>(buf.data() + offset + 4);
  if (ver != kTensorFormatVersion) {
    throw IoError("unsupported tensor format version " + std::to_string(ver));
  }
  const uint32_t rank = detail::get_le<uint32_t>(buf.data() + offset + 8);
  offset += 12;
  need(8 * rank + 1);
  std::vector<int64_t> shape(rank);
  int64_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<int64_t>(detail::get_le<uint64_t>(buf.data() + offset));
    offset += 8;
    n *= shape[i];
  }
  const auto prec = static_cast<Precision>(static_cast<unsigned char>(buf[offset]));
  offset += 1;
  need(4 * static_cast<size_t>(n));
  std::vector<float> data(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    data[static_cast<size_t>(i)] = detail::get_f32(buf.data() + offset);
    offset += 4;
  }
  return Tensor(std::move(shape), std::move(data), prec);
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  write_file(path, serialize_tensor(t));
}

inline Tensor load_tensor(const std::string& path) {
  const std::string buf = read_file(path);
  size_t off = 0;
  Tensor t = parse_tensor(buf, off);
  if (off != buf.size()) throw IoError("trailing bytes in tensor file " + path);
  return t;
}

}  // namespace qf
