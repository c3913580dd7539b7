// SPDX-License-Identifier: Apache-2.0

#include "sitsdeco/npy.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <regex>
#include <stdexcept>
#include <string>

namespace sitsdeco::npy {
namespace {

static_assert(std::endian::native == std::endian::little, "npy I/O assumes a little-endian host");

constexpr char kMagic[] = "\x93NUMPY";

std::string descr_of(DType t) {
  switch (t) {
    case DType::kFloat32: return "<f4";
    case DType::kFloat64: return "<f8";
    case DType::kInt16: return "<i2";
    case DType::kInt32: return "<i4";
    case DType::kInt64: return "<i8";
    case DType::kUInt8: return "|u1";
    case DType::kUInt16: return "<u2";
  }
  return "";
}

DType dtype_of(const std::string& descr, const std::filesystem::path& path) {
  if (descr == "<f4") return DType::kFloat32;
  if (descr == "<f8") return DType::kFloat64;
  if (descr == "<i2") return DType::kInt16;
  if (descr == "<i4") return DType::kInt32;
  if (descr == "<i8") return DType::kInt64;
  if (descr == "|u1" || descr == "<u1") return DType::kUInt8;
  if (descr == "<u2") return DType::kUInt16;
  throw std::runtime_error(path.string() + ": unsupported npy dtype '" + descr + "'");
}

std::size_t item_size(DType t) {
  switch (t) {
    case DType::kFloat32: return 4;
    case DType::kFloat64: return 8;
    case DType::kInt16: return 2;
    case DType::kInt32: return 4;
    case DType::kInt64: return 8;
    case DType::kUInt8: return 1;
    case DType::kUInt16: return 2;
  }
  return 0;
}

template <typename T>
void convert(const std::vector<char>& raw, std::vector<float>& out) {
  const std::size_t n = raw.size() / sizeof(T);
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
    out[i] = static_cast<float>(v);
  }
}

template <typename T>
void append_as(std::string& bytes, std::span<const float> data) {
  const std::size_t base = bytes.size();
  bytes.resize(base + data.size() * sizeof(T));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const T v = static_cast<T>(std::is_floating_point_v<T> ? data[i] : std::lround(data[i]));
    std::memcpy(bytes.data() + base + i * sizeof(T), &v, sizeof(T));
  }
}

}  // namespace

std::size_t Array::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Array read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[6];
  in.read(magic, 6);
  if (!in || std::memcmp(magic, kMagic, 6) != 0)
    throw std::runtime_error(path.string() + ": not an npy file");
  unsigned char version[2];
  in.read(reinterpret_cast<char*>(version), 2);
  std::uint32_t header_len = 0;
  if (version[0] == 1) {
    std::uint16_t len16 = 0;
    in.read(reinterpret_cast<char*>(&len16), 2);
    header_len = len16;
  } else {
    in.read(reinterpret_cast<char*>(&header_len), 4);
  }
  std::string header(header_len, '\0');
  in.read(header.data(), header_len);
  if (!in) throw std::runtime_error(path.string() + ": truncated npy header");

  std::smatch m;
  static const std::regex descr_re(R"('descr'\s*:\s*'([^']+)')");
  static const std::regex order_re(R"('fortran_order'\s*:\s*(True|False))");
  static const std::regex shape_re(R"('shape'\s*:\s*\(([^)]*)\))");
  if (!std::regex_search(header, m, descr_re)) throw std::runtime_error(path.string() + ": no descr");
  const DType dtype = dtype_of(m[1].str(), path);
  if (!std::regex_search(header, m, order_re) || m[1].str() == "True")
    throw std::runtime_error(path.string() + ": fortran-ordered arrays are not supported");
  if (!std::regex_search(header, m, shape_re)) throw std::runtime_error(path.string() + ": no shape");

  Array arr;
  const std::string dims = m[1].str();
  static const std::regex int_re(R"(\d+)");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), int_re); it != std::sregex_iterator(); ++it)
    arr.shape.push_back(static_cast<std::size_t>(std::stoull(it->str())));

  std::vector<char> raw(arr.size() * item_size(dtype));
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!in) throw std::runtime_error(path.string() + ": truncated npy data");
  switch (dtype) {
    case DType::kFloat32: convert<float>(raw, arr.data); break;
    case DType::kFloat64: convert<double>(raw, arr.data); break;
    case DType::kInt16: convert<std::int16_t>(raw, arr.data); break;
    case DType::kInt32: convert<std::int32_t>(raw, arr.data); break;
    case DType::kInt64: convert<std::int64_t>(raw, arr.data); break;
    case DType::kUInt8: convert<std::uint8_t>(raw, arr.data); break;
    case DType::kUInt16: convert<std::uint16_t>(raw, arr.data); break;
  }
  return arr;
}

void write(const std::filesystem::path& path, std::span<const std::size_t> shape,
           std::span<const float> data, DType dtype) {
  std::string dims;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    dims += std::to_string(shape[i]);
    if (shape.size() == 1 || i + 1 < shape.size()) dims += ",";
    if (i + 1 < shape.size()) dims += " ";
  }
  std::string header = "{'descr': '" + descr_of(dtype) + "', 'fortran_order': False, 'shape': (" +
                       dims + "), }";
  // pad so that magic + version + len + header is a multiple of 64
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');

  std::string bytes(kMagic, 6);
  bytes.push_back('\x01');
  bytes.push_back('\x00');
  const auto len = static_cast<std::uint16_t>(header.size());
  bytes.append(reinterpret_cast<const char*>(&len), 2);
  bytes += header;
  switch (dtype) {
    case DType::kFloat32: append_as<float>(bytes, data); break;
    case DType::kFloat64: append_as<double>(bytes, data); break;
    case DType::kInt16: append_as<std::int16_t>(bytes, data); break;
    case DType::kInt32: append_as<std::int32_t>(bytes, data); break;
    case DType::kInt64: append_as<std::int64_t>(bytes, data); break;
    case DType::kUInt8: append_as<std::uint8_t>(bytes, data); break;
    case DType::kUInt16: append_as<std::uint16_t>(bytes, data); break;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace sitsdeco::npy
