// SPDX-License-Identifier: Apache-2.0
//
// Minimal reader/writer for NumPy .npy files (format 1.0-3.0, C order).

#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace sitsdeco::npy {

enum class DType { kFloat32, kFloat64, kInt16, kInt32, kInt64, kUInt8, kUInt16 };

struct Array {
  std::vector<std::size_t> shape;
  std::vector<float> data;  // converted to float on read

  std::size_t size() const;
};

/// Little-endian, C-ordered arrays only. Throws std::runtime_error otherwise.
Array read(const std::filesystem::path& path);

void write(const std::filesystem::path& path, std::span<const std::size_t> shape,
           std::span<const float> data, DType dtype);

}  // namespace sitsdeco::npy
