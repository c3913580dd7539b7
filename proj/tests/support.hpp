// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the unit tests.

#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "sitsdeco/ingest.hpp"
#include "sitsdeco/model.hpp"
#include "sitsdeco/schema.hpp"
#include "sitsdeco/sequence.hpp"

namespace testsupport {

using namespace sitsdeco;

inline const char* kS2Crop = R"(
name: s2_crop
elements: [{task: S2}, {data: S2}, {task: CROP}, {categorical: CROP}, eos]
)";

inline const char* kS2TileCrop = R"(
name: s2_tile_crop
elements: [{task: S2}, {data: S2}, {task: TILE}, {categorical: TILE}, {task: CROP}, {categorical: CROP}, eos]
)";

inline const char* kS2S1Crop = R"(
name: s2s1_crop
elements: [{task: S2}, {data: S2}, {task: S1}, {data: S1}, {task: CROP}, {categorical: CROP}, eos]
)";

inline const char* kDiscrim = R"(
name: s2s1_discrim
elements: [{task: S2}, {data: S2}, {task: S1}, {data: S1}, {task: DISCRIM}, {discrimination: S1}, eos]
)";

inline const char* kLatLonCrop = R"(
name: s2_latlon_crop
elements: [{task: S2}, {data: S2}, {task: LATLON}, {data: LATLON}, {task: CROP}, {categorical: CROP}, eos]
)";

/// Pixel with `n_s2` S2 steps at days 10, 20, ... and `n_s1` S1 steps at 5, 15, ...
inline PixelSeries make_pixel(std::size_t n_s2, std::size_t n_s1, int label, int tile, std::uint64_t seed = 1,
                              std::uint64_t source = 0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-0.5f, 0.5f);
  PixelSeries p;
  for (std::size_t i = 0; i < n_s2; ++i) {
    Observation o{static_cast<int>(10 * (i + 1)), {}};
    for (int c = 0; c < 10; ++c) o.values.push_back(u(rng));
    p.s2.push_back(o);
    p.s2_clear.push_back(i % 3 == 0 ? 0 : 1);
  }
  for (std::size_t i = 0; i < n_s1; ++i) {
    Observation o{static_cast<int>(10 * i + 5), {}};
    for (int c = 0; c < 6; ++c) o.values.push_back(u(rng));
    p.s1.push_back(o);
  }
  p.label = label;
  p.tile_id = tile;
  p.latlon = {44.5f, 1.5f};
  p.source_id = source;
  p.s1_source_id = source;
  return p;
}

inline ModelConfig small_config(const VocabLayout& layout, std::size_t d = 16, std::size_t heads = 4,
                                std::size_t blocks = 2) {
  ModelConfig c = ModelConfig::for_layout(layout);
  c.d_model = d;
  c.n_heads = heads;
  c.n_blocks = blocks;
  return c;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sitsdeco_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testsupport
