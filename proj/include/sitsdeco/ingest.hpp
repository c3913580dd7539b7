// SPDX-License-Identifier: Apache-2.0
//
// Patch loading, preprocessing and the synthetic phenology generator.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sitsdeco {

inline constexpr std::size_t kS2Bands = 10;
inline constexpr std::size_t kS1OrbitChannels = 3;
inline constexpr std::size_t kS1Channels = 6;

/// Dense T x C x H x W float array.
struct Array4 {
  std::size_t t = 0, c = 0, h = 0, w = 0;
  std::vector<float> data;

  Array4() = default;
  Array4(std::size_t t_, std::size_t c_, std::size_t h_, std::size_t w_)
      : t(t_), c(c_), h(h_), w(w_), data(t_ * c_ * h_ * w_, 0.0f) {}

  float& at(std::size_t ti, std::size_t ci, std::size_t y, std::size_t x) {
    return data[((ti * c + ci) * h + y) * w + x];
  }
  float at(std::size_t ti, std::size_t ci, std::size_t y, std::size_t x) const {
    return data[((ti * c + ci) * h + y) * w + x];
  }
  bool operator==(const Array4&) const = default;
};

/// One patch as stored on disk. Dates are day offsets from 2018-09-16.
struct RawPatch {
  std::string id;
  std::size_t height = 0, width = 0;
  Array4 s2;       // T2 x 10 x H x W, reflectance DN (or scaled)
  Array4 s1_asc;   // T1a x 3 x H x W, backscatter (or scaled)
  Array4 s1_desc;  // T1d x 3 x H x W
  std::vector<int> s2_dates, s1_asc_dates, s1_desc_dates;
  std::vector<int> labels;  // H x W class ids
  int tile_id = 0;
  std::string tile_name;
  double lat = 0.0, lon = 0.0;
  int fold = 1;
  bool scaled = false;

  bool operator==(const RawPatch&) const = default;
};

struct Observation {
  int day = 0;
  std::vector<float> values;

  bool operator==(const Observation&) const = default;
};

/// A single pixel's preprocessed record.
struct PixelSeries {
  std::vector<Observation> s2;           // <= max_s2_steps, chronological
  std::vector<std::uint8_t> s2_clear;    // 1 = probably clear
  std::vector<Observation> s1;           // 6 channels per step
  int label = 0;
  int tile_id = 0;
  std::array<float, 2> latlon{0.0f, 0.0f};

  // provenance: unique source pixel of each view
  std::uint64_t source_id = 0;
  std::uint64_t s1_source_id = 0;
  std::optional<bool> discrim_match;

  bool operator==(const PixelSeries&) const = default;
};

std::uint64_t make_source_id(std::size_t patch_index, std::size_t pixel_index);

/// Multiplies S1 by 1/10 and S2 by 1/10,000. No-op if already scaled.
RawPatch scale_raw(RawPatch patch);

struct CloudScore {
  double ndsi = 0.0;
  bool clear = false;
  bool degenerate = false;  // zero denominator
};

struct CloudConfig {
  std::size_t green_band = 1;  // B3 in the B2..B12 band list
  std::size_t swir1_band = 8;  // B11
  double clear_threshold = -0.3;
};

/// NDSI = (green - swir1) / (green + swir1); clear iff NDSI <= threshold.
/// A zero denominator scores 0 and counts as maybe-cloud.
CloudScore cloud_score_ndsi(std::span<const float> s2_step, const CloudConfig& cfg = {});

/// Keeps the k steps with the lowest NDSI, re-sorted chronologically. Ties at
/// equal score go to the earlier step.
std::vector<Observation> select_clearest(std::span<const Observation> series, std::size_t k,
                                         const CloudConfig& cfg = {});

struct OrbitPair {
  std::size_t asc_index = 0;
  std::size_t desc_index = 0;
  int day = 0;  // descending day
};

/// Pairs every descending acquisition with a distinct ascending one,
/// minimising the summed |day difference|. Orders are preserved (an optimal
/// non-crossing assignment exists for sorted 1-D dates). Ties prefer the
/// earlier ascending step. Throws ConfigError if asc has fewer steps.
std::vector<OrbitPair> pair_s1_orbits(std::span<const int> asc_days, std::span<const int> desc_days);

/// Series form: output steps carry [ascVV, ascVH, ascRatio, descVV, descVH, descRatio].
std::vector<Observation> pair_s1_orbits(std::span<const Observation> asc,
                                        std::span<const Observation> desc);

struct PreprocessConfig {
  std::size_t max_s2_steps = 30;
  CloudConfig cloud;
};

/// Flattens a patch into per-pixel records (scaling first if needed). When
/// the patch has fewer ascending than descending acquisitions, the
/// descending steps furthest from any ascending date are dropped first.
std::vector<PixelSeries> extract_pixels(const RawPatch& patch, std::size_t patch_index,
                                        const PreprocessConfig& cfg = {});

/// Day offset from 2018-09-16 for a YYYYMMDD integer.
int day_offset_from_yyyymmdd(int yyyymmdd);
int yyyymmdd_from_day_offset(int day);

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthConfig {
  std::size_t class_count = 4;
  std::size_t patches = 20;
  std::uint64_t seed = 0;
  std::size_t size = 8;              // H = W
  std::size_t s2_steps = 40;         // acquisitions before clearest-selection
  std::size_t s1_steps = 24;         // per orbit
  double cloud_rate = 0.25;          // probability an S2 acquisition is cloudy
  std::size_t tiles = 4;
  std::vector<int> tile_day_shift;   // per tile phenology shift (days); empty = none
  std::vector<int> tile_date_offset; // per tile acquisition grid offset (days)
  double pixel_noise = 0.01;
  std::size_t parcels_per_patch = 4;
  int void_label = -1;               // >= 0 marks parcel borders with this label
};

/// Deterministic under `seed`. Each class owns a double-logistic greenness
/// curve g(t) = base + amp * (1/(1+e^{-(t-sos)/r}) - 1/(1+e^{-(t-eos)/r}));
/// S2 bands are soil + g(t) * vegetation response, S1 backscatter is linear in
/// g(t). Cloudy acquisitions replace S2 with bright high-NDSI values.
/// Returned patches are unscaled: S2 as reflectance x 10000, S1 in dB.
std::vector<RawPatch> synth_generate(const SynthConfig& cfg);

/// Noise-free greenness of `cls` at `day` under the generator's parameters.
double synth_greenness(std::size_t class_count, std::size_t cls, double day, int day_shift = 0);

// ---------------------------------------------------------------------------
// Datasets

/// Random-access patch store. Implementations are immutable once built.
class PatchSource {
 public:
  virtual ~PatchSource() = default;
  virtual std::size_t size() const = 0;
  virtual RawPatch load(std::size_t index) const = 0;
  virtual int fold(std::size_t index) const = 0;
  virtual int tile(std::size_t index) const = 0;
  virtual std::string id(std::size_t index) const = 0;
};

class InMemoryDataset final : public PatchSource {
 public:
  explicit InMemoryDataset(std::vector<RawPatch> patches);
  std::size_t size() const override { return patches_.size(); }
  RawPatch load(std::size_t index) const override { return patches_.at(index); }
  int fold(std::size_t index) const override { return patches_.at(index).fold; }
  int tile(std::size_t index) const override { return patches_.at(index).tile_id; }
  std::string id(std::size_t index) const override { return patches_.at(index).id; }
  const std::vector<RawPatch>& patches() const { return patches_; }

 private:
  std::vector<RawPatch> patches_;
};

/// Reads the PASTIS-R release layout:
///   metadata.geojson             features with ID_PATCH, TILE, Fold,
///                                dates-S2 / dates-S1A / dates-S1D (YYYYMMDD)
///   DATA_S2/S2_<id>.npy          T x 10 x H x W int16
///   DATA_S1A/S1A_<id>.npy        T x 3 x H x W float32
///   DATA_S1D/S1D_<id>.npy        T x 3 x H x W float32
///   ANNOTATIONS/TARGET_<id>.npy  3 x H x W (channel 0 = semantic class)
/// Tile ids are positions in the sorted list of distinct TILE names.
class PastisDataset final : public PatchSource {
 public:
  explicit PastisDataset(std::filesystem::path root);
  std::size_t size() const override { return entries_.size(); }
  RawPatch load(std::size_t index) const override;
  int fold(std::size_t index) const override { return entries_.at(index).fold; }
  int tile(std::size_t index) const override { return entries_.at(index).tile_id; }
  std::string id(std::size_t index) const override { return entries_.at(index).id; }
  const std::vector<std::string>& tile_names() const { return tile_names_; }

 private:
  struct Entry {
    std::string id;
    std::string tile_name;
    int tile_id = 0;
    int fold = 1;
    double lat = 0.0, lon = 0.0;
    std::vector<int> s2_dates, s1a_dates, s1d_dates;
  };
  std::filesystem::path root_;
  std::vector<Entry> entries_;
  std::vector<std::string> tile_names_;
};

/// Writes patches in the PASTIS-R layout (see PastisDataset).
void write_pastis_layout(const std::filesystem::path& root, std::span<const RawPatch> patches);

/// Inverse Lambert-93 (EPSG:2154) projection to WGS84 decimal degrees.
std::array<double, 2> lambert93_to_latlon(double x, double y);

}  // namespace sitsdeco
