// SPDX-License-Identifier: Apache-2.0
//
// Synthetic phenology generator. Per class a double-logistic greenness curve
// drives all S2 bands and both S1 orbits; clouds inject bright,
// high-NDSI acquisitions.

#include <algorithm>
#include <cmath>
#include <random>

#include "sitsdeco/ingest.hpp"
#include "sitsdeco/schema.hpp"

namespace sitsdeco {
namespace {

// Bare-soil reflectance and vegetation response per band (B2..B12).
constexpr std::array<double, kS2Bands> kSoil = {0.06, 0.09, 0.11, 0.13, 0.16,
                                                0.18, 0.20, 0.21, 0.26, 0.20};
constexpr std::array<double, kS2Bands> kVeg = {-0.03, -0.02, -0.06, 0.02, 0.12,
                                               0.20,  0.28,  0.30,  -0.04, -0.08};
constexpr std::array<double, kS2Bands> kCloud = {0.62, 0.60, 0.58, 0.57, 0.56,
                                                 0.55, 0.54, 0.53, 0.42, 0.35};
constexpr double kYear = 365.0;

struct Curve {
  double sos, eos, amp, rate;
};

Curve class_curve(std::size_t n, std::size_t c) {
  const double frac = n > 1 ? static_cast<double>(c) / static_cast<double>(n) : 0.0;
  // classes are spread over onset dates with a permuted season length/amplitude
  const double len_frac = static_cast<double>((c * 3 + 1) % n) / static_cast<double>(n);
  const double amp_frac = static_cast<double>((c * 7 + 2) % n) / static_cast<double>(n);
  const double sos = 30.0 + 200.0 * frac;
  return {sos, sos + 70.0 + 80.0 * len_frac, 0.45 + 0.4 * amp_frac, 10.0};
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double greenness(const Curve& c, double t) {
  return 0.1 + c.amp * (logistic((t - c.sos) / c.rate) - logistic((t - c.eos) / c.rate));
}

std::vector<int> acquisition_grid(std::size_t steps, int offset, double jitter, std::mt19937_64& rng) {
  std::vector<int> days;
  const double step = kYear / static_cast<double>(std::max<std::size_t>(steps, 1));
  std::uniform_real_distribution<double> u(-jitter, jitter);
  int prev = -1;
  for (std::size_t i = 0; i < steps; ++i) {
    int d = offset + static_cast<int>(std::lround(static_cast<double>(i) * step + 2.0 + u(rng)));
    d = std::max(d, prev + 1);
    days.push_back(d);
    prev = d;
  }
  return days;
}

}  // namespace

double synth_greenness(std::size_t class_count, std::size_t cls, double day, int day_shift) {
  return greenness(class_curve(class_count, cls), day - day_shift);
}

std::vector<RawPatch> synth_generate(const SynthConfig& cfg) {
  if (cfg.class_count < 2) throw ConfigError("synth_generate: class_count must be >= 2");
  if (cfg.size == 0 || cfg.tiles == 0) throw ConfigError("synth_generate: size and tiles must be > 0");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_class(0, cfg.class_count - 1);

  std::vector<RawPatch> patches;
  patches.reserve(cfg.patches);
  for (std::size_t p = 0; p < cfg.patches; ++p) {
    RawPatch patch;
    patch.id = std::to_string(10000 + p);
    patch.height = patch.width = cfg.size;
    const std::size_t tile = p % cfg.tiles;
    patch.tile_id = static_cast<int>(tile);
    patch.tile_name = (tile < 10 ? "T0" : "T") + std::to_string(tile);
    patch.fold = static_cast<int>((p / cfg.tiles) % 5) + 1;
    patch.lat = 44.0 + 1.5 * static_cast<double>(tile) + 0.05 * unif(rng);
    patch.lon = 0.5 + 2.0 * static_cast<double>(tile) + 0.05 * unif(rng);
    const int shift = tile < cfg.tile_day_shift.size() ? cfg.tile_day_shift[tile] : 0;
    const int date_off = tile < cfg.tile_date_offset.size() ? cfg.tile_date_offset[tile] : 0;

    patch.s2_dates = acquisition_grid(cfg.s2_steps, date_off, 2.0, rng);
    patch.s1_asc_dates = acquisition_grid(cfg.s1_steps, date_off, 0.0, rng);
    patch.s1_desc_dates = acquisition_grid(cfg.s1_steps, date_off + 2, 0.0, rng);

    // parcels: a g x g grid of rectangles
    const auto grid = static_cast<std::size_t>(
        std::max(1.0, std::round(std::sqrt(static_cast<double>(cfg.parcels_per_patch)))));
    std::vector<std::size_t> parcel_class(grid * grid);
    std::vector<Curve> parcel_curve(grid * grid);
    for (std::size_t k = 0; k < parcel_class.size(); ++k) {
      parcel_class[k] = pick_class(rng);
      Curve c = class_curve(cfg.class_count, parcel_class[k]);
      const double jit = 5.0 * gauss(rng);
      c.sos += jit + shift;
      c.eos += jit + shift;
      c.amp *= 1.0 + 0.05 * gauss(rng);
      parcel_curve[k] = c;
    }
    auto parcel_of = [&](std::size_t y, std::size_t x) {
      return (y * grid / cfg.size) * grid + x * grid / cfg.size;
    };

    patch.labels.assign(cfg.size * cfg.size, 0);
    for (std::size_t y = 0; y < cfg.size; ++y)
      for (std::size_t x = 0; x < cfg.size; ++x) {
        const bool border = cfg.void_label >= 0 && grid > 1 &&
                            ((y + 1) * grid % cfg.size == 0 || (x + 1) * grid % cfg.size == 0) &&
                            y + 1 < cfg.size && x + 1 < cfg.size;
        patch.labels[y * cfg.size + x] =
            border ? cfg.void_label : static_cast<int>(parcel_class[parcel_of(y, x)]);
      }

    patch.s2 = Array4(cfg.s2_steps, kS2Bands, cfg.size, cfg.size);
    for (std::size_t t = 0; t < cfg.s2_steps; ++t) {
      const bool cloudy = unif(rng) < cfg.cloud_rate;
      const double haze = 0.6 + 0.4 * unif(rng);
      for (std::size_t y = 0; y < cfg.size; ++y)
        for (std::size_t x = 0; x < cfg.size; ++x) {
          const double g = greenness(parcel_curve[parcel_of(y, x)], patch.s2_dates[t]);
          for (std::size_t b = 0; b < kS2Bands; ++b) {
            double r = kSoil[b] + kVeg[b] * g + cfg.pixel_noise * gauss(rng);
            if (cloudy) r = haze * kCloud[b] + (1.0 - haze) * r;
            patch.s2.at(t, b, y, x) = static_cast<float>(std::lround(std::clamp(r, 0.0, 1.5) * 10000.0));
          }
        }
    }

    auto fill_s1 = [&](Array4& arr, const std::vector<int>& dates, double bias) {
      arr = Array4(dates.size(), kS1OrbitChannels, cfg.size, cfg.size);
      for (std::size_t t = 0; t < dates.size(); ++t)
        for (std::size_t y = 0; y < cfg.size; ++y)
          for (std::size_t x = 0; x < cfg.size; ++x) {
            const double g = greenness(parcel_curve[parcel_of(y, x)], dates[t]);
            const double vv = -16.0 + 7.0 * g + bias + 0.4 * gauss(rng);
            const double vh = -24.0 + 9.0 * g + bias + 0.4 * gauss(rng);
            arr.at(t, 0, y, x) = static_cast<float>(vv);
            arr.at(t, 1, y, x) = static_cast<float>(vh);
            arr.at(t, 2, y, x) = static_cast<float>(vv - vh);
          }
    };
    fill_s1(patch.s1_asc, patch.s1_asc_dates, 0.0);
    fill_s1(patch.s1_desc, patch.s1_desc_dates, 0.5);
    patches.push_back(std::move(patch));
  }
  return patches;
}

}  // namespace sitsdeco
