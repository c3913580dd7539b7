// SPDX-License-Identifier: Apache-2.0

#include "sitsdeco/ingest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "sitsdeco/schema.hpp"

namespace sitsdeco {
namespace {

using std::chrono::day;
using std::chrono::month;
using std::chrono::sys_days;
using std::chrono::year;
using std::chrono::year_month_day;

constexpr year_month_day kEpoch{year{2018}, month{9}, day{16}};

// Drops descending steps furthest from any ascending date until the counts fit.
std::vector<std::size_t> trim_descending(std::span<const int> asc, std::span<const int> desc) {
  std::vector<std::size_t> keep(desc.size());
  std::iota(keep.begin(), keep.end(), 0);
  while (keep.size() > asc.size()) {
    std::size_t worst = 0;
    int worst_gap = -1;
    for (std::size_t k = 0; k < keep.size(); ++k) {
      int gap = std::numeric_limits<int>::max();
      for (int a : asc) gap = std::min(gap, std::abs(a - desc[keep[k]]));
      if (gap >= worst_gap) {
        worst_gap = gap;
        worst = k;
      }
    }
    keep.erase(keep.begin() + static_cast<std::ptrdiff_t>(worst));
  }
  return keep;
}

}  // namespace

std::uint64_t make_source_id(std::size_t patch_index, std::size_t pixel_index) {
  return (static_cast<std::uint64_t>(patch_index) << 32) | static_cast<std::uint64_t>(pixel_index);
}

RawPatch scale_raw(RawPatch patch) {
  if (patch.scaled) return patch;
  for (auto& v : patch.s2.data) v *= 1.0f / 10000.0f;
  for (auto& v : patch.s1_asc.data) v *= 0.1f;
  for (auto& v : patch.s1_desc.data) v *= 0.1f;
  patch.scaled = true;
  return patch;
}

CloudScore cloud_score_ndsi(std::span<const float> s2_step, const CloudConfig& cfg) {
  const double green = s2_step[cfg.green_band];
  const double swir1 = s2_step[cfg.swir1_band];
  const double denom = green + swir1;
  if (denom == 0.0) return {0.0, false, true};
  const double ndsi = (green - swir1) / denom;
  return {ndsi, ndsi <= cfg.clear_threshold, false};
}

std::vector<Observation> select_clearest(std::span<const Observation> series, std::size_t k,
                                         const CloudConfig& cfg) {
  if (series.size() <= k) return {series.begin(), series.end()};
  std::vector<std::size_t> order(series.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> score(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) score[i] = cloud_score_ndsi(series[i].values, cfg).ndsi;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  std::vector<Observation> out;
  out.reserve(k);
  for (auto i : order) out.push_back(series[i]);
  return out;
}

std::vector<OrbitPair> pair_s1_orbits(std::span<const int> asc_days, std::span<const int> desc_days) {
  const std::size_t m = asc_days.size();
  const std::size_t n = desc_days.size();
  if (m == 0) throw ConfigError("pair_s1_orbits: empty ascending series");
  if (n == 0) throw ConfigError("pair_s1_orbits: empty descending series");
  if (m < n)
    throw ConfigError("pair_s1_orbits: " + std::to_string(n) + " descending steps but only " +
                      std::to_string(m) + " ascending partners");

  // cost[i][j]: best total for the first i descending steps using the first j
  // ascending steps, order preserving.
  constexpr long long kInf = std::numeric_limits<long long>::max() / 4;
  std::vector<long long> cost((n + 1) * (m + 1), kInf);
  auto at = [&](std::size_t i, std::size_t j) -> long long& { return cost[i * (m + 1) + j]; };
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = 0;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = i; j <= m; ++j) {
      const long long take = at(i - 1, j - 1) + std::abs(desc_days[i - 1] - asc_days[j - 1]);
      at(i, j) = std::min(at(i, j - 1), take);
    }
  }
  std::vector<OrbitPair> pairs(n);
  std::size_t j = m;
  for (std::size_t i = n; i > 0; --i) {
    // skipping when equal keeps the earlier ascending partner
    while (j > i && at(i, j - 1) == at(i, j)) --j;
    pairs[i - 1] = {j - 1, i - 1, desc_days[i - 1]};
    --j;
  }
  return pairs;
}

std::vector<Observation> pair_s1_orbits(std::span<const Observation> asc,
                                        std::span<const Observation> desc) {
  std::vector<int> a(asc.size()), d(desc.size());
  std::transform(asc.begin(), asc.end(), a.begin(), [](const auto& o) { return o.day; });
  std::transform(desc.begin(), desc.end(), d.begin(), [](const auto& o) { return o.day; });
  const auto pairs = pair_s1_orbits(a, d);
  std::vector<Observation> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    Observation o{p.day, {}};
    o.values.reserve(kS1Channels);
    o.values.insert(o.values.end(), asc[p.asc_index].values.begin(), asc[p.asc_index].values.end());
    o.values.insert(o.values.end(), desc[p.desc_index].values.begin(), desc[p.desc_index].values.end());
    out.push_back(std::move(o));
  }
  return out;
}

std::vector<PixelSeries> extract_pixels(const RawPatch& raw, std::size_t patch_index,
                                        const PreprocessConfig& cfg) {
  const RawPatch patch = raw.scaled ? raw : scale_raw(raw);
  const std::size_t hw = patch.height * patch.width;

  std::vector<OrbitPair> pairs;
  if (!patch.s1_asc_dates.empty() && !patch.s1_desc_dates.empty()) {
    const auto keep = trim_descending(patch.s1_asc_dates, patch.s1_desc_dates);
    std::vector<int> desc_days;
    for (auto k : keep) desc_days.push_back(patch.s1_desc_dates[k]);
    pairs = pair_s1_orbits(patch.s1_asc_dates, desc_days);
    for (auto& p : pairs) p.desc_index = keep[p.desc_index];
  }

  std::vector<PixelSeries> out(hw);
  std::vector<Observation> s2(patch.s2_dates.size());
  for (std::size_t y = 0; y < patch.height; ++y) {
    for (std::size_t x = 0; x < patch.width; ++x) {
      const std::size_t pix = y * patch.width + x;
      auto& ps = out[pix];
      for (std::size_t t = 0; t < s2.size(); ++t) {
        s2[t].day = patch.s2_dates[t];
        s2[t].values.resize(kS2Bands);
        for (std::size_t b = 0; b < kS2Bands; ++b) s2[t].values[b] = patch.s2.at(t, b, y, x);
      }
      ps.s2 = select_clearest(s2, cfg.max_s2_steps, cfg.cloud);
      ps.s2_clear.resize(ps.s2.size());
      for (std::size_t t = 0; t < ps.s2.size(); ++t)
        ps.s2_clear[t] = cloud_score_ndsi(ps.s2[t].values, cfg.cloud).clear ? 1 : 0;

      ps.s1.resize(pairs.size());
      for (std::size_t t = 0; t < pairs.size(); ++t) {
        auto& o = ps.s1[t];
        o.day = pairs[t].day;
        o.values.resize(kS1Channels);
        for (std::size_t c = 0; c < kS1OrbitChannels; ++c) {
          o.values[c] = patch.s1_asc.at(pairs[t].asc_index, c, y, x);
          o.values[kS1OrbitChannels + c] = patch.s1_desc.at(pairs[t].desc_index, c, y, x);
        }
      }
      ps.label = patch.labels.empty() ? 0 : patch.labels[pix];
      ps.tile_id = patch.tile_id;
      ps.latlon = {static_cast<float>(patch.lat), static_cast<float>(patch.lon)};
      ps.source_id = make_source_id(patch_index, pix);
      ps.s1_source_id = ps.source_id;
    }
  }
  return out;
}

int day_offset_from_yyyymmdd(int yyyymmdd) {
  const year_month_day ymd{year{yyyymmdd / 10000}, month{static_cast<unsigned>(yyyymmdd / 100 % 100)},
                           day{static_cast<unsigned>(yyyymmdd % 100)}};
  if (!ymd.ok()) throw ConfigError("invalid date " + std::to_string(yyyymmdd));
  return static_cast<int>((sys_days{ymd} - sys_days{kEpoch}).count());
}

int yyyymmdd_from_day_offset(int d) {
  const year_month_day ymd{sys_days{kEpoch} + std::chrono::days{d}};
  return static_cast<int>(ymd.year()) * 10000 + static_cast<int>(static_cast<unsigned>(ymd.month())) * 100 +
         static_cast<int>(static_cast<unsigned>(ymd.day()));
}

InMemoryDataset::InMemoryDataset(std::vector<RawPatch> patches) : patches_(std::move(patches)) {}

}  // namespace sitsdeco
