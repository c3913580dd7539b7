// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "sitsdeco/ingest.hpp"
#include "sitsdeco/npy.hpp"
#include "sitsdeco/schema.hpp"
#include "support.hpp"

using namespace sitsdeco;

namespace {

Observation s2_obs(int day, float green, float swir1) {
  Observation o{day, std::vector<float>(kS2Bands, 0.1f)};
  o.values[1] = green;
  o.values[8] = swir1;
  return o;
}

// Exhaustive minimum of sum |desc - asc| over injective assignments.
long long brute_force_pairing(const std::vector<int>& asc, const std::vector<int>& desc) {
  long long best = std::numeric_limits<long long>::max();
  std::vector<int> perm(asc.size());
  std::iota(perm.begin(), perm.end(), 0);
  do {
    long long c = 0;
    for (std::size_t i = 0; i < desc.size(); ++i) c += std::abs(desc[i] - asc[perm[i]]);
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST_CASE("scale_raw examples") {
  RawPatch p;
  p.s2 = Array4(1, 1, 1, 3);
  p.s2.data = {10000.0f, 0.0f, 2500.0f};
  p.s1_asc = Array4(1, 1, 1, 2);
  p.s1_asc.data = {-120.0f, 0.0f};
  const auto s = scale_raw(p);
  CHECK(s.s2.data[0] == doctest::Approx(1.0));
  CHECK(s.s2.data[1] == 0.0f);
  CHECK(s.s2.data[2] == doctest::Approx(0.25));
  CHECK(s.s1_asc.data[0] == doctest::Approx(-12.0));
  CHECK(s.s1_asc.data[1] == 0.0f);
  CHECK(s.scaled);
  CHECK(scale_raw(s) == s);
}

TEST_CASE("scale_raw is linear") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-5000.0f, 5000.0f);
  for (int trial = 0; trial < 100; ++trial) {
    const float a = u(rng), b = u(rng), k = u(rng) / 1000.0f;
    RawPatch p;
    p.s2 = Array4(1, 1, 1, 3);
    p.s2.data = {a, b, a + k * b};
    const auto s = scale_raw(p);
    CHECK(s.s2.data[2] == doctest::Approx(s.s2.data[0] + k * s.s2.data[1]).epsilon(1e-4));
  }
}

TEST_CASE("NDSI cloud score") {
  const std::vector<float> maybe = {0, 0.3f, 0, 0, 0, 0, 0, 0, 0.5f, 0};
  auto s = cloud_score_ndsi(maybe);
  CHECK(s.ndsi == doctest::Approx(-0.25));
  CHECK_FALSE(s.clear);

  const std::vector<float> clear = {0, 0.1f, 0, 0, 0, 0, 0, 0, 0.5f, 0};
  s = cloud_score_ndsi(clear);
  CHECK(s.ndsi == doctest::Approx(-0.6667).epsilon(1e-3));
  CHECK(s.clear);

  const std::vector<float> zero(10, 0.0f);
  s = cloud_score_ndsi(zero);
  CHECK(s.ndsi == 0.0);
  CHECK(s.degenerate);
  CHECK_FALSE(s.clear);
}

TEST_CASE("select_clearest matches a sort oracle") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> u(0.01f, 0.6f);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    const std::size_t k = 1 + rng() % 35;
    std::vector<Observation> series;
    for (std::size_t i = 0; i < n; ++i) series.push_back(s2_obs(static_cast<int>(3 * i), u(rng), u(rng)));
    const auto got = select_clearest(series, k);
    CHECK(got.size() == std::min(n, k));
    // oracle: k-th smallest score bounds every kept one from above
    std::vector<double> scores;
    for (const auto& o : series) scores.push_back(cloud_score_ndsi(o.values).ndsi);
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    const double kth = sorted[std::min(n, k) - 1];
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(cloud_score_ndsi(got[i].values).ndsi <= kth);
      if (i > 0) CHECK(got[i - 1].day < got[i].day);
    }
    double kept = 0, best = 0;
    for (const auto& o : got) kept += cloud_score_ndsi(o.values).ndsi;
    for (std::size_t i = 0; i < got.size(); ++i) best += sorted[i];
    CHECK(kept == doctest::Approx(best));
  }
}

TEST_CASE("select_clearest edge cases") {
  std::vector<Observation> ten;
  for (int i = 0; i < 10; ++i) ten.push_back(s2_obs(i, 0.1f * static_cast<float>(i + 1), 0.5f));
  CHECK(select_clearest(ten, 30) == ten);
  CHECK(select_clearest(ten, 10) == ten);
  CHECK(select_clearest(ten, 0).empty());

  std::vector<Observation> ties;
  for (int i = 0; i < 5; ++i) ties.push_back(s2_obs(i, 0.2f, 0.4f));
  const auto got = select_clearest(ties, 2);
  REQUIRE(got.size() == 2);
  CHECK(got[0].day == 0);
  CHECK(got[1].day == 1);
}

TEST_CASE("orbit pairing examples") {
  const std::vector<int> asc = {3, 9}, desc = {4, 10};
  const auto pairs = pair_s1_orbits(asc, desc);
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0].asc_index == 0);
  CHECK(pairs[1].asc_index == 1);
  CHECK(pairs[0].day == 4);
  CHECK(pairs[1].day == 10);

  const std::vector<int> same = {1, 5, 9};
  const auto id = pair_s1_orbits(same, same);
  for (std::size_t i = 0; i < id.size(); ++i) CHECK(id[i].asc_index == i);

  const std::vector<int> one = {5}, two = {4, 6};
  CHECK_THROWS_AS(pair_s1_orbits(one, two), ConfigError);
}

TEST_CASE("orbit pairing is optimal and injective") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t m = 1 + rng() % 7;
    const std::size_t n = 1 + rng() % m;
    std::vector<int> asc(m), desc(n);
    int d = 0;
    for (auto& a : asc) a = d += 1 + static_cast<int>(rng() % 9);
    d = static_cast<int>(rng() % 5);
    for (auto& x : desc) x = d += 1 + static_cast<int>(rng() % 12);
    const auto pairs = pair_s1_orbits(asc, desc);
    REQUIRE(pairs.size() == n);
    long long cost = 0;
    std::vector<int> used(m, 0);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(pairs[i].desc_index == i);
      CHECK(used[pairs[i].asc_index]++ == 0);
      cost += std::abs(desc[i] - asc[pairs[i].asc_index]);
    }
    CHECK(cost == brute_force_pairing(asc, desc));
  }
}

TEST_CASE("orbit pairing of series concatenates channels") {
  std::vector<Observation> asc = {{3, {1, 2, 3}}, {9, {4, 5, 6}}};
  std::vector<Observation> desc = {{10, {7, 8, 9}}};
  const auto out = pair_s1_orbits(asc, desc);
  REQUIRE(out.size() == 1);
  CHECK(out[0].day == 10);
  CHECK(out[0].values == std::vector<float>{4, 5, 6, 7, 8, 9});
}

TEST_CASE("date conversion") {
  CHECK(day_offset_from_yyyymmdd(20180916) == 0);
  CHECK(day_offset_from_yyyymmdd(20180917) == 1);
  CHECK(day_offset_from_yyyymmdd(20190916) == 365);
  CHECK(day_offset_from_yyyymmdd(20180901) == -15);
  for (int d = -30; d < 800; d += 7) CHECK(day_offset_from_yyyymmdd(yyyymmdd_from_day_offset(d)) == d);
  CHECK_THROWS_AS(day_offset_from_yyyymmdd(20180231), ConfigError);
}

TEST_CASE("synthetic generator is deterministic") {
  SynthConfig cfg;
  cfg.patches = 3;
  cfg.seed = 42;
  CHECK(synth_generate(cfg) == synth_generate(cfg));
  auto other = cfg;
  other.seed = 43;
  CHECK_FALSE(synth_generate(cfg) == synth_generate(other));
  CHECK_THROWS_AS(synth_generate(SynthConfig{.class_count = 1}), ConfigError);
}

TEST_CASE("synthetic folds and tiles") {
  SynthConfig cfg;
  cfg.patches = 20;
  const auto patches = synth_generate(cfg);
  std::vector<int> per_fold(6, 0);
  for (std::size_t p = 0; p < patches.size(); ++p) {
    CHECK(patches[p].tile_id == static_cast<int>(p % cfg.tiles));
    ++per_fold.at(static_cast<std::size_t>(patches[p].fold));
  }
  for (int f = 1; f <= 5; ++f) CHECK(per_fold[f] == 4);
}

TEST_CASE("cloud rate zero yields only clear acquisitions") {
  SynthConfig cfg;
  cfg.patches = 2;
  cfg.cloud_rate = 0.0;
  for (const auto& patch : synth_generate(cfg))
    for (const auto& px : extract_pixels(patch, 0))
      for (auto c : px.s2_clear) CHECK(c == 1);
}

TEST_CASE("clouds are scored as not clear") {
  SynthConfig cfg;
  cfg.patches = 2;
  cfg.cloud_rate = 1.0;
  PreprocessConfig pre;
  pre.max_s2_steps = 100;
  for (const auto& patch : synth_generate(cfg))
    for (const auto& px : extract_pixels(patch, 0, pre))
      for (auto c : px.s2_clear) CHECK(c == 0);
}

TEST_CASE("nearest-centroid separates synthetic classes") {
  SynthConfig cfg;
  cfg.class_count = 6;
  cfg.patches = 40;
  cfg.cloud_rate = 0.0;
  cfg.seed = 9;
  const auto patches = synth_generate(cfg);
  // feature: mean reflectance of every band in 12 monthly bins
  constexpr std::size_t kBins = 12;
  auto feature = [&](const RawPatch& p, std::size_t y, std::size_t x) {
    std::vector<double> f(kBins * kS2Bands, 0.0), n(kBins, 0.0);
    for (std::size_t t = 0; t < p.s2.t; ++t) {
      const auto bin = std::min<std::size_t>(kBins - 1, static_cast<std::size_t>(p.s2_dates[t]) * kBins / 366);
      n[bin] += 1;
      for (std::size_t b = 0; b < kS2Bands; ++b) f[bin * kS2Bands + b] += p.s2.at(t, b, y, x);
    }
    for (std::size_t i = 0; i < f.size(); ++i) f[i] /= std::max(1.0, n[i / kS2Bands]);
    return f;
  };
  std::vector<std::vector<double>> centroid(cfg.class_count, std::vector<double>(kBins * kS2Bands, 0.0));
  std::vector<double> count(cfg.class_count, 0.0);
  for (std::size_t p = 0; p < patches.size(); p += 2)
    for (std::size_t y = 0; y < cfg.size; ++y)
      for (std::size_t x = 0; x < cfg.size; ++x) {
        const auto c = static_cast<std::size_t>(patches[p].labels[y * cfg.size + x]);
        const auto f = feature(patches[p], y, x);
        for (std::size_t i = 0; i < f.size(); ++i) centroid[c][i] += f[i];
        count[c] += 1;
      }
  for (std::size_t c = 0; c < cfg.class_count; ++c)
    if (count[c] > 0)
      for (auto& v : centroid[c]) v /= count[c];
  std::size_t correct = 0, total = 0;
  for (std::size_t p = 1; p < patches.size(); p += 2)
    for (std::size_t y = 0; y < cfg.size; ++y)
      for (std::size_t x = 0; x < cfg.size; ++x) {
        const auto f = feature(patches[p], y, x);
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::max();
        for (std::size_t c = 0; c < cfg.class_count; ++c) {
          if (count[c] == 0) continue;
          double d = 0;
          for (std::size_t i = 0; i < f.size(); ++i) d += (f[i] - centroid[c][i]) * (f[i] - centroid[c][i]);
          if (d < best_d) best_d = d, best = c;
        }
        correct += static_cast<int>(best) == patches[p].labels[y * cfg.size + x];
        ++total;
      }
  CHECK(static_cast<double>(correct) / static_cast<double>(total) >= 0.95);
}

TEST_CASE("extract_pixels invariants") {
  SynthConfig cfg;
  cfg.patches = 1;
  cfg.s2_steps = 40;
  PreprocessConfig pre;
  pre.max_s2_steps = 12;
  const auto patch = synth_generate(cfg).front();
  const auto pixels = extract_pixels(patch, 7, pre);
  REQUIRE(pixels.size() == cfg.size * cfg.size);
  std::vector<std::uint64_t> ids;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const auto& px = pixels[i];
    CHECK(px.s2.size() == 12);
    CHECK(px.s2_clear.size() == 12);
    CHECK(px.s1.size() == cfg.s1_steps);
    for (std::size_t t = 1; t < px.s2.size(); ++t) CHECK(px.s2[t - 1].day < px.s2[t].day);
    for (const auto& o : px.s1) CHECK(o.values.size() == kS1Channels);
    CHECK(px.label == patch.labels[i]);
    CHECK(px.source_id == make_source_id(7, i));
    ids.push_back(px.source_id);
  }
  std::sort(ids.begin(), ids.end());
  CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
  // synthetic S1 is stored in dB, so scaled VV lies in (-4, 0)
  CHECK(pixels[0].s1[0].values[0] < 0.0f);
  CHECK(pixels[0].s1[0].values[0] > -4.0f);
}

TEST_CASE("extract_pixels drops unmatched descending steps") {
  SynthConfig cfg;
  cfg.patches = 1;
  auto patch = synth_generate(cfg).front();
  // keep only the first 10 ascending acquisitions
  Array4 asc(10, 3, patch.height, patch.width);
  std::copy_n(patch.s1_asc.data.begin(), asc.data.size(), asc.data.begin());
  patch.s1_asc = asc;
  patch.s1_asc_dates.resize(10);
  const auto pixels = extract_pixels(patch, 0);
  CHECK(pixels[0].s1.size() == 10);
  // the retained descending steps are the ones closest to the ascending dates
  for (const auto& o : pixels[0].s1) CHECK(o.day <= patch.s1_asc_dates.back() + 3 * 15);
}

TEST_CASE("npy round trip") {
  const auto dir = testsupport::temp_dir("npy");
  const std::vector<std::size_t> shape = {2, 3};
  const std::vector<float> data = {1, -2, 3, 4.5f, 0, 7};
  for (auto dt : {npy::DType::kFloat32, npy::DType::kFloat64, npy::DType::kInt32, npy::DType::kInt16}) {
    npy::write(dir / "a.npy", shape, data, dt);
    const auto a = npy::read(dir / "a.npy");
    CHECK(a.shape == shape);
    for (std::size_t i = 0; i < data.size(); ++i)
      CHECK(a.data[i] == (dt == npy::DType::kInt32 || dt == npy::DType::kInt16 ? std::round(data[i]) : data[i]));
  }
  CHECK_THROWS(npy::read(dir / "missing.npy"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("PASTIS layout round trip") {
  const auto dir = testsupport::temp_dir("pastis");
  SynthConfig cfg;
  cfg.patches = 6;
  cfg.tiles = 2;
  const auto patches = synth_generate(cfg);
  write_pastis_layout(dir, patches);
  PastisDataset ds(dir);
  REQUIRE(ds.size() == patches.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto loaded = ds.load(i);
    const auto& orig = patches[i];
    CHECK(loaded.id == orig.id);
    CHECK(ds.fold(i) == orig.fold);
    CHECK(ds.tile(i) == orig.tile_id);
    CHECK(loaded.s2 == orig.s2);
    CHECK(loaded.s1_asc == orig.s1_asc);
    CHECK(loaded.s1_desc == orig.s1_desc);
    CHECK(loaded.s2_dates == orig.s2_dates);
    CHECK(loaded.s1_asc_dates == orig.s1_asc_dates);
    CHECK(loaded.labels == orig.labels);
    CHECK(loaded.lat == doctest::Approx(orig.lat).epsilon(1e-4));
    CHECK(loaded.lon == doctest::Approx(orig.lon).epsilon(1e-4));
  }
  CHECK(ds.tile_names().size() == 2);
  CHECK_THROWS(PastisDataset(dir / "nowhere"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("Lambert-93 inverse projection") {
  // projection origin: 3 E, 46.5 N at (700000, 6600000)
  const auto o = lambert93_to_latlon(700000.0, 6600000.0);
  CHECK(o[0] == doctest::Approx(46.5).epsilon(1e-6));
  CHECK(o[1] == doctest::Approx(3.0).epsilon(1e-6));
  // Paris, Notre-Dame: about (652469, 6861681)
  const auto p = lambert93_to_latlon(652469.0, 6861681.0);
  CHECK(p[0] == doctest::Approx(48.853).epsilon(1e-3));
  CHECK(p[1] == doctest::Approx(2.349).epsilon(1e-3));
}
