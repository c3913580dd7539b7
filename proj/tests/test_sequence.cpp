// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "sitsdeco/sequence.hpp"
#include "support.hpp"

using namespace sitsdeco;
using testsupport::make_pixel;

namespace {

const VocabLayout& layout() {
  static const VocabLayout l = VocabLayout::pastis_default();
  return l;
}

InMemoryDataset tiny_dataset(std::size_t patches, std::size_t size, std::uint64_t seed = 1) {
  SynthConfig cfg;
  cfg.patches = patches;
  cfg.size = size;
  cfg.s2_steps = 6;
  cfg.s1_steps = 4;
  cfg.seed = seed;
  return InMemoryDataset(synth_generate(cfg));
}

std::vector<std::size_t> all_indices(const PatchSource& d) {
  std::vector<std::size_t> v(d.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

SampleStreamConfig quiet_stream(std::size_t buffer, std::size_t workers = 1) {
  SampleStreamConfig c;
  c.patch_buffer = buffer;
  c.workers = workers;
  c.dropout_enabled = false;
  return c;
}

}  // namespace

TEST_CASE("S2 -> Crop with three steps") {
  const auto t = parse_task_template(testsupport::kS2Crop);
  const auto px = make_pixel(3, 0, 5, 0);
  const auto seq = compile_sequence(t, px, layout(), 7);
  REQUIRE(seq.size() == 7);
  CHECK(seq.length == 7);
  CHECK(seq.cls_weights == std::vector<float>{0, 0, 0, 0, 0, 1, 0});
  CHECK(seq.reg_weights == std::vector<float>(7, 0.0f));
  CHECK(seq.tokens[0].discrete_id == static_cast<int>(layout().symbol_id(Symbol::kTaskS2)));
  CHECK(seq.tokens[4].discrete_id == static_cast<int>(layout().symbol_id(Symbol::kTaskCrop)));
  CHECK(seq.tokens[5].discrete_id == static_cast<int>(layout().categorical_id("CROP", 5)));
  CHECK(seq.tokens[6].discrete_id == static_cast<int>(layout().symbol_id(Symbol::kEos)));
  for (int i = 1; i <= 3; ++i) {
    const auto& tok = seq.tokens[static_cast<std::size_t>(i)];
    CHECK(tok.kind == TokenKind::kContinuous);
    CHECK(tok.discrete_id < 0);
    CHECK(tok.day_index == px.s2[static_cast<std::size_t>(i - 1)].day);
    // values land in the S2 slice, zeros elsewhere
    for (std::size_t c = 0; c < 10; ++c) CHECK(tok.continuous[c] == px.s2[static_cast<std::size_t>(i - 1)].values[c]);
    for (std::size_t c = 10; c < 18; ++c) CHECK(tok.continuous[c] == 0.0f);
  }
  // symbolic tokens use their sequence position as the day index
  CHECK(seq.tokens[4].day_index == 4);
}

TEST_CASE("chained tile + crop marks two targets") {
  const auto t = parse_task_template(testsupport::kS2TileCrop);
  const auto seq = compile_sequence(t, make_pixel(4, 0, 2, 3), layout(), 32);
  float sum = 0;
  for (float w : seq.cls_weights) sum += w;
  CHECK(sum == 2.0f);
  CHECK(seq.tokens[6].discrete_id == static_cast<int>(layout().categorical_id("TILE", 3)));
  CHECK(seq.tokens[8].discrete_id == static_cast<int>(layout().categorical_id("CROP", 2)));
}

TEST_CASE("empty S2 series still compiles") {
  const auto t = parse_task_template(testsupport::kS2Crop);
  const auto seq = compile_sequence(t, make_pixel(0, 0, 1, 0), layout(), 8);
  CHECK(seq.length == 4);
  CHECK(seq.size() == 8);
}

TEST_CASE("max_len overflow names the template") {
  const auto t = parse_task_template(testsupport::kS2Crop);
  try {
    compile_sequence(t, make_pixel(30, 0, 1, 0), layout(), 20);
    FAIL("expected overflow");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("s2_crop") != std::string::npos);
  }
}

TEST_CASE("sample without the needed data is rejected") {
  const auto discrim = parse_task_template(testsupport::kDiscrim);
  CHECK_THROWS_AS(compile_sequence(discrim, make_pixel(3, 3, 0, 0), layout(), 64), ConfigError);
  const std::vector<ModalitySpec> mods = {{"S2", 10}};
  const auto s2_only = VocabLayout::build(mods, 20, 4);
  CHECK_THROWS_AS(compile_sequence(parse_task_template(testsupport::kS2S1Crop), make_pixel(3, 3, 0, 0), s2_only, 64),
                  ConfigError);
}

TEST_CASE("classification and regression weights never overlap") {
  const auto templates = std::vector<TaskTemplate>{parse_task_template(testsupport::kS2Crop),
                                                   parse_task_template(testsupport::kS2S1Crop),
                                                   parse_task_template(testsupport::kS2TileCrop),
                                                   parse_task_template(testsupport::kLatLonCrop)};
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto& t = templates[static_cast<std::size_t>(trial) % templates.size()];
    const auto px = make_pixel(rng() % 12, rng() % 8, static_cast<int>(rng() % 20), static_cast<int>(rng() % 4),
                               rng());
    const auto seq = compile_sequence(t, px, layout(), 48, true);
    REQUIRE(seq.cls_weights.size() == seq.size());
    std::size_t categorical = 0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      CHECK(seq.cls_weights[i] * seq.reg_weights[i] == 0.0f);
      categorical += seq.tokens[i].kind == TokenKind::kCategorical;
      if (seq.reg_weights[i] > 0) CHECK(seq.tokens[i].kind == TokenKind::kContinuous);
    }
    float cls = 0;
    for (float w : seq.cls_weights) cls += w;
    CHECK(cls == static_cast<float>(categorical));
  }
}

TEST_CASE("regression weights follow the clear flag") {
  const auto t = parse_task_template(testsupport::kS2Crop);
  const auto px = make_pixel(6, 0, 1, 0);
  const auto seq = compile_sequence(t, px, layout(), 12, true);
  for (std::size_t i = 0; i < 6; ++i) CHECK(seq.reg_weights[1 + i] == static_cast<float>(px.s2_clear[i]));
  const auto off = compile_sequence(t, px, layout(), 12, false);
  for (float w : off.reg_weights) CHECK(w == 0.0f);
}

TEST_CASE("padding appends inert PAD tokens") {
  const auto t = parse_task_template(testsupport::kS2Crop);
  const auto px = make_pixel(3, 0, 5, 0);
  const auto base = compile_sequence(t, px, layout(), 7);
  const auto padded = compile_sequence(t, px, layout(), 12, true);
  CHECK(padded.length == 7);
  for (std::size_t i = 7; i < 12; ++i) {
    CHECK(padded.tokens[i].discrete_id == static_cast<int>(layout().symbol_id(Symbol::kPad)));
    CHECK(padded.valid[i] == 0);
    CHECK(padded.cls_weights[i] == 0.0f);
    CHECK(padded.reg_weights[i] == 0.0f);
  }
  for (std::size_t i = 0; i < 7; ++i) CHECK(padded.tokens[i] == base.tokens[i]);
  const auto raw = compile_sequence(t, px, layout(), 7, false, false);
  CHECK(raw.size() == 7);
}

TEST_CASE("push_categorical rejects non-generatable ids") {
  TokenSequence seq;
  CHECK_THROWS_AS(push_categorical(seq, layout(), layout().symbol_id(Symbol::kEos)), std::invalid_argument);
  push_symbol(seq, layout(), Symbol::kTaskCrop);
  push_categorical(seq, layout(), layout().categorical_id("CROP", 3));
  CHECK(seq.length == 2);
  CHECK(seq.cls_weights == std::vector<float>{0, 1});
}

TEST_CASE("attention mask without a scheme") {
  const auto t = parse_task_template("name: m\nelements: [{task: S2}, {data: S2}, eos]");
  auto seq = compile_sequence(t, make_pixel(1, 0, 0, 0), layout(), 4);
  REQUIRE(seq.length == 3);
  Rng rng(0);
  const auto m = build_attention_mask(seq, MaskScheme{}, layout(), rng);
  CHECK(m.n == 4);
  CHECK(m.is_causal());
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(m(i, j) == (j <= i && j < 3 ? 1 : 0));
}

TEST_CASE("complete S1 mask hides every S1 step") {
  const auto t = parse_task_template(testsupport::kS2S1Crop);
  const auto seq = compile_sequence(t, make_pixel(3, 4, 1, 0), layout(), 16, true);
  Rng rng(0);
  MaskScheme scheme;
  scheme.kind = MaskScheme::Kind::kComplete;
  scheme.modality = "S1";
  const auto m = build_attention_mask(seq, scheme, layout(), rng);
  CHECK(m.is_causal());
  const int s1 = 1;
  for (std::size_t j = 0; j < seq.size(); ++j) {
    const bool is_s1 = seq.tokens[j].kind == TokenKind::kContinuous && seq.tokens[j].section == s1;
    for (std::size_t i = j; i < seq.size(); ++i) CHECK(m(i, j) == (is_s1 || !seq.valid[j] ? 0 : 1));
  }
}

TEST_CASE("random mask count is binomial") {
  const auto t = parse_task_template(testsupport::kS2Crop);
  auto px = make_pixel(20, 0, 1, 0);
  px.s2_clear.assign(20, 1);
  const auto seq = compile_sequence(t, px, layout(), 24, true);
  MaskScheme scheme;
  scheme.kind = MaskScheme::Kind::kRandom;
  scheme.probability = 0.5;
  Rng rng(4);
  const int trials = 2000;
  double total = 0;
  for (int k = 0; k < trials; ++k) {
    const auto m = build_attention_mask(seq, scheme, layout(), rng);
    int masked = 0;
    for (std::size_t j = 1; j <= 20; ++j) masked += m(23, j) == 0;
    CHECK(masked >= 0);
    CHECK(masked <= 20);
    total += masked;
  }
  const double mean = total / trials;
  const double sigma_mean = std::sqrt(20 * 0.25 / trials);
  CHECK(std::abs(mean - 10.0) < 3 * sigma_mean);
}

TEST_CASE("patch mask hides one contiguous run") {
  const auto t = parse_task_template(testsupport::kS2Crop);
  const auto seq = compile_sequence(t, make_pixel(12, 0, 1, 0), layout(), 16, true);
  MaskScheme scheme;
  scheme.kind = MaskScheme::Kind::kPatch;
  scheme.patch_len = 4;
  Rng rng(2);
  for (int k = 0; k < 50; ++k) {
    const auto m = build_attention_mask(seq, scheme, layout(), rng);
    std::vector<std::size_t> hidden;
    for (std::size_t j = 0; j < 15; ++j)
      if (!m(15, j)) hidden.push_back(j);
    REQUIRE(hidden.size() == 4);
    CHECK(hidden.back() - hidden.front() == 3);
  }
}

TEST_CASE("mask scheme errors") {
  const auto t = parse_task_template(testsupport::kS2Crop);
  Rng rng(0);
  MaskScheme scheme;
  scheme.kind = MaskScheme::Kind::kComplete;
  scheme.modality = "S2";
  const auto no_reg = compile_sequence(t, make_pixel(3, 0, 1, 0), layout(), 8, false);
  CHECK_THROWS_AS(build_attention_mask(no_reg, scheme, layout(), rng), ConfigError);
  scheme.modality = "S1";
  const auto reg = compile_sequence(t, make_pixel(3, 0, 1, 0), layout(), 8, true);
  CHECK_THROWS_AS(build_attention_mask(reg, scheme, layout(), rng), ConfigError);
  CHECK_THROWS_AS(mask_kind_from_name("blurry"), ConfigError);

  SampleStreamConfig cfg;
  cfg.mask.kind = MaskScheme::Kind::kRandom;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.regression_enabled = true;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("observation dropout is binomial") {
  Rng rng(7);
  const auto px = make_pixel(40, 0, 1, 0);
  const int trials = 2000;
  double kept = 0;
  for (int k = 0; k < trials; ++k) {
    const auto out = drop_observations(px, 0.05, rng);
    CHECK(out.s2.size() == out.s2_clear.size());
    kept += static_cast<double>(out.s2.size());
  }
  const double dropped = 40.0 * trials - kept;
  const double expected = 40.0 * trials * 0.05;
  const double sigma = std::sqrt(40.0 * trials * 0.05 * 0.95);
  CHECK(std::abs(dropped - expected) < 3 * sigma);
  CHECK(drop_observations(px, 0.0, rng) == px);
}

TEST_CASE("dropout keeps chronological order and clear flags aligned") {
  Rng rng(8);
  const auto px = make_pixel(30, 20, 1, 0);
  for (int k = 0; k < 100; ++k) {
    const auto out = drop_observations(px, 0.5, rng);
    for (std::size_t i = 0; i < out.s2.size(); ++i) {
      const auto it = std::find(px.s2.begin(), px.s2.end(), out.s2[i]);
      REQUIRE(it != px.s2.end());
      CHECK(out.s2_clear[i] == px.s2_clear[static_cast<std::size_t>(it - px.s2.begin())]);
      if (i > 0) CHECK(out.s2[i - 1].day < out.s2[i].day);
    }
  }
  SampleStreamConfig cfg;
  cfg.dropout_enabled = false;
  CHECK(dropout_augment(px, cfg, rng) == px);
}

TEST_CASE("discrimination pairs") {
  MismatchBuffer buffer(16);
  const auto a = make_pixel(3, 4, 1, 0, 1, 100);
  const auto b = make_pixel(3, 4, 2, 0, 2, 200);
  buffer.push(a);
  buffer.push(b);
  Rng rng(0);

  const auto heads = make_discrimination_pair(a, buffer, rng, "S1", true);
  CHECK(heads.label == Symbol::kMatch);
  CHECK(heads.sample.s1 == a.s1);
  CHECK(heads.sample.discrim_match == true);

  const auto tails = make_discrimination_pair(a, buffer, rng, "S1", false);
  CHECK(tails.label == Symbol::kMismatch);
  CHECK(tails.sample.s1 == b.s1);
  CHECK(tails.sample.s2 == a.s2);
  CHECK(tails.sample.s1_source_id == 200);

  MismatchBuffer lonely(4);
  lonely.push(a);
  CHECK_THROWS(make_discrimination_pair(a, lonely, rng, "S1", false));
  CHECK_THROWS_AS(make_discrimination_pair(a, buffer, rng, "MODIS", false), ConfigError);
}

TEST_CASE("discrimination coin is fair and labels match provenance") {
  MismatchBuffer buffer(64);
  for (std::uint64_t s = 0; s < 10; ++s) buffer.push(make_pixel(2, 2, 0, 0, s, s));
  Rng rng(123);
  const auto a = make_pixel(2, 2, 0, 0, 3, 3);
  int matches = 0;
  for (int k = 0; k < 10000; ++k) {
    const auto pair = make_discrimination_pair(a, buffer, rng);
    const bool same = pair.sample.s1_source_id == pair.sample.source_id;
    CHECK(same == (pair.label == Symbol::kMatch));
    matches += pair.label == Symbol::kMatch;
  }
  CHECK(matches >= 4700);
  CHECK(matches <= 5300);
}

TEST_CASE("mismatch buffer is a ring") {
  MismatchBuffer buffer(3);
  for (std::uint64_t s = 0; s < 5; ++s) buffer.push(make_pixel(1, 1, 0, 0, s, s));
  CHECK(buffer.size() == 3);
  Rng rng(0);
  std::set<std::uint64_t> seen;
  for (int k = 0; k < 200; ++k) seen.insert(buffer.draw(99, rng).source_id);
  CHECK(seen == std::set<std::uint64_t>{2, 3, 4});
  for (int k = 0; k < 200; ++k) CHECK(buffer.draw(3, rng).source_id != 3);
}

TEST_CASE("stream emits each pixel once per epoch") {
  const auto data = tiny_dataset(4, 1);
  SampleStream stream(data, all_indices(data), quiet_stream(2), 5);
  std::vector<std::uint64_t> ids;
  while (auto p = stream.next()) ids.push_back(p->source_id);
  std::sort(ids.begin(), ids.end());
  CHECK(ids == std::vector<std::uint64_t>{make_source_id(0, 0), make_source_id(1, 0), make_source_id(2, 0),
                                          make_source_id(3, 0)});
  CHECK(stream.epoch() == 1);
  std::size_t second = 0;
  while (stream.next()) ++second;
  CHECK(second == 4);
  CHECK(stream.count_pixels() == 4);
}

TEST_CASE("stream orders differ across epochs and repeat under a seed") {
  const auto data = tiny_dataset(6, 3);
  auto run = [&](std::uint64_t seed) {
    SampleStream stream(data, all_indices(data), quiet_stream(3), seed);
    std::vector<std::uint64_t> ids;
    for (int e = 0; e < 2; ++e)
      while (auto p = stream.next()) ids.push_back(p->source_id);
    return ids;
  };
  const auto a = run(1), b = run(1), c = run(2);
  CHECK(a == b);
  CHECK(a != c);
  const std::vector<std::uint64_t> first(a.begin(), a.begin() + 54), second(a.begin() + 54, a.end());
  CHECK(first != second);
}

TEST_CASE("stream mixes resident patches") {
  const std::size_t buffer = 4;
  const auto data = tiny_dataset(40, 4);
  SampleStream stream(data, all_indices(data), quiet_stream(buffer), 9);
  std::vector<std::uint64_t> patch;
  while (auto p = stream.next()) patch.push_back(p->source_id >> 32);
  // measure while the buffer is still full; the tail drains to a single patch
  patch.resize(patch.size() / 2);
  std::size_t changes = 0;
  for (std::size_t i = 1; i < patch.size(); ++i) changes += patch[i] != patch[i - 1];
  const double mixing = static_cast<double>(changes) / static_cast<double>(patch.size() - 1);
  CHECK(mixing > (buffer - 1.0) / buffer - 0.1);
}

TEST_CASE("multi-worker stream covers every pixel") {
  const auto data = tiny_dataset(7, 2);
  SampleStream stream(data, all_indices(data), quiet_stream(2, 3), 3);
  for (int epoch = 0; epoch < 2; ++epoch) {
    std::multiset<std::uint64_t> ids;
    while (auto p = stream.next()) ids.insert(p->source_id);
    CHECK(ids.size() == 28);
    CHECK(std::set<std::uint64_t>(ids.begin(), ids.end()).size() == 28);
  }
}

TEST_CASE("stream skips labels") {
  SynthConfig cfg;
  cfg.patches = 3;
  cfg.size = 8;
  cfg.void_label = 19;
  cfg.s2_steps = 4;
  cfg.s1_steps = 2;
  InMemoryDataset data(synth_generate(cfg));
  auto sc = quiet_stream(2);
  sc.skip_labels = {19};
  SampleStream stream(data, all_indices(data), sc, 1);
  std::size_t n = 0;
  while (auto p = stream.next()) {
    CHECK(p->label != 19);
    ++n;
  }
  CHECK(n == stream.count_pixels());
  CHECK(n < 3 * 64);
}

TEST_CASE("stream configuration errors") {
  const auto data = tiny_dataset(2, 1);
  CHECK_THROWS_AS(SampleStream(data, {}, quiet_stream(2), 0), ConfigError);
  auto bad = quiet_stream(0);
  CHECK_THROWS_AS(SampleStream(data, all_indices(data), bad, 0), ConfigError);
}

TEST_CASE("dump names template and tokens") {
  const auto seq = compile_sequence(parse_task_template(testsupport::kS2Crop), make_pixel(2, 0, 4, 0), layout(), 8);
  const auto text = dump_sequence(seq, layout());
  CHECK(text.find("s2_crop") != std::string::npos);
  CHECK(text.find("task:CROP") != std::string::npos);
}
