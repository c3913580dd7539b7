// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sitsdeco/config.hpp"
#include "sitsdeco/schema.hpp"
#include "support.hpp"

using namespace sitsdeco;

TEST_CASE("layout widths") {
  const auto full = VocabLayout::pastis_default();
  CHECK(full.continuous_width() == 18);
  CHECK(full.discrete_width() == 34);
  CHECK(full.total_width() == 52);

  const std::vector<ModalitySpec> s2_only = {{"S2", 10}};
  const auto small = VocabLayout::build(s2_only, 20, 0);
  CHECK(small.continuous_width() == 10);
  CHECK(small.discrete_width() == 30);
  CHECK(small.find_discrete("TILE") == nullptr);
}

TEST_CASE("layout errors") {
  const std::vector<ModalitySpec> dup = {{"S2", 10}, {"S2", 10}};
  CHECK_THROWS_AS(VocabLayout::build(dup, 20, 4), ConfigError);
  const std::vector<ModalitySpec> zero = {{"S2", 0}};
  CHECK_THROWS_AS(VocabLayout::build(zero, 20, 4), ConfigError);
  const std::vector<ModalitySpec> clash = {{"CROP", 3}};
  CHECK_THROWS_AS(VocabLayout::build(clash, 20, 4), ConfigError);
}

TEST_CASE("layout offsets strictly increase and are stable") {
  const auto a = VocabLayout::pastis_default();
  const auto b = VocabLayout::pastis_default();
  CHECK(a == b);
  for (const auto* secs : {&a.continuous_sections(), &a.discrete_sections()}) {
    std::size_t expected = 0;
    for (const auto& s : *secs) {
      CHECK(s.offset == expected);
      expected += s.width;
    }
  }
}

TEST_CASE("section indicators partition the width") {
  const std::vector<ModalitySpec> mods = {{"S2", 10}, {"S1", 6}, {"LATLON", 2}, {"DEM", 1}};
  for (std::size_t classes : {2u, 7u, 20u})
    for (std::size_t tiles : {0u, 1u, 4u}) {
      const auto layout = VocabLayout::build(mods, classes, tiles);
      std::vector<int> sum(layout.total_width(), 0);
      for (const auto& s : layout.continuous_sections()) {
        const auto ind = layout.section_indicator(s.name, false);
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += ind[i];
      }
      for (const auto& s : layout.discrete_sections()) {
        const auto ind = layout.section_indicator(s.name, true);
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += ind[i];
      }
      for (int v : sum) CHECK(v == 1);
    }
}

TEST_CASE("token ids map to one section and symbols are disjoint from categories") {
  const auto layout = VocabLayout::pastis_default();
  for (std::size_t id = 0; id < layout.discrete_width(); ++id) {
    int owners = 0;
    for (const auto& s : layout.discrete_sections())
      if (id >= s.offset && id < s.offset + s.width) ++owners;
    CHECK(owners == 1);
  }
  const auto* crop = layout.find_discrete("CROP");
  const auto* tile = layout.find_discrete("TILE");
  for (int s = 0; s < static_cast<int>(kSymbolCount); ++s) {
    const auto id = layout.symbol_id(static_cast<Symbol>(s));
    CHECK(layout.owner_of(id).name == kSymbolicVocab);
    CHECK((id < crop->offset || id >= crop->offset + crop->width));
    CHECK((id < tile->offset || id >= tile->offset + tile->width));
  }
  CHECK(layout.is_generatable(layout.symbol_id(Symbol::kMatch)));
  CHECK(layout.is_generatable(layout.symbol_id(Symbol::kMismatch)));
  CHECK_FALSE(layout.is_generatable(layout.symbol_id(Symbol::kEos)));
  CHECK_FALSE(layout.is_generatable(layout.symbol_id(Symbol::kPad)));
  CHECK(layout.is_generatable(layout.categorical_id("CROP", 19)));
  CHECK_THROWS(layout.categorical_id("CROP", 20));
}

TEST_CASE("symbol names round trip") {
  for (int s = 0; s < static_cast<int>(kSymbolCount); ++s) {
    const auto sym = static_cast<Symbol>(s);
    CHECK(symbol_from_name(symbol_name(sym)) == sym);
  }
  CHECK_FALSE(symbol_from_name("task:MODIS").has_value());
}

TEST_CASE("parse S2 -> Crop") {
  const auto t = parse_task_template(testsupport::kS2Crop);
  CHECK(t.name == "s2_crop");
  REQUIRE(t.elements.size() == 5);
  CHECK(t.elements[0] == TemplateElement{ElementKind::kTaskMarker, "S2"});
  CHECK(t.elements[1] == TemplateElement{ElementKind::kDataBlock, "S2"});
  CHECK(t.elements[2] == TemplateElement{ElementKind::kTaskMarker, "CROP"});
  CHECK(t.elements[3] == TemplateElement{ElementKind::kCategorical, "CROP"});
  CHECK(t.elements[4].kind == ElementKind::kEos);
  CHECK(t.sampling_weight == 1.0);
  CHECK(t.generated_count() == 1);
}

TEST_CASE("parse chained S2 -> tile -> crop keeps order") {
  const auto t = parse_task_template(testsupport::kS2TileCrop);
  std::vector<std::string> cats;
  for (const auto& e : t.elements)
    if (e.kind == ElementKind::kCategorical) cats.push_back(e.arg);
  CHECK(cats == std::vector<std::string>{"TILE", "CROP"});
}

TEST_CASE("grammar violations") {
  SUBCASE("categorical without marker") {
    CHECK_THROWS_AS(parse_task_template("name: x\nelements: [{task: S2}, {data: S2}, {categorical: CROP}, eos]"),
                    ConfigError);
  }
  SUBCASE("data block without marker") {
    CHECK_THROWS_AS(parse_task_template("name: x\nelements: [{data: S2}, eos]"), ConfigError);
  }
  SUBCASE("missing eos") {
    CHECK_THROWS_AS(parse_task_template("name: x\nelements: [{task: S2}, {data: S2}]"), ConfigError);
  }
  SUBCASE("unknown element kind") {
    CHECK_THROWS_AS(parse_task_template("name: x\nelements: [{task: S2}, {sensor: S2}, eos]"), ConfigError);
  }
  SUBCASE("unknown key") {
    CHECK_THROWS_AS(parse_task_template("name: x\nweigth: 2\nelements: [eos]"), ConfigError);
  }
  SUBCASE("eos not last") {
    CHECK_THROWS_AS(parse_task_template("name: x\nelements: [eos, {task: S2}, {data: S2}, eos]"), ConfigError);
  }
  SUBCASE("marker not followed by its block") {
    CHECK_THROWS_AS(parse_task_template("name: x\nelements: [{task: S2}, {task: CROP}, {categorical: CROP}, eos]"),
                    ConfigError);
  }
  SUBCASE("discrimination needs the DISCRIM marker") {
    CHECK_THROWS_AS(
        parse_task_template("name: x\nelements: [{task: S2}, {data: S2}, {task: CROP}, {discrimination: S1}, eos]"),
        ConfigError);
  }
  SUBCASE("empty document") { CHECK_THROWS_AS(parse_task_templates(""), ConfigError); }
  SUBCASE("duplicate names") {
    CHECK_THROWS_AS(parse_task_templates("tasks:\n  - {name: a, elements: [eos]}\n  - {name: a, elements: [eos]}"),
                    ConfigError);
  }
}

TEST_CASE("error messages carry the element path") {
  try {
    parse_task_templates("tasks:\n  - name: a\n    elements: [{task: S2}, {data: S2}, {categorical: CROP}, eos]\n");
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("tasks[0].elements[2]") != std::string::npos);
  }
}

TEST_CASE("template vocab check") {
  const auto layout = VocabLayout::pastis_default();
  SUBCASE("valid S2 -> Crop") {
    const auto r = template_vocab_check(parse_task_template(testsupport::kS2Crop), layout);
    CHECK(r.ok());
    REQUIRE(r.elements.size() == 5);
    CHECK(r.elements[1].section == "S2");
    CHECK_FALSE(r.elements[1].discrete);
    CHECK(r.elements[3].section == "CROP");
  }
  SUBCASE("unknown modality") {
    const auto t = parse_task_template("name: m\nelements: [{task: MODIS}, {data: MODIS}, {task: CROP}, {categorical: CROP}, eos]");
    const auto r = template_vocab_check(t, layout);
    CHECK_FALSE(r.ok());
    REQUIRE(!r.failures.empty());
    bool named = false;
    for (const auto& f : r.failures) named = named || f.find("MODIS") != std::string::npos;
    CHECK(named);
  }
  SUBCASE("empty template") {
    TaskTemplate t;
    t.name = "empty";
    const auto r = template_vocab_check(t, layout);
    CHECK_FALSE(r.ok());
    CHECK(r.failures.front().find("missing eos") != std::string::npos);
  }
  SUBCASE("tile prompt against a layout without tiles") {
    const std::vector<ModalitySpec> mods = {{"S2", 10}};
    const auto no_tiles = VocabLayout::build(mods, 4, 0);
    const auto r = template_vocab_check(parse_task_template(testsupport::kS2TileCrop), no_tiles);
    CHECK_FALSE(r.ok());
  }
}

TEST_CASE("template round trip") {
  auto templates = parse_task_templates(builtin_templates_yaml());
  templates[1].sampling_weight = 2.5;
  const auto text = serialize_task_templates(templates);
  const auto again = parse_task_templates(text);
  CHECK(again == templates);
}

TEST_CASE("layout config round trip") {
  const auto layout = VocabLayout::pastis_default();
  CHECK(parse_layout_config(serialize_layout_config(layout)) == layout);
  CHECK_THROWS_AS(parse_layout_config("continuous: [{name: S2, width: 10, offset: 0}]"), ConfigError);
  CHECK_THROWS_AS(parse_layout_config("colour: red"), ConfigError);
}

TEST_CASE("task markers") {
  CHECK(task_marker_for("S2") == Symbol::kTaskS2);
  CHECK(task_marker_for("DISCRIM") == Symbol::kTaskDiscrim);
  CHECK_FALSE(task_marker_for("MODIS").has_value());
  const auto layout = VocabLayout::pastis_default();
  CHECK(layout.generation_slice("DISCRIM").size() == 2);
  CHECK(layout.generation_slice("CROP").size() == 20);
  CHECK_THROWS_AS(layout.generation_slice("SYMBOLIC"), ConfigError);
  CHECK_THROWS_AS(layout.generation_slice("MODIS"), ConfigError);
}
