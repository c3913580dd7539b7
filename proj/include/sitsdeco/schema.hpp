// SPDX-License-Identifier: Apache-2.0
//
// Token vocabulary, channel layout and the task-template language.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sitsdeco {

/// Raised for malformed user input: configs, templates, CLI arguments.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fixed symbolic vocabulary. Order defines the id inside the SYMBOLIC section.
enum class Symbol : int {
  kTaskS2 = 0,
  kTaskS1,
  kTaskCrop,
  kTaskTile,
  kTaskLatLon,
  kTaskDiscrim,
  kMatch,
  kMismatch,
  kEos,
  kPad,
};
inline constexpr std::size_t kSymbolCount = 10;

std::string_view symbol_name(Symbol s);
std::optional<Symbol> symbol_from_name(std::string_view name);

/// The task marker announcing a section ("S2" -> task:S2, "DISCRIM" -> task:DISCRIM).
std::optional<Symbol> task_marker_for(std::string_view section);

struct ModalitySpec {
  std::string name;
  std::size_t width = 0;
};

/// A named slice of the channel dimension. `offset` is relative to the block
/// (continuous or discrete) the section lives in.
struct Section {
  std::string name;
  std::size_t offset = 0;
  std::size_t width = 0;

  bool operator==(const Section&) const = default;
};

inline constexpr std::string_view kCropVocab = "CROP";
inline constexpr std::string_view kTileVocab = "TILE";
inline constexpr std::string_view kSymbolicVocab = "SYMBOLIC";
inline constexpr std::string_view kDiscrimVocab = "DISCRIM";

/// Channel map shared by model input and output: [continuous | discrete].
class VocabLayout {
 public:
  /// tile_count == 0 omits the TILE section. Throws ConfigError on duplicate
  /// names or zero widths.
  static VocabLayout build(std::span<const ModalitySpec> modalities,
                           std::size_t class_count, std::size_t tile_count);

  /// S2(10), S1(6), LATLON(2); 20 crop classes; 4 tiles.
  static VocabLayout pastis_default();

  const std::vector<Section>& continuous_sections() const { return continuous_; }
  const std::vector<Section>& discrete_sections() const { return discrete_; }

  std::size_t continuous_width() const { return continuous_width_; }
  std::size_t discrete_width() const { return discrete_width_; }
  std::size_t total_width() const { return continuous_width_ + discrete_width_; }
  std::size_t class_count() const;
  std::size_t tile_count() const;

  const Section* find_continuous(std::string_view name) const;
  const Section* find_discrete(std::string_view name) const;

  /// Discrete id (relative to the discrete block) of a symbol.
  std::size_t symbol_id(Symbol s) const;
  /// Discrete id of entry `index` of a categorical sub-vocabulary (CROP/TILE).
  std::size_t categorical_id(std::string_view subvocab, std::size_t index) const;

  /// Section owning a discrete id; throws std::out_of_range for bad ids.
  const Section& owner_of(std::size_t discrete_id) const;

  /// Ids a model may emit: CROP, TILE, MATCH and MISMATCH.
  bool is_generatable(std::size_t discrete_id) const;

  /// Candidate discrete ids for a requested generation target: CROP, TILE,
  /// or DISCRIM (= {MATCH, MISMATCH}).
  std::vector<std::size_t> generation_slice(std::string_view target) const;

  /// 0/1 indicator over the total width for a section; `discrete` selects
  /// which block the name is looked up in.
  std::vector<int> section_indicator(std::string_view name, bool discrete) const;

  bool operator==(const VocabLayout&) const = default;

 private:
  std::vector<Section> continuous_;
  std::vector<Section> discrete_;
  std::size_t continuous_width_ = 0;
  std::size_t discrete_width_ = 0;
};

enum class ElementKind {
  kTaskMarker,
  kDataBlock,
  kCategorical,
  kDiscrimination,
  kEos,
};

std::string_view element_kind_name(ElementKind k);

/// One template element. `arg` is the marker/section name, or for
/// discrimination the modality drawn from another pixel in the mismatch case.
struct TemplateElement {
  ElementKind kind = ElementKind::kEos;
  std::string arg;

  bool operator==(const TemplateElement&) const = default;
};

struct TaskTemplate {
  std::string name;
  std::vector<TemplateElement> elements;
  double sampling_weight = 1.0;

  /// Number of categorical + discrimination elements, i.e. generated tokens.
  std::size_t generated_count() const;
  bool has_discrimination() const;
  const TemplateElement* discrimination() const;

  bool operator==(const TaskTemplate&) const = default;
};

/// Parses a task-set document:
///
///   tasks:
///     - name: s2_crop
///       weight: 1.0          # optional, default 1
///       elements:
///         - task: S2
///         - data: S2
///         - task: CROP
///         - categorical: CROP
///         - eos
///
/// Element kinds: task, data, categorical, discrimination, eos. Unknown keys,
/// unknown kinds, blocks without their marker and missing eos are errors.
std::vector<TaskTemplate> parse_task_templates(std::string_view yaml_text);

/// Parses a single task mapping (same grammar as one entry of `tasks`).
TaskTemplate parse_task_template(std::string_view yaml_text);

std::string serialize_task_templates(std::span<const TaskTemplate> templates);

/// Structural checks shared by the parser and programmatic construction.
/// Throws ConfigError whose message carries `where` plus the element index.
void check_template_structure(const TaskTemplate& t, std::string_view where);

struct ElementResolution {
  std::size_t index = 0;
  TemplateElement element;
  std::string section;  // "" when unresolved
  bool discrete = false;
  bool ok = false;
};

struct ValidationReport {
  std::string template_name;
  std::vector<ElementResolution> elements;
  std::vector<std::string> failures;

  bool ok() const { return failures.empty(); }
};

ValidationReport template_vocab_check(const TaskTemplate& t, const VocabLayout& layout);

/// Layout document:
///
///   continuous:
///     - {name: S2, width: 10}
///   class_count: 20
///   tile_count: 4
VocabLayout parse_layout_config(std::string_view yaml_text);
std::string serialize_layout_config(const VocabLayout& layout);

}  // namespace sitsdeco
