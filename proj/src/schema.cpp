// SPDX-License-Identifier: Apache-2.0

#include "sitsdeco/schema.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <array>
#include <set>
#include <sstream>

namespace sitsdeco {
namespace {

constexpr std::array<std::string_view, kSymbolCount> kSymbolNames = {
    "task:S2", "task:S1",  "task:CROP",     "task:TILE", "task:LATLON",
    "task:DISCRIM", "MATCH", "MISMATCH", "EOS",       "PAD"};

std::string path_of(std::string_view where, std::size_t index) {
  std::ostringstream os;
  os << where << ".elements[" << index << "]";
  return os.str();
}

// Section a marker announces must match the block that follows it.
bool marker_matches(const TemplateElement& marker, const TemplateElement& next) {
  if (marker.kind != ElementKind::kTaskMarker) return false;
  switch (next.kind) {
    case ElementKind::kDataBlock:
    case ElementKind::kCategorical:
      return marker.arg == next.arg;
    case ElementKind::kDiscrimination:
      return marker.arg == kDiscrimVocab;
    default:
      return false;
  }
}

bool announces_block(const TemplateElement& e) {
  return e.kind == ElementKind::kDataBlock || e.kind == ElementKind::kCategorical ||
         e.kind == ElementKind::kDiscrimination;
}

ElementKind kind_from_key(const std::string& key, const std::string& where) {
  if (key == "task") return ElementKind::kTaskMarker;
  if (key == "data") return ElementKind::kDataBlock;
  if (key == "categorical") return ElementKind::kCategorical;
  if (key == "discrimination") return ElementKind::kDiscrimination;
  if (key == "eos") return ElementKind::kEos;
  throw ConfigError(where + ": unknown element kind '" + key + "'");
}

TaskTemplate template_from_node(const YAML::Node& node, const std::string& where) {
  if (!node.IsMap()) throw ConfigError(where + ": task must be a mapping");
  TaskTemplate t;
  bool have_elements = false;
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (key == "name") {
      t.name = kv.second.as<std::string>();
    } else if (key == "weight") {
      t.sampling_weight = kv.second.as<double>();
    } else if (key == "elements") {
      have_elements = true;
      if (!kv.second.IsSequence()) throw ConfigError(where + ".elements: must be a list");
      std::size_t i = 0;
      for (const auto& el : kv.second) {
        const auto epath = path_of(where, i++);
        TemplateElement e;
        if (el.IsScalar()) {
          e.kind = kind_from_key(el.as<std::string>(), epath);
          if (e.kind != ElementKind::kEos)
            throw ConfigError(epath + ": element '" + el.as<std::string>() + "' needs an argument");
        } else if (el.IsMap() && el.size() == 1) {
          const auto it = el.begin();
          e.kind = kind_from_key(it->first.as<std::string>(), epath);
          if (e.kind == ElementKind::kEos) {
            if (!it->second.IsNull()) throw ConfigError(epath + ": eos takes no argument");
          } else {
            e.arg = it->second.as<std::string>();
            if (e.arg.empty()) throw ConfigError(epath + ": empty argument");
          }
        } else {
          throw ConfigError(epath + ": element must be 'eos' or a single-key mapping");
        }
        t.elements.push_back(std::move(e));
      }
    } else {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
  if (t.name.empty()) throw ConfigError(where + ": missing name");
  if (!have_elements) throw ConfigError(where + ": missing elements");
  if (t.sampling_weight < 0.0) throw ConfigError(where + ": weight must be >= 0");
  check_template_structure(t, where);
  return t;
}

YAML::Node load_yaml(std::string_view text) {
  try {
    return YAML::Load(std::string(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("malformed YAML: ") + e.what());
  }
}

}  // namespace

std::string_view symbol_name(Symbol s) { return kSymbolNames.at(static_cast<std::size_t>(s)); }

std::optional<Symbol> symbol_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kSymbolNames.size(); ++i)
    if (kSymbolNames[i] == name) return static_cast<Symbol>(i);
  return std::nullopt;
}

std::optional<Symbol> task_marker_for(std::string_view section) {
  if (section == "S2") return Symbol::kTaskS2;
  if (section == "S1") return Symbol::kTaskS1;
  if (section == kCropVocab) return Symbol::kTaskCrop;
  if (section == kTileVocab) return Symbol::kTaskTile;
  if (section == "LATLON") return Symbol::kTaskLatLon;
  if (section == kDiscrimVocab) return Symbol::kTaskDiscrim;
  return std::nullopt;
}

VocabLayout VocabLayout::build(std::span<const ModalitySpec> modalities,
                               std::size_t class_count, std::size_t tile_count) {
  VocabLayout layout;
  std::set<std::string> names;
  std::size_t offset = 0;
  for (const auto& m : modalities) {
    if (m.name.empty()) throw ConfigError("modality with empty name");
    if (m.width == 0) throw ConfigError("modality '" + m.name + "' has zero width");
    if (!names.insert(m.name).second) throw ConfigError("duplicate section '" + m.name + "'");
    layout.continuous_.push_back({m.name, offset, m.width});
    offset += m.width;
  }
  layout.continuous_width_ = offset;

  if (class_count == 0) throw ConfigError("section 'CROP' has zero width");
  offset = 0;
  auto add_discrete = [&](std::string_view name, std::size_t width) {
    if (!names.insert(std::string(name)).second)
      throw ConfigError("duplicate section '" + std::string(name) + "'");
    layout.discrete_.push_back({std::string(name), offset, width});
    offset += width;
  };
  add_discrete(kCropVocab, class_count);
  if (tile_count > 0) add_discrete(kTileVocab, tile_count);
  add_discrete(kSymbolicVocab, kSymbolCount);
  layout.discrete_width_ = offset;
  return layout;
}

VocabLayout VocabLayout::pastis_default() {
  const std::array<ModalitySpec, 3> mods = {{{"S2", 10}, {"S1", 6}, {"LATLON", 2}}};
  return build(mods, 20, 4);
}

std::size_t VocabLayout::class_count() const { return find_discrete(kCropVocab)->width; }

std::size_t VocabLayout::tile_count() const {
  const auto* s = find_discrete(kTileVocab);
  return s ? s->width : 0;
}

const Section* VocabLayout::find_continuous(std::string_view name) const {
  for (const auto& s : continuous_)
    if (s.name == name) return &s;
  return nullptr;
}

const Section* VocabLayout::find_discrete(std::string_view name) const {
  for (const auto& s : discrete_)
    if (s.name == name) return &s;
  return nullptr;
}

std::size_t VocabLayout::symbol_id(Symbol s) const {
  return find_discrete(kSymbolicVocab)->offset + static_cast<std::size_t>(s);
}

std::size_t VocabLayout::categorical_id(std::string_view subvocab, std::size_t index) const {
  const auto* s = find_discrete(subvocab);
  if (s == nullptr || subvocab == kSymbolicVocab)
    throw std::out_of_range("no categorical sub-vocabulary '" + std::string(subvocab) + "'");
  if (index >= s->width)
    throw std::out_of_range(std::string(subvocab) + " index " + std::to_string(index) +
                            " outside [0, " + std::to_string(s->width) + ")");
  return s->offset + index;
}

const Section& VocabLayout::owner_of(std::size_t discrete_id) const {
  for (const auto& s : discrete_)
    if (discrete_id >= s.offset && discrete_id < s.offset + s.width) return s;
  throw std::out_of_range("discrete id " + std::to_string(discrete_id) + " outside layout");
}

bool VocabLayout::is_generatable(std::size_t discrete_id) const {
  const auto& s = owner_of(discrete_id);
  if (s.name != kSymbolicVocab) return true;
  return discrete_id == symbol_id(Symbol::kMatch) || discrete_id == symbol_id(Symbol::kMismatch);
}

std::vector<std::size_t> VocabLayout::generation_slice(std::string_view target) const {
  if (target == kDiscrimVocab) return {symbol_id(Symbol::kMatch), symbol_id(Symbol::kMismatch)};
  const auto* s = find_discrete(target);
  if (s == nullptr || target == kSymbolicVocab)
    throw ConfigError("cannot generate '" + std::string(target) + "': no such sub-vocabulary");
  std::vector<std::size_t> ids(s->width);
  for (std::size_t i = 0; i < s->width; ++i) ids[i] = s->offset + i;
  return ids;
}

std::vector<int> VocabLayout::section_indicator(std::string_view name, bool discrete) const {
  std::vector<int> v(total_width(), 0);
  const Section* s = discrete ? find_discrete(name) : find_continuous(name);
  if (s == nullptr) throw std::out_of_range("no section '" + std::string(name) + "'");
  const std::size_t base = discrete ? continuous_width_ : 0;
  std::fill_n(v.begin() + static_cast<std::ptrdiff_t>(base + s->offset), s->width, 1);
  return v;
}

std::string_view element_kind_name(ElementKind k) {
  switch (k) {
    case ElementKind::kTaskMarker: return "task";
    case ElementKind::kDataBlock: return "data";
    case ElementKind::kCategorical: return "categorical";
    case ElementKind::kDiscrimination: return "discrimination";
    case ElementKind::kEos: return "eos";
  }
  return "?";
}

std::size_t TaskTemplate::generated_count() const {
  return static_cast<std::size_t>(std::count_if(elements.begin(), elements.end(), [](const auto& e) {
    return e.kind == ElementKind::kCategorical || e.kind == ElementKind::kDiscrimination;
  }));
}

bool TaskTemplate::has_discrimination() const { return discrimination() != nullptr; }

const TemplateElement* TaskTemplate::discrimination() const {
  for (const auto& e : elements)
    if (e.kind == ElementKind::kDiscrimination) return &e;
  return nullptr;
}

void check_template_structure(const TaskTemplate& t, std::string_view where) {
  const std::string w(where);
  if (t.elements.empty()) throw ConfigError(w + ": empty template, missing eos");
  for (std::size_t i = 0; i < t.elements.size(); ++i) {
    const auto& e = t.elements[i];
    if (e.kind == ElementKind::kEos && i + 1 != t.elements.size())
      throw ConfigError(path_of(w, i) + ": eos must be the final element");
    if (announces_block(e) && (i == 0 || !marker_matches(t.elements[i - 1], e)))
      throw ConfigError(path_of(w, i) + ": " + std::string(element_kind_name(e.kind)) + " '" +
                        e.arg + "' without preceding task marker '" +
                        (e.kind == ElementKind::kDiscrimination ? std::string(kDiscrimVocab) : e.arg) +
                        "'");
    if (e.kind == ElementKind::kTaskMarker &&
        (i + 1 >= t.elements.size() || !marker_matches(e, t.elements[i + 1])))
      throw ConfigError(path_of(w, i) + ": task marker '" + e.arg +
                        "' not followed by its block");
  }
  if (t.elements.back().kind != ElementKind::kEos)
    throw ConfigError(w + ": missing eos");
}

std::vector<TaskTemplate> parse_task_templates(std::string_view yaml_text) {
  const auto root = load_yaml(yaml_text);
  if (!root.IsMap()) throw ConfigError("task document must be a mapping with key 'tasks'");
  for (const auto& kv : root)
    if (kv.first.as<std::string>() != "tasks")
      throw ConfigError("unknown top-level key '" + kv.first.as<std::string>() + "'");
  const auto tasks = root["tasks"];
  if (!tasks || !tasks.IsSequence() || tasks.size() == 0)
    throw ConfigError("'tasks' must be a non-empty list");
  std::vector<TaskTemplate> out;
  std::set<std::string> names;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    auto t = template_from_node(tasks[i], "tasks[" + std::to_string(i) + "]");
    if (!names.insert(t.name).second) throw ConfigError("duplicate task name '" + t.name + "'");
    out.push_back(std::move(t));
  }
  return out;
}

TaskTemplate parse_task_template(std::string_view yaml_text) {
  return template_from_node(load_yaml(yaml_text), "task");
}

std::string serialize_task_templates(std::span<const TaskTemplate> templates) {
  YAML::Emitter out;
  out << YAML::BeginMap << YAML::Key << "tasks" << YAML::Value << YAML::BeginSeq;
  for (const auto& t : templates) {
    out << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << t.name;
    out << YAML::Key << "weight" << YAML::Value << t.sampling_weight;
    out << YAML::Key << "elements" << YAML::Value << YAML::BeginSeq;
    for (const auto& e : t.elements) {
      if (e.kind == ElementKind::kEos) {
        out << "eos";
      } else {
        out << YAML::Flow << YAML::BeginMap << YAML::Key << std::string(element_kind_name(e.kind))
            << YAML::Value << e.arg << YAML::EndMap;
      }
    }
    out << YAML::EndSeq << YAML::EndMap;
  }
  out << YAML::EndSeq << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

ValidationReport template_vocab_check(const TaskTemplate& t, const VocabLayout& layout) {
  ValidationReport report;
  report.template_name = t.name;
  const std::string where = "task '" + t.name + "'";
  try {
    check_template_structure(t, where);
  } catch (const ConfigError& e) {
    report.failures.emplace_back(e.what());
  }
  for (std::size_t i = 0; i < t.elements.size(); ++i) {
    const auto& e = t.elements[i];
    ElementResolution r{i, e, "", false, false};
    switch (e.kind) {
      case ElementKind::kTaskMarker:
        if (task_marker_for(e.arg)) {
          r.section = std::string(kSymbolicVocab);
          r.discrete = true;
          r.ok = true;
        }
        break;
      case ElementKind::kDataBlock:
        if (layout.find_continuous(e.arg)) {
          r.section = e.arg;
          r.ok = true;
        }
        break;
      case ElementKind::kCategorical:
        if (e.arg != kSymbolicVocab && layout.find_discrete(e.arg)) {
          r.section = e.arg;
          r.discrete = true;
          r.ok = true;
        }
        break;
      case ElementKind::kDiscrimination: {
        // the swapped block must be present in this template
        const bool present = std::any_of(t.elements.begin(), t.elements.end(), [&](const auto& o) {
          return o.kind == ElementKind::kDataBlock && o.arg == e.arg;
        });
        if (present && layout.find_continuous(e.arg)) {
          r.section = std::string(kSymbolicVocab);
          r.discrete = true;
          r.ok = true;
        }
        break;
      }
      case ElementKind::kEos:
        r.section = std::string(kSymbolicVocab);
        r.discrete = true;
        r.ok = true;
        break;
    }
    if (!r.ok) {
      std::string what = e.kind == ElementKind::kTaskMarker ? "task marker" : "section";
      if (e.kind == ElementKind::kDiscrimination) what = "paired data block";
      report.failures.push_back(path_of(where, i) + ": " + std::string(element_kind_name(e.kind)) +
                                " references missing " + what + " '" + e.arg + "'");
    }
    report.elements.push_back(std::move(r));
  }
  return report;
}

VocabLayout parse_layout_config(std::string_view yaml_text) {
  const auto root = load_yaml(yaml_text);
  if (!root.IsMap()) throw ConfigError("layout document must be a mapping");
  std::vector<ModalitySpec> mods;
  std::size_t class_count = 20;
  std::size_t tile_count = 4;
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    if (key == "continuous") {
      for (const auto& m : kv.second) {
        for (const auto& f : m) {
          const auto k = f.first.as<std::string>();
          if (k != "name" && k != "width") throw ConfigError("layout.continuous: unknown key '" + k + "'");
        }
        if (!m["name"] || !m["width"]) throw ConfigError("layout.continuous entries need name and width");
        const auto width = m["width"].as<long long>();
        if (width < 0) throw ConfigError("layout.continuous: negative width");
        mods.push_back({m["name"].as<std::string>(), static_cast<std::size_t>(width)});
      }
    } else if (key == "class_count") {
      class_count = kv.second.as<std::size_t>();
    } else if (key == "tile_count") {
      tile_count = kv.second.as<std::size_t>();
    } else {
      throw ConfigError("layout: unknown key '" + key + "'");
    }
  }
  return VocabLayout::build(mods, class_count, tile_count);
}

std::string serialize_layout_config(const VocabLayout& layout) {
  YAML::Emitter out;
  out << YAML::BeginMap << YAML::Key << "continuous" << YAML::Value << YAML::BeginSeq;
  for (const auto& s : layout.continuous_sections())
    out << YAML::Flow << YAML::BeginMap << YAML::Key << "name" << YAML::Value << s.name
        << YAML::Key << "width" << YAML::Value << s.width << YAML::EndMap;
  out << YAML::EndSeq;
  out << YAML::Key << "class_count" << YAML::Value << layout.class_count();
  out << YAML::Key << "tile_count" << YAML::Value << layout.tile_count();
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

}  // namespace sitsdeco
