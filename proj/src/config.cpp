// SPDX-License-Identifier: Apache-2.0

#include "sitsdeco/config.hpp"

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <set>
#include <sstream>

namespace sitsdeco {
namespace {

YAML::Node load(std::string_view text, std::string_view what) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
  if (root.IsNull()) return YAML::Node(YAML::NodeType::Map);
  if (!root.IsMap()) throw ConfigError(std::string(what) + ": expected a mapping");
  return root;
}

void check_keys(const YAML::Node& node, const std::set<std::string>& allowed, const std::string& where) {
  if (!node.IsMap()) throw ConfigError(where + ": expected a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const YAML::Node& node, const char* key, T& out, const std::string& where) {
  if (!node[key]) return;
  try {
    out = node[key].as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(where + "." + key + ": invalid value");
  }
}

}  // namespace

std::string read_text_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ModelConfig parse_model_config(std::string_view yaml_text, const VocabLayout& layout) {
  const auto root = load(yaml_text, "model config");
  check_keys(root, {"n_blocks", "n_heads", "d_model", "mlp_expansion", "max_day_index", "max_position_index"},
             "model");
  ModelConfig c = ModelConfig::for_layout(layout);
  read(root, "n_blocks", c.n_blocks, "model");
  read(root, "n_heads", c.n_heads, "model");
  read(root, "d_model", c.d_model, "model");
  read(root, "mlp_expansion", c.mlp_expansion, "model");
  read(root, "max_day_index", c.max_day_index, "model");
  read(root, "max_position_index", c.max_position_index, "model");
  c.validate();
  return c;
}

std::string serialize_model_config(const ModelConfig& c) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "n_blocks" << YAML::Value << c.n_blocks;
  out << YAML::Key << "n_heads" << YAML::Value << c.n_heads;
  out << YAML::Key << "d_model" << YAML::Value << c.d_model;
  out << YAML::Key << "mlp_expansion" << YAML::Value << c.mlp_expansion;
  out << YAML::Key << "max_day_index" << YAML::Value << c.max_day_index;
  out << YAML::Key << "max_position_index" << YAML::Value << c.max_position_index;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

TrainDocument parse_train_config(std::string_view yaml_text) {
  const auto root = load(yaml_text, "train config");
  check_keys(root,
             {"batch_size", "lr_init", "lr_min", "epochs", "max_steps", "seed", "grad_clip", "checkpoint_every",
              "threads", "log_every", "mismatch_buffer", "loss", "adam", "stream", "task_tiles"},
             "train");
  TrainDocument doc;
  auto& t = doc.train;
  read(root, "batch_size", t.batch_size, "train");
  read(root, "lr_init", t.lr_init, "train");
  read(root, "lr_min", t.lr_min, "train");
  read(root, "epochs", t.epochs, "train");
  read(root, "max_steps", t.max_steps, "train");
  read(root, "seed", t.seed, "train");
  read(root, "grad_clip", t.grad_clip, "train");
  read(root, "checkpoint_every", t.checkpoint_every, "train");
  read(root, "threads", t.threads, "train");
  read(root, "log_every", t.log_every, "train");
  read(root, "mismatch_buffer", t.mismatch_buffer, "train");
  if (const auto loss = root["loss"]) {
    check_keys(loss, {"regression", "reg_weight", "huber_delta"}, "train.loss");
    std::string kind = "mse";
    read(loss, "regression", kind, "train.loss");
    if (kind == "mse")
      t.loss.reg_loss = RegressionLoss::kMse;
    else if (kind == "huber")
      t.loss.reg_loss = RegressionLoss::kHuber;
    else
      throw ConfigError("train.loss.regression: expected mse or huber, got '" + kind + "'");
    read(loss, "reg_weight", t.loss.reg_weight, "train.loss");
    read(loss, "huber_delta", t.loss.huber_delta, "train.loss");
  }
  if (const auto adam = root["adam"]) {
    check_keys(adam, {"beta1", "beta2", "eps"}, "train.adam");
    read(adam, "beta1", t.adam_beta1, "train.adam");
    read(adam, "beta2", t.adam_beta2, "train.adam");
    read(adam, "eps", t.adam_eps, "train.adam");
  }
  auto& s = doc.stream;
  if (const auto st = root["stream"]) {
    check_keys(st, {"patch_buffer", "workers", "regression", "skip_labels", "max_s2_steps", "cloud", "dropout", "mask"},
               "train.stream");
    read(st, "patch_buffer", s.patch_buffer, "train.stream");
    read(st, "workers", s.workers, "train.stream");
    read(st, "regression", s.regression_enabled, "train.stream");
    read(st, "skip_labels", s.skip_labels, "train.stream");
    read(st, "max_s2_steps", s.preprocess.max_s2_steps, "train.stream");
    if (const auto c = st["cloud"]) {
      check_keys(c, {"green_band", "swir1_band", "clear_threshold"}, "train.stream.cloud");
      read(c, "green_band", s.preprocess.cloud.green_band, "train.stream.cloud");
      read(c, "swir1_band", s.preprocess.cloud.swir1_band, "train.stream.cloud");
      read(c, "clear_threshold", s.preprocess.cloud.clear_threshold, "train.stream.cloud");
    }
    if (const auto d = st["dropout"]) {
      check_keys(d, {"enabled", "fraction_of_samples", "rate_min", "rate_max"}, "train.stream.dropout");
      read(d, "enabled", s.dropout_enabled, "train.stream.dropout");
      read(d, "fraction_of_samples", s.dropout_fraction_of_samples, "train.stream.dropout");
      read(d, "rate_min", s.dropout_rate_min, "train.stream.dropout");
      read(d, "rate_max", s.dropout_rate_max, "train.stream.dropout");
    }
    if (const auto m = st["mask"]) {
      check_keys(m, {"kind", "probability", "patch_len", "modality"}, "train.stream.mask");
      std::string kind = "none";
      read(m, "kind", kind, "train.stream.mask");
      s.mask.kind = mask_kind_from_name(kind);
      read(m, "probability", s.mask.probability, "train.stream.mask");
      read(m, "patch_len", s.mask.patch_len, "train.stream.mask");
      read(m, "modality", s.mask.modality, "train.stream.mask");
    }
  }
  if (const auto tt = root["task_tiles"]) {
    if (!tt.IsMap()) throw ConfigError("train.task_tiles: expected a mapping");
    for (const auto& kv : tt) {
      const auto name = kv.first.as<std::string>();
      try {
        doc.task_tiles[name] = kv.second.as<std::vector<int>>();
      } catch (const YAML::Exception&) {
        throw ConfigError("train.task_tiles." + name + ": expected a list of tile ids");
      }
    }
  }
  t.validate();
  s.validate();
  return doc;
}

std::string serialize_train_config(const TrainDocument& doc) {
  const auto& t = doc.train;
  const auto& s = doc.stream;
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "batch_size" << YAML::Value << t.batch_size;
  out << YAML::Key << "lr_init" << YAML::Value << t.lr_init;
  out << YAML::Key << "lr_min" << YAML::Value << t.lr_min;
  out << YAML::Key << "epochs" << YAML::Value << t.epochs;
  out << YAML::Key << "max_steps" << YAML::Value << t.max_steps;
  out << YAML::Key << "seed" << YAML::Value << t.seed;
  out << YAML::Key << "grad_clip" << YAML::Value << t.grad_clip;
  out << YAML::Key << "checkpoint_every" << YAML::Value << t.checkpoint_every;
  out << YAML::Key << "threads" << YAML::Value << t.threads;
  out << YAML::Key << "log_every" << YAML::Value << t.log_every;
  out << YAML::Key << "mismatch_buffer" << YAML::Value << t.mismatch_buffer;
  out << YAML::Key << "loss" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "regression" << YAML::Value << (t.loss.reg_loss == RegressionLoss::kMse ? "mse" : "huber");
  out << YAML::Key << "reg_weight" << YAML::Value << t.loss.reg_weight;
  out << YAML::Key << "huber_delta" << YAML::Value << t.loss.huber_delta;
  out << YAML::EndMap;
  out << YAML::Key << "adam" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "beta1" << YAML::Value << t.adam_beta1;
  out << YAML::Key << "beta2" << YAML::Value << t.adam_beta2;
  out << YAML::Key << "eps" << YAML::Value << t.adam_eps;
  out << YAML::EndMap;
  out << YAML::Key << "stream" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "patch_buffer" << YAML::Value << s.patch_buffer;
  out << YAML::Key << "workers" << YAML::Value << s.workers;
  out << YAML::Key << "regression" << YAML::Value << s.regression_enabled;
  out << YAML::Key << "skip_labels" << YAML::Value << YAML::Flow << s.skip_labels;
  out << YAML::Key << "max_s2_steps" << YAML::Value << s.preprocess.max_s2_steps;
  out << YAML::Key << "cloud" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "green_band" << YAML::Value << s.preprocess.cloud.green_band;
  out << YAML::Key << "swir1_band" << YAML::Value << s.preprocess.cloud.swir1_band;
  out << YAML::Key << "clear_threshold" << YAML::Value << s.preprocess.cloud.clear_threshold;
  out << YAML::EndMap;
  out << YAML::Key << "dropout" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "enabled" << YAML::Value << s.dropout_enabled;
  out << YAML::Key << "fraction_of_samples" << YAML::Value << s.dropout_fraction_of_samples;
  out << YAML::Key << "rate_min" << YAML::Value << s.dropout_rate_min;
  out << YAML::Key << "rate_max" << YAML::Value << s.dropout_rate_max;
  out << YAML::EndMap;
  out << YAML::Key << "mask" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "kind" << YAML::Value << std::string(mask_kind_name(s.mask.kind));
  out << YAML::Key << "probability" << YAML::Value << s.mask.probability;
  out << YAML::Key << "patch_len" << YAML::Value << s.mask.patch_len;
  out << YAML::Key << "modality" << YAML::Value << s.mask.modality;
  out << YAML::EndMap;
  out << YAML::EndMap;
  if (!doc.task_tiles.empty()) {
    out << YAML::Key << "task_tiles" << YAML::Value << YAML::BeginMap;
    for (const auto& [name, tiles] : doc.task_tiles) out << YAML::Key << name << YAML::Value << YAML::Flow << tiles;
    out << YAML::EndMap;
  }
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

SynthConfig parse_synth_config(std::string_view yaml_text) {
  const auto root = load(yaml_text, "synthetic config");
  check_keys(root,
             {"class_count", "patches", "seed", "size", "s2_steps", "s1_steps", "cloud_rate", "tiles",
              "tile_day_shift", "tile_date_offset", "pixel_noise", "parcels_per_patch", "void_label"},
             "synth");
  SynthConfig c;
  read(root, "class_count", c.class_count, "synth");
  read(root, "patches", c.patches, "synth");
  read(root, "seed", c.seed, "synth");
  read(root, "size", c.size, "synth");
  read(root, "s2_steps", c.s2_steps, "synth");
  read(root, "s1_steps", c.s1_steps, "synth");
  read(root, "cloud_rate", c.cloud_rate, "synth");
  read(root, "tiles", c.tiles, "synth");
  read(root, "tile_day_shift", c.tile_day_shift, "synth");
  read(root, "tile_date_offset", c.tile_date_offset, "synth");
  read(root, "pixel_noise", c.pixel_noise, "synth");
  read(root, "parcels_per_patch", c.parcels_per_patch, "synth");
  read(root, "void_label", c.void_label, "synth");
  return c;
}

std::string serialize_synth_config(const SynthConfig& c) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "class_count" << YAML::Value << c.class_count;
  out << YAML::Key << "patches" << YAML::Value << c.patches;
  out << YAML::Key << "seed" << YAML::Value << c.seed;
  out << YAML::Key << "size" << YAML::Value << c.size;
  out << YAML::Key << "s2_steps" << YAML::Value << c.s2_steps;
  out << YAML::Key << "s1_steps" << YAML::Value << c.s1_steps;
  out << YAML::Key << "cloud_rate" << YAML::Value << c.cloud_rate;
  out << YAML::Key << "tiles" << YAML::Value << c.tiles;
  out << YAML::Key << "tile_day_shift" << YAML::Value << YAML::Flow << c.tile_day_shift;
  out << YAML::Key << "tile_date_offset" << YAML::Value << YAML::Flow << c.tile_date_offset;
  out << YAML::Key << "pixel_noise" << YAML::Value << c.pixel_noise;
  out << YAML::Key << "parcels_per_patch" << YAML::Value << c.parcels_per_patch;
  out << YAML::Key << "void_label" << YAML::Value << c.void_label;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

std::string builtin_templates_yaml() {
  return R"(tasks:
  - name: s2_crop
    elements: [{task: S2}, {data: S2}, {task: CROP}, {categorical: CROP}, eos]
  - name: s1_crop
    elements: [{task: S1}, {data: S1}, {task: CROP}, {categorical: CROP}, eos]
  - name: s2s1_crop
    elements: [{task: S2}, {data: S2}, {task: S1}, {data: S1}, {task: CROP}, {categorical: CROP}, eos]
  - name: s2s1_discrim
    elements: [{task: S2}, {data: S2}, {task: S1}, {data: S1}, {task: DISCRIM}, {discrimination: S1}, eos]
  - name: s2_tile
    elements: [{task: S2}, {data: S2}, {task: TILE}, {categorical: TILE}, eos]
  - name: s1_tile
    elements: [{task: S1}, {data: S1}, {task: TILE}, {categorical: TILE}, eos]
  - name: s2_tile_crop
    elements: [{task: S2}, {data: S2}, {task: TILE}, {categorical: TILE}, {task: CROP}, {categorical: CROP}, eos]
  - name: s2s1_latlon_crop
    elements: [{task: S2}, {data: S2}, {task: S1}, {data: S1}, {task: LATLON}, {data: LATLON}, {task: CROP}, {categorical: CROP}, eos]
)";
}

}  // namespace sitsdeco
