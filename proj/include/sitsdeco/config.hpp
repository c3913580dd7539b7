// SPDX-License-Identifier: Apache-2.0
//
// YAML documents for model, training and synthetic-data settings.

#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "sitsdeco/ingest.hpp"
#include "sitsdeco/model.hpp"
#include "sitsdeco/schema.hpp"
#include "sitsdeco/sequence.hpp"
#include "sitsdeco/training.hpp"

namespace sitsdeco {

/// Model document (all keys optional; widths come from the layout):
///   n_blocks, n_heads, d_model, mlp_expansion, max_day_index, max_position_index
ModelConfig parse_model_config(std::string_view yaml_text, const VocabLayout& layout);
std::string serialize_model_config(const ModelConfig& cfg);

struct TrainDocument {
  TrainConfig train;
  SampleStreamConfig stream;
  /// Per-template tile filters; templates not listed accept every tile.
  std::map<std::string, std::vector<int>> task_tiles;
};

/// Training document (all keys optional):
///   batch_size, lr_init, lr_min, epochs, max_steps, seed, grad_clip,
///   checkpoint_every, threads, log_every, mismatch_buffer,
///   loss: {regression: mse|huber, reg_weight, huber_delta}
///   adam: {beta1, beta2, eps}
///   stream: {patch_buffer, workers, regression, skip_labels, max_s2_steps,
///            cloud: {green_band, swir1_band, clear_threshold},
///            dropout: {enabled, fraction_of_samples, rate_min, rate_max},
///            mask: {kind: none|random|patch|complete, probability, patch_len, modality}}
///   task_tiles: {template_name: [tile ids]}
TrainDocument parse_train_config(std::string_view yaml_text);
std::string serialize_train_config(const TrainDocument& doc);

/// Synthetic generator document; keys mirror SynthConfig fields.
SynthConfig parse_synth_config(std::string_view yaml_text);
std::string serialize_synth_config(const SynthConfig& cfg);

/// Standard task mixture: single- and multi-modality crop prompts, tile
/// prompts, the chained tile-then-crop prompt and S2/S1 discrimination.
std::string builtin_templates_yaml();

/// Reads a whole file; throws ConfigError when unreadable.
std::string read_text_file(const std::string& path);

}  // namespace sitsdeco
