// SPDX-License-Identifier: Apache-2.0
//
// Patch-level evaluation and the cross-tile transfer experiment.

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sitsdeco/eval.hpp"
#include "sitsdeco/training.hpp"

namespace sitsdeco {

/// Predicts every listed patch with `tmpl` and pools the confusion.
EvalReport evaluate_patches(const PatchSource& data, std::span<const std::size_t> patches, const TaskTemplate& tmpl,
                            const Params<float>& params, const VocabLayout& layout, const PreprocessConfig& preprocess,
                            std::span<const int> ignore, std::size_t threads = 1);

/// Looks a template up by name; throws ConfigError listing the known names.
const TaskTemplate& find_template(std::span<const TaskTemplate> templates, std::string_view name);

struct TransferSpec {
  std::vector<int> source_tiles;
  int target_tile = -1;
  std::vector<int> train_folds{1, 2, 3, 4};
  std::vector<int> test_folds{5};
  std::vector<std::string> crop_templates{"s2_crop"};
  std::vector<std::string> ssl_templates{"s2s1_discrim", "s2_tile", "s1_tile"};
  std::string eval_template = "s2_crop";
  std::vector<int> ignore_labels;
};

/// Throws ConfigError when the target is a source tile or when source and
/// target together do not cover every tile of the dataset.
void validate_transfer(const TransferSpec& spec, const PatchSource& data);

struct TransferRun {
  EvalReport report;  // crop metrics on the target tile's test folds
  TrainResult train;
};

/// Baseline: crop templates on source-tile training patches only. With SSL:
/// additionally streams the target tile's training patches, which feed the
/// SSL templates only (their crop labels are never read).
TransferRun run_transfer(const PatchSource& data, std::span<const TaskTemplate> templates, const TransferSpec& spec,
                         bool with_ssl, const VocabLayout& layout, const ModelConfig& model_cfg,
                         const TrainConfig& train_cfg, const SampleStreamConfig& stream_cfg,
                         const std::filesystem::path& run_dir = {});

/// Markdown table: one row per run with target-tile mIoU, OA, MA and the
/// mIoU difference of the SSL run against the baseline.
std::string transfer_table(const EvalReport& baseline, const EvalReport& ssl);

}  // namespace sitsdeco
