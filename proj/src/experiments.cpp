// SPDX-License-Identifier: Apache-2.0

#include "sitsdeco/experiments.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

namespace sitsdeco {

EvalReport evaluate_patches(const PatchSource& data, std::span<const std::size_t> patches, const TaskTemplate& tmpl,
                            const Params<float>& params, const VocabLayout& layout, const PreprocessConfig& preprocess,
                            std::span<const int> ignore, std::size_t threads) {
  EvalReport r;
  r.classes = layout.class_count();
  r.confusion.assign(r.classes * r.classes, 0);
  for (auto idx : patches) {
    const RawPatch patch = data.load(idx);
    const auto pred = predict_patch(patch, tmpl, params, layout, preprocess, threads);
    accumulate(r, pred, patch.labels, ignore);
  }
  finalize_metrics(r, ignore);
  return r;
}

const TaskTemplate& find_template(std::span<const TaskTemplate> templates, std::string_view name) {
  for (const auto& t : templates)
    if (t.name == name) return t;
  std::string known;
  for (const auto& t : templates) known += (known.empty() ? "" : ", ") + t.name;
  throw ConfigError("unknown template '" + std::string(name) + "' (known: " + known + ")");
}

void validate_transfer(const TransferSpec& spec, const PatchSource& data) {
  if (spec.target_tile < 0) throw ConfigError("transfer: target tile not set");
  if (std::find(spec.source_tiles.begin(), spec.source_tiles.end(), spec.target_tile) != spec.source_tiles.end())
    throw ConfigError("transfer: target tile " + std::to_string(spec.target_tile) + " is also a source tile");
  std::set<int> present;
  for (std::size_t i = 0; i < data.size(); ++i) present.insert(data.tile(i));
  std::set<int> covered(spec.source_tiles.begin(), spec.source_tiles.end());
  covered.insert(spec.target_tile);
  for (int t : present)
    if (!covered.count(t))
      throw ConfigError("transfer: tile " + std::to_string(t) + " is neither a source nor the target tile");
  for (int t : covered)
    if (!present.count(t)) throw ConfigError("transfer: tile " + std::to_string(t) + " is absent from the dataset");
}

TransferRun run_transfer(const PatchSource& data, std::span<const TaskTemplate> templates, const TransferSpec& spec,
                         bool with_ssl, const VocabLayout& layout, const ModelConfig& model_cfg,
                         const TrainConfig& train_cfg, const SampleStreamConfig& stream_cfg,
                         const std::filesystem::path& run_dir) {
  validate_transfer(spec, data);
  std::vector<TrainTask> tasks;
  for (const auto& name : spec.crop_templates) tasks.push_back({find_template(templates, name), spec.source_tiles});
  std::vector<int> stream_tiles = spec.source_tiles;
  if (with_ssl) {
    for (const auto& name : spec.ssl_templates) tasks.push_back({find_template(templates, name), {}});
    stream_tiles.push_back(spec.target_tile);
  }
  const auto train_patches = select_patches(data, spec.train_folds, stream_tiles);
  if (train_patches.empty()) throw ConfigError("transfer: no training patches");
  const std::vector<int> target{spec.target_tile};
  const auto test_patches = select_patches(data, spec.test_folds, target);
  if (test_patches.empty()) throw ConfigError("transfer: target tile has no patches in the test folds");

  TrainOptions options;
  options.run_dir = run_dir;
  TransferRun run;
  run.train = train(data, train_patches, tasks, layout, model_cfg, train_cfg, stream_cfg, options);
  run.report = evaluate_patches(data, test_patches, find_template(templates, spec.eval_template), run.train.params,
                                layout, stream_cfg.preprocess, spec.ignore_labels, train_cfg.threads);
  run.report.protocol = with_ssl ? "transfer_ssl" : "transfer_baseline";
  if (!run_dir.empty()) write_report(run_dir, run.report);
  return run;
}

std::string transfer_table(const EvalReport& baseline, const EvalReport& ssl) {
  char buf[512];
  std::string out = "| Run | Target mIoU | Target OA | Target MA |\n|---|---|---|---|\n";
  std::snprintf(buf, sizeof(buf), "| Supervised (source tiles) | %.1f | %.1f | %.1f |\n", 100 * baseline.miou,
                100 * baseline.oa, 100 * baseline.ma);
  out += buf;
  std::snprintf(buf, sizeof(buf), "| + SSL on target tile | %.1f (%+.1f) | %.1f | %.1f |\n", 100 * ssl.miou,
                100 * (ssl.miou - baseline.miou), 100 * ssl.oa, 100 * ssl.ma);
  out += buf;
  return out;
}

}  // namespace sitsdeco
