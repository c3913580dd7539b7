// SPDX-License-Identifier: Apache-2.0
//
// Prompted greedy generation, patch prediction, segmentation metrics and
// fold protocols.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sitsdeco/ingest.hpp"
#include "sitsdeco/model.hpp"
#include "sitsdeco/schema.hpp"
#include "sitsdeco/sequence.hpp"

namespace sitsdeco {

/// Sub-vocabularies to generate in order, e.g. {"TILE", "CROP"}.
struct PromptSpec {
  std::string template_name;
  std::vector<std::string> steps;
};

struct GeneratedToken {
  std::string subvocab;
  std::size_t index = 0;        // within the sub-vocabulary (MATCH = 0, MISMATCH = 1)
  std::size_t discrete_id = 0;  // within the discrete block
};

/// Greedy decoding. The prefix (its unpadded part) must end with the task
/// marker of the first requested step. Each step takes the argmax of the
/// requested slice at the last position, appends the token and, when more
/// steps follow, the next task marker. Throws ConfigError for a sub-vocabulary
/// missing from the layout and std::invalid_argument for a bad prefix.
std::vector<GeneratedToken> generate(const TokenSequence& prefix, const PromptSpec& prompt,
                                     const Params<float>& params, const VocabLayout& layout);

/// Runs a template against a sample, generating every categorical and
/// discrimination element in turn; the sample's own values for those
/// elements are never read. Returns one token per generated element.
std::vector<GeneratedToken> prompt_template(const TaskTemplate& tmpl, const PixelSeries& sample,
                                            const Params<float>& params, const VocabLayout& layout);

/// Per-pixel crop prediction (H x W, row-major) using the template's last
/// CROP element. Pixels are independent; `threads` splits them into chunks.
std::vector<int> predict_patch(const RawPatch& patch, const TaskTemplate& tmpl, const Params<float>& params,
                               const VocabLayout& layout, const PreprocessConfig& preprocess = {},
                               std::size_t threads = 1);

struct EvalReport {
  std::size_t classes = 0;
  std::vector<std::uint64_t> confusion;  // classes x classes, rows = truth
  double oa = 0.0;
  double miou = 0.0;
  double ma = 0.0;
  std::vector<double> iou;               // per class; NaN where excluded
  std::vector<std::uint8_t> included;    // class counted in the mIoU mean
  std::string protocol;
  int fold = 0;                          // test fold, 0 = aggregate / none
  std::uint64_t samples = 0;

  std::uint64_t at(std::size_t truth, std::size_t pred) const { return confusion[truth * classes + pred]; }
};

/// Confusion over `classes` classes for pixels whose truth is not in
/// `ignore` (the void label). A class enters the mIoU mean when it occurs in
/// truth or prediction and is not ignored; MA averages recall over classes
/// present in truth. Throws std::invalid_argument on shape mismatch or ids
/// outside [0, classes).
EvalReport compute_metrics(std::span<const int> pred, std::span<const int> truth, std::size_t classes,
                           std::span<const int> ignore = {});

/// Sums confusions and recomputes metrics from the pooled counts.
void accumulate(EvalReport& into, std::span<const int> pred, std::span<const int> truth,
                std::span<const int> ignore = {});
void finalize_metrics(EvalReport& report, std::span<const int> ignore = {});

std::string report_json(const EvalReport& report);
/// Row-normalized confusion (rows = truth) as CSV with a header row.
std::string confusion_csv(const EvalReport& report);
/// Row-normalized confusion rendered as a binary PPM heatmap, `cell` pixels per entry.
void write_confusion_ppm(const std::filesystem::path& path, const EvalReport& report, std::size_t cell = 16);
/// Writes report.json, confusion.csv and confusion.ppm under `dir`.
void write_report(const std::filesystem::path& dir, const EvalReport& report);

enum class Protocol { kOriginal5Fold, kPangaea };
Protocol protocol_from_name(std::string_view name);
std::string_view protocol_name(Protocol p);

struct FoldSplit {
  std::vector<int> train;
  int val = 0;
  int test = 0;
};

/// original5fold: rotation k trains on folds k+1..k+3, validates on k+4 and
/// tests on k+5 (mod 5, 1-based). pangaea: train 1-3, val 4, test 5.
/// Throws ConfigError when a needed fold is absent from `available`.
std::vector<FoldSplit> protocol_splits(Protocol p, std::span<const int> available);

/// Runs `run` once per split. Returns the per-split reports followed by an
/// aggregate (fold 0) whose OA/mIoU/MA are the means over splits and whose
/// confusion is the sum.
std::vector<EvalReport> run_protocol(Protocol p, std::span<const int> available,
                                     const std::function<EvalReport(const FoldSplit&)>& run);

/// Fraction of samples whose final generated token equals the template's
/// target for that sample (crop label, tile id or match flag).
struct TaskScore {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};
TaskScore score_task(const TaskTemplate& tmpl, std::span<const PixelSeries> samples, const Params<float>& params,
                     const VocabLayout& layout, std::size_t threads = 1);

/// Patch indices whose fold is in `folds` and (if non-empty) tile in `tiles`.
std::vector<std::size_t> select_patches(const PatchSource& data, std::span<const int> folds,
                                        std::span<const int> tiles = {});

}  // namespace sitsdeco
