// SPDX-License-Identifier: Apache-2.0
//
// Teacher-forced training: masked classification/regression loss, Adam,
// cosine annealing and the streaming training loop.

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

enum class RegressionLoss { kMse, kHuber };

struct LossConfig {
  RegressionLoss reg_loss = RegressionLoss::kMse;
  double reg_weight = 0.01;
  double huber_delta = 1.0;
};

struct LossBreakdown {
  double total = 0.0;
  double cls = 0.0;  // mean cross-entropy over cls-weighted targets
  double reg = 0.0;  // mean regression loss over reg-weighted targets
  std::size_t n_cls = 0;
  std::size_t n_reg = 0;
};

/// Output row i is scored against token i + 1; weights are indexed by the
/// target token. Classification is cross-entropy over the whole discrete
/// block; regression is MSE or Huber over the whole continuous block. Parts
/// without active positions contribute 0. total = cls + reg_weight * reg.
/// If `d_outputs` is given it receives d(total)/d(outputs).
/// Throws std::invalid_argument on misaligned shapes or weight vectors.
template <typename T>
LossBreakdown compute_loss(std::span<const Mat<T>> outputs, std::span<const TokenSequence* const> seqs,
                           const VocabLayout& layout, const LossConfig& cfg,
                           std::vector<Mat<T>>* d_outputs = nullptr);

struct Example {
  TokenSequence seq;
  AttentionMask mask;
};

/// Batch loss and, when `grads` is non-null, accumulated gradients (grads is
/// zeroed first). Each sequence is evaluated on its unpadded prefix; PAD
/// suffixes cannot influence earlier positions under a causal mask.
/// `threads` > 1 splits the batch into contiguous chunks reduced in order.
template <typename T>
LossBreakdown batch_gradient(const Params<T>& params, std::span<const Example> batch, const VocabLayout& layout,
                             const LossConfig& cfg, Params<T>* grads, std::size_t threads = 1);

struct TrainConfig {
  std::size_t batch_size = 512;
  double lr_init = 0.001;
  double lr_min = 0.0001;
  std::size_t epochs = 30;
  std::size_t max_steps = 0;  // 0: epochs x ceil(pixels / batch_size)
  LossConfig loss;
  std::uint64_t seed = 0;
  double grad_clip = 0.0;     // global-norm clip; 0 disables
  std::size_t checkpoint_every = 0;
  std::size_t threads = 1;
  std::size_t log_every = 1;
  std::size_t mismatch_buffer = 4096;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

/// lr_min + 0.5 (lr_init - lr_min)(1 + cos(pi step / total_steps)).
double cosine_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

template <typename T>
class Adam {
 public:
  Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// Bias-corrected Adam update. Throws std::runtime_error naming the first
  /// tensor holding a non-finite gradient; parameters are left untouched then.
  void step(Params<T>& params, const Params<T>& grads, double lr);
  std::size_t steps() const { return t_; }
  std::span<const double> first_moment() const { return m_; }
  std::span<const double> second_moment() const { return v_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

/// A template plus the tiles whose pixels may feed it (empty = all).
struct TrainTask {
  TaskTemplate tmpl;
  std::vector<int> tiles;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;
  double wall_seconds = 0.0;
};

struct TrainResult {
  Params<float> params;
  std::vector<StepRecord> log;
  std::size_t steps = 0;
};

/// Draws a training batch: pixels from the stream, a template per pixel
/// (weighted by sampling_weight among tasks allowing its tile), dropout
/// augmentation, discrimination pairing and attention masks.
class BatchBuilder {
 public:
  BatchBuilder(SampleStream& stream, std::span<const TrainTask> tasks, const VocabLayout& layout,
               SampleStreamConfig stream_cfg, std::size_t max_len, std::size_t mismatch_capacity,
               std::uint64_t seed);

  std::vector<Example> next(std::size_t batch_size);
  /// Epochs completed by the underlying stream.
  std::size_t epoch() const { return stream_.epoch(); }

 private:
  PixelSeries next_pixel();

  SampleStream& stream_;
  std::vector<TrainTask> tasks_;
  const VocabLayout& layout_;
  SampleStreamConfig cfg_;
  MismatchBuffer buffer_;
  Rng rng_;
  std::size_t max_len_;
};

struct TrainOptions {
  /// Run directory for the log, checkpoints and echoed config; empty = none.
  std::filesystem::path run_dir;
  /// Called after every step (e.g. progress output); may be empty.
  std::function<void(const StepRecord&)> on_step;
  /// Starting parameters; default is a fresh init from the seed.
  std::optional<Params<float>> init;
};

/// Streams the dataset through the task mixture for the configured number of
/// steps with Adam and cosine annealing. Writes train_log.ndjson (one config
/// record followed by one record per logged step) and checkpoint.bin at the
/// configured cadence and at the end. Throws on non-finite loss.
TrainResult train(const PatchSource& data, std::vector<std::size_t> patch_indices, std::span<const TrainTask> tasks,
                  const VocabLayout& layout, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const SampleStreamConfig& stream_cfg, const TrainOptions& options = {});

}  // namespace sitsdeco
