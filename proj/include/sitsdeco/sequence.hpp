// SPDX-License-Identifier: Apache-2.0
//
// Pixel streaming, augmentation and compilation of task templates into
// padded token sequences.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "sitsdeco/ingest.hpp"
#include "sitsdeco/schema.hpp"

namespace sitsdeco {

using Rng = std::mt19937_64;

enum class TokenKind { kContinuous, kCategorical, kSymbolic };

/// One sequence position. Continuous tokens carry zeros in the discrete block
/// (discrete_id < 0); categorical and symbolic tokens carry zeros in the
/// continuous block.
struct TokenRecord {
  TokenKind kind = TokenKind::kSymbolic;
  int section = -1;                // continuous section index, -1 otherwise
  std::vector<float> continuous;   // width C
  int discrete_id = -1;            // relative to the discrete block
  int day_index = 0;

  bool operator==(const TokenRecord&) const = default;
};

struct TokenSequence {
  std::string template_name;
  std::vector<TokenRecord> tokens;  // padded to max_len
  std::vector<float> cls_weights;
  std::vector<float> reg_weights;
  std::vector<std::uint8_t> valid;  // attention validity, 0 for PAD
  std::size_t length = 0;           // unpadded length
  bool regression_enabled = false;

  std::size_t size() const { return tokens.size(); }
  bool operator==(const TokenSequence&) const = default;
};

struct MaskScheme {
  enum class Kind { kNone, kRandom, kPatch, kComplete };
  Kind kind = Kind::kNone;
  double probability = 0.5;  // random
  std::size_t patch_len = 4; // patch
  std::string modality = "S2";
};

MaskScheme::Kind mask_kind_from_name(std::string_view name);
std::string_view mask_kind_name(MaskScheme::Kind kind);

struct SampleStreamConfig {
  std::size_t patch_buffer = 64;
  std::size_t workers = 8;
  double dropout_fraction_of_samples = 0.5;
  double dropout_rate_min = 0.0;
  double dropout_rate_max = 0.95;
  bool dropout_enabled = true;
  bool regression_enabled = false;
  MaskScheme mask;
  PreprocessConfig preprocess;
  std::vector<int> skip_labels;  // e.g. the void label

  void validate() const;
};

/// L x L attention validity; allowed(i, j) = 1 lets position i attend to j.
struct AttentionMask {
  std::size_t n = 0;
  std::vector<std::uint8_t> allowed;

  std::uint8_t operator()(std::size_t i, std::size_t j) const { return allowed[i * n + j]; }
  std::uint8_t& operator()(std::size_t i, std::size_t j) { return allowed[i * n + j]; }
  bool is_causal() const;
  bool operator==(const AttentionMask&) const = default;
};

/// Compiles a template against one sample and right-pads it with PAD to
/// max_len (unless `pad` is false). Throws ConfigError if the result exceeds
/// max_len or a template element cannot be filled from the sample.
TokenSequence compile_sequence(const TaskTemplate& t, const PixelSeries& sample, const VocabLayout& layout,
                               std::size_t max_len, bool regression_enabled = false, bool pad = true);

/// Right-pads with PAD tokens (zero weights, validity 0) up to max_len.
void pad_sequence(TokenSequence& seq, const VocabLayout& layout, std::size_t max_len);

/// Appends a symbolic token (no loss weight) at the end of the unpadded part.
void push_symbol(TokenSequence& seq, const VocabLayout& layout, Symbol s);

/// Appends a generated categorical token with classification weight 1.
void push_categorical(TokenSequence& seq, const VocabLayout& layout, std::size_t discrete_id);

/// Causal mask with PAD columns removed, plus the scheme's masked time steps.
AttentionMask build_attention_mask(const TokenSequence& seq, const MaskScheme& scheme,
                                   const VocabLayout& layout, Rng& rng);

/// Removes each S2 and S1 step independently with probability `rate`.
PixelSeries drop_observations(PixelSeries series, double rate, Rng& rng);

/// With probability dropout_fraction_of_samples draws a rate uniformly in
/// [min, max] and applies drop_observations.
PixelSeries dropout_augment(PixelSeries series, const SampleStreamConfig& cfg, Rng& rng);

/// Ring buffer of recently emitted pixels, safe for concurrent push/draw.
class MismatchBuffer {
 public:
  explicit MismatchBuffer(std::size_t capacity = 4096);
  void push(const PixelSeries& p);
  /// Uniform draw among buffered pixels whose source differs from
  /// `exclude_source`. Throws std::runtime_error when none exists.
  PixelSeries draw(std::uint64_t exclude_source, Rng& rng) const;
  std::size_t size() const;

 private:
  std::size_t capacity_;
  std::vector<PixelSeries> items_;
  std::size_t next_ = 0;
  mutable std::mutex mu_;
};

struct DiscriminationPair {
  PixelSeries sample;
  Symbol label = Symbol::kMatch;
};

/// Coin flip (p = 0.5, or forced): heads keeps sample_a's `pairing` view
/// (MATCH); tails substitutes that view from a buffered pixel b != a (MISMATCH).
DiscriminationPair make_discrimination_pair(const PixelSeries& sample_a, const MismatchBuffer& buffer,
                                            Rng& rng, std::string_view pairing = "S1",
                                            std::optional<bool> force_match = std::nullopt);

/// Shuffled pixel stream over a set of patches. Keeps up to `patch_buffer`
/// patches resident and emits pixels uniformly across them; exhausted
/// patches are replaced from the shuffled epoch order. next() returns
/// nullopt once per epoch, after which the following call starts a new one.
/// With more than one worker, each worker streams its own patch shard on a
/// thread and the outputs interleave in arrival order.
class SampleStream {
 public:
  SampleStream(const PatchSource& source, std::vector<std::size_t> patch_indices, SampleStreamConfig cfg,
               std::uint64_t seed);
  ~SampleStream();
  SampleStream(const SampleStream&) = delete;
  SampleStream& operator=(const SampleStream&) = delete;

  std::optional<PixelSeries> next();
  std::size_t epoch() const { return epoch_; }
  /// Number of emittable pixels per epoch (after label filtering); loads every patch once.
  std::size_t count_pixels() const;

 private:
  struct Shard {
    std::vector<std::size_t> patches;
    Rng rng;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::vector<std::vector<PixelSeries>> resident;
    std::size_t resident_total = 0;
  };
  void start_epoch(Shard& shard);
  void refill(Shard& shard);
  std::optional<PixelSeries> next_from(Shard& shard);
  void launch_workers();
  void join_workers();

  const PatchSource& source_;
  SampleStreamConfig cfg_;
  std::vector<Shard> shards_;
  std::size_t epoch_ = 0;
  bool epoch_open_ = false;

  // multi-worker state
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<PixelSeries> queue_;
  std::size_t finished_ = 0;
  bool stop_ = false;
};

/// Structured text dump of a compiled sequence, for debugging.
std::string dump_sequence(const TokenSequence& seq, const VocabLayout& layout);

}  // namespace sitsdeco
