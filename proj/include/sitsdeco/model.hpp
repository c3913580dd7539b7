// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer over hybrid continuous/one-hot tokens: a linear
// input projection, a learned positional table indexed by day offset or
// sequence position, pre-norm causal self-attention blocks and one linear
// head shared by every token type. Forward and exact reverse-mode gradients
// are written out by hand.

#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sitsdeco/schema.hpp"
#include "sitsdeco/sequence.hpp"

namespace sitsdeco {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

struct ModelConfig {
  std::size_t n_blocks = 2;
  std::size_t n_heads = 16;
  std::size_t d_model = 128;
  std::size_t mlp_expansion = 4;
  std::size_t max_day_index = 512;
  std::size_t max_position_index = 512;
  std::size_t input_width = 0;
  std::size_t output_width = 0;

  std::size_t table_size() const { return std::max(max_day_index, max_position_index); }
  std::size_t head_dim() const { return d_model / n_heads; }
  /// Throws ConfigError on inconsistent shapes.
  void validate() const;
  static ModelConfig for_layout(const VocabLayout& layout);

  bool operator==(const ModelConfig&) const = default;
};

/// Exact number of scalar parameters.
std::size_t param_count(const ModelConfig& cfg);

struct TensorInfo {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool operator==(const TensorInfo&) const = default;
};

/// Ordered tensor table for a config; names are stable checkpoint keys.
std::vector<TensorInfo> tensor_layout(const ModelConfig& cfg);

/// All parameters in one flat buffer, addressed through tensor_layout().
template <typename T>
class Params {
 public:
  Params() = default;
  explicit Params(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  std::size_t size() const { return values_.size(); }

  std::span<T> tensor(std::size_t index);
  std::span<const T> tensor(std::size_t index) const;
  std::size_t index_of(std::string_view name) const;

  MatMap<T> matrix(std::size_t index);
  ConstMatMap<T> matrix(std::size_t index) const;

  void set_zero();
  /// Normal(0, 0.02) weights and positional table; residual output
  /// projections scaled by 1/sqrt(2 * n_blocks); layer-norm gains 1; biases 0.
  void init(std::uint64_t seed);

  template <typename U>
  Params<U> cast() const {
    Params<U> out(cfg_);
    for (std::size_t i = 0; i < values_.size(); ++i) out.values()[i] = static_cast<U>(values_[i]);
    return out;
  }

  bool operator==(const Params&) const = default;

 private:
  ModelConfig cfg_;
  std::vector<TensorInfo> tensors_;
  std::vector<T> values_;
};

/// Activations kept by forward() for backward().
template <typename T>
struct BlockCache {
  Mat<T> x_in, ln1_hat, h1, q, k, v, attn, x_mid, ln2_hat, h2, fc_pre, fc_act;
  Eigen::Matrix<T, Eigen::Dynamic, 1> ln1_rstd, ln2_rstd;
  std::vector<Mat<T>> probs;  // per head, L x L
};

template <typename T>
struct ForwardCache {
  Mat<T> tokens;
  std::vector<int> day_index;
  std::vector<std::uint8_t> mask;  // L x L
  std::vector<BlockCache<T>> blocks;
  Mat<T> x_final;
};

/// Dense L x (C + D) token matrix for the first `length` positions of a sequence.
template <typename T>
Mat<T> dense_tokens(const TokenSequence& seq, const VocabLayout& layout, std::size_t length);

/// activation[i] = tokens[i] * W_in + b_in + positional_table[day_index[i]].
/// Throws std::out_of_range for day indices outside the table.
template <typename T>
Mat<T> embed(const Params<T>& params, const Mat<T>& tokens, std::span<const int> day_index);

/// Runs the decoder on the first L = tokens.rows() positions; `mask` may be
/// larger (its top-left L x L block is used). Output row i predicts token
/// i + 1. A row with no attendable column attends to itself only.
/// Throws std::invalid_argument for a non-causal mask.
template <typename T>
Mat<T> forward(const Params<T>& params, const Mat<T>& tokens, std::span<const int> day_index,
               const AttentionMask& mask, ForwardCache<T>* cache = nullptr);

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(outputs).
template <typename T>
void backward(const Params<T>& params, const ForwardCache<T>& cache, const Mat<T>& d_out, Params<T>& grads);

// ---------------------------------------------------------------------------
// Checkpoints: "SITSDECO" magic, u32 version, u32 header length + JSON header
// (model config, layout), u32 tensor count, then per tensor: u32 name length,
// name, u32 rank, u64 dims, float32 little-endian values; trailing u32 CRC-32
// of all preceding bytes.

struct Checkpoint {
  ModelConfig config;
  VocabLayout layout;
  Params<float> params;
  std::string metadata;  // free-form JSON text
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sitsdeco
