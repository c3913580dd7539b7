// SPDX-License-Identifier: Apache-2.0

#include "sitsdeco/model.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace sitsdeco {
namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr std::size_t kTensorsPerBlock = 16;

// Tensor indices inside a block, relative to block_base().
enum BlockTensor : std::size_t {
  kLn1Gain, kLn1Bias,
  kQWeight, kQBias, kKWeight, kKBias, kVWeight, kVBias, kOWeight, kOBias,
  kLn2Gain, kLn2Bias,
  kFcWeight, kFcBias, kProjWeight, kProjBias,
};
constexpr std::size_t kInWeight = 0, kInBias = 1, kPosTable = 2;

std::size_t block_base(std::size_t b) { return 3 + kTensorsPerBlock * b; }
std::size_t head_weight(const ModelConfig& c) { return 3 + kTensorsPerBlock * c.n_blocks; }
std::size_t head_bias(const ModelConfig& c) { return head_weight(c) + 1; }

template <typename T>
using Vec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <typename T>
Eigen::Map<const Vec<T>> row_vec(std::span<const T> s) {
  return Eigen::Map<const Vec<T>>(s.data(), static_cast<Eigen::Index>(s.size()));
}
template <typename T>
Eigen::Map<Vec<T>> row_vec(std::span<T> s) {
  return Eigen::Map<Vec<T>>(s.data(), static_cast<Eigen::Index>(s.size()));
}

template <typename T>
void layer_norm(const Mat<T>& x, std::span<const T> gain, std::span<const T> bias, Mat<T>& hat,
                Eigen::Matrix<T, Eigen::Dynamic, 1>& rstd, Mat<T>& y) {
  const auto n = x.cols();
  hat.resize(x.rows(), n);
  rstd.resize(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().sum() / static_cast<T>(n);
    rstd(i) = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    hat.row(i) = (x.row(i).array() - mean) * rstd(i);
  }
  y = (hat.array().rowwise() * row_vec(gain).array()).rowwise() + row_vec(bias).array();
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& hat, const Eigen::Matrix<T, Eigen::Dynamic, 1>& rstd,
                           std::span<const T> gain, std::span<T> d_gain, std::span<T> d_bias) {
  row_vec(d_gain) += (dy.array() * hat.array()).colwise().sum().matrix();
  row_vec(d_bias) += dy.colwise().sum();
  const Mat<T> dhat = dy.array().rowwise() * row_vec(gain).array();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const T mean_d = dhat.row(i).mean();
    const T mean_dh = (dhat.row(i).array() * hat.row(i).array()).mean();
    dx.row(i) = rstd(i) * (dhat.row(i).array() - mean_d - hat.row(i).array() * mean_dh);
  }
  return dx;
}

template <typename T>
T gelu(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + static_cast<T>(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  const T u = c * (x + static_cast<T>(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = c * (T(1) + static_cast<T>(3 * 0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

template <typename T>
void add_bias(Mat<T>& m, std::span<const T> b) {
  m.rowwise() += row_vec(b);
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0) throw ConfigError("model: d_model and n_heads must be > 0");
  if (d_model % n_heads != 0)
    throw ConfigError("model: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  if (mlp_expansion == 0) throw ConfigError("model: mlp_expansion must be > 0");
  if (input_width == 0 || output_width == 0) throw ConfigError("model: input/output width must be > 0");
  if (table_size() == 0) throw ConfigError("model: positional table is empty");
}

ModelConfig ModelConfig::for_layout(const VocabLayout& layout) {
  ModelConfig c;
  c.input_width = layout.total_width();
  c.output_width = layout.total_width();
  return c;
}

std::vector<TensorInfo> tensor_layout(const ModelConfig& c) {
  std::vector<TensorInfo> t;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    t.push_back({std::move(name), std::move(shape), offset, n});
    offset += n;
  };
  const std::size_t d = c.d_model, hidden = c.d_model * c.mlp_expansion;
  add("input_projection.weight", {c.input_width, d});
  add("input_projection.bias", {d});
  add("positional_table", {c.table_size(), d});
  for (std::size_t b = 0; b < c.n_blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    add(p + "ln1.gain", {d});
    add(p + "ln1.bias", {d});
    for (const char* m : {"q", "k", "v", "o"}) {
      add(p + "attn." + m + ".weight", {d, d});
      add(p + "attn." + m + ".bias", {d});
    }
    add(p + "ln2.gain", {d});
    add(p + "ln2.bias", {d});
    add(p + "mlp.fc.weight", {d, hidden});
    add(p + "mlp.fc.bias", {hidden});
    add(p + "mlp.proj.weight", {hidden, d});
    add(p + "mlp.proj.bias", {d});
  }
  add("head.weight", {d, c.output_width});
  add("head.bias", {c.output_width});
  return t;
}

std::size_t param_count(const ModelConfig& c) {
  const auto t = tensor_layout(c);
  return t.back().offset + t.back().size;
}

template <typename T>
Params<T>::Params(const ModelConfig& cfg) : cfg_(cfg), tensors_(tensor_layout(cfg)) {
  cfg_.validate();
  values_.assign(param_count(cfg_), T(0));
}

template <typename T>
std::span<T> Params<T>::tensor(std::size_t index) {
  const auto& t = tensors_.at(index);
  return std::span<T>(values_).subspan(t.offset, t.size);
}

template <typename T>
std::span<const T> Params<T>::tensor(std::size_t index) const {
  const auto& t = tensors_.at(index);
  return std::span<const T>(values_).subspan(t.offset, t.size);
}

template <typename T>
std::size_t Params<T>::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    if (tensors_[i].name == name) return i;
  throw std::out_of_range("no parameter tensor '" + std::string(name) + "'");
}

template <typename T>
MatMap<T> Params<T>::matrix(std::size_t index) {
  const auto& t = tensors_.at(index);
  const auto rows = static_cast<Eigen::Index>(t.shape.size() == 2 ? t.shape[0] : 1);
  const auto cols = static_cast<Eigen::Index>(t.shape.back());
  return MatMap<T>(values_.data() + t.offset, rows, cols);
}

template <typename T>
ConstMatMap<T> Params<T>::matrix(std::size_t index) const {
  const auto& t = tensors_.at(index);
  const auto rows = static_cast<Eigen::Index>(t.shape.size() == 2 ? t.shape[0] : 1);
  const auto cols = static_cast<Eigen::Index>(t.shape.back());
  return ConstMatMap<T>(values_.data() + t.offset, rows, cols);
}

template <typename T>
void Params<T>::set_zero() {
  std::fill(values_.begin(), values_.end(), T(0));
}

template <typename T>
void Params<T>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double residual_std = 0.02 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg_.n_blocks, 1)));
  for (const auto& t : tensors_) {
    const bool gain = t.name.ends_with(".gain");
    const bool bias = t.name.ends_with(".bias");
    const bool residual = t.name.ends_with("attn.o.weight") || t.name.ends_with("mlp.proj.weight");
    for (std::size_t i = 0; i < t.size; ++i) {
      double v = 0.0;
      if (gain) {
        v = 1.0;
      } else if (!bias) {
        v = normal(rng) * (residual ? residual_std : 0.02);
      }
      values_[t.offset + i] = static_cast<T>(v);
    }
  }
}

template <typename T>
Mat<T> dense_tokens(const TokenSequence& seq, const VocabLayout& layout, std::size_t length) {
  const std::size_t C = layout.continuous_width();
  Mat<T> m = Mat<T>::Zero(static_cast<Eigen::Index>(length), static_cast<Eigen::Index>(layout.total_width()));
  for (std::size_t i = 0; i < length; ++i) {
    const auto& tok = seq.tokens[i];
    for (std::size_t c = 0; c < C; ++c) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = tok.continuous[c];
    if (tok.discrete_id >= 0)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(C + static_cast<std::size_t>(tok.discrete_id))) = T(1);
  }
  return m;
}

template <typename T>
Mat<T> embed(const Params<T>& params, const Mat<T>& tokens, std::span<const int> day_index) {
  const auto& cfg = params.config();
  if (static_cast<std::size_t>(tokens.cols()) != cfg.input_width)
    throw std::invalid_argument("token width " + std::to_string(tokens.cols()) + " != model input width " +
                                std::to_string(cfg.input_width));
  if (day_index.size() != static_cast<std::size_t>(tokens.rows()))
    throw std::invalid_argument("day_index length does not match token count");
  Mat<T> x = tokens * params.matrix(kInWeight);
  add_bias<T>(x, params.tensor(kInBias));
  const auto table = params.matrix(kPosTable);
  for (std::size_t i = 0; i < day_index.size(); ++i) {
    const int d = day_index[i];
    if (d < 0 || static_cast<std::size_t>(d) >= cfg.table_size())
      throw std::out_of_range("day index " + std::to_string(d) + " outside positional table of " +
                              std::to_string(cfg.table_size()));
    x.row(static_cast<Eigen::Index>(i)) += table.row(d);
  }
  return x;
}

template <typename T>
Mat<T> forward(const Params<T>& params, const Mat<T>& tokens, std::span<const int> day_index,
               const AttentionMask& mask, ForwardCache<T>* cache) {
  const auto& cfg = params.config();
  const auto L = static_cast<std::size_t>(tokens.rows());
  if (mask.n < L) throw std::invalid_argument("attention mask smaller than the sequence");
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = i + 1; j < L; ++j)
      if (mask(i, j)) throw std::invalid_argument("attention mask is not causal");

  const std::size_t d = cfg.d_model, H = cfg.n_heads, hd = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  c.tokens = tokens;
  c.day_index.assign(day_index.begin(), day_index.end());
  c.mask.assign(L * L, 0);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j <= i; ++j) c.mask[i * L + j] = mask(i, j);
  c.blocks.assign(cfg.n_blocks, {});

  Mat<T> x = embed(params, tokens, day_index);
  const auto Li = static_cast<Eigen::Index>(L);
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const std::size_t base = block_base(b);
    auto& bc = c.blocks[b];
    bc.x_in = x;
    layer_norm<T>(x, params.tensor(base + kLn1Gain), params.tensor(base + kLn1Bias), bc.ln1_hat, bc.ln1_rstd, bc.h1);
    bc.q.noalias() = bc.h1 * params.matrix(base + kQWeight);
    add_bias<T>(bc.q, params.tensor(base + kQBias));
    bc.k.noalias() = bc.h1 * params.matrix(base + kKWeight);
    add_bias<T>(bc.k, params.tensor(base + kKBias));
    bc.v.noalias() = bc.h1 * params.matrix(base + kVWeight);
    add_bias<T>(bc.v, params.tensor(base + kVBias));

    bc.attn = Mat<T>::Zero(Li, static_cast<Eigen::Index>(d));
    bc.probs.assign(H, Mat<T>());
    for (std::size_t h = 0; h < H; ++h) {
      const auto col = static_cast<Eigen::Index>(h * hd);
      const auto w = static_cast<Eigen::Index>(hd);
      Mat<T> s = (bc.q.middleCols(col, w) * bc.k.middleCols(col, w).transpose()) * scale;
      Mat<T>& p = bc.probs[h];
      p = Mat<T>::Zero(Li, Li);
      for (std::size_t i = 0; i < L; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j)
          if (c.mask[i * L + j]) mx = std::max(mx, s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
        if (mx == -std::numeric_limits<T>::infinity()) {
          p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = T(1);
          continue;
        }
        T sum = T(0);
        for (std::size_t j = 0; j <= i; ++j) {
          if (!c.mask[i * L + j]) continue;
          const T e = std::exp(s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - mx);
          p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = e;
          sum += e;
        }
        p.row(static_cast<Eigen::Index>(i)) /= sum;
      }
      bc.attn.middleCols(col, w).noalias() = p * bc.v.middleCols(col, w);
    }
    bc.x_mid = x;
    bc.x_mid.noalias() += bc.attn * params.matrix(base + kOWeight);
    add_bias<T>(bc.x_mid, params.tensor(base + kOBias));

    layer_norm<T>(bc.x_mid, params.tensor(base + kLn2Gain), params.tensor(base + kLn2Bias), bc.ln2_hat, bc.ln2_rstd,
                  bc.h2);
    bc.fc_pre.noalias() = bc.h2 * params.matrix(base + kFcWeight);
    add_bias<T>(bc.fc_pre, params.tensor(base + kFcBias));
    bc.fc_act = bc.fc_pre.unaryExpr([](T v) { return gelu(v); });
    x = bc.x_mid;
    x.noalias() += bc.fc_act * params.matrix(base + kProjWeight);
    add_bias<T>(x, params.tensor(base + kProjBias));
  }
  c.x_final = x;
  Mat<T> out = x * params.matrix(head_weight(cfg));
  add_bias<T>(out, params.tensor(head_bias(cfg)));
  return out;
}

template <typename T>
void backward(const Params<T>& params, const ForwardCache<T>& c, const Mat<T>& d_out, Params<T>& grads) {
  const auto& cfg = params.config();
  const std::size_t H = cfg.n_heads, hd = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  grads.matrix(head_weight(cfg)).noalias() += c.x_final.transpose() * d_out;
  row_vec(grads.tensor(head_bias(cfg))) += d_out.colwise().sum();
  Mat<T> dx = d_out * params.matrix(head_weight(cfg)).transpose();

  for (std::size_t bi = cfg.n_blocks; bi-- > 0;) {
    const std::size_t base = block_base(bi);
    const auto& bc = c.blocks[bi];

    // x_out = x_mid + gelu(h2 W1 + b1) W2 + b2
    grads.matrix(base + kProjWeight).noalias() += bc.fc_act.transpose() * dx;
    row_vec(grads.tensor(base + kProjBias)) += dx.colwise().sum();
    Mat<T> d_pre = dx * params.matrix(base + kProjWeight).transpose();
    d_pre.array() *= bc.fc_pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
    grads.matrix(base + kFcWeight).noalias() += bc.h2.transpose() * d_pre;
    row_vec(grads.tensor(base + kFcBias)) += d_pre.colwise().sum();
    const Mat<T> dh2 = d_pre * params.matrix(base + kFcWeight).transpose();
    Mat<T> dx_mid = dx + layer_norm_backward<T>(dh2, bc.ln2_hat, bc.ln2_rstd, params.tensor(base + kLn2Gain),
                                                grads.tensor(base + kLn2Gain), grads.tensor(base + kLn2Bias));

    // x_mid = x_in + attn Wo + bo
    grads.matrix(base + kOWeight).noalias() += bc.attn.transpose() * dx_mid;
    row_vec(grads.tensor(base + kOBias)) += dx_mid.colwise().sum();
    const Mat<T> d_attn = dx_mid * params.matrix(base + kOWeight).transpose();

    Mat<T> dq(bc.q.rows(), bc.q.cols()), dk(bc.k.rows(), bc.k.cols()), dv(bc.v.rows(), bc.v.cols());
    for (std::size_t h = 0; h < H; ++h) {
      const auto col = static_cast<Eigen::Index>(h * hd);
      const auto w = static_cast<Eigen::Index>(hd);
      const Mat<T>& p = bc.probs[h];
      const auto d_o = d_attn.middleCols(col, w);
      const Mat<T> dp = d_o * bc.v.middleCols(col, w).transpose();
      dv.middleCols(col, w).noalias() = p.transpose() * d_o;
      Mat<T> ds = p.array() * (dp.array().colwise() - (p.array() * dp.array()).rowwise().sum());
      ds *= scale;
      dq.middleCols(col, w).noalias() = ds * bc.k.middleCols(col, w);
      dk.middleCols(col, w).noalias() = ds.transpose() * bc.q.middleCols(col, w);
    }
    grads.matrix(base + kQWeight).noalias() += bc.h1.transpose() * dq;
    grads.matrix(base + kKWeight).noalias() += bc.h1.transpose() * dk;
    grads.matrix(base + kVWeight).noalias() += bc.h1.transpose() * dv;
    row_vec(grads.tensor(base + kQBias)) += dq.colwise().sum();
    row_vec(grads.tensor(base + kKBias)) += dk.colwise().sum();
    row_vec(grads.tensor(base + kVBias)) += dv.colwise().sum();
    Mat<T> dh1 = dq * params.matrix(base + kQWeight).transpose();
    dh1.noalias() += dk * params.matrix(base + kKWeight).transpose();
    dh1.noalias() += dv * params.matrix(base + kVWeight).transpose();
    dx = dx_mid + layer_norm_backward<T>(dh1, bc.ln1_hat, bc.ln1_rstd, params.tensor(base + kLn1Gain),
                                         grads.tensor(base + kLn1Gain), grads.tensor(base + kLn1Bias));
  }

  grads.matrix(kInWeight).noalias() += c.tokens.transpose() * dx;
  row_vec(grads.tensor(kInBias)) += dx.colwise().sum();
  auto table = grads.matrix(kPosTable);
  for (std::size_t i = 0; i < c.day_index.size(); ++i) table.row(c.day_index[i]) += dx.row(static_cast<Eigen::Index>(i));
}

template class Params<float>;
template class Params<double>;
template Mat<float> dense_tokens<float>(const TokenSequence&, const VocabLayout&, std::size_t);
template Mat<double> dense_tokens<double>(const TokenSequence&, const VocabLayout&, std::size_t);
template Mat<float> embed<float>(const Params<float>&, const Mat<float>&, std::span<const int>);
template Mat<double> embed<double>(const Params<double>&, const Mat<double>&, std::span<const int>);
template Mat<float> forward<float>(const Params<float>&, const Mat<float>&, std::span<const int>,
                                   const AttentionMask&, ForwardCache<float>*);
template Mat<double> forward<double>(const Params<double>&, const Mat<double>&, std::span<const int>,
                                     const AttentionMask&, ForwardCache<double>*);
template void backward<float>(const Params<float>&, const ForwardCache<float>&, const Mat<float>&, Params<float>&);
template void backward<double>(const Params<double>&, const ForwardCache<double>&, const Mat<double>&,
                               Params<double>&);

}  // namespace sitsdeco
