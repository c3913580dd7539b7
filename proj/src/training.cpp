// SPDX-License-Identifier: Apache-2.0

#include "sitsdeco/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <stdexcept>
#include <thread>

namespace sitsdeco {

template <typename T>
LossBreakdown compute_loss(std::span<const Mat<T>> outputs, std::span<const TokenSequence* const> seqs,
                           const VocabLayout& layout, const LossConfig& cfg, std::vector<Mat<T>>* d_outputs) {
  if (outputs.size() != seqs.size()) throw std::invalid_argument("compute_loss: outputs/sequences count mismatch");
  const std::size_t C = layout.continuous_width();
  const std::size_t D = layout.discrete_width();
  const std::size_t W = C + D;

  double ce_sum = 0.0, reg_sum = 0.0;
  std::size_t n_cls = 0, n_reg = 0;
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto& seq = *seqs[b];
    const auto& out = outputs[b];
    if (seq.cls_weights.size() != seq.size() || seq.reg_weights.size() != seq.size())
      throw std::invalid_argument("compute_loss: weight vectors do not match sequence length");
    if (static_cast<std::size_t>(out.cols()) != W || static_cast<std::size_t>(out.rows()) < seq.length ||
        seq.length > seq.size())
      throw std::invalid_argument("compute_loss: output shape does not match sequence");
    for (std::size_t t = 1; t < seq.length; ++t) {
      if (seq.cls_weights[t] > 0.0f) ++n_cls;
      if (seq.reg_weights[t] > 0.0f) ++n_reg;
    }
  }
  if (d_outputs) {
    d_outputs->resize(outputs.size());
    for (std::size_t b = 0; b < outputs.size(); ++b)
      (*d_outputs)[b] = Mat<T>::Zero(outputs[b].rows(), outputs[b].cols());
  }
  const double cls_scale = n_cls ? 1.0 / static_cast<double>(n_cls) : 0.0;
  const double reg_scale = n_reg ? cfg.reg_weight / static_cast<double>(n_reg) : 0.0;

  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const auto& seq = *seqs[b];
    const auto& out = outputs[b];
    for (std::size_t t = 1; t < seq.length; ++t) {
      const auto row = out.row(static_cast<Eigen::Index>(t - 1));
      const auto& target = seq.tokens[t];
      const double cw = seq.cls_weights[t];
      if (cw > 0.0) {
        if (target.discrete_id < 0) throw std::invalid_argument("compute_loss: classification target is not discrete");
        const auto logits = row.segment(static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(D));
        const double mx = static_cast<double>(logits.maxCoeff());
        double z = 0.0;
        for (Eigen::Index k = 0; k < logits.size(); ++k) z += std::exp(static_cast<double>(logits(k)) - mx);
        const double lse = mx + std::log(z);
        ce_sum += cw * (lse - static_cast<double>(logits(target.discrete_id)));
        if (d_outputs) {
          auto d = (*d_outputs)[b].row(static_cast<Eigen::Index>(t - 1));
          for (Eigen::Index k = 0; k < logits.size(); ++k) {
            double g = std::exp(static_cast<double>(logits(k)) - lse);
            if (k == target.discrete_id) g -= 1.0;
            d(static_cast<Eigen::Index>(C) + k) += static_cast<T>(cw * cls_scale * g);
          }
        }
      }
      const double rw = seq.reg_weights[t];
      if (rw > 0.0) {
        double l = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          const double e = static_cast<double>(row(static_cast<Eigen::Index>(c))) - target.continuous[c];
          double g;
          if (cfg.reg_loss == RegressionLoss::kMse) {
            l += e * e;
            g = 2.0 * e;
          } else if (std::abs(e) <= cfg.huber_delta) {
            l += 0.5 * e * e;
            g = e;
          } else {
            l += cfg.huber_delta * (std::abs(e) - 0.5 * cfg.huber_delta);
            g = cfg.huber_delta * (e > 0 ? 1.0 : -1.0);
          }
          if (d_outputs)
            (*d_outputs)[b](static_cast<Eigen::Index>(t - 1), static_cast<Eigen::Index>(c)) +=
                static_cast<T>(rw * reg_scale * g / static_cast<double>(C));
        }
        reg_sum += rw * l / static_cast<double>(C);
      }
    }
  }
  LossBreakdown r;
  r.n_cls = n_cls;
  r.n_reg = n_reg;
  r.cls = ce_sum * cls_scale;
  r.reg = n_reg ? reg_sum / static_cast<double>(n_reg) : 0.0;
  r.total = r.cls + cfg.reg_weight * r.reg;
  return r;
}

namespace {

struct Partial {
  double ce = 0.0, reg = 0.0;
};

}  // namespace

template <typename T>
LossBreakdown batch_gradient(const Params<T>& params, std::span<const Example> batch, const VocabLayout& layout,
                             const LossConfig& cfg, Params<T>* grads, std::size_t threads) {
  if (grads) grads->set_zero();
  if (batch.empty()) return {};

  // Active-target counts over the whole batch fix the normalizers, so each
  // chunk can be scored independently and the results summed.
  std::size_t n_cls = 0, n_reg = 0;
  for (const auto& ex : batch)
    for (std::size_t t = 1; t < ex.seq.length; ++t) {
      if (ex.seq.cls_weights[t] > 0.0f) ++n_cls;
      if (ex.seq.reg_weights[t] > 0.0f) ++n_reg;
    }

  threads = std::max<std::size_t>(1, std::min(threads, batch.size()));
  std::vector<Partial> partial(threads);
  std::vector<Params<T>> local;
  if (grads && threads > 1) local.assign(threads - 1, Params<T>(params.config()));

  auto work = [&](std::size_t w) {
    const std::size_t lo = batch.size() * w / threads, hi = batch.size() * (w + 1) / threads;
    Params<T>* g = grads ? (w == 0 ? grads : &local[w - 1]) : nullptr;
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& ex = batch[i];
      const std::size_t L = ex.seq.length;
      if (L < 2) continue;
      const Mat<T> tokens = dense_tokens<T>(ex.seq, layout, L);
      std::vector<int> days(L);
      for (std::size_t p = 0; p < L; ++p) days[p] = ex.seq.tokens[p].day_index;
      ForwardCache<T> cache;
      const Mat<T> out = forward(params, tokens, days, ex.mask, g ? &cache : nullptr);
      const TokenSequence* sp = &ex.seq;
      std::vector<Mat<T>> d_out;
      const auto lb = compute_loss<T>(std::span<const Mat<T>>(&out, 1), std::span<const TokenSequence* const>(&sp, 1),
                                      layout, cfg, g ? &d_out : nullptr);
      // Rescale from per-sequence to batch normalizers.
      const double cls_f = lb.n_cls ? static_cast<double>(lb.n_cls) / static_cast<double>(n_cls) : 0.0;
      const double reg_f = lb.n_reg ? static_cast<double>(lb.n_reg) / static_cast<double>(n_reg) : 0.0;
      partial[w].ce += lb.cls * cls_f;
      partial[w].reg += lb.reg * reg_f;
      if (g) {
        // Recompute d_out with batch normalizers: the classification and
        // regression parts were scaled by 1/n_cls_seq and w/n_reg_seq.
        Mat<T>& d = d_out.front();
        const auto C = static_cast<Eigen::Index>(layout.continuous_width());
        d.leftCols(C) *= static_cast<T>(reg_f);
        d.rightCols(d.cols() - C) *= static_cast<T>(cls_f);
        backward(params, cache, d, *g);
      }
    }
  };

  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
    if (grads)
      for (auto& l : local) {
        auto dst = grads->values();
        const auto src = l.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
  }

  LossBreakdown r;
  r.n_cls = n_cls;
  r.n_reg = n_reg;
  for (const auto& p : partial) {
    r.cls += p.ce;
    r.reg += p.reg;
  }
  r.total = r.cls + cfg.reg_weight * r.reg;
  return r;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train: batch_size must be > 0");
  if (!(lr_init > 0.0) || !(lr_min >= 0.0) || lr_min > lr_init)
    throw ConfigError("train: learning rates must satisfy 0 <= lr_min <= lr_init, lr_init > 0");
  if (epochs == 0 && max_steps == 0) throw ConfigError("train: epochs or max_steps must be > 0");
  if (loss.reg_weight < 0.0) throw ConfigError("train: reg_weight must be >= 0");
  if (!(loss.huber_delta > 0.0)) throw ConfigError("train: huber_delta must be > 0");
  if (grad_clip < 0.0) throw ConfigError("train: grad_clip must be >= 0");
  if (threads == 0) throw ConfigError("train: threads must be > 0");
  if (mismatch_buffer < 2) throw ConfigError("train: mismatch_buffer must hold at least 2 pixels");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) || !(adam_eps > 0.0))
    throw ConfigError("train: invalid Adam hyperparameters");
}

double cosine_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (total_steps == 0) throw std::invalid_argument("cosine_lr: total_steps must be > 0");
  if (step > total_steps) throw std::invalid_argument("cosine_lr: step beyond total_steps");
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

template <typename T>
Adam<T>::Adam(std::size_t n, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

template <typename T>
void Adam<T>::step(Params<T>& params, const Params<T>& grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw std::invalid_argument("Adam: parameter count mismatch");
  const auto g = grads.values();
  for (const auto& info : grads.tensors())
    for (std::size_t i = info.offset; i < info.offset + info.size; ++i)
      if (!std::isfinite(static_cast<double>(g[i])))
        throw std::runtime_error("non-finite gradient in tensor '" + info.name + "'");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  auto p = params.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = static_cast<double>(g[i]);
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * gi;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * gi * gi;
    const double mh = m_[i] / c1, vh = v_[i] / c2;
    p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * mh / (std::sqrt(vh) + eps_));
  }
}

BatchBuilder::BatchBuilder(SampleStream& stream, std::span<const TrainTask> tasks, const VocabLayout& layout,
                           SampleStreamConfig stream_cfg, std::size_t max_len, std::size_t mismatch_capacity,
                           std::uint64_t seed)
    : stream_(stream),
      tasks_(tasks.begin(), tasks.end()),
      layout_(layout),
      cfg_(std::move(stream_cfg)),
      buffer_(mismatch_capacity),
      rng_(seed),
      max_len_(max_len) {
  if (tasks_.empty()) throw ConfigError("train: no tasks configured");
  for (const auto& t : tasks_)
    if (!(t.tmpl.sampling_weight > 0.0))
      throw ConfigError("template '" + t.tmpl.name + "': sampling_weight must be > 0");
}

PixelSeries BatchBuilder::next_pixel() {
  if (auto p = stream_.next()) return std::move(*p);
  if (auto p = stream_.next()) return std::move(*p);
  throw ConfigError("train: the dataset yields no pixels");
}

std::vector<Example> BatchBuilder::next(std::size_t batch_size) {
  std::vector<TokenSequence> seqs;
  seqs.reserve(batch_size);
  std::vector<double> weights(tasks_.size());
  std::size_t attempts = 0;
  while (seqs.size() < batch_size) {
    if (++attempts > 100 * batch_size + 1000)
      throw ConfigError("train: no task accepts the streamed pixels (check task tile filters)");
    PixelSeries pixel = next_pixel();
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
      const auto& tiles = tasks_[i].tiles;
      const bool ok = tiles.empty() || std::find(tiles.begin(), tiles.end(), pixel.tile_id) != tiles.end();
      weights[i] = ok ? tasks_[i].tmpl.sampling_weight : 0.0;
    }
    buffer_.push(pixel);
    if (std::all_of(weights.begin(), weights.end(), [](double w) { return w == 0.0; })) continue;
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    const auto& tmpl = tasks_[pick(rng_)].tmpl;

    PixelSeries sample = std::move(pixel);
    if (tmpl.has_discrimination()) {
      if (buffer_.size() < 2) continue;
      sample = make_discrimination_pair(sample, buffer_, rng_, tmpl.discrimination()->arg).sample;
    }
    sample = dropout_augment(std::move(sample), cfg_, rng_);
    seqs.push_back(compile_sequence(tmpl, sample, layout_, max_len_, cfg_.regression_enabled, false));
  }

  std::size_t longest = 0;
  for (const auto& s : seqs) longest = std::max(longest, s.length);
  std::vector<Example> batch;
  batch.reserve(seqs.size());
  for (auto& s : seqs) {
    pad_sequence(s, layout_, longest);
    MaskScheme scheme = cfg_.mask;
    if (scheme.kind != MaskScheme::Kind::kNone) {
      const auto& secs = layout_.continuous_sections();
      bool present = false;
      for (std::size_t i = 0; i < s.length && !present; ++i)
        present = s.tokens[i].kind == TokenKind::kContinuous &&
                  secs[static_cast<std::size_t>(s.tokens[i].section)].name == scheme.modality;
      if (!present) scheme.kind = MaskScheme::Kind::kNone;
    }
    AttentionMask mask = build_attention_mask(s, scheme, layout_, rng_);
    batch.push_back({std::move(s), std::move(mask)});
  }
  return batch;
}

namespace {

const char* loss_name(RegressionLoss l) { return l == RegressionLoss::kMse ? "mse" : "huber"; }

nlohmann::json config_record(const ModelConfig& m, const TrainConfig& c, const SampleStreamConfig& s,
                             std::size_t total_steps, std::size_t params) {
  return {{"type", "config"},
          {"model",
           {{"n_blocks", m.n_blocks},
            {"n_heads", m.n_heads},
            {"d_model", m.d_model},
            {"mlp_expansion", m.mlp_expansion},
            {"max_day_index", m.max_day_index},
            {"max_position_index", m.max_position_index},
            {"parameters", params}}},
          {"train",
           {{"batch_size", c.batch_size},
            {"lr_init", c.lr_init},
            {"lr_min", c.lr_min},
            {"epochs", c.epochs},
            {"total_steps", total_steps},
            {"reg_loss", loss_name(c.loss.reg_loss)},
            {"reg_weight", c.loss.reg_weight},
            {"seed", c.seed},
            {"adam", {{"beta1", c.adam_beta1}, {"beta2", c.adam_beta2}, {"eps", c.adam_eps}}}}},
          {"stream",
           {{"patch_buffer", s.patch_buffer},
            {"workers", s.workers},
            {"dropout_enabled", s.dropout_enabled},
            {"dropout_fraction_of_samples", s.dropout_fraction_of_samples},
            {"dropout_rate", {s.dropout_rate_min, s.dropout_rate_max}},
            {"regression_enabled", s.regression_enabled},
            {"mask", mask_kind_name(s.mask.kind)}}}};
}

void clip_global_norm(std::span<float> g, double max_norm) {
  double sq = 0.0;
  for (float v : g) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const auto s = static_cast<float>(max_norm / norm);
    for (float& v : g) v *= s;
  }
}

}  // namespace

TrainResult train(const PatchSource& data, std::vector<std::size_t> patch_indices, std::span<const TrainTask> tasks,
                  const VocabLayout& layout, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const SampleStreamConfig& stream_cfg, const TrainOptions& options) {
  model_cfg.validate();
  train_cfg.validate();
  stream_cfg.validate();
  if (model_cfg.input_width != layout.total_width() || model_cfg.output_width != layout.total_width())
    throw ConfigError("model widths do not match the vocabulary layout");
  for (const auto& t : tasks) {
    const auto report = template_vocab_check(t.tmpl, layout);
    if (!report.ok()) throw ConfigError("template '" + t.tmpl.name + "': " + report.failures.front());
  }

  SampleStream stream(data, std::move(patch_indices), stream_cfg, train_cfg.seed);
  std::size_t total = train_cfg.max_steps;
  if (total == 0) {
    const std::size_t pixels = stream.count_pixels();
    if (pixels == 0) throw ConfigError("train: the dataset yields no pixels");
    total = train_cfg.epochs * ((pixels + train_cfg.batch_size - 1) / train_cfg.batch_size);
  }

  BatchBuilder builder(stream, tasks, layout, stream_cfg, model_cfg.max_position_index, train_cfg.mismatch_buffer,
                       train_cfg.seed ^ 0x5eed5eedULL);
  TrainResult result;
  if (options.init) {
    if (options.init->config() != model_cfg) throw ConfigError("initial parameters do not match the model config");
    result.params = *options.init;
  } else {
    result.params = Params<float>(model_cfg);
    result.params.init(train_cfg.seed);
  }
  Params<float> grads(model_cfg);
  Adam<float> adam(result.params.size(), train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps);

  std::ofstream log;
  auto save = [&](std::size_t steps) {
    if (options.run_dir.empty()) return;
    const auto& pre = stream_cfg.preprocess;
    const nlohmann::json meta = {{"steps", steps},
                                 {"seed", train_cfg.seed},
                                 {"preprocess",
                                  {{"max_s2_steps", pre.max_s2_steps},
                                   {"green_band", pre.cloud.green_band},
                                   {"swir1_band", pre.cloud.swir1_band},
                                   {"clear_threshold", pre.cloud.clear_threshold}}}};
    save_checkpoint(options.run_dir / "checkpoint.bin", {model_cfg, layout, result.params, meta.dump()});
  };
  if (!options.run_dir.empty()) {
    std::filesystem::create_directories(options.run_dir);
    log.open(options.run_dir / "train_log.ndjson");
    if (!log) throw ConfigError("cannot write " + (options.run_dir / "train_log.ndjson").string());
    log << config_record(model_cfg, train_cfg, stream_cfg, total, result.params.size()).dump() << '\n';
  }

  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < total; ++step) {
    const auto batch = builder.next(train_cfg.batch_size);
    const double lr = cosine_lr(step, total, train_cfg);
    const auto loss = batch_gradient<float>(result.params, batch, layout, train_cfg.loss, &grads, train_cfg.threads);
    if (!std::isfinite(loss.total))
      throw std::runtime_error("non-finite loss at step " + std::to_string(step));
    if (train_cfg.grad_clip > 0.0) clip_global_norm(grads.values(), train_cfg.grad_clip);
    adam.step(result.params, grads, lr);

    StepRecord rec;
    rec.step = step;
    rec.epoch = builder.epoch();
    rec.lr = lr;
    rec.loss = loss;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(rec);
    if (log && (step % train_cfg.log_every == 0 || step + 1 == total))
      log << nlohmann::json{{"step", step},         {"epoch", rec.epoch},       {"lr", lr},
                            {"cls_loss", loss.cls}, {"reg_loss", loss.reg},     {"total", loss.total},
                            {"n_cls", loss.n_cls},  {"n_reg", loss.n_reg},      {"wall_seconds", rec.wall_seconds}}
                 .dump()
          << '\n' << std::flush;
    if (options.on_step) options.on_step(rec);
    if (train_cfg.checkpoint_every && (step + 1) % train_cfg.checkpoint_every == 0) save(step + 1);
  }
  result.steps = total;
  save(total);
  return result;
}

template LossBreakdown compute_loss<float>(std::span<const Mat<float>>, std::span<const TokenSequence* const>,
                                           const VocabLayout&, const LossConfig&, std::vector<Mat<float>>*);
template LossBreakdown compute_loss<double>(std::span<const Mat<double>>, std::span<const TokenSequence* const>,
                                            const VocabLayout&, const LossConfig&, std::vector<Mat<double>>*);
template LossBreakdown batch_gradient<float>(const Params<float>&, std::span<const Example>, const VocabLayout&,
                                             const LossConfig&, Params<float>*, std::size_t);
template LossBreakdown batch_gradient<double>(const Params<double>&, std::span<const Example>, const VocabLayout&,
                                              const LossConfig&, Params<double>*, std::size_t);
template class Adam<float>;
template class Adam<double>;

}  // namespace sitsdeco
