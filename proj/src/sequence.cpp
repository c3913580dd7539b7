// SPDX-License-Identifier: Apache-2.0

#include "sitsdeco/sequence.hpp"

#include <algorithm>
#include <json.hpp>
#include <stdexcept>

namespace sitsdeco {
namespace {

constexpr std::size_t kQueueCapacity = 4096;

TokenRecord symbolic_token(const VocabLayout& layout, std::size_t discrete_id, int position,
                           TokenKind kind) {
  TokenRecord tok;
  tok.kind = kind;
  tok.continuous.assign(layout.continuous_width(), 0.0f);
  tok.discrete_id = static_cast<int>(discrete_id);
  tok.day_index = position;
  return tok;
}

void push_token(TokenSequence& seq, TokenRecord tok, float cls_w, float reg_w) {
  seq.tokens.push_back(std::move(tok));
  seq.cls_weights.push_back(cls_w);
  seq.reg_weights.push_back(reg_w);
  seq.valid.push_back(1);
  seq.length = seq.tokens.size();
}

int section_index(const VocabLayout& layout, std::string_view name) {
  const auto& secs = layout.continuous_sections();
  for (std::size_t i = 0; i < secs.size(); ++i)
    if (secs[i].name == name) return static_cast<int>(i);
  return -1;
}

void push_observation(TokenSequence& seq, const VocabLayout& layout, int section, std::span<const float> values,
                      int day_index, bool clear) {
  const auto& sec = layout.continuous_sections()[static_cast<std::size_t>(section)];
  if (values.size() != sec.width)
    throw ConfigError("modality '" + sec.name + "' has width " + std::to_string(sec.width) +
                      " but the sample provides " + std::to_string(values.size()) + " values");
  TokenRecord tok;
  tok.kind = TokenKind::kContinuous;
  tok.section = section;
  tok.continuous.assign(layout.continuous_width(), 0.0f);
  std::copy(values.begin(), values.end(), tok.continuous.begin() + static_cast<std::ptrdiff_t>(sec.offset));
  tok.day_index = day_index;
  const float reg = seq.regression_enabled && clear ? 1.0f : 0.0f;
  push_token(seq, std::move(tok), 0.0f, reg);
}

}  // namespace

MaskScheme::Kind mask_kind_from_name(std::string_view name) {
  if (name == "none") return MaskScheme::Kind::kNone;
  if (name == "random") return MaskScheme::Kind::kRandom;
  if (name == "patch") return MaskScheme::Kind::kPatch;
  if (name == "complete") return MaskScheme::Kind::kComplete;
  throw ConfigError("unknown mask scheme '" + std::string(name) + "'");
}

std::string_view mask_kind_name(MaskScheme::Kind kind) {
  switch (kind) {
    case MaskScheme::Kind::kNone: return "none";
    case MaskScheme::Kind::kRandom: return "random";
    case MaskScheme::Kind::kPatch: return "patch";
    case MaskScheme::Kind::kComplete: return "complete";
  }
  return "?";
}

void SampleStreamConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(dropout_fraction_of_samples) || !prob(dropout_rate_min) || !prob(dropout_rate_max))
    throw ConfigError("stream: dropout probabilities must lie in [0, 1]");
  if (dropout_rate_min > dropout_rate_max) throw ConfigError("stream: dropout min rate exceeds max rate");
  if (!prob(mask.probability)) throw ConfigError("stream: mask probability must lie in [0, 1]");
  if (patch_buffer == 0) throw ConfigError("stream: patch_buffer must be > 0");
  if (workers == 0) throw ConfigError("stream: workers must be > 0");
  if (!regression_enabled && mask.kind != MaskScheme::Kind::kNone)
    throw ConfigError("stream: attention mask schemes require regression to be enabled");
}

bool AttentionMask::is_causal() const {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if ((*this)(i, j)) return false;
  return true;
}

void push_symbol(TokenSequence& seq, const VocabLayout& layout, Symbol s) {
  push_token(seq, symbolic_token(layout, layout.symbol_id(s), static_cast<int>(seq.tokens.size()), TokenKind::kSymbolic),
             0.0f, 0.0f);
}

void push_categorical(TokenSequence& seq, const VocabLayout& layout, std::size_t discrete_id) {
  if (!layout.is_generatable(discrete_id))
    throw std::invalid_argument("discrete id " + std::to_string(discrete_id) + " is not a generatable token");
  push_token(seq,
             symbolic_token(layout, discrete_id, static_cast<int>(seq.tokens.size()), TokenKind::kCategorical),
             1.0f, 0.0f);
}

TokenSequence compile_sequence(const TaskTemplate& t, const PixelSeries& sample, const VocabLayout& layout,
                               std::size_t max_len, bool regression_enabled, bool pad) {
  TokenSequence seq;
  seq.template_name = t.name;
  seq.regression_enabled = regression_enabled;
  for (const auto& e : t.elements) {
    switch (e.kind) {
      case ElementKind::kTaskMarker: {
        const auto sym = task_marker_for(e.arg);
        if (!sym) throw ConfigError("template '" + t.name + "': no task marker for '" + e.arg + "'");
        push_symbol(seq, layout, *sym);
        break;
      }
      case ElementKind::kDataBlock: {
        const int sec = section_index(layout, e.arg);
        if (sec < 0) throw ConfigError("template '" + t.name + "': layout has no modality '" + e.arg + "'");
        if (e.arg == "S2") {
          for (std::size_t i = 0; i < sample.s2.size(); ++i) {
            const bool clear = i < sample.s2_clear.size() ? sample.s2_clear[i] != 0 : true;
            push_observation(seq, layout, sec, sample.s2[i].values, sample.s2[i].day, clear);
          }
        } else if (e.arg == "S1") {
          for (const auto& o : sample.s1) push_observation(seq, layout, sec, o.values, o.day, true);
        } else if (e.arg == "LATLON") {
          push_observation(seq, layout, sec, sample.latlon, static_cast<int>(seq.tokens.size()), true);
        } else {
          throw ConfigError("template '" + t.name + "': sample carries no data for modality '" + e.arg + "'");
        }
        break;
      }
      case ElementKind::kCategorical: {
        int value = 0;
        if (e.arg == kCropVocab) {
          value = sample.label;
        } else if (e.arg == kTileVocab) {
          value = sample.tile_id;
        } else {
          throw ConfigError("template '" + t.name + "': sample carries no value for '" + e.arg + "'");
        }
        if (value < 0) throw ConfigError("template '" + t.name + "': negative " + e.arg + " value");
        push_categorical(seq, layout, layout.categorical_id(e.arg, static_cast<std::size_t>(value)));
        break;
      }
      case ElementKind::kDiscrimination: {
        if (!sample.discrim_match)
          throw ConfigError("template '" + t.name + "': discrimination element needs a paired sample");
        push_categorical(seq, layout, layout.symbol_id(*sample.discrim_match ? Symbol::kMatch : Symbol::kMismatch));
        break;
      }
      case ElementKind::kEos:
        push_symbol(seq, layout, Symbol::kEos);
        break;
    }
  }
  if (seq.length > max_len)
    throw ConfigError("template '" + t.name + "': sequence length " + std::to_string(seq.length) +
                      " exceeds max_len " + std::to_string(max_len));
  if (pad) pad_sequence(seq, layout, max_len);
  return seq;
}

void pad_sequence(TokenSequence& seq, const VocabLayout& layout, std::size_t max_len) {
  const std::size_t length = seq.length;
  while (seq.tokens.size() < max_len) {
    push_token(seq,
               symbolic_token(layout, layout.symbol_id(Symbol::kPad), static_cast<int>(seq.tokens.size()),
                              TokenKind::kSymbolic),
               0.0f, 0.0f);
    seq.valid.back() = 0;
  }
  seq.length = length;
}

AttentionMask build_attention_mask(const TokenSequence& seq, const MaskScheme& scheme, const VocabLayout& layout,
                                   Rng& rng) {
  const std::size_t n = seq.size();
  std::vector<std::uint8_t> column(seq.valid.begin(), seq.valid.end());

  if (scheme.kind != MaskScheme::Kind::kNone) {
    if (!seq.regression_enabled)
      throw ConfigError("attention mask scheme '" + std::string(mask_kind_name(scheme.kind)) +
                        "' requires regression to be enabled");
    const int sec = section_index(layout, scheme.modality);
    std::vector<std::size_t> steps;
    for (std::size_t i = 0; i < n; ++i)
      if (seq.valid[i] && seq.tokens[i].kind == TokenKind::kContinuous && seq.tokens[i].section == sec)
        steps.push_back(i);
    if (sec < 0 || steps.empty())
      throw ConfigError("attention mask targets modality '" + scheme.modality + "' absent from the sequence");
    switch (scheme.kind) {
      case MaskScheme::Kind::kRandom: {
        std::bernoulli_distribution coin(scheme.probability);
        for (auto i : steps)
          if (coin(rng)) column[i] = 0;
        break;
      }
      case MaskScheme::Kind::kPatch: {
        const std::size_t len = std::min(scheme.patch_len, steps.size());
        std::uniform_int_distribution<std::size_t> start(0, steps.size() - len);
        const std::size_t s = start(rng);
        for (std::size_t k = s; k < s + len; ++k) column[steps[k]] = 0;
        break;
      }
      case MaskScheme::Kind::kComplete:
        for (auto i : steps) column[i] = 0;
        break;
      case MaskScheme::Kind::kNone:
        break;
    }
  }

  AttentionMask m{n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m(i, j) = column[j];
  return m;
}

PixelSeries drop_observations(PixelSeries series, double rate, Rng& rng) {
  if (rate <= 0.0) return series;
  std::bernoulli_distribution drop(rate);
  std::vector<Observation> s2;
  std::vector<std::uint8_t> clear;
  for (std::size_t i = 0; i < series.s2.size(); ++i) {
    if (drop(rng)) continue;
    s2.push_back(std::move(series.s2[i]));
    if (i < series.s2_clear.size()) clear.push_back(series.s2_clear[i]);
  }
  std::vector<Observation> s1;
  for (auto& o : series.s1)
    if (!drop(rng)) s1.push_back(std::move(o));
  series.s2 = std::move(s2);
  series.s2_clear = std::move(clear);
  series.s1 = std::move(s1);
  return series;
}

PixelSeries dropout_augment(PixelSeries series, const SampleStreamConfig& cfg, Rng& rng) {
  if (!cfg.dropout_enabled) return series;
  std::bernoulli_distribution augment(cfg.dropout_fraction_of_samples);
  if (!augment(rng)) return series;
  std::uniform_real_distribution<double> rate(cfg.dropout_rate_min, cfg.dropout_rate_max);
  return drop_observations(std::move(series), rate(rng), rng);
}

MismatchBuffer::MismatchBuffer(std::size_t capacity) : capacity_(std::max<std::size_t>(capacity, 1)) {
  items_.reserve(capacity_);
}

void MismatchBuffer::push(const PixelSeries& p) {
  std::lock_guard lock(mu_);
  if (items_.size() < capacity_) {
    items_.push_back(p);
  } else {
    items_[next_] = p;
  }
  next_ = (next_ + 1) % capacity_;
}

PixelSeries MismatchBuffer::draw(std::uint64_t exclude_source, Rng& rng) const {
  std::lock_guard lock(mu_);
  std::vector<std::size_t> candidates;
  candidates.reserve(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i)
    if (items_[i].source_id != exclude_source) candidates.push_back(i);
  if (candidates.empty()) throw std::runtime_error("mismatch buffer holds no pixel other than the anchor");
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  return items_[candidates[pick(rng)]];
}

std::size_t MismatchBuffer::size() const {
  std::lock_guard lock(mu_);
  return items_.size();
}

DiscriminationPair make_discrimination_pair(const PixelSeries& sample_a, const MismatchBuffer& buffer, Rng& rng,
                                            std::string_view pairing, std::optional<bool> force_match) {
  bool match = false;
  if (force_match) {
    match = *force_match;
  } else {
    std::bernoulli_distribution coin(0.5);
    match = coin(rng);
  }
  DiscriminationPair out{sample_a, match ? Symbol::kMatch : Symbol::kMismatch};
  out.sample.discrim_match = match;
  if (match) return out;

  const PixelSeries b = buffer.draw(sample_a.source_id, rng);
  if (pairing == "S1") {
    out.sample.s1 = b.s1;
    out.sample.s1_source_id = b.source_id;
  } else if (pairing == "S2") {
    out.sample.s2 = b.s2;
    out.sample.s2_clear = b.s2_clear;
    out.sample.s1_source_id = sample_a.s1_source_id;
    out.sample.source_id = sample_a.source_id;
  } else {
    throw ConfigError("unsupported discrimination pairing '" + std::string(pairing) + "'");
  }
  return out;
}

// ---------------------------------------------------------------------------
// SampleStream

SampleStream::SampleStream(const PatchSource& source, std::vector<std::size_t> patch_indices,
                           SampleStreamConfig cfg, std::uint64_t seed)
    : source_(source), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (patch_indices.empty()) throw ConfigError("stream: empty dataset");
  const std::size_t workers = std::min(cfg_.workers, patch_indices.size());
  shards_.resize(workers);
  for (std::size_t i = 0; i < patch_indices.size(); ++i) shards_[i % workers].patches.push_back(patch_indices[i]);
  for (std::size_t w = 0; w < workers; ++w) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(w)};
    shards_[w].rng.seed(seq);
  }
}

SampleStream::~SampleStream() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  join_workers();
}

void SampleStream::start_epoch(Shard& shard) {
  shard.order = shard.patches;
  std::shuffle(shard.order.begin(), shard.order.end(), shard.rng);
  shard.cursor = 0;
  shard.resident.clear();
  shard.resident_total = 0;
  refill(shard);
}

void SampleStream::refill(Shard& shard) {
  while (shard.resident.size() < cfg_.patch_buffer && shard.cursor < shard.order.size()) {
    const std::size_t idx = shard.order[shard.cursor++];
    auto pixels = extract_pixels(source_.load(idx), idx, cfg_.preprocess);
    if (!cfg_.skip_labels.empty())
      std::erase_if(pixels, [&](const PixelSeries& p) {
        return std::find(cfg_.skip_labels.begin(), cfg_.skip_labels.end(), p.label) != cfg_.skip_labels.end();
      });
    if (pixels.empty()) continue;
    shard.resident_total += pixels.size();
    shard.resident.push_back(std::move(pixels));
  }
}

std::optional<PixelSeries> SampleStream::next_from(Shard& shard) {
  if (shard.resident_total == 0) refill(shard);
  if (shard.resident_total == 0) return std::nullopt;
  std::uniform_int_distribution<std::size_t> pick(0, shard.resident_total - 1);
  std::size_t r = pick(shard.rng);
  std::size_t b = 0;
  while (r >= shard.resident[b].size()) r -= shard.resident[b++].size();
  auto& bucket = shard.resident[b];
  PixelSeries out = std::move(bucket[r]);
  bucket[r] = std::move(bucket.back());
  bucket.pop_back();
  --shard.resident_total;
  if (bucket.empty()) {
    shard.resident.erase(shard.resident.begin() + static_cast<std::ptrdiff_t>(b));
    refill(shard);
  }
  return out;
}

void SampleStream::launch_workers() {
  finished_ = 0;
  queue_.clear();
  for (auto& shard : shards_) {
    threads_.emplace_back([this, &shard] {
      for (;;) {
        auto p = next_from(shard);
        std::unique_lock lock(mu_);
        if (!p || stop_) {
          ++finished_;
          cv_.notify_all();
          return;
        }
        cv_.wait(lock, [&] { return queue_.size() < kQueueCapacity || stop_; });
        queue_.push_back(std::move(*p));
        cv_.notify_all();
      }
    });
  }
}

void SampleStream::join_workers() {
  for (auto& t : threads_)
    if (t.joinable()) t.join();
  threads_.clear();
}

std::optional<PixelSeries> SampleStream::next() {
  if (!epoch_open_) {
    for (auto& shard : shards_) start_epoch(shard);
    if (shards_.size() > 1) launch_workers();
    epoch_open_ = true;
  }
  if (shards_.size() == 1) {
    auto p = next_from(shards_.front());
    if (!p) {
      epoch_open_ = false;
      ++epoch_;
    }
    return p;
  }
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return !queue_.empty() || finished_ == shards_.size(); });
  if (!queue_.empty()) {
    PixelSeries p = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return p;
  }
  lock.unlock();
  join_workers();
  epoch_open_ = false;
  ++epoch_;
  return std::nullopt;
}

std::size_t SampleStream::count_pixels() const {
  std::size_t total = 0;
  for (const auto& shard : shards_)
    for (auto idx : shard.patches) {
      const auto patch = source_.load(idx);
      total += static_cast<std::size_t>(std::count_if(patch.labels.begin(), patch.labels.end(), [&](int l) {
        return std::find(cfg_.skip_labels.begin(), cfg_.skip_labels.end(), l) == cfg_.skip_labels.end();
      }));
    }
  return total;
}

std::string dump_sequence(const TokenSequence& seq, const VocabLayout& layout) {
  using nlohmann::json;
  json tokens = json::array();
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto& tok = seq.tokens[i];
    json t;
    t["pos"] = i;
    t["day_index"] = tok.day_index;
    t["cls_w"] = seq.cls_weights[i];
    t["reg_w"] = seq.reg_weights[i];
    t["valid"] = seq.valid[i];
    if (tok.kind == TokenKind::kContinuous) {
      const auto& sec = layout.continuous_sections()[static_cast<std::size_t>(tok.section)];
      t["kind"] = "data";
      t["section"] = sec.name;
      t["values"] = std::vector<float>(tok.continuous.begin() + static_cast<std::ptrdiff_t>(sec.offset),
                                       tok.continuous.begin() + static_cast<std::ptrdiff_t>(sec.offset + sec.width));
    } else {
      const auto id = static_cast<std::size_t>(tok.discrete_id);
      const auto& sec = layout.owner_of(id);
      t["kind"] = tok.kind == TokenKind::kCategorical ? "categorical" : "symbolic";
      t["section"] = sec.name;
      if (sec.name == kSymbolicVocab)
        t["token"] = symbol_name(static_cast<Symbol>(id - sec.offset));
      else
        t["token"] = id - sec.offset;
    }
    tokens.push_back(std::move(t));
  }
  json doc = {{"template", seq.template_name}, {"length", seq.length}, {"tokens", tokens}};
  return doc.dump(1);
}

}  // namespace sitsdeco
