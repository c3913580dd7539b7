// SPDX-License-Identifier: Apache-2.0

#include "sitsdeco/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace sitsdeco {
namespace {

AttentionMask causal_mask(std::size_t n) {
  AttentionMask m{n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m(i, j) = 1;
  return m;
}

/// Output row for the last of the first `length` tokens.
Eigen::RowVectorXf last_output(const TokenSequence& seq, std::size_t length, const Params<float>& params,
                               const VocabLayout& layout) {
  const Mat<float> tokens = dense_tokens<float>(seq, layout, length);
  std::vector<int> days(length);
  for (std::size_t p = 0; p < length; ++p) days[p] = seq.tokens[p].day_index;
  const Mat<float> out = forward(params, tokens, days, causal_mask(length));
  return out.row(static_cast<Eigen::Index>(length - 1));
}

GeneratedToken argmax_slice(const Eigen::RowVectorXf& row, std::string_view subvocab, const VocabLayout& layout) {
  const auto slice = layout.generation_slice(subvocab);
  const std::size_t C = layout.continuous_width();
  std::size_t best = 0;
  for (std::size_t k = 1; k < slice.size(); ++k)
    if (row(static_cast<Eigen::Index>(C + slice[k])) > row(static_cast<Eigen::Index>(C + slice[best]))) best = k;
  return {std::string(subvocab), best, slice[best]};
}

/// Sub-vocabulary a generated discrete id belongs to.
std::string generated_subvocab(std::size_t id, const VocabLayout& layout) {
  const auto& owner = layout.owner_of(id);
  return owner.name == kSymbolicVocab ? std::string(kDiscrimVocab) : owner.name;
}

template <typename F>
void parallel_chunks(std::size_t n, std::size_t threads, F&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex mu;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        fn(n * w / threads, n * (w + 1) / threads);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

std::vector<GeneratedToken> generate(const TokenSequence& prefix, const PromptSpec& prompt,
                                     const Params<float>& params, const VocabLayout& layout) {
  if (prompt.steps.empty()) throw std::invalid_argument("prompt requests no tokens");
  for (const auto& s : prompt.steps) layout.generation_slice(s);
  const auto first_marker = task_marker_for(prompt.steps.front());
  if (prefix.length == 0 || !first_marker ||
      prefix.tokens[prefix.length - 1].discrete_id != static_cast<int>(layout.symbol_id(*first_marker)))
    throw std::invalid_argument("prompt prefix must end with the task marker for '" + prompt.steps.front() + "'");

  TokenSequence seq = prefix;
  seq.tokens.resize(prefix.length);
  seq.cls_weights.resize(prefix.length);
  seq.reg_weights.resize(prefix.length);
  seq.valid.resize(prefix.length);
  std::vector<GeneratedToken> out;
  for (std::size_t i = 0; i < prompt.steps.size(); ++i) {
    const auto tok = argmax_slice(last_output(seq, seq.length, params, layout), prompt.steps[i], layout);
    push_categorical(seq, layout, tok.discrete_id);
    out.push_back(tok);
    if (i + 1 < prompt.steps.size()) {
      const auto marker = task_marker_for(prompt.steps[i + 1]);
      if (!marker) throw ConfigError("no task marker for '" + prompt.steps[i + 1] + "'");
      push_symbol(seq, layout, *marker);
    }
  }
  return out;
}

std::vector<GeneratedToken> prompt_template(const TaskTemplate& tmpl, const PixelSeries& sample,
                                            const Params<float>& params, const VocabLayout& layout) {
  // Placeholders fill the generated positions; each is overwritten by the
  // model's choice before any later position is evaluated.
  PixelSeries s = sample;
  s.label = 0;
  s.tile_id = 0;
  s.discrim_match = true;
  TokenSequence seq = compile_sequence(tmpl, s, layout, params.config().table_size(), false, false);
  std::vector<GeneratedToken> out;
  for (std::size_t p = 1; p < seq.length; ++p) {
    if (seq.cls_weights[p] <= 0.0f) continue;
    const auto sub = generated_subvocab(static_cast<std::size_t>(seq.tokens[p].discrete_id), layout);
    const auto tok = argmax_slice(last_output(seq, p, params, layout), sub, layout);
    seq.tokens[p].discrete_id = static_cast<int>(tok.discrete_id);
    out.push_back(tok);
  }
  return out;
}

std::vector<int> predict_patch(const RawPatch& patch, const TaskTemplate& tmpl, const Params<float>& params,
                               const VocabLayout& layout, const PreprocessConfig& preprocess, std::size_t threads) {
  const auto crop_elem = std::find_if(tmpl.elements.rbegin(), tmpl.elements.rend(), [](const TemplateElement& e) {
    return e.kind == ElementKind::kCategorical && e.arg == kCropVocab;
  });
  if (crop_elem == tmpl.elements.rend())
    throw ConfigError("template '" + tmpl.name + "' has no CROP element to predict");
  const auto pixels = extract_pixels(patch, 0, preprocess);
  std::vector<int> map(pixels.size(), -1);
  parallel_chunks(pixels.size(), threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const auto gen = prompt_template(tmpl, pixels[i], params, layout);
      for (auto it = gen.rbegin(); it != gen.rend(); ++it)
        if (it->subvocab == kCropVocab) {
          map[i] = static_cast<int>(it->index);
          break;
        }
    }
  });
  return map;
}

void finalize_metrics(EvalReport& r, std::span<const int> ignore) {
  const std::size_t K = r.classes;
  auto ignored = [&](std::size_t k) {
    return std::find(ignore.begin(), ignore.end(), static_cast<int>(k)) != ignore.end();
  };
  std::uint64_t total = 0, diag = 0;
  std::vector<std::uint64_t> row(K, 0), col(K, 0);
  for (std::size_t t = 0; t < K; ++t)
    for (std::size_t p = 0; p < K; ++p) {
      const auto c = r.at(t, p);
      total += c;
      row[t] += c;
      col[p] += c;
      if (t == p) diag += c;
    }
  r.samples = total;
  r.oa = total ? static_cast<double>(diag) / static_cast<double>(total) : 0.0;
  r.iou.assign(K, std::numeric_limits<double>::quiet_NaN());
  r.included.assign(K, 0);
  double iou_sum = 0.0, recall_sum = 0.0;
  std::size_t n_iou = 0, n_recall = 0;
  for (std::size_t k = 0; k < K; ++k) {
    if (ignored(k)) continue;
    const auto tp = r.at(k, k);
    const auto uni = row[k] + col[k] - tp;
    if (uni > 0) {
      r.iou[k] = static_cast<double>(tp) / static_cast<double>(uni);
      r.included[k] = 1;
      iou_sum += r.iou[k];
      ++n_iou;
    }
    if (row[k] > 0) {
      recall_sum += static_cast<double>(tp) / static_cast<double>(row[k]);
      ++n_recall;
    }
  }
  r.miou = n_iou ? iou_sum / static_cast<double>(n_iou) : 0.0;
  r.ma = n_recall ? recall_sum / static_cast<double>(n_recall) : 0.0;
}

void accumulate(EvalReport& into, std::span<const int> pred, std::span<const int> truth, std::span<const int> ignore) {
  if (pred.size() != truth.size()) throw std::invalid_argument("compute_metrics: prediction/truth shape mismatch");
  const auto K = static_cast<int>(into.classes);
  if (into.confusion.size() != into.classes * into.classes) into.confusion.assign(into.classes * into.classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (std::find(ignore.begin(), ignore.end(), truth[i]) != ignore.end()) continue;
    if (truth[i] < 0 || truth[i] >= K || pred[i] < 0 || pred[i] >= K)
      throw std::invalid_argument("compute_metrics: class id outside [0, " + std::to_string(K) + ")");
    ++into.confusion[static_cast<std::size_t>(truth[i]) * into.classes + static_cast<std::size_t>(pred[i])];
  }
  finalize_metrics(into, ignore);
}

EvalReport compute_metrics(std::span<const int> pred, std::span<const int> truth, std::size_t classes,
                           std::span<const int> ignore) {
  if (classes == 0) throw std::invalid_argument("compute_metrics: no classes");
  EvalReport r;
  r.classes = classes;
  r.confusion.assign(classes * classes, 0);
  accumulate(r, pred, truth, ignore);
  return r;
}

std::string report_json(const EvalReport& r) {
  nlohmann::json iou = nlohmann::json::array();
  for (std::size_t k = 0; k < r.classes; ++k) {
    if (r.included[k])
      iou.push_back(r.iou[k]);
    else
      iou.push_back(nullptr);
  }
  nlohmann::json conf = nlohmann::json::array();
  for (std::size_t t = 0; t < r.classes; ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < r.classes; ++p) row.push_back(r.at(t, p));
    conf.push_back(row);
  }
  std::vector<std::size_t> excluded;
  for (std::size_t k = 0; k < r.classes; ++k)
    if (!r.included[k]) excluded.push_back(k);
  return nlohmann::json{{"protocol", r.protocol},  {"fold", r.fold}, {"samples", r.samples},
                        {"oa", r.oa},              {"miou", r.miou}, {"ma", r.ma},
                        {"iou", iou},              {"excluded_from_miou", excluded},
                        {"confusion", conf}}
      .dump(2);
}

std::string confusion_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "truth\\pred";
  for (std::size_t p = 0; p < r.classes; ++p) os << ',' << p;
  os << '\n';
  for (std::size_t t = 0; t < r.classes; ++t) {
    std::uint64_t sum = 0;
    for (std::size_t p = 0; p < r.classes; ++p) sum += r.at(t, p);
    os << t;
    for (std::size_t p = 0; p < r.classes; ++p)
      os << ',' << (sum ? static_cast<double>(r.at(t, p)) / static_cast<double>(sum) : 0.0);
    os << '\n';
  }
  return os.str();
}

void write_confusion_ppm(const std::filesystem::path& path, const EvalReport& r, std::size_t cell) {
  const std::size_t n = r.classes * cell;
  std::string pixels(n * n * 3, '\0');
  for (std::size_t t = 0; t < r.classes; ++t) {
    std::uint64_t sum = 0;
    for (std::size_t p = 0; p < r.classes; ++p) sum += r.at(t, p);
    for (std::size_t p = 0; p < r.classes; ++p) {
      const double v = sum ? static_cast<double>(r.at(t, p)) / static_cast<double>(sum) : 0.0;
      // white (0) to dark blue (1)
      const auto red = static_cast<unsigned char>(255.0 * (1.0 - v));
      const auto green = static_cast<unsigned char>(255.0 * (1.0 - 0.8 * v));
      const auto blue = static_cast<unsigned char>(255.0 * (1.0 - 0.4 * v));
      for (std::size_t y = t * cell; y < (t + 1) * cell; ++y)
        for (std::size_t x = p * cell; x < (p + 1) * cell; ++x) {
          const std::size_t o = (y * n + x) * 3;
          pixels[o] = static_cast<char>(red);
          pixels[o + 1] = static_cast<char>(green);
          pixels[o + 2] = static_cast<char>(blue);
        }
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << "P6\n" << n << ' ' << n << "\n255\n";
  f.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
}

void write_report(const std::filesystem::path& dir, const EvalReport& r) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "report.json") << report_json(r) << '\n';
  std::ofstream(dir / "confusion.csv") << confusion_csv(r);
  write_confusion_ppm(dir / "confusion.ppm", r);
}

Protocol protocol_from_name(std::string_view name) {
  if (name == "original5fold") return Protocol::kOriginal5Fold;
  if (name == "pangaea") return Protocol::kPangaea;
  throw ConfigError("unknown protocol '" + std::string(name) + "' (expected original5fold or pangaea)");
}

std::string_view protocol_name(Protocol p) { return p == Protocol::kOriginal5Fold ? "original5fold" : "pangaea"; }

std::vector<FoldSplit> protocol_splits(Protocol p, std::span<const int> available) {
  auto wrap = [](int f) { return (f - 1) % 5 + 1; };
  std::vector<FoldSplit> splits;
  const int rotations = p == Protocol::kOriginal5Fold ? 5 : 1;
  for (int k = 0; k < rotations; ++k)
    splits.push_back({{wrap(k + 1), wrap(k + 2), wrap(k + 3)}, wrap(k + 4), wrap(k + 5)});
  for (const auto& s : splits) {
    std::vector<int> need = s.train;
    need.push_back(s.val);
    need.push_back(s.test);
    for (int f : need)
      if (std::find(available.begin(), available.end(), f) == available.end())
        throw ConfigError("protocol " + std::string(protocol_name(p)) + " needs fold " + std::to_string(f) +
                          ", which the dataset lacks");
  }
  return splits;
}

std::vector<EvalReport> run_protocol(Protocol p, std::span<const int> available,
                                     const std::function<EvalReport(const FoldSplit&)>& run) {
  const auto splits = protocol_splits(p, available);
  std::vector<EvalReport> reports;
  for (const auto& s : splits) {
    EvalReport r = run(s);
    r.protocol = std::string(protocol_name(p));
    r.fold = s.test;
    reports.push_back(std::move(r));
  }
  EvalReport agg;
  agg.classes = reports.front().classes;
  agg.confusion.assign(agg.classes * agg.classes, 0);
  for (const auto& r : reports) {
    if (r.classes != agg.classes) throw std::invalid_argument("run_protocol: reports disagree on class count");
    for (std::size_t i = 0; i < agg.confusion.size(); ++i) agg.confusion[i] += r.confusion[i];
  }
  std::vector<int> none;
  finalize_metrics(agg, none);
  agg.included.assign(agg.classes, 0);
  for (const auto& r : reports)
    for (std::size_t k = 0; k < agg.classes; ++k) agg.included[k] |= r.included[k];
  agg.oa = agg.miou = agg.ma = 0.0;
  for (const auto& r : reports) {
    agg.oa += r.oa;
    agg.miou += r.miou;
    agg.ma += r.ma;
  }
  const auto n = static_cast<double>(reports.size());
  agg.oa /= n;
  agg.miou /= n;
  agg.ma /= n;
  agg.protocol = std::string(protocol_name(p));
  agg.fold = 0;
  reports.push_back(std::move(agg));
  return reports;
}

TaskScore score_task(const TaskTemplate& tmpl, std::span<const PixelSeries> samples, const Params<float>& params,
                     const VocabLayout& layout, std::size_t threads) {
  if (tmpl.generated_count() == 0) throw ConfigError("template '" + tmpl.name + "' generates no tokens");
  std::vector<std::uint8_t> hit(samples.size(), 0);
  parallel_chunks(samples.size(), threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const auto truth = compile_sequence(tmpl, samples[i], layout, params.config().table_size(), false, false);
      std::size_t last = 0;
      for (std::size_t p = 0; p < truth.length; ++p)
        if (truth.cls_weights[p] > 0.0f) last = p;
      const auto gen = prompt_template(tmpl, samples[i], params, layout);
      hit[i] = gen.back().discrete_id == static_cast<std::size_t>(truth.tokens[last].discrete_id);
    }
  });
  TaskScore s;
  s.total = samples.size();
  s.correct = static_cast<std::size_t>(std::count(hit.begin(), hit.end(), 1));
  return s;
}

std::vector<std::size_t> select_patches(const PatchSource& data, std::span<const int> folds,
                                        std::span<const int> tiles) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const bool fold_ok = folds.empty() || std::find(folds.begin(), folds.end(), data.fold(i)) != folds.end();
    const bool tile_ok = tiles.empty() || std::find(tiles.begin(), tiles.end(), data.tile(i)) != tiles.end();
    if (fold_ok && tile_ok) out.push_back(i);
  }
  return out;
}

}  // namespace sitsdeco
