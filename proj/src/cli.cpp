// SPDX-License-Identifier: Apache-2.0

#include "sitsdeco/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "sitsdeco/config.hpp"
#include "sitsdeco/eval.hpp"
#include "sitsdeco/experiments.hpp"
#include "sitsdeco/ingest.hpp"
#include "sitsdeco/npy.hpp"
#include "sitsdeco/training.hpp"

namespace sitsdeco {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kVersion = "sitsdeco 0.1.0";
constexpr int kPastisVoidLabel = 19;

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::optional<std::size_t> env_workers() {
  const char* v = std::getenv("SITSDECO_WORKERS");
  if (v == nullptr || *v == '\0') return std::nullopt;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n <= 0) throw ConfigError("SITSDECO_WORKERS must be a positive integer, got '" + std::string(v) + "'");
  return static_cast<std::size_t>(n);
}

std::size_t default_threads() {
  if (auto w = env_workers()) return *w;
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Records everything needed to re-run a command and writes manifest.json.
class RunManifest {
 public:
  RunManifest(std::string command, int argc, const char* const* argv) : command_(std::move(command)) {
    for (int i = 0; i < argc; ++i) argv_.push_back(argv[i]);
    start_ = now_iso();
  }
  void config(const std::string& role, const std::string& path) {
    if (!path.empty()) configs_[role] = fs::absolute(path).string();
  }
  void seed(const std::string& name, std::uint64_t v) { seeds_[name] = v; }
  void artifact(const fs::path& p) { artifacts_.push_back(p.string()); }
  void note(const std::string& key, json v) { extra_[key] = std::move(v); }

  /// Copies the referenced config files verbatim into dir/config/.
  void echo_configs(const fs::path& dir) const {
    if (configs_.empty()) return;
    fs::create_directories(dir / "config");
    for (const auto& [role, path] : configs_.items())
      if (fs::is_regular_file(path.get<std::string>()))
        fs::copy_file(path.get<std::string>(), dir / "config" / fs::path(path.get<std::string>()).filename(),
                      fs::copy_options::overwrite_existing);
  }

  void write(const fs::path& dir, const std::string& status) const {
    fs::create_directories(dir);
    json m = {{"command", command_},   {"argv", argv_},         {"cwd", fs::current_path().string()},
              {"version", kVersion},   {"configs", configs_},   {"seeds", seeds_},
              {"start", start_},       {"end", now_iso()},      {"status", status},
              {"artifacts", artifacts_}};
    for (const auto& [k, v] : extra_.items()) m[k] = v;
    std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  std::string start_;
  json configs_ = json::object();
  json seeds_ = json::object();
  json artifacts_ = json::array();
  json extra_ = json::object();
};

struct DataArgs {
  std::string data;
  bool synthetic = false;
  std::string synth_config;
  std::string layout;
};

void add_data_options(CLI::App* cmd, DataArgs& a) {
  cmd->add_option("--data", a.data, "Dataset directory in the PASTIS layout");
  cmd->add_flag("--synthetic", a.synthetic, "Generate a synthetic dataset in memory");
  cmd->add_option("--synth-config", a.synth_config, "Synthetic generator YAML (with --synthetic)");
  cmd->add_option("--layout", a.layout, "Vocabulary layout YAML");
}

struct Loaded {
  std::unique_ptr<PatchSource> source;
  VocabLayout layout;
  std::vector<int> void_labels;
};

VocabLayout synth_layout(const SynthConfig& s) {
  const std::vector<ModalitySpec> mods = {{"S2", 10}, {"S1", 6}, {"LATLON", 2}};
  return VocabLayout::build(mods, s.class_count, s.tiles);
}

Loaded load_data(const DataArgs& a, RunManifest& manifest) {
  if (a.synthetic == !a.data.empty()) throw ConfigError("give exactly one of --data or --synthetic");
  Loaded d;
  if (a.synthetic) {
    SynthConfig s;
    if (!a.synth_config.empty()) s = parse_synth_config(read_text_file(a.synth_config));
    manifest.config("synth", a.synth_config);
    manifest.seed("synth", s.seed);
    d.source = std::make_unique<InMemoryDataset>(synth_generate(s));
    d.layout = synth_layout(s);
    if (s.void_label >= 0) d.void_labels.push_back(s.void_label);
  } else {
    if (!fs::is_directory(a.data)) throw ConfigError("data path '" + a.data + "' is not a directory");
    d.source = std::make_unique<PastisDataset>(a.data);
    d.layout = VocabLayout::pastis_default();
    d.void_labels.push_back(kPastisVoidLabel);
    manifest.note("data", fs::absolute(a.data).string());
  }
  if (!a.layout.empty()) {
    d.layout = parse_layout_config(read_text_file(a.layout));
    manifest.config("layout", a.layout);
  }
  if (d.source->size() == 0) throw ConfigError("dataset is empty");
  return d;
}

std::vector<TaskTemplate> load_templates(const std::string& path, const VocabLayout& layout, RunManifest& manifest) {
  auto templates = parse_task_templates(path.empty() ? builtin_templates_yaml() : read_text_file(path));
  manifest.config("templates", path);
  for (const auto& t : templates) {
    const auto report = template_vocab_check(t, layout);
    if (!report.ok()) throw ConfigError(report.failures.front());
  }
  return templates;
}

TaskTemplate load_selected_template(const std::string& path, const std::string& name, const VocabLayout& layout,
                                    RunManifest& manifest) {
  const auto templates = parse_task_templates(path.empty() ? builtin_templates_yaml() : read_text_file(path));
  manifest.config("templates", path);
  TaskTemplate t = find_template(templates, name);
  const auto report = template_vocab_check(t, layout);
  if (!report.ok()) throw ConfigError(report.failures.front());
  return t;
}

std::vector<int> dataset_folds(const PatchSource& data) {
  std::set<int> folds;
  for (std::size_t i = 0; i < data.size(); ++i) folds.insert(data.fold(i));
  return {folds.begin(), folds.end()};
}

json preprocess_json(const PreprocessConfig& p) {
  return {{"max_s2_steps", p.max_s2_steps},
          {"green_band", p.cloud.green_band},
          {"swir1_band", p.cloud.swir1_band},
          {"clear_threshold", p.cloud.clear_threshold}};
}

PreprocessConfig preprocess_from_metadata(const std::string& metadata) {
  PreprocessConfig p;
  if (metadata.empty()) return p;
  const auto m = json::parse(metadata, nullptr, false);
  if (m.is_discarded() || !m.contains("preprocess")) return p;
  const auto& j = m["preprocess"];
  p.max_s2_steps = j.value("max_s2_steps", p.max_s2_steps);
  p.cloud.green_band = j.value("green_band", p.cloud.green_band);
  p.cloud.swir1_band = j.value("swir1_band", p.cloud.swir1_band);
  p.cloud.clear_threshold = j.value("clear_threshold", p.cloud.clear_threshold);
  return p;
}

std::string layout_widths(const VocabLayout& l) {
  return std::to_string(l.total_width()) + " (continuous " + std::to_string(l.continuous_width()) + ", discrete " +
         std::to_string(l.discrete_width()) + ")";
}

Checkpoint load_matching_checkpoint(const fs::path& path, const VocabLayout& layout) {
  Checkpoint ckpt = load_checkpoint(path);
  if (!(ckpt.layout == layout))
    throw ConfigError("checkpoint layout width " + layout_widths(ckpt.layout) + " does not match data layout width " +
                      layout_widths(layout));
  return ckpt;
}

// ---------------------------------------------------------------------------

struct ValidateArgs {
  std::string templates;
  std::string layout;
};

int cmd_validate(const ValidateArgs& a, std::ostream& out) {
  const VocabLayout layout = a.layout.empty() ? VocabLayout::pastis_default() : parse_layout_config(read_text_file(a.layout));
  const std::string text = read_text_file(a.templates);
  const auto templates = parse_task_templates(text);
  bool ok = true;
  for (const auto& t : templates) {
    const auto report = template_vocab_check(t, layout);
    out << t.name << ": " << (report.ok() ? "ok" : "FAILED") << '\n';
    for (const auto& e : report.elements)
      out << "  [" << e.index << "] " << element_kind_name(e.element.kind)
          << (e.element.arg.empty() ? "" : " " + e.element.arg) << " -> "
          << (e.ok ? e.section + (e.discrete ? " (discrete)" : " (continuous)") : "unresolved") << '\n';
    for (const auto& f : report.failures) out << "  error: " << f << '\n';
    ok = ok && report.ok();
  }
  if (!ok) throw ConfigError("template validation failed");
  return 0;
}

struct SynthArgs {
  std::string out;
  std::string config;
  std::optional<std::uint64_t> seed;
};

int cmd_synth(const SynthArgs& a, RunManifest& manifest, std::ostream& out) {
  SynthConfig s;
  if (!a.config.empty()) s = parse_synth_config(read_text_file(a.config));
  if (a.seed) s.seed = *a.seed;
  manifest.config("synth", a.config);
  manifest.seed("synth", s.seed);
  const auto patches = synth_generate(s);
  write_pastis_layout(a.out, patches);
  std::ofstream(fs::path(a.out) / "synth.yaml") << serialize_synth_config(s);
  std::ofstream(fs::path(a.out) / "layout.yaml") << serialize_layout_config(synth_layout(s));
  manifest.artifact(fs::path(a.out) / "metadata.geojson");
  out << "wrote " << patches.size() << " patches to " << a.out << '\n';
  return 0;
}

struct PrepareArgs {
  DataArgs data;
  std::string out;
  std::string train_config;
  std::string templates;
  std::string dump_template;
  std::size_t dump_count = 0;
};

int cmd_prepare(const PrepareArgs& a, RunManifest& manifest, std::ostream& out) {
  const Loaded d = load_data(a.data, manifest);
  TrainDocument doc;
  if (!a.train_config.empty()) doc = parse_train_config(read_text_file(a.train_config));
  manifest.config("train", a.train_config);
  const auto& pre = doc.stream.preprocess;

  std::map<int, std::size_t> per_fold, per_tile, labels;
  std::size_t pixels = 0, s2_steps = 0, s2_clear = 0, s1_steps = 0;
  std::vector<PixelSeries> dump_pool;
  for (std::size_t i = 0; i < d.source->size(); ++i) {
    const auto patch = d.source->load(i);
    ++per_fold[patch.fold];
    ++per_tile[patch.tile_id];
    const auto px = extract_pixels(patch, i, pre);
    for (const auto& p : px) {
      ++pixels;
      ++labels[p.label];
      s2_steps += p.s2.size();
      s2_clear += static_cast<std::size_t>(std::count(p.s2_clear.begin(), p.s2_clear.end(), 1));
      s1_steps += p.s1.size();
      if (dump_pool.size() < a.dump_count) dump_pool.push_back(p);
    }
  }
  auto to_json = [](const std::map<int, std::size_t>& m) {
    json j = json::object();
    for (const auto& [k, v] : m) j[std::to_string(k)] = v;
    return j;
  };
  const double n = pixels ? static_cast<double>(pixels) : 1.0;
  const json summary = {{"patches", d.source->size()},
                        {"pixels", pixels},
                        {"patches_per_fold", to_json(per_fold)},
                        {"patches_per_tile", to_json(per_tile)},
                        {"pixels_per_label", to_json(labels)},
                        {"mean_s2_steps", static_cast<double>(s2_steps) / n},
                        {"mean_clear_s2_steps", static_cast<double>(s2_clear) / n},
                        {"mean_s1_steps", static_cast<double>(s1_steps) / n},
                        {"preprocess", preprocess_json(pre)},
                        {"layout", serialize_layout_config(d.layout)}};
  fs::create_directories(a.out);
  std::ofstream(fs::path(a.out) / "summary.json") << summary.dump(2) << '\n';
  manifest.artifact(fs::path(a.out) / "summary.json");

  if (a.dump_count > 0) {
    const auto templates = load_templates(a.templates, d.layout, manifest);
    const auto& tmpl = find_template(templates, a.dump_template.empty() ? "s2_crop" : a.dump_template);
    if (tmpl.has_discrimination()) throw ConfigError("prepare: cannot dump discrimination templates");
    std::ofstream f(fs::path(a.out) / "sequences.ndjson");
    for (const auto& p : dump_pool) {
      const auto seq = compile_sequence(tmpl, p, d.layout, ModelConfig{}.table_size(), doc.stream.regression_enabled, false);
      f << json::parse(dump_sequence(seq, d.layout)).dump() << '\n';
    }
    manifest.artifact(fs::path(a.out) / "sequences.ndjson");
  }
  out << summary.dump(2) << '\n';
  return 0;
}

struct TrainArgs {
  DataArgs data;
  std::string templates;
  std::string model_config;
  std::string train_config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<int> folds;
  std::string protocol;
  std::vector<std::string> tasks;
  bool quiet = false;
};

struct TrainSetup {
  Loaded data;
  std::vector<TaskTemplate> templates;
  ModelConfig model;
  TrainDocument doc;
};

TrainSetup train_setup(const DataArgs& data, const std::string& templates, const std::string& model_config,
                       const std::string& train_config, std::optional<std::uint64_t> seed, RunManifest& manifest) {
  TrainSetup s;
  s.data = load_data(data, manifest);
  s.templates = load_templates(templates, s.data.layout, manifest);
  s.model = model_config.empty() ? ModelConfig::for_layout(s.data.layout)
                                 : parse_model_config(read_text_file(model_config), s.data.layout);
  s.model.validate();
  manifest.config("model", model_config);
  if (!train_config.empty()) s.doc = parse_train_config(read_text_file(train_config));
  manifest.config("train", train_config);
  if (seed) s.doc.train.seed = *seed;
  if (auto w = env_workers()) {
    s.doc.stream.workers = *w;
    s.doc.train.threads = *w;
  }
  if (s.doc.stream.skip_labels.empty()) s.doc.stream.skip_labels = s.data.void_labels;
  manifest.seed("train", s.doc.train.seed);
  return s;
}

void echo_effective(const fs::path& dir, const TrainSetup& s, std::span<const TaskTemplate> templates) {
  fs::create_directories(dir);
  std::ofstream(dir / "model.yaml") << serialize_model_config(s.model);
  std::ofstream(dir / "train.yaml") << serialize_train_config(s.doc);
  std::ofstream(dir / "layout.yaml") << serialize_layout_config(s.data.layout);
  std::ofstream(dir / "templates.yaml") << serialize_task_templates(templates);
}

std::function<void(const StepRecord&)> progress(std::ostream& out, std::size_t every, bool quiet) {
  if (quiet) return {};
  return [&out, every](const StepRecord& r) {
    if (r.step % std::max<std::size_t>(every, 1) != 0) return;
    out << "step " << r.step << " epoch " << r.epoch << " lr " << r.lr << " cls " << r.loss.cls << " reg "
        << r.loss.reg << " total " << r.loss.total << " (" << std::fixed << std::setprecision(1) << r.wall_seconds
        << "s)" << std::defaultfloat << std::setprecision(6) << '\n'
        << std::flush;
  };
}

int cmd_train(const TrainArgs& a, RunManifest& manifest, std::ostream& out) {
  TrainSetup s = train_setup(a.data, a.templates, a.model_config, a.train_config, a.seed, manifest);
  std::vector<TaskTemplate> chosen;
  if (a.tasks.empty()) {
    chosen = s.templates;
  } else {
    for (const auto& name : a.tasks) chosen.push_back(find_template(s.templates, name));
  }
  for (const auto& [name, tiles] : s.doc.task_tiles) find_template(chosen, name);
  std::vector<TrainTask> tasks;
  for (const auto& t : chosen) {
    const auto it = s.doc.task_tiles.find(t.name);
    tasks.push_back({t, it == s.doc.task_tiles.end() ? std::vector<int>{} : it->second});
  }

  const fs::path root(a.out);
  echo_effective(root, s, chosen);
  manifest.echo_configs(root);
  out << "model parameters: " << param_count(s.model) << '\n';

  auto run_one = [&](const std::vector<int>& folds, const fs::path& dir) {
    const auto patches = select_patches(*s.data.source, folds);
    if (patches.empty()) throw ConfigError("no patches in the requested folds");
    TrainOptions opt;
    opt.run_dir = dir;
    opt.on_step = progress(out, s.doc.train.log_every, a.quiet);
    train(*s.data.source, patches, tasks, s.data.layout, s.model, s.doc.train, s.doc.stream, opt);
    manifest.artifact(dir / "checkpoint.bin");
    manifest.artifact(dir / "train_log.ndjson");
  };

  if (!a.protocol.empty()) {
    const auto splits = protocol_splits(protocol_from_name(a.protocol), dataset_folds(*s.data.source));
    for (const auto& split : splits) {
      out << "training split with test fold " << split.test << '\n';
      run_one(split.train, root / ("fold_" + std::to_string(split.test)));
    }
  } else {
    run_one(a.folds, root);
  }
  return 0;
}

struct EvalArgs {
  DataArgs data;
  std::string checkpoint;
  std::string protocol;
  std::vector<int> folds;
  std::string template_name = "s2_crop";
  std::string templates;
  std::string out;
  std::vector<int> ignore;
  bool ignore_set = false;
};

int cmd_eval(const EvalArgs& a, RunManifest& manifest, std::ostream& out) {
  const Loaded d = load_data(a.data, manifest);
  const TaskTemplate tmpl = load_selected_template(a.templates, a.template_name, d.layout, manifest);
  const std::vector<int> ignore = a.ignore_set ? a.ignore : d.void_labels;
  const std::size_t threads = default_threads();
  const fs::path root(a.out);
  manifest.note("checkpoint", fs::absolute(a.checkpoint).string());

  auto evaluate = [&](const fs::path& ckpt_path, std::span<const int> folds) {
    const Checkpoint ckpt = load_matching_checkpoint(ckpt_path, d.layout);
    const auto patches = select_patches(*d.source, folds);
    if (patches.empty()) throw ConfigError("no patches in the requested test folds");
    return evaluate_patches(*d.source, patches, tmpl, ckpt.params, d.layout, preprocess_from_metadata(ckpt.metadata),
                            ignore, threads);
  };

  if (a.protocol.empty()) {
    EvalReport r = evaluate(a.checkpoint, a.folds);
    r.protocol = "custom";
    write_report(root, r);
    manifest.artifact(root / "report.json");
    out << report_json(r) << '\n';
    return 0;
  }

  const Protocol p = protocol_from_name(a.protocol);
  const bool is_dir = fs::is_directory(a.checkpoint);
  if (!is_dir && p == Protocol::kOriginal5Fold)
    throw ConfigError("original5fold evaluation needs a directory with fold_<k>/checkpoint.bin");
  if (!fs::exists(a.checkpoint)) throw ConfigError("checkpoint '" + a.checkpoint + "' does not exist");
  const auto reports = run_protocol(p, dataset_folds(*d.source), [&](const FoldSplit& split) {
    fs::path ckpt = a.checkpoint;
    if (is_dir) {
      ckpt = ckpt / ("fold_" + std::to_string(split.test)) / "checkpoint.bin";
      if (!fs::exists(ckpt) && p == Protocol::kPangaea) ckpt = fs::path(a.checkpoint) / "checkpoint.bin";
    }
    const std::vector<int> test{split.test};
    return evaluate(ckpt, test);
  });
  for (std::size_t i = 0; i + 1 < reports.size(); ++i) {
    const fs::path dir = root / ("fold_" + std::to_string(reports[i].fold));
    write_report(dir, reports[i]);
    manifest.artifact(dir / "report.json");
    out << "fold " << reports[i].fold << ": OA " << reports[i].oa << " mIoU " << reports[i].miou << " MA "
        << reports[i].ma << '\n';
  }
  if (p == Protocol::kOriginal5Fold) {
    write_report(root / "aggregate", reports.back());
    manifest.artifact(root / "aggregate" / "report.json");
    out << "mean: OA " << reports.back().oa << " mIoU " << reports.back().miou << " MA " << reports.back().ma << '\n';
  }
  return 0;
}

struct PredictArgs {
  DataArgs data;
  std::string checkpoint;
  std::string patch;
  std::string template_name = "s2_crop";
  std::string templates;
  std::string out;
};

void write_class_ppm(const fs::path& path, std::span<const int> map, std::size_t h, std::size_t w) {
  std::string px(h * w * 3, '\0');
  for (std::size_t i = 0; i < h * w; ++i) {
    // distinct hues from a fixed integer hash; negative ids are black
    const int c = map[i];
    const std::uint32_t v = c < 0 ? 0u : static_cast<std::uint32_t>(c + 1) * 2654435761u;
    px[3 * i] = static_cast<char>(c < 0 ? 0 : 64 + (v >> 8) % 192);
    px[3 * i + 1] = static_cast<char>(c < 0 ? 0 : 64 + (v >> 16) % 192);
    px[3 * i + 2] = static_cast<char>(c < 0 ? 0 : 64 + (v >> 24) % 192);
  }
  std::ofstream f(path, std::ios::binary);
  f << "P6\n" << w << ' ' << h << "\n255\n";
  f.write(px.data(), static_cast<std::streamsize>(px.size()));
}

int cmd_predict(const PredictArgs& a, RunManifest& manifest, std::ostream& out) {
  const Loaded d = load_data(a.data, manifest);
  const TaskTemplate tmpl = load_selected_template(a.templates, a.template_name, d.layout, manifest);
  const Checkpoint ckpt = load_matching_checkpoint(a.checkpoint, d.layout);
  manifest.note("checkpoint", fs::absolute(a.checkpoint).string());
  std::optional<std::size_t> index;
  for (std::size_t i = 0; i < d.source->size(); ++i)
    if (d.source->id(i) == a.patch) index = i;
  if (!index) throw ConfigError("no patch with id '" + a.patch + "'");
  const RawPatch patch = d.source->load(*index);
  const auto pred =
      predict_patch(patch, tmpl, ckpt.params, d.layout, preprocess_from_metadata(ckpt.metadata), default_threads());

  const fs::path root(a.out);
  fs::create_directories(root);
  const std::vector<std::size_t> shape{patch.height, patch.width};
  const std::vector<float> pred_f(pred.begin(), pred.end());
  npy::write(root / ("PRED_" + a.patch + ".npy"), shape, pred_f, npy::DType::kInt32);
  write_class_ppm(root / ("PRED_" + a.patch + ".ppm"), pred, patch.height, patch.width);
  write_class_ppm(root / ("TRUE_" + a.patch + ".ppm"), patch.labels, patch.height, patch.width);
  const EvalReport r = compute_metrics(pred, patch.labels, d.layout.class_count(), d.void_labels);
  write_report(root, r);
  manifest.artifact(root / ("PRED_" + a.patch + ".npy"));
  out << "patch " << a.patch << ": OA " << r.oa << " mIoU " << r.miou << '\n';
  return 0;
}

struct TransferArgs {
  DataArgs data;
  std::string templates;
  std::string model_config;
  std::string train_config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<int> source_tiles;
  int target_tile = -1;
  bool with_ssl = false;
  bool paired = false;
  std::vector<int> train_folds{1, 2, 3, 4};
  std::vector<int> test_folds{5};
  std::vector<std::string> crop_templates;
  std::vector<std::string> ssl_templates;
  std::string eval_template;
  bool quiet = false;
};

int cmd_transfer(const TransferArgs& a, RunManifest& manifest, std::ostream& out) {
  TrainSetup s = train_setup(a.data, a.templates, a.model_config, a.train_config, a.seed, manifest);
  TransferSpec spec;
  spec.source_tiles = a.source_tiles;
  spec.target_tile = a.target_tile;
  spec.train_folds = a.train_folds;
  spec.test_folds = a.test_folds;
  if (!a.crop_templates.empty()) spec.crop_templates = a.crop_templates;
  if (!a.ssl_templates.empty()) spec.ssl_templates = a.ssl_templates;
  if (!a.eval_template.empty()) spec.eval_template = a.eval_template;
  spec.ignore_labels = s.data.void_labels;
  validate_transfer(spec, *s.data.source);

  const fs::path root(a.out);
  echo_effective(root, s, s.templates);
  manifest.echo_configs(root);
  auto run = [&](bool ssl, const fs::path& dir) {
    out << (ssl ? "training with SSL on the target tile" : "training supervised baseline") << '\n';
    auto r = run_transfer(*s.data.source, s.templates, spec, ssl, s.data.layout, s.model, s.doc.train, s.doc.stream,
                          dir);
    manifest.artifact(dir / "report.json");
    out << "target tile mIoU " << r.report.miou << " OA " << r.report.oa << '\n';
    return r.report;
  };
  if (a.paired) {
    const auto base = run(false, root / "baseline");
    const auto ssl = run(true, root / "ssl");
    const std::string table = transfer_table(base, ssl);
    std::ofstream(root / "table.md") << table;
    const json summary = {{"baseline_miou", base.miou}, {"ssl_miou", ssl.miou}, {"delta", ssl.miou - base.miou},
                          {"source_tiles", spec.source_tiles}, {"target_tile", spec.target_tile}};
    std::ofstream(root / "transfer.json") << summary.dump(2) << '\n';
    manifest.artifact(root / "table.md");
    out << table;
  } else {
    run(a.with_ssl, root);
  }
  return 0;
}

void add_seed(CLI::App* cmd, std::optional<std::uint64_t>& seed) {
  cmd->add_option_function<std::uint64_t>("--seed", [&seed](const std::uint64_t& v) { seed = v; }, "Run seed");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Decoder-only transformer for satellite image time series", "sitsdeco"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  ValidateArgs va;
  auto* validate = app.add_subcommand("validate", "Parse and vocabulary-check task templates");
  validate->add_option("--templates", va.templates, "Task template YAML")->required();
  validate->add_option("--layout", va.layout, "Vocabulary layout YAML (default: PASTIS layout)");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset in the PASTIS layout");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--config", sa.config, "Synthetic generator YAML");
  add_seed(synth, sa.seed);

  PrepareArgs pa;
  auto* prepare = app.add_subcommand("prepare", "Check a dataset and summarize its preprocessed pixels");
  add_data_options(prepare, pa.data);
  prepare->add_option("--out", pa.out, "Output directory")->required();
  prepare->add_option("--train-config", pa.train_config, "Training YAML (preprocessing settings)");
  prepare->add_option("--templates", pa.templates, "Task template YAML (default: built-in set)");
  prepare->add_option("--dump-template", pa.dump_template, "Template used for sequence dumps");
  prepare->add_option("--dump-count", pa.dump_count, "Number of compiled sequences to dump");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train a model on a task mixture");
  add_data_options(trn, ta.data);
  trn->add_option("--templates", ta.templates, "Task template YAML (default: built-in set)");
  trn->add_option("--tasks", ta.tasks, "Subset of template names to train on")->delimiter(',');
  trn->add_option("--model-config", ta.model_config, "Model YAML");
  trn->add_option("--train-config", ta.train_config, "Training YAML");
  trn->add_option("--out", ta.out, "Run directory")->required();
  trn->add_option("--folds", ta.folds, "Training folds (default: all)")->delimiter(',');
  trn->add_option("--protocol", ta.protocol, "Train one model per split: original5fold or pangaea");
  trn->add_flag("--quiet", ta.quiet, "No per-step progress output");
  add_seed(trn, ta.seed);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate crop prediction from a checkpoint");
  add_data_options(ev, ea.data);
  ev->add_option("--checkpoint", ea.checkpoint, "Checkpoint file, or run directory with fold_<k>/")->required();
  ev->add_option("--protocol", ea.protocol, "original5fold or pangaea");
  ev->add_option("--folds", ea.folds, "Test folds without a protocol (default: all)")->delimiter(',');
  ev->add_option("--template", ea.template_name, "Prompt template name");
  ev->add_option("--templates", ea.templates, "Task template YAML (default: built-in set)");
  ev->add_option("--out", ea.out, "Report directory")->required();
  ev->add_option_function<std::vector<int>>(
        "--ignore-label", [&ea](const std::vector<int>& v) { ea.ignore = v, ea.ignore_set = true; },
        "Labels excluded from metrics (default: dataset void label)")
      ->delimiter(',');

  PredictArgs pr;
  auto* pred = app.add_subcommand("predict", "Predict the class map of one patch");
  add_data_options(pred, pr.data);
  pred->add_option("--checkpoint", pr.checkpoint, "Checkpoint file")->required();
  pred->add_option("--patch", pr.patch, "Patch id")->required();
  pred->add_option("--template", pr.template_name, "Prompt template name");
  pred->add_option("--templates", pr.templates, "Task template YAML (default: built-in set)");
  pred->add_option("--out", pr.out, "Output directory")->required();

  TransferArgs xa;
  auto* xfer = app.add_subcommand("transfer", "Cross-tile transfer experiment with optional SSL on the target tile");
  add_data_options(xfer, xa.data);
  xfer->add_option("--templates", xa.templates, "Task template YAML (default: built-in set)");
  xfer->add_option("--model-config", xa.model_config, "Model YAML");
  xfer->add_option("--train-config", xa.train_config, "Training YAML");
  xfer->add_option("--out", xa.out, "Run directory")->required();
  xfer->add_option("--source-tiles", xa.source_tiles, "Tiles with crop supervision")->delimiter(',')->required();
  xfer->add_option("--target-tile", xa.target_tile, "Held-out tile")->required();
  xfer->add_flag("--with-ssl", xa.with_ssl, "Add SSL tasks fed by the target tile");
  xfer->add_flag("--paired", xa.paired, "Run baseline and SSL and emit a comparison table");
  xfer->add_option("--train-folds", xa.train_folds, "Training folds")->delimiter(',');
  xfer->add_option("--test-folds", xa.test_folds, "Evaluation folds on the target tile")->delimiter(',');
  xfer->add_option("--crop-templates", xa.crop_templates, "Supervised templates")->delimiter(',');
  xfer->add_option("--ssl-templates", xa.ssl_templates, "Self-supervised templates")->delimiter(',');
  xfer->add_option("--eval-template", xa.eval_template, "Template prompted on the target tile");
  xfer->add_flag("--quiet", xa.quiet, "No per-step progress output");
  add_seed(xfer, xa.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    err << "error: " << e.what() << '\n';
    return 1;
  }

  CLI::App* cmd = app.get_subcommands().front();
  RunManifest manifest(cmd->get_name(), argc, argv);
  fs::path run_dir;
  if (cmd == synth) run_dir = sa.out;
  if (cmd == prepare) run_dir = pa.out;
  if (cmd == trn) run_dir = ta.out;
  if (cmd == ev) run_dir = ea.out;
  if (cmd == pred) run_dir = pr.out;
  if (cmd == xfer) run_dir = xa.out;

  int code = 0;
  std::string status = "ok";
  try {
    if (cmd == validate) return cmd_validate(va, out);
    if (cmd == synth) code = cmd_synth(sa, manifest, out);
    if (cmd == prepare) code = cmd_prepare(pa, manifest, out);
    if (cmd == trn) code = cmd_train(ta, manifest, out);
    if (cmd == ev) code = cmd_eval(ea, manifest, out);
    if (cmd == pred) code = cmd_predict(pr, manifest, out);
    if (cmd == xfer) code = cmd_transfer(xa, manifest, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    code = 1;
    status = std::string("config error: ") + e.what();
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    code = 2;
    status = std::string("internal error: ") + e.what();
  }
  if (!run_dir.empty() && (code == 0 || fs::exists(run_dir))) {
    try {
      manifest.write(run_dir, status);
    } catch (const std::exception& e) {
      err << "warning: could not write manifest: " << e.what() << '\n';
    }
  }
  return code;
}

}  // namespace sitsdeco
