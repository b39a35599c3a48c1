#include "commands.hpp"

#include <glob.h>

#include <algorithm>
#include <charconv>
#include <map>
#include <memory>
#include <optional>
#include <ostream>

#include "vitplast/bounds.hpp"
#include "vitplast/dataset.hpp"
#include "vitplast/errors.hpp"
#include "vitplast/finetune.hpp"
#include "vitplast/plasticity.hpp"
#include "vitplast/seeding.hpp"
#include "vitplast/serialize.hpp"

namespace vitplast::cli {

namespace fs = std::filesystem;

std::filesystem::path sidecar_for_file(const fs::path& output) {
  return output.parent_path() / (output.stem().string() + ".run.json");
}

std::string short_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

// Name parsers in the library throw Error; on the command line a bad name
// is a usage problem.
template <typename F>
auto parse_flag(const char* flag, F&& parse) {
  try {
    return parse();
  } catch (const Error& e) {
    throw UsageError(std::string(flag) + ": " + e.what());
  }
}

InitScheme parse_init(const std::string& name) {
  if (name == "truncated_normal") return InitScheme::TruncatedNormal;
  if (name == "matched_scale") return InitScheme::MatchedScale;
  throw UsageError("--init: expected truncated_normal or matched_scale, got '" + name + "'");
}

// "auto" -> nullopt; otherwise a finite non-negative number.
std::optional<double> parse_auto(const char* flag, const std::string& text) {
  if (text == "auto") return std::nullopt;
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size() || !std::isfinite(v) || v < 0) {
    throw UsageError(std::string(flag) + ": expected 'auto' or a non-negative number, got '" +
                     text + "'");
  }
  return v;
}

void require_file(const char* flag, const fs::path& path) {
  if (!fs::is_regular_file(path)) {
    throw UsageError(std::string(flag) + ": no such file '" + path.string() + "'");
  }
}

void write_output(RunManifest& m, const fs::path& path, const Json& j) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  write_file_atomic(path, dump_json(j));
  m.outputs.push_back(path.string());
}

Json model_options_json(const ModelOptions& o) {
  return {{"spec", o.spec}, {"init", o.init}, {"gain", o.gain}, {"seed", o.seed}};
}

Model build_model(const ModelOptions& o, RunManifest& m,
                  std::optional<std::size_t> num_classes = std::nullopt) {
  constexpr std::string_view kRandom = "random:";
  if (o.spec.rfind(kRandom, 0) == 0) {
    ViTConfig c = parse_flag("--model", [&] { return vit_preset(o.spec.substr(kRandom.size())); });
    c.seed = o.seed;
    if (num_classes) c.num_classes = *num_classes;
    return make_model(c, {parse_init(o.init), o.gain});
  }
  require_file("--model", o.spec);
  m.add_input(o.spec);
  Model model = load_model(o.spec);
  if (num_classes && *num_classes != model.config.num_classes) {
    throw DimensionError("checkpoint head has " + std::to_string(model.config.num_classes) +
                         " classes, data has " + std::to_string(*num_classes));
  }
  return model;
}

fs::path resolve_relative(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

Dataset load_data(const char* flag, const std::string& path, RunManifest& m,
                  std::string* name = nullptr) {
  require_file(flag, path);
  const DatasetManifest dm = read_manifest(path);
  m.add_input(path);
  m.add_input(resolve_relative(fs::path(path).parent_path(), dm.images));
  m.add_input(resolve_relative(fs::path(path).parent_path(), dm.labels));
  if (name) *name = dm.name;
  return load_dataset(path);
}

void check_geometry(const ViTConfig& c, const Dataset& d, const std::string& what) {
  if (d.channels() != c.channels || d.image_size() != c.image_size) {
    throw DimensionError(what + " holds " + std::to_string(d.channels()) + "x" +
                         std::to_string(d.image_size()) + "x" + std::to_string(d.image_size()) +
                         " images, model expects " + std::to_string(c.channels) + "x" +
                         std::to_string(c.image_size) + "x" + std::to_string(c.image_size));
  }
}

// Keeps the dataset alive for image sources, which hold references.
struct OpenedSource {
  std::optional<Dataset> data;
  std::unique_ptr<SequenceSource> source;
};

std::unique_ptr<OpenedSource> open_source(const char* flag, const std::string& spec,
                                          const Model& model, RunManifest& m,
                                          std::uint64_t gaussian_seed) {
  auto opened = std::make_unique<OpenedSource>();
  constexpr std::string_view kGaussian = "gaussian";
  if (spec.rfind(kGaussian, 0) == 0 &&
      (spec.size() == kGaussian.size() || spec[kGaussian.size()] == ':')) {
    std::size_t count = 1024;
    double scale = 1.0;
    std::string rest = spec.substr(kGaussian.size());
    try {
      if (!rest.empty()) {
        rest.erase(0, 1);
        const auto colon = rest.find(':');
        count = std::stoul(rest.substr(0, colon));
        if (colon != std::string::npos) scale = std::stod(rest.substr(colon + 1));
      }
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": expected gaussian[:COUNT[:SCALE]], got '" + spec + "'");
    }
    if (count == 0 || !(scale > 0.0)) {
      throw UsageError(std::string(flag) + ": gaussian count and scale must be positive");
    }
    opened->source = std::make_unique<GaussianTokenSource>(
        model.config.embed_dim, model.config.seq_len(), count, gaussian_seed, scale);
    return opened;
  }
  std::string name;
  opened->data = load_data(flag, spec, m, &name);
  check_geometry(model.config, *opened->data, spec);
  opened->source = std::make_unique<EmbeddedImageSource>(model, opened->data->images,
                                                         name.empty() ? spec : name);
  return opened;
}

}  // namespace

// ---- plasticity -----------------------------------------------------------

int cmd_plasticity(const PlasticityArgs& a, RunManifest& m, std::ostream& out) {
  if (a.data_a.empty()) throw UsageError("--data-a is required");
  if (a.pairs == 0 || a.batch == 0) throw UsageError("--pairs and --batch must be >= 1");
  const ProbeMode mode = parse_flag("--mode", [&] { return parse_probe_mode(a.mode); });
  const std::string data_b = a.data_b.empty() ? a.data_a : a.data_b;

  m.config = {{"model", model_options_json(a.model)},
              {"data_a", a.data_a},
              {"data_b", data_b},
              {"pairs", a.pairs},
              {"batch", a.batch},
              {"mode", probe_mode_name(mode)},
              {"sample_cap", a.sample_cap},
              {"out", a.out}};
  m.seeds = {{"model", a.model.seed}, {"pairs", a.seed}};

  const Model model = build_model(a.model, m);
  const auto src_a = open_source("--data-a", a.data_a, model, m, stream_seed(a.seed, 1));
  const auto src_b = open_source("--data-b", data_b, model, m, stream_seed(a.seed, 2));

  PairSampler sampler;
  sampler.source_a = src_a->source.get();
  sampler.source_b = src_b->source.get();
  sampler.num_pairs = a.pairs;
  sampler.batch_size = a.batch;
  sampler.seed = a.seed;
  const PlasticityReport report = estimate_plasticity(model, sampler, {mode, a.sample_cap});

  Json j = to_json(report);
  j["model"] = a.model.spec;
  write_output(m, a.out, j);
  out << "plasticity: " << report.sites.size() << " sites, ranking";
  for (ComponentKind k : report.ranking) out << ' ' << component_name(k);
  out << "\n";
  return kExitOk;
}

// ---- bounds ---------------------------------------------------------------

int cmd_bounds(const BoundsArgs& a, RunManifest& m, std::ostream& out) {
  const auto radius = parse_auto("--radius", a.radius);
  const auto sigma = parse_auto("--sigma", a.sigma);
  const auto alpha = parse_auto("--alpha", a.alpha);
  const auto energy = parse_auto("--energy", a.energy);
  if (a.samples == 0) throw UsageError("--samples must be >= 1");
  if (a.tighter && !energy && a.data.empty()) {
    throw UsageError("--tighter with --energy auto needs --data");
  }

  m.config = {{"model", model_options_json(a.model)},
              {"data", a.data},
              {"radius", a.radius},
              {"sigma", a.sigma},
              {"alpha", a.alpha},
              {"energy", a.energy},
              {"tighter", a.tighter},
              {"samples", a.samples},
              {"out", a.out}};
  m.seeds = {{"model", a.model.seed}, {"probe", a.seed}};

  const Model model = build_model(a.model, m);
  BoundInputs in;
  in.n = model.config.seq_len();
  in.tighter = a.tighter;

  Json estimates = Json::object();
  std::unique_ptr<OpenedSource> src;
  if (!radius || !sigma) {
    src = a.data.empty() ? open_source("--data", "gaussian:" + std::to_string(a.samples), model, m,
                                       stream_seed(a.seed, 1))
                         : open_source("--data", a.data, model, m, 0);
    const std::size_t limit = std::min(a.samples, src->source->size());
    std::vector<Tensor> seqs;
    seqs.reserve(limit);
    for (std::size_t i = 0; i < limit; ++i) seqs.push_back(src->source->sequence(i));
    estimates["token_source"] = a.data.empty() ? src->source->describe() : a.data;
    estimates["token_samples"] = limit;
    if (!radius) in.r = compute_radius(seqs);
    if (!sigma) {
      const SigmaEstimate s = estimate_sigma(seqs);
      in.sigma_min = s.sigma_min;
      estimates["sigma_raw_min"] = s.raw_min;
    }
  }
  if (radius) in.r = *radius;
  if (sigma) in.sigma_min = *sigma;
  in.alpha = alpha ? *alpha : embedding_alpha(model);
  if (energy) {
    in.energy = *energy;
  } else if (!a.data.empty()) {
    if (!src) src = open_source("--data", a.data, model, m, 0);
    in.energy = max_image_energy(src->data->images);
  }
  estimates["radius"] = radius ? "given" : "estimated";
  estimates["sigma"] = sigma ? "given" : "estimated";
  estimates["alpha"] = alpha ? "given" : "embedding_spectral_norm";
  estimates["energy"] = energy ? "given" : (a.data.empty() ? "unused" : "max_image_energy");

  const BoundReport report = evaluate_all_bounds(model, in);
  Json j = to_json(report);
  j["model"] = a.model.spec;
  j["estimates"] = estimates;
  write_output(m, a.out, j);
  out << "bounds: r=" << in.r << " sigma=" << in.sigma_min << ", ranking";
  for (ComponentKind k : report.ranking) out << ' ' << component_name(k);
  out << "\n";
  return kExitOk;
}

// ---- finetune -------------------------------------------------------------

int cmd_finetune(const FinetuneArgs& a, RunManifest& m, std::ostream& out) {
  FinetuneConfig cfg;
  cfg.group = parse_flag("--group", [&] { return parse_group(a.group); });
  cfg.schedule = parse_flag("--schedule", [&] { return parse_schedule(a.schedule); });
  cfg.tap = parse_flag("--tap", [&] { return parse_tap(a.tap); });
  cfg.momentum = a.momentum;
  cfg.weight_decay = a.weight_decay;
  cfg.steps = a.steps;
  cfg.batch_size = a.batch;
  cfg.clip_norm = a.clip;
  cfg.seed = a.seed;
  cfg.eval_every = a.eval_every;
  cfg.val_fraction = a.val_fraction;
  const std::vector<double> lrs = a.sweep.empty() ? std::vector<double>{a.lr} : a.sweep;
  for (double lr : lrs) {
    cfg.lr = lr;
    parse_flag("finetune", [&] { cfg.validate(); return 0; });
  }
  if (a.data.empty()) throw UsageError("--data is required");

  Json lr_json = Json::array();
  for (double lr : lrs) lr_json.push_back(lr);
  m.config = {{"model", model_options_json(a.model)},
              {"data", a.data},
              {"test", a.test},
              {"finetune", finetune_config_to_json(cfg)},
              {"lrs", lr_json},
              {"checkpoint", a.checkpoint},
              {"out", a.out}};
  m.config["finetune"].erase("lr");
  m.seeds = {{"model", a.model.seed}, {"train", a.seed}};

  std::string task;
  Dataset pool = load_data("--data", a.data, m, &task);
  Dataset test;
  if (!a.test.empty()) {
    test = load_data("--test", a.test, m);
  } else {
    const Split s = split_indices(pool.size(), 0.2, stream_seed(pool.split_seed, 1));
    test = subset(pool, s.val);
    pool = subset(pool, s.train);
  }
  if (test.num_classes != pool.num_classes) {
    throw DataError("test data has " + std::to_string(test.num_classes) + " classes, train data " +
                    std::to_string(pool.num_classes));
  }
  const FinetuneData data = prepare_finetune_data(pool, test, cfg.val_fraction, pool.split_seed);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  const std::string base = std::string(group_name(cfg.group));
  Json runs = Json::array();
  std::optional<std::size_t> best;
  double best_val = -1.0;
  for (double lr : lrs) {
    Model model = build_model(a.model, m, pool.num_classes);
    check_geometry(model.config, pool, a.data);
    cfg.lr = lr;
    const TrainLog log = run_finetune(model, data, cfg);
    const std::string stem = base + "_lr" + short_number(lr) + "_seed" + std::to_string(a.seed);

    Json j = to_json(log);
    j["task"] = task;
    j["model"] = a.model.spec;
    const fs::path log_path = dir / (stem + ".trainlog.json");
    write_output(m, log_path, j);
    if (a.checkpoint) {
      const fs::path ckpt = dir / (stem + ".vckp");
      save_model(ckpt, model);
      m.outputs.push_back(ckpt.string());
    }
    const double val = log.evals[log.best_eval].val_accuracy;
    runs.push_back({{"lr", lr},
                    {"log", log_path.filename().string()},
                    {"best_val_accuracy", val},
                    {"test_accuracy", log.test_accuracy}});
    if (val > best_val) {
      best_val = val;
      best = runs.size() - 1;
    }
    out << "finetune " << base << " lr=" << short_number(lr) << ": best val " << val << ", test "
        << log.test_accuracy << "\n";
  }
  if (!a.sweep.empty()) {
    const Json summary = {{"schema", "vitplast.sweep/1"},
                          {"group", base},
                          {"seed", a.seed},
                          {"task", task},
                          {"runs", runs},
                          {"best", runs[*best]}};
    write_output(m, dir / (base + "_seed" + std::to_string(a.seed) + ".sweep.json"), summary);
  }
  return kExitOk;
}

// ---- report ---------------------------------------------------------------

namespace {

std::vector<std::string> expand(const char* flag, const std::vector<std::string>& patterns) {
  std::vector<std::string> paths;
  for (const std::string& p : patterns) {
    glob_t g{};
    const int rc = ::glob(p.c_str(), 0, nullptr, &g);
    if (rc == 0) {
      for (std::size_t i = 0; i < g.gl_pathc; ++i) paths.emplace_back(g.gl_pathv[i]);
    }
    globfree(&g);
    if (rc != 0) throw UsageError(std::string(flag) + ": nothing matches '" + p + "'");
  }
  std::sort(paths.begin(), paths.end());
  paths.erase(std::unique(paths.begin(), paths.end()), paths.end());
  return paths;
}

struct RunEntry {
  std::string path;
  std::string task;
  TrainLog log;
  double best_val = 0.0;
};

using TaskKey = std::pair<std::string, std::uint64_t>;  // (task, seed)

// Best-validation run per (group, task, seed); ties keep the first path.
std::map<ParamGroup, std::map<TaskKey, RunEntry>> select_runs(const std::vector<std::string>& paths,
                                                               RunManifest& m) {
  std::map<ParamGroup, std::map<TaskKey, RunEntry>> out;
  for (const std::string& p : paths) {
    m.add_input(p);
    Json j;
    try {
      j = Json::parse(read_file(p));
    } catch (const Json::exception& e) {
      throw FormatError("'" + p + "': " + e.what());
    }
    RunEntry e{p, j.value("task", ""), train_log_from_json(j), 0.0};
    if (e.log.evals.empty()) throw DataError("'" + p + "' has no evaluations");
    e.best_val = e.log.evals.at(e.log.best_eval).val_accuracy;
    const TaskKey key{e.task, e.log.config.seed};
    auto& slot = out[e.log.config.group];
    auto it = slot.find(key);
    if (it == slot.end() || e.best_val > it->second.best_val) slot[key] = std::move(e);
  }
  return out;
}

double percent(double fraction) { return 100.0 * fraction; }

}  // namespace

int cmd_report(const ReportArgs& a, RunManifest& m, std::ostream& out, std::ostream& err) {
  if (a.logs.empty()) throw UsageError("--logs is required");
  constexpr std::string_view kBaseline = "baseline=";
  if (a.wilcoxon.rfind(kBaseline, 0) != 0) {
    throw UsageError("--wilcoxon: expected baseline=GROUP, got '" + a.wilcoxon + "'");
  }
  const ParamGroup baseline =
      parse_flag("--wilcoxon", [&] { return parse_group(a.wilcoxon.substr(kBaseline.size())); });
  if (!(a.alpha > 0.0 && a.alpha < 1.0)) throw UsageError("--alpha must lie in (0, 1)");

  m.config = {{"logs", a.logs},
              {"probe_logs", a.probe_logs},
              {"wilcoxon", a.wilcoxon},
              {"alpha", a.alpha},
              {"out", a.out}};
  m.seeds = Json::object();

  auto runs = select_runs(expand("--logs", a.logs), m);
  std::map<TaskKey, RunEntry> probe;
  if (!a.probe_logs.empty()) {
    auto probe_runs = select_runs(expand("--probe-log", a.probe_logs), m);
    for (auto& [group, by_task] : probe_runs) {
      if (group != ParamGroup::HEAD) {
        throw DataError("--probe-log matched a " + std::string(group_name(group)) + " log");
      }
      probe = std::move(by_task);
    }
  } else if (auto it = runs.find(ParamGroup::HEAD); it != runs.end()) {
    probe = it->second;
  }
  runs.erase(ParamGroup::HEAD);

  std::vector<std::string> diagnostics;
  bool preconditions_ok = true;

  Json groups = Json::array();
  for (const auto& [group, by_task] : runs) {
    Json per_task = Json::array();
    double sum = 0.0, gain_sum = 0.0;
    std::size_t gains = 0;
    for (const auto& [key, e] : by_task) {
      Json t = {{"task", key.first},
                {"seed", key.second},
                {"lr", e.log.config.lr},
                {"log", e.path},
                {"best_val_accuracy", percent(e.best_val)},
                {"test_accuracy", percent(e.log.test_accuracy)}};
      sum += e.log.test_accuracy;
      if (auto p = probe.find(key); p != probe.end()) {
        if (p->second.log.test_accuracy > 0.0) {
          const double g = relative_gain(e.log.test_accuracy, p->second.log.test_accuracy);
          t["relative_gain"] = g;
          gain_sum += g;
          ++gains;
        } else {
          diagnostics.push_back("probe accuracy is 0 for task '" + key.first + "' seed " +
                                std::to_string(key.second) + "; relative gain undefined");
        }
      }
      per_task.push_back(std::move(t));
    }
    Json g = {{"group", group_name(group)},
              {"tasks", by_task.size()},
              {"mean_test_accuracy", percent(sum / static_cast<double>(by_task.size()))},
              {"per_task", per_task}};
    g["mean_relative_gain"] = gains > 0 ? Json(gain_sum / static_cast<double>(gains)) : Json(nullptr);
    groups.push_back(std::move(g));
  }

  Json probe_json = nullptr;
  if (!probe.empty()) {
    double sum = 0.0;
    for (const auto& [key, e] : probe) sum += e.log.test_accuracy;
    probe_json = {{"tasks", probe.size()},
                  {"mean_test_accuracy", percent(sum / static_cast<double>(probe.size()))}};
  } else {
    diagnostics.push_back("no HEAD (linear probe) logs; relative gains omitted");
  }

  Json tests = Json::array();
  const auto base_it = runs.find(baseline);
  if (base_it == runs.end()) {
    diagnostics.push_back("baseline group " + std::string(group_name(baseline)) +
                          " has no logs; Wilcoxon tests skipped");
    preconditions_ok = false;
  } else {
    for (const auto& [group, by_task] : runs) {
      if (group == baseline) continue;
      std::vector<double> diffs;
      for (const auto& [key, e] : by_task) {
        if (auto b = base_it->second.find(key); b != base_it->second.end()) {
          diffs.push_back(percent(b->second.log.test_accuracy) - percent(e.log.test_accuracy));
        }
      }
      Json t = {{"group", group_name(group)},
                {"baseline", group_name(baseline)},
                {"pairs", diffs.size()}};
      double mean = 0.0;
      for (double d : diffs) mean += d;
      if (!diffs.empty()) mean /= static_cast<double>(diffs.size());
      t["mean_decrease"] = mean;
      try {
        const WilcoxonResult w = wilcoxon_signed_rank(diffs, a.alpha);
        t["nonzero_pairs"] = w.n;
        t["w_plus"] = w.w_plus;
        t["w_minus"] = w.w_minus;
        t["statistic"] = w.statistic;
        t["p_value"] = w.p_value;
        t["exact"] = w.exact;
        t["significant"] = w.significant;
      } catch (const DegenerateInputError&) {
        // Identical accuracies on every task: no evidence of a difference.
        t["nonzero_pairs"] = 0;
        t["p_value"] = 1.0;
        t["significant"] = false;
      } catch (const DataError& e) {
        t["error"] = e.what();
        diagnostics.push_back(std::string(group_name(group)) + " vs " +
                              std::string(group_name(baseline)) + ": " + e.what());
        preconditions_ok = false;
      }
      tests.push_back(std::move(t));
    }
  }

  const Json report = {{"schema", "vitplast.report/1"},
                       {"baseline", group_name(baseline)},
                       {"alpha", a.alpha},
                       {"accuracy_unit", "percent"},
                       {"groups", groups},
                       {"probe", probe_json},
                       {"wilcoxon", tests},
                       {"diagnostics", diagnostics}};
  write_output(m, a.out, report);
  for (const std::string& d : diagnostics) err << "report: " << d << "\n";
  out << "report: " << groups.size() << " groups, " << tests.size() << " tests\n";
  return preconditions_ok ? kExitOk : kExitPrecondition;
}

// ---- synth ----------------------------------------------------------------

int cmd_synth(const SynthArgs& a, RunManifest& m, std::ostream& out) {
  SyntheticOptions o;
  o.task = parse_flag("--task", [&] { return parse_task(a.task); });
  o.n_samples = a.samples;
  o.image_size = a.image_size;
  o.patch_size = a.patch_size;
  o.num_classes = a.classes;
  o.seed = a.seed;
  if (a.stem.empty() || a.stem.find('/') != std::string::npos) {
    throw UsageError("--stem must be a plain file name");
  }
  m.config = {{"task", a.task},   {"samples", a.samples}, {"image_size", a.image_size},
              {"patch_size", a.patch_size}, {"classes", a.classes}, {"out", a.out},
              {"stem", a.stem}};
  m.seeds = {{"data", a.seed}};
  const fs::path manifest = write_synthetic(o, a.out, a.stem);
  const DatasetManifest dm = read_manifest(manifest);
  m.outputs = {manifest.string(), (fs::path(a.out) / dm.images).string(),
               (fs::path(a.out) / dm.labels).string()};
  out << "synth: wrote " << manifest.string() << "\n";
  return kExitOk;
}

}  // namespace vitplast::cli
