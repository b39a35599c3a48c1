#include "cli.hpp"

#include <CLI11.hpp>

#include <ostream>

#include "commands.hpp"
#include "vitplast/errors.hpp"
#include "vitplast/kernels.hpp"

namespace vitplast::cli {

namespace {

void add_model_options(CLI::App* sub, ModelOptions& o, bool required) {
  auto* opt = sub->add_option("--model", o.spec, "VCKP checkpoint or random:<tiny|gradcheck|base|huge>");
  if (required) opt->required();
  sub->add_option("--init", o.init, "Init for random models: truncated_normal|matched_scale")
      ->capture_default_str();
  sub->add_option("--gain", o.gain, "Gain of matched_scale init")->capture_default_str();
  sub->add_option("--model-seed", o.seed, "Seed of the random model")->capture_default_str();
}

int replay(const std::string& path, bool verify, std::ostream& out, std::ostream& err) {
  const RunManifest m = read_run_manifest(path);
  if (verify) {
    for (const RunManifest::Input& in : m.inputs) {
      if (!std::filesystem::exists(in.path) || sha256_file(in.path) != in.sha256) {
        throw DataError("input '" + in.path + "' differs from the recorded one");
      }
    }
  }
  out << "replay: " << m.command << "\n";
  return run(m.argv, out, err);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Plasticity measurements, Lipschitz bounds and selective finetuning for ViTs",
               "vitplast"};
  app.set_version_flag("--version", VITPLAST_VERSION);
  app.require_subcommand(1);

  PlasticityArgs pa;
  auto* plast = app.add_subcommand("plasticity", "Monte-Carlo rate of change of every component");
  add_model_options(plast, pa.model, true);
  plast->add_option("--data-a", pa.data_a, "Dataset manifest or gaussian[:COUNT[:SCALE]]")->required();
  plast->add_option("--data-b", pa.data_b, "Second source (default: --data-a)");
  plast->add_option("--pairs", pa.pairs, "Number of input pairs")->capture_default_str();
  plast->add_option("--batch", pa.batch, "Pairs evaluated side by side")->capture_default_str();
  plast->add_option("--mode", pa.mode, "embedding|insitu")->capture_default_str();
  plast->add_option("--sample-cap", pa.sample_cap, "Raw rates kept per site")->capture_default_str();
  plast->add_option("--seed", pa.seed, "Pair sampling seed")->capture_default_str();
  plast->add_option("--out", pa.out, "Report path (JSON)")->required();

  BoundsArgs ba;
  auto* bounds = app.add_subcommand("bounds", "Closed-form Lipschitz bounds of every component");
  add_model_options(bounds, ba.model, true);
  bounds->add_option("--data", ba.data, "Dataset manifest for token statistics and image energy");
  bounds->add_option("--radius", ba.radius, "Token ball radius: auto|VALUE")->capture_default_str();
  bounds->add_option("--sigma", ba.sigma, "Minimal token std for LN: auto|VALUE")->capture_default_str();
  bounds->add_option("--alpha", ba.alpha, "Embedding spectral norm: auto|VALUE")->capture_default_str();
  bounds->add_option("--energy", ba.energy, "Image energy bound: auto|VALUE")->capture_default_str();
  bounds->add_flag("--tighter", ba.tighter, "Also evaluate the energy-based attention bound");
  bounds->add_option("--samples", ba.samples, "Sequences used by auto estimates")->capture_default_str();
  bounds->add_option("--seed", ba.seed, "Seed of the Gaussian token probes")->capture_default_str();
  bounds->add_option("--out", ba.out, "Report path (JSON)")->required();

  FinetuneArgs fa;
  auto* finetune = app.add_subcommand("finetune", "Train one parameter group plus the head");
  add_model_options(finetune, fa.model, false);
  finetune->add_option("--data", fa.data, "Training pool manifest")->required();
  finetune->add_option("--test", fa.test, "Test manifest (default: hold out 20% of --data)");
  finetune->add_option("--group", fa.group, "LN1|MHA|LN2|FC1|FC2|ALL|HEAD")->capture_default_str();
  auto* lr = finetune->add_option("--lr", fa.lr, "Base learning rate")->capture_default_str();
  finetune->add_option("--sweep", fa.sweep, "Comma-separated learning rates, one run each")
      ->delimiter(',')
      ->excludes(lr);
  finetune->add_option("--steps", fa.steps, "Optimizer steps")->capture_default_str();
  finetune->add_option("--batch", fa.batch, "Batch size")->capture_default_str();
  finetune->add_option("--momentum", fa.momentum)->capture_default_str();
  finetune->add_option("--weight-decay", fa.weight_decay)->capture_default_str();
  finetune->add_option("--clip", fa.clip, "Global gradient norm cap")->capture_default_str();
  finetune->add_option("--schedule", fa.schedule, "cosine|constant")->capture_default_str();
  finetune->add_option("--eval-every", fa.eval_every)->capture_default_str();
  finetune->add_option("--val-fraction", fa.val_fraction)->capture_default_str();
  finetune->add_option("--tap", fa.tap, "Head features: block_output|last_attention")
      ->capture_default_str();
  finetune->add_flag("!--no-checkpoint", fa.checkpoint, "Skip writing .vckp files");
  finetune->add_option("--seed", fa.seed, "Shuffle seed")->capture_default_str();
  finetune->add_option("--out", fa.out, "Output directory")->required();

  ReportArgs ra;
  auto* report = app.add_subcommand("report", "Per-group accuracy, gains and signed-rank tests");
  report->add_option("--logs", ra.logs, "Train log glob(s)")->required();
  report->add_option("--probe-log", ra.probe_logs, "HEAD log glob(s)");
  report->add_option("--wilcoxon", ra.wilcoxon, "baseline=GROUP")->capture_default_str();
  report->add_option("--alpha", ra.alpha, "Significance level")->capture_default_str();
  report->add_option("--out", ra.out, "Report path (JSON)")->required();

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic image dataset");
  synth->add_option("--task", sa.task, "patch_color|shifted_patch_color")->capture_default_str();
  synth->add_option("--samples", sa.samples)->capture_default_str();
  synth->add_option("--image-size", sa.image_size)->capture_default_str();
  synth->add_option("--patch-size", sa.patch_size)->capture_default_str();
  synth->add_option("--classes", sa.classes)->capture_default_str();
  synth->add_option("--seed", sa.seed)->capture_default_str();
  synth->add_option("--stem", sa.stem, "File name stem")->capture_default_str();
  synth->add_option("--out", sa.out, "Output directory")->required();

  std::string replay_path;
  bool replay_verify = true;
  auto* rerun = app.add_subcommand("replay", "Re-run the command recorded in a .run.json file");
  rerun->add_option("manifest", replay_path)->required();
  rerun->add_flag("!--no-verify", replay_verify, "Skip the input hash check");

  std::vector<const char*> argv{"vitplast"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  if (!kernels::configure_threads_from_env()) {
    err << "error: PLASTICITY_THREADS must be a non-negative integer\n";
    return kExitUsage;
  }

  RunManifest m;
  m.argv = args;
  m.started = std::chrono::system_clock::now();
  try {
    if (rerun->parsed()) return replay(replay_path, replay_verify, out, err);

    int code = kExitOk;
    std::filesystem::path sidecar;
    if (plast->parsed()) {
      m.command = "plasticity";
      code = cmd_plasticity(pa, m, out);
      sidecar = sidecar_for_file(pa.out);
    } else if (bounds->parsed()) {
      m.command = "bounds";
      code = cmd_bounds(ba, m, out);
      sidecar = sidecar_for_file(ba.out);
    } else if (finetune->parsed()) {
      m.command = "finetune";
      code = cmd_finetune(fa, m, out);
      sidecar = std::filesystem::path(fa.out) /
                (fa.group + "_seed" + std::to_string(fa.seed) + ".run.json");
    } else if (report->parsed()) {
      m.command = "report";
      code = cmd_report(ra, m, out, err);
      sidecar = sidecar_for_file(ra.out);
    } else {
      m.command = "synth";
      code = cmd_synth(sa, m, out);
      sidecar = std::filesystem::path(sa.out) / (sa.stem + ".run.json");
    }
    m.finished = std::chrono::system_clock::now();
    write_run_manifest(sidecar, m);
    return code;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitPrecondition;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace vitplast::cli
