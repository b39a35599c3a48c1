#pragma once

#include "cli.hpp"
#include "run_manifest.hpp"

namespace vitplast::cli {

// Each command fills `manifest` (config, seeds, inputs, outputs) and returns
// an exit code. Errors surface as exceptions and are mapped by run().
int cmd_plasticity(const PlasticityArgs& args, RunManifest& manifest, std::ostream& out);
int cmd_bounds(const BoundsArgs& args, RunManifest& manifest, std::ostream& out);
int cmd_finetune(const FinetuneArgs& args, RunManifest& manifest, std::ostream& out);
int cmd_report(const ReportArgs& args, RunManifest& manifest, std::ostream& out,
               std::ostream& err);
int cmd_synth(const SynthArgs& args, RunManifest& manifest, std::ostream& out);

// Where the sidecar of a command goes.
std::filesystem::path sidecar_for_file(const std::filesystem::path& output);

// Shortest decimal that round-trips, used in file names ("0.01", "1e-05").
std::string short_number(double v);

}  // namespace vitplast::cli
