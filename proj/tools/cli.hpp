#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace vitplast::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,       // I/O trouble or anything unexpected
  kExitUsage = 2,         // bad or missing flags
  kExitPrecondition = 3,  // inputs violate a documented requirement
  kExitNumerical = 4,     // NaN/Inf during training
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Model selection shared by every command: a VCKP path or random:<preset>.
struct ModelOptions {
  std::string spec = "random:tiny";
  std::string init = "truncated_normal";  // or matched_scale (random models only)
  double gain = 1.0;
  std::uint64_t seed = 0;
};

struct PlasticityArgs {
  ModelOptions model;
  std::string data_a;  // dataset manifest, or gaussian[:COUNT[:SCALE]]
  std::string data_b;  // defaults to data_a
  std::size_t pairs = 256;
  std::size_t batch = 16;
  std::string mode = "embedding";
  std::size_t sample_cap = 10000;
  std::uint64_t seed = 0;
  std::string out;
};

struct BoundsArgs {
  ModelOptions model;
  std::string data;  // optional; without it token statistics come from N(0, 1) probes
  std::string radius = "auto";
  std::string sigma = "auto";
  std::string alpha = "auto";
  std::string energy = "auto";
  bool tighter = false;
  std::size_t samples = 256;
  std::uint64_t seed = 0;
  std::string out;
};

struct FinetuneArgs {
  ModelOptions model;
  std::string data;
  std::string test;  // optional; otherwise 20% of --data is held out
  std::string group = "MHA";
  double lr = 1e-2;
  std::vector<double> sweep;
  std::size_t steps = 300;
  std::size_t batch = 32;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double clip = 1.0;
  std::string schedule = "cosine";
  std::size_t eval_every = 25;
  double val_fraction = 0.2;
  std::string tap = "block_output";
  bool checkpoint = true;
  std::uint64_t seed = 0;
  std::string out;  // directory
};

struct ReportArgs {
  std::vector<std::string> logs;        // glob patterns
  std::vector<std::string> probe_logs;  // glob patterns; default: HEAD logs among --logs
  std::string wilcoxon = "baseline=MHA";
  double alpha = 0.05;
  std::string out;
};

struct SynthArgs {
  std::string task = "patch_color";
  std::size_t samples = 512;
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t classes = 4;
  std::uint64_t seed = 0;
  std::string out;  // directory
  std::string stem = "data";
};

// Parses `args` (without the program name), runs the command and writes its
// outputs plus a .run.json sidecar. Messages go to `out` / `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vitplast::cli
