#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitplast/bounds.hpp"
#include "vitplast/finetune.hpp"
#include "vitplast/model.hpp"
#include "vitplast/plasticity.hpp"
#include "vitplast/tensor_io.hpp"

// "VCKP" checkpoints:
//   bytes 0..3  magic "VCKP"
//   byte  4     version (1)
//   bytes 5..7  reserved, written as 0
//   u64         entry count
//   per entry:  u32 name length, UTF-8 name, one complete VTEN tensor.
// Integers are little-endian.

namespace vitplast {

struct CheckpointEntry {
  std::string name;
  Tensor value;
  DType dtype = DType::F64;

  bool operator==(const CheckpointEntry& o) const {
    return name == o.name && dtype == o.dtype && value == o.value;
  }
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;
  bool operator==(const Checkpoint&) const = default;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Name of the leading entry that stores the ViTConfig.
inline constexpr const char* kConfigEntry = "__config__";

/// Config entry followed by every parameter in store order, all f64.
Checkpoint model_checkpoint(const Model& model);
/// Rebuilds the model; every parameter of the config must be present with
/// its exact shape. Trainable flags come back cleared.
Model model_from_checkpoint(const Checkpoint& ckpt);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

// ---- Structured reports --------------------------------------------------

using Json = nlohmann::json;

Json config_to_json(const ViTConfig& config);
ViTConfig config_from_json(const Json& j);

Json finetune_config_to_json(const FinetuneConfig& cfg);

/// Plasticity report; raw samples per site are included as stored.
Json to_json(const PlasticityReport& report);
Json to_json(const BoundReport& report);
Json to_json(const TrainLog& log);
TrainLog train_log_from_json(const Json& j);

/// Stable rendering used for every file the tools write.
std::string dump_json(const Json& j);

}  // namespace vitplast
