#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "vitplast/tensor.hpp"

namespace vitplast {

/// JSON document describing a dataset on disk. Paths are resolved relative
/// to the manifest's directory.
struct DatasetManifest {
  std::string name;
  std::string images;  // VTEN [N, C, H, W], u8 or f32
  std::string labels;  // VTEN [N], u8 or f32 holding integers
  std::size_t num_classes = 0;
  std::vector<double> mean;  // per channel, applied after u8 / 255
  std::vector<double> stddev;
  std::uint64_t split_seed = 0;
};

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

struct Dataset {
  Tensor images;  // [N, C, H, W], normalized
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::uint64_t split_seed = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t image_size() const { return images.dim(2); }
};

/// Loads both tensors, checks N and label range, and normalizes: u8 pixels
/// become value / 255, then every pixel maps to (x - mean_c) / std_c.
Dataset load_dataset(const std::filesystem::path& manifest_path);

/// Applies the manifest normalization to raw [N, C, H, W] pixels.
Tensor normalize_images(const Tensor& raw, bool from_u8, const std::vector<double>& mean,
                        const std::vector<double>& stddev);

Dataset subset(const Dataset& data, const std::vector<std::size_t>& indices);

// ---- Splits -------------------------------------------------------------

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Seeded permutation of [0, n); the last round(n * val_fraction) entries
/// form the validation part.
Split split_indices(std::size_t n, double val_fraction, std::uint64_t seed);

// ---- Synthetic tasks ----------------------------------------------------

enum class SyntheticTask {
  PatchColor,         // class = color of one designated patch
  ShiftedPatchColor,  // same, after a channel permutation and contrast change
};

std::string_view task_name(SyntheticTask task);
SyntheticTask parse_task(std::string_view name);

struct SyntheticOptions {
  SyntheticTask task = SyntheticTask::PatchColor;
  std::size_t n_samples = 512;
  std::size_t image_size = 16;
  std::size_t patch_size = 4;  // side of the designated patch
  std::size_t num_classes = 4;
  std::uint64_t seed = 0;
};

struct SyntheticData {
  Tensor pixels;  // [N, 3, S, S] u8 values
  std::vector<int> labels;
};

/// Three-channel u8 images on a noisy background. The designated patch (the
/// top-left patch_size x patch_size block) is filled with the class color
/// plus noise. Labels cycle through the classes before a seeded shuffle, so
/// classes are exactly balanced when N is a multiple of num_classes.
SyntheticData generate_synthetic(const SyntheticOptions& options);

/// Writes <stem>.images.vten, <stem>.labels.vten and <stem>.json into `dir`
/// and returns the manifest path. Normalization constants are the
/// per-channel statistics of the generated pixels.
std::filesystem::path write_synthetic(const SyntheticOptions& options,
                                      const std::filesystem::path& dir, const std::string& stem);

}  // namespace vitplast
