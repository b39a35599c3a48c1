#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vitplast/components.hpp"
#include "vitplast/parameters.hpp"
#include "vitplast/tensor.hpp"

namespace vitplast {

struct ViTConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t embed_dim = 16;
  std::size_t num_heads = 4;
  std::size_t num_layers = 4;
  std::size_t num_classes = 4;
  double ln_eps = 1e-12;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t seq_len() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t hidden_dim() const { return 4 * embed_dim; }

  // Throws DimensionError / AssumptionError on inconsistent fields.
  void validate() const;
  bool operator==(const ViTConfig&) const = default;
};

// Named shapes: "tiny", "gradcheck", "base", "huge".
ViTConfig vit_preset(std::string_view name);
std::vector<std::string> vit_preset_names();

enum class InitScheme {
  TruncatedNormal,  // weights N(0, 0.02^2) cut at 2 std, biases 0, LN gamma 1, beta 0
  MatchedScale,     // every weight matrix and LN gamma N(0, gain^2 / d), biases and beta 0
};

struct InitOptions {
  InitScheme scheme = InitScheme::TruncatedNormal;
  double gain = 1.0;
};

struct Model {
  ViTConfig config;
  ParameterStore params;
};

/// Allocates every tensor with its canonical name and draws it from
/// config.seed. Each tensor has its own random stream keyed on its position,
/// so changing one tensor's scheme does not shift the others.
Model make_model(const ViTConfig& config, const InitOptions& init = {});

/// Fresh truncated-normal head weights, zero head bias, unit head LN.
void reinit_head(Model& model, std::uint64_t seed);

/// Exact parameter count of a group for this shape, without allocating it.
std::size_t count_parameters(const ViTConfig& config, ParamGroup group);

// Counts outside the five block groups.
struct OtherParameterCounts {
  std::size_t embedding = 0;  // E and its bias
  std::size_t positions = 0;
  std::size_t cls = 0;
  std::size_t head = 0;  // head LN + linear
};
OtherParameterCounts count_other_parameters(const ViTConfig& config);

// ---- Embedding --------------------------------------------------------------

/// Image [C x H x W] -> flattened patches (P*P*C) x num_patches, patches in
/// row-major grid order, entries in (channel, row, col) order.
Tensor patchify(const ViTConfig& config, const Tensor& image);

/// Tokens d x n: column 0 is CLS, then one column per patch; positional
/// embeddings added to all columns.
Tensor embed_image(const Model& model, const Tensor& image);

/// Image i of an [N x C x H x W] batch as a [C x H x W] tensor.
Tensor image_at(const Tensor& images, std::size_t index);

/// Embeds images[indices] side by side: d x (B * n).
Tensor embed_batch(const Model& model, const Tensor& images, std::span<const std::size_t> indices);

// ---- Forward ----------------------------------------------------------------

/// Inputs observed at every site during a traced forward pass.
struct ActivationTrace {
  Tensor embedded;
  std::vector<std::array<Tensor, 5>> inputs;  // [layer][ComponentKind]

  const Tensor& input(std::size_t layer, ComponentKind kind) const {
    return inputs.at(layer)[static_cast<std::size_t>(kind)];
  }
};

// Where the classification head reads its d-dim feature from (CLS column).
enum class FeatureTap {
  BlockOutput,    // output of the last block
  LastAttention,  // MHA output of the last block before the residual add
};

std::string_view tap_name(FeatureTap tap);
FeatureTap parse_tap(std::string_view name);

struct ForwardResult {
  Tensor logits;  // num_classes
  std::optional<ActivationTrace> trace;
};

ForwardResult forward(const Model& model, const Tensor& image, bool trace = false,
                      FeatureTap tap = FeatureTap::BlockOutput);

/// Runs the blocks on a d x (B * n) token matrix and returns the tapped CLS
/// features, d x B. When `trace` is set it receives every site input.
Tensor forward_tokens(const Model& model, const Tensor& tokens, FeatureTap tap,
                      ActivationTrace* trace = nullptr);

/// Head LN + linear on features d x B -> logits num_classes x B.
Tensor head_logits(const Model& model, const Tensor& features);

/// Features of images[indices], d x B, evaluated in chunks.
Tensor extract_features(const Model& model, const Tensor& images,
                        std::span<const std::size_t> indices, FeatureTap tap,
                        std::size_t chunk = 64);

/// One component of block `layer` evaluated in isolation. FC1 and FC2 are
/// the linear maps only (W x + b); FC2 expects 4d-dim tokens. For MHA,
/// `seq_len` splits x into side-by-side sequences (0 = one sequence).
Tensor apply_component(const Model& model, std::size_t layer, ComponentKind kind,
                       const Tensor& x, std::size_t seq_len = 0);

AttentionWeights attention_weights(const Model& model, std::size_t layer);

// Canonical tensor names.
std::string block_param(std::size_t layer, std::string_view suffix);

}  // namespace vitplast
