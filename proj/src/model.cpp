#include "vitplast/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "vitplast/errors.hpp"
#include "vitplast/seeding.hpp"
#include "vitplast/kernels.hpp"
#include "vitplast/linalg.hpp"

namespace vitplast {

void ViTConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw DimensionError("image_size " + std::to_string(image_size) +
                         " must be a positive multiple of patch_size " +
                         std::to_string(patch_size));
  }
  if (channels == 0 || embed_dim == 0 || num_classes == 0) {
    throw DimensionError("channels, embed_dim and num_classes must be positive");
  }
  if (num_heads == 0 || embed_dim % num_heads != 0) {
    throw DimensionError("embed_dim " + std::to_string(embed_dim) +
                         " must be divisible by num_heads " + std::to_string(num_heads));
  }
  if (!(ln_eps > 0.0)) throw AssumptionError("ln_eps must be positive");
}

ViTConfig vit_preset(std::string_view name) {
  ViTConfig c;
  if (name == "tiny") {
    c = {16, 4, 3, 16, 4, 4, 4, 1e-12, 0};
  } else if (name == "gradcheck") {
    c = {8, 4, 3, 8, 2, 2, 3, 1e-12, 0};
  } else if (name == "base") {
    c = {224, 16, 3, 768, 12, 12, 10, 1e-12, 0};
  } else if (name == "huge") {
    c = {224, 14, 3, 1280, 16, 32, 10, 1e-12, 0};
  } else {
    throw Error("unknown model preset '" + std::string(name) +
                "' (expected tiny, gradcheck, base, huge)");
  }
  return c;
}

std::vector<std::string> vit_preset_names() { return {"tiny", "gradcheck", "base", "huge"}; }

std::string block_param(std::size_t layer, std::string_view suffix) {
  return "blocks." + std::to_string(layer) + "." + std::string(suffix);
}

namespace {

enum class InitKind { Weight, Gamma, Zero };

void fill_tensor(Tensor& t, InitKind kind, const InitOptions& init, double d,
                 std::uint64_t seed) {
  if (kind == InitKind::Zero) return;
  if (kind == InitKind::Gamma && init.scheme == InitScheme::TruncatedNormal) {
    for (double& v : t.values()) v = 1.0;
    return;
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  if (init.scheme == InitScheme::MatchedScale) {
    const double stdev = init.gain / std::sqrt(d);
    for (double& v : t.values()) v = stdev * normal(rng);
    return;
  }
  for (double& v : t.values()) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    v = 0.02 * z;
  }
}

}  // namespace

Model make_model(const ViTConfig& config, const InitOptions& init) {
  config.validate();
  Model model{config, {}};
  ParameterStore& p = model.params;
  const std::size_t d = config.embed_dim;
  const std::size_t n = config.seq_len();
  std::vector<InitKind> kinds;

  auto add = [&](std::string name, ParamRole role, std::optional<ComponentKind> kind, int layer,
                 Shape shape, InitKind init_kind) {
    p.add(std::move(name), role, kind, layer, Tensor(std::move(shape)));
    kinds.push_back(init_kind);
  };

  add("embed.weight", ParamRole::Embedding, std::nullopt, -1, {d, config.patch_dim()},
      InitKind::Weight);
  add("embed.bias", ParamRole::Embedding, std::nullopt, -1, {d}, InitKind::Zero);
  add("cls", ParamRole::ClsToken, std::nullopt, -1, {d}, InitKind::Weight);
  add("pos", ParamRole::PosEmbed, std::nullopt, -1, {d, n}, InitKind::Weight);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const int li = static_cast<int>(l);
    const auto C = ParamRole::Component;
    add(block_param(l, "ln1.gamma"), C, ComponentKind::LN1, li, {d}, InitKind::Gamma);
    add(block_param(l, "ln1.beta"), C, ComponentKind::LN1, li, {d}, InitKind::Zero);
    add(block_param(l, "attn.qkv.weight"), C, ComponentKind::MHA, li, {3 * d, d},
        InitKind::Weight);
    add(block_param(l, "attn.qkv.bias"), C, ComponentKind::MHA, li, {3 * d}, InitKind::Zero);
    add(block_param(l, "attn.out.weight"), C, ComponentKind::MHA, li, {d, d}, InitKind::Weight);
    add(block_param(l, "attn.out.bias"), C, ComponentKind::MHA, li, {d}, InitKind::Zero);
    add(block_param(l, "ln2.gamma"), C, ComponentKind::LN2, li, {d}, InitKind::Gamma);
    add(block_param(l, "ln2.beta"), C, ComponentKind::LN2, li, {d}, InitKind::Zero);
    add(block_param(l, "fc1.weight"), C, ComponentKind::FC1, li, {4 * d, d}, InitKind::Weight);
    add(block_param(l, "fc1.bias"), C, ComponentKind::FC1, li, {4 * d}, InitKind::Zero);
    add(block_param(l, "fc2.weight"), C, ComponentKind::FC2, li, {d, 4 * d}, InitKind::Weight);
    add(block_param(l, "fc2.bias"), C, ComponentKind::FC2, li, {d}, InitKind::Zero);
  }
  add("head.norm.gamma", ParamRole::Head, std::nullopt, -1, {d}, InitKind::Gamma);
  add("head.norm.beta", ParamRole::Head, std::nullopt, -1, {d}, InitKind::Zero);
  add("head.weight", ParamRole::Head, std::nullopt, -1, {config.num_classes, d},
      InitKind::Weight);
  add("head.bias", ParamRole::Head, std::nullopt, -1, {config.num_classes}, InitKind::Zero);

  auto& entries = p.entries();
  const long count = static_cast<long>(entries.size());
#pragma omp parallel for schedule(dynamic) num_threads(kernels::thread_limit())
  for (long i = 0; i < count; ++i) {
    fill_tensor(entries[static_cast<std::size_t>(i)].value, kinds[static_cast<std::size_t>(i)],
                init, static_cast<double>(d), stream_seed(config.seed, static_cast<std::uint64_t>(i)));
  }
  return model;
}

void reinit_head(Model& model, std::uint64_t seed) {
  ParameterStore& p = model.params;
  const InitOptions trunc{InitScheme::TruncatedNormal, 1.0};
  const double d = static_cast<double>(model.config.embed_dim);
  for (double& v : p.at("head.norm.gamma").values()) v = 1.0;
  for (double& v : p.at("head.norm.beta").values()) v = 0.0;
  for (double& v : p.at("head.bias").values()) v = 0.0;
  fill_tensor(p.at("head.weight"), InitKind::Weight, trunc, d, stream_seed(seed, 0x4ead));
}

std::size_t count_parameters(const ViTConfig& config, ParamGroup group) {
  const std::size_t d = config.embed_dim;
  const std::size_t L = config.num_layers;
  switch (group) {
    case ParamGroup::LN1:
    case ParamGroup::LN2:
      return L * 2 * d;
    case ParamGroup::MHA:
      return L * (3 * d * d + 3 * d + d * d + d);
    case ParamGroup::FC1:
      return L * (4 * d * d + 4 * d);
    case ParamGroup::FC2:
      return L * (4 * d * d + d);
    case ParamGroup::HEAD:
      return count_other_parameters(config).head;
    case ParamGroup::ALL: {
      const OtherParameterCounts o = count_other_parameters(config);
      std::size_t total = o.embedding + o.positions + o.cls + o.head;
      for (ComponentKind k : kComponentKinds) total += count_parameters(config, group_of(k));
      return total;
    }
  }
  return 0;
}

OtherParameterCounts count_other_parameters(const ViTConfig& config) {
  const std::size_t d = config.embed_dim;
  return {d * config.patch_dim() + d, d * config.seq_len(), d,
          2 * d + config.num_classes * d + config.num_classes};
}

Tensor patchify(const ViTConfig& config, const Tensor& image) {
  const std::size_t C = config.channels;
  const std::size_t S = config.image_size;
  if (image.shape() != Shape{C, S, S}) {
    throw DimensionError("image shape " + shape_string(image.shape()) + " does not match config " +
                         shape_string({C, S, S}));
  }
  const std::size_t P = config.patch_size;
  const std::size_t G = config.grid();
  Tensor out({config.patch_dim(), config.num_patches()});
  const std::size_t np = config.num_patches();
  for (std::size_t gy = 0; gy < G; ++gy) {
    for (std::size_t gx = 0; gx < G; ++gx) {
      const std::size_t patch = gy * G + gx;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t py = 0; py < P; ++py) {
          for (std::size_t px = 0; px < P; ++px) {
            const std::size_t row = (c * P + py) * P + px;
            out[row * np + patch] = image[(c * S + gy * P + py) * S + gx * P + px];
          }
        }
      }
    }
  }
  return out;
}

namespace {

// Writes the embedded sequence for `image` into columns [col, col + n).
void embed_into(const Model& model, const Tensor& image, Tensor& out, std::size_t col) {
  const ViTConfig& cfg = model.config;
  const ParameterStore& p = model.params;
  const std::size_t d = cfg.embed_dim;
  const std::size_t n = cfg.seq_len();
  const std::size_t T = out.cols();
  const Tensor tokens = linear(p.at("embed.weight"), &p.at("embed.bias"), patchify(cfg, image));
  const Tensor& pos = p.at("pos");
  const Tensor& cls = p.at("cls");
  for (std::size_t i = 0; i < d; ++i) {
    double* row = out.data() + i * T + col;
    const double* prow = pos.data() + i * n;
    row[0] = cls[i] + prow[0];
    for (std::size_t j = 1; j < n; ++j) row[j] = tokens(i, j - 1) + prow[j];
  }
}

}  // namespace

Tensor embed_image(const Model& model, const Tensor& image) {
  Tensor out({model.config.embed_dim, model.config.seq_len()});
  embed_into(model, image, out, 0);
  return out;
}

Tensor image_at(const Tensor& images, std::size_t index) {
  if (images.rank() != 4) {
    throw DimensionError("expected an [N x C x H x W] image batch, got " +
                         shape_string(images.shape()));
  }
  if (index >= images.dim(0)) throw DimensionError("image index out of range");
  const std::size_t per = images.size() / images.dim(0);
  std::vector<double> data(images.data() + index * per, images.data() + (index + 1) * per);
  return Tensor({images.dim(1), images.dim(2), images.dim(3)}, std::move(data));
}

Tensor embed_batch(const Model& model, const Tensor& images, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("embed_batch: empty batch");
  const std::size_t n = model.config.seq_len();
  Tensor out({model.config.embed_dim, indices.size() * n});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    embed_into(model, image_at(images, indices[b]), out, b * n);
  }
  return out;
}

std::string_view tap_name(FeatureTap tap) {
  return tap == FeatureTap::BlockOutput ? "block_output" : "last_attention";
}

FeatureTap parse_tap(std::string_view name) {
  if (name == "block_output") return FeatureTap::BlockOutput;
  if (name == "last_attention") return FeatureTap::LastAttention;
  throw Error("unknown feature tap '" + std::string(name) +
              "' (expected block_output, last_attention)");
}

AttentionWeights attention_weights(const Model& model, std::size_t layer) {
  const ParameterStore& p = model.params;
  return {&p.at(block_param(layer, "attn.qkv.weight")), &p.at(block_param(layer, "attn.qkv.bias")),
          &p.at(block_param(layer, "attn.out.weight")), &p.at(block_param(layer, "attn.out.bias")),
          model.config.num_heads};
}

namespace {

Tensor cls_columns(const Tensor& x, std::size_t n) {
  const std::size_t d = x.rows();
  const std::size_t T = x.cols();
  const std::size_t B = T / n;
  Tensor out({d, B});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t b = 0; b < B; ++b) out(i, b) = x[i * T + b * n];
  }
  return out;
}

}  // namespace

Tensor forward_tokens(const Model& model, const Tensor& tokens, FeatureTap tap,
                      ActivationTrace* trace) {
  const ViTConfig& cfg = model.config;
  const ParameterStore& p = model.params;
  const std::size_t n = cfg.seq_len();
  if (tokens.rank() != 2 || tokens.rows() != cfg.embed_dim || tokens.cols() % n != 0) {
    throw DimensionError("forward_tokens: expected d x (B*n) tokens, got " +
                         shape_string(tokens.shape()));
  }
  if (tap == FeatureTap::LastAttention && cfg.num_layers == 0) {
    throw Error("last_attention tap needs at least one block");
  }
  if (trace) {
    trace->embedded = tokens;
    trace->inputs.assign(cfg.num_layers, {});
  }
  Tensor x = tokens;
  Tensor tapped;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    auto site = [&](ComponentKind k, const Tensor& v) {
      if (trace) trace->inputs[l][static_cast<std::size_t>(k)] = v;
    };
    site(ComponentKind::LN1, x);
    Tensor a = layer_norm(p.at(block_param(l, "ln1.gamma")), p.at(block_param(l, "ln1.beta")),
                          cfg.ln_eps, x);
    site(ComponentKind::MHA, a);
    Tensor m = multi_head_attention(attention_weights(model, l), a, n);
    if (tap == FeatureTap::LastAttention && l + 1 == cfg.num_layers) tapped = cls_columns(m, n);
    add_inplace(x, m);
    site(ComponentKind::LN2, x);
    Tensor h = layer_norm(p.at(block_param(l, "ln2.gamma")), p.at(block_param(l, "ln2.beta")),
                          cfg.ln_eps, x);
    site(ComponentKind::FC1, h);
    Tensor u = linear(p.at(block_param(l, "fc1.weight")), &p.at(block_param(l, "fc1.bias")), h);
    for (double& v : u.values()) v = gelu(v);
    site(ComponentKind::FC2, u);
    add_inplace(x, linear(p.at(block_param(l, "fc2.weight")), &p.at(block_param(l, "fc2.bias")), u));
  }
  return tap == FeatureTap::LastAttention ? tapped : cls_columns(x, n);
}

Tensor head_logits(const Model& model, const Tensor& features) {
  const ParameterStore& p = model.params;
  const Tensor y =
      layer_norm(p.at("head.norm.gamma"), p.at("head.norm.beta"), model.config.ln_eps, features);
  return linear(p.at("head.weight"), &p.at("head.bias"), y);
}

ForwardResult forward(const Model& model, const Tensor& image, bool trace, FeatureTap tap) {
  ForwardResult result;
  const Tensor tokens = embed_image(model, image);
  ActivationTrace t;
  const Tensor features = forward_tokens(model, tokens, tap, trace ? &t : nullptr);
  result.logits = head_logits(model, features).reshaped({model.config.num_classes});
  if (trace) result.trace = std::move(t);
  return result;
}

Tensor extract_features(const Model& model, const Tensor& images,
                        std::span<const std::size_t> indices, FeatureTap tap, std::size_t chunk) {
  if (indices.empty()) throw DataError("extract_features: no images");
  const std::size_t d = model.config.embed_dim;
  const std::size_t B = indices.size();
  Tensor out({d, B});
  chunk = std::max<std::size_t>(chunk, 1);
  for (std::size_t start = 0; start < B; start += chunk) {
    const std::size_t stop = std::min(B, start + chunk);
    const Tensor f =
        forward_tokens(model, embed_batch(model, images, indices.subspan(start, stop - start)), tap);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t b = start; b < stop; ++b) out(i, b) = f(i, b - start);
    }
  }
  return out;
}

Tensor apply_component(const Model& model, std::size_t layer, ComponentKind kind,
                       const Tensor& x, std::size_t seq_len) {
  const ParameterStore& p = model.params;
  const double eps = model.config.ln_eps;
  if (layer >= model.config.num_layers) throw DimensionError("layer index out of range");
  switch (kind) {
    case ComponentKind::LN1:
      return layer_norm(p.at(block_param(layer, "ln1.gamma")), p.at(block_param(layer, "ln1.beta")),
                        eps, x);
    case ComponentKind::LN2:
      return layer_norm(p.at(block_param(layer, "ln2.gamma")), p.at(block_param(layer, "ln2.beta")),
                        eps, x);
    case ComponentKind::MHA:
      return multi_head_attention(attention_weights(model, layer), x, seq_len);
    case ComponentKind::FC1:
      return linear(p.at(block_param(layer, "fc1.weight")), &p.at(block_param(layer, "fc1.bias")),
                    x);
    case ComponentKind::FC2:
      return linear(p.at(block_param(layer, "fc2.weight")), &p.at(block_param(layer, "fc2.bias")),
                    x);
  }
  return x;
}

}  // namespace vitplast
