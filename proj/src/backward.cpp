#include "vitplast/backward.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vitplast/errors.hpp"
#include "vitplast/linalg.hpp"

namespace vitplast {

double cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits) {
  require_matrix(logits, "cross_entropy");
  const std::size_t classes = logits.rows();
  const std::size_t B = logits.cols();
  if (labels.size() != B) throw DimensionError("cross_entropy: label count mismatch");
  if (dlogits) *dlogits = Tensor({classes, B});
  double total = 0.0;
  std::vector<double> col(classes);
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DataError("label " + std::to_string(y) + " out of range for " +
                      std::to_string(classes) + " classes");
    }
    for (std::size_t c = 0; c < classes; ++c) col[c] = logits(c, b);
    const double mx = *std::max_element(col.begin(), col.end());
    double s = 0.0;
    for (double v : col) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    total += lse - col[static_cast<std::size_t>(y)];
    if (dlogits) {
      for (std::size_t c = 0; c < classes; ++c) {
        const double p = std::exp(col[c] - lse);
        (*dlogits)(c, b) = (p - (static_cast<std::size_t>(y) == c ? 1.0 : 0.0)) / B;
      }
    }
  }
  return total / static_cast<double>(B);
}

namespace {

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  std::size_t hits = 0;
  for (std::size_t b = 0; b < logits.cols(); ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.rows(); ++c) {
      if (logits(c, b) > logits(best, b)) best = c;
    }
    if (static_cast<int>(best) == labels[b]) ++hits;
  }
  return hits;
}

Tensor* slot(Gradients& g, const ParameterStore& p, std::string_view name) {
  auto& s = g.slots[p.index_of(name)];
  return s ? &*s : nullptr;
}

// Head forward + backward on features; returns d loss / d features when
// `want_dfeatures`.
Tensor head_pass(const Model& model, const Tensor& features, std::span<const int> labels,
                 LossAndGradients& out, bool want_dfeatures) {
  const ParameterStore& p = model.params;
  LayerNormCache ln;
  const Tensor y = layer_norm(p.at("head.norm.gamma"), p.at("head.norm.beta"),
                              model.config.ln_eps, features, &ln);
  const Tensor logits = linear(p.at("head.weight"), &p.at("head.bias"), y);
  Tensor dlogits;
  out.loss = cross_entropy(logits, labels, &dlogits);
  out.correct = count_correct(logits, labels);
  Gradients& g = out.grads;
  Tensor* dgamma = slot(g, p, "head.norm.gamma");
  Tensor* dbeta = slot(g, p, "head.norm.beta");
  const bool need_dy = want_dfeatures || dgamma || dbeta;
  const Tensor dy = linear_backward(p.at("head.weight"), y, dlogits, slot(g, p, "head.weight"),
                                    slot(g, p, "head.bias"), need_dy);
  if (!need_dy) return Tensor();
  Tensor df = layer_norm_backward(p.at("head.norm.gamma"), ln, dy, dgamma, dbeta);
  return want_dfeatures ? df : Tensor();
}

struct BlockCache {
  LayerNormCache ln1;
  Tensor a;
  AttentionCache attn;
  LayerNormCache ln2;
  Tensor h;
  Tensor u;  // fc1 pre-activation
  Tensor g;  // gelu(u)
};

}  // namespace

LossAndGradients head_backward(const Model& model, const Tensor& features,
                               std::span<const int> labels) {
  LossAndGradients out;
  out.grads = Gradients::zeros_like_trainable(model.params);
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (out.grads.slots[i] && model.params.entries()[i].role != ParamRole::Head) {
      out.grads.slots[i].reset();
    }
  }
  head_pass(model, features, labels, out, false);
  return out;
}

LossAndGradients backward(const Model& model, const Tensor& images,
                          std::span<const std::size_t> indices, std::span<const int> labels,
                          FeatureTap tap) {
  if (indices.empty()) throw DataError("backward: empty batch");
  if (labels.size() != indices.size()) throw DimensionError("backward: label count mismatch");
  const ViTConfig& cfg = model.config;
  const ParameterStore& p = model.params;
  const std::size_t n = cfg.seq_len();
  const std::size_t L = cfg.num_layers;

  LossAndGradients out;
  out.grads = Gradients::zeros_like_trainable(p);

  // Depth reached by reverse mode: blocks >= lowest are differentiated.
  bool embed_trainable = false;
  std::size_t lowest = L;
  for (const ParamEntry& e : p.entries()) {
    if (!e.trainable) continue;
    if (e.role == ParamRole::Component) {
      lowest = std::min(lowest, static_cast<std::size_t>(e.layer));
    } else if (e.role != ParamRole::Head) {
      embed_trainable = true;
    }
  }
  if (embed_trainable) lowest = 0;
  const bool body_grad = embed_trainable || lowest < L;
  if (body_grad && tap == FeatureTap::LastAttention) {
    throw Error("last_attention tap is only supported when just the head is trained");
  }

  Tensor x = embed_batch(model, images, indices);
  if (!body_grad) {
    head_pass(model, forward_tokens(model, x, tap), labels, out, false);
    return out;
  }

  std::vector<BlockCache> caches(L);
  for (std::size_t l = 0; l < L; ++l) {
    const bool keep = l >= lowest;
    BlockCache& c = caches[l];
    Tensor a = layer_norm(p.at(block_param(l, "ln1.gamma")), p.at(block_param(l, "ln1.beta")),
                          cfg.ln_eps, x, keep ? &c.ln1 : nullptr);
    Tensor m = multi_head_attention(attention_weights(model, l), a, n, keep ? &c.attn : nullptr);
    add_inplace(x, m);
    Tensor h = layer_norm(p.at(block_param(l, "ln2.gamma")), p.at(block_param(l, "ln2.beta")),
                          cfg.ln_eps, x, keep ? &c.ln2 : nullptr);
    Tensor u = linear(p.at(block_param(l, "fc1.weight")), &p.at(block_param(l, "fc1.bias")), h);
    Tensor g = u;
    for (double& v : g.values()) v = gelu(v);
    add_inplace(x, linear(p.at(block_param(l, "fc2.weight")), &p.at(block_param(l, "fc2.bias")), g));
    if (keep) {
      c.a = std::move(a);
      c.h = std::move(h);
      c.u = std::move(u);
      c.g = std::move(g);
    }
  }

  const std::size_t T = x.cols();
  const std::size_t B = T / n;
  const std::size_t d = cfg.embed_dim;
  Tensor features({d, B});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t b = 0; b < B; ++b) features(i, b) = x[i * T + b * n];
  }
  const Tensor dfeat = head_pass(model, features, labels, out, true);

  Tensor dx({d, T});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t b = 0; b < B; ++b) dx[i * T + b * n] = dfeat(i, b);
  }

  Gradients& gr = out.grads;
  for (std::size_t li = L; li-- > lowest;) {
    BlockCache& c = caches[li];
    auto G = [&](std::string_view suffix) { return slot(gr, p, block_param(li, suffix)); };

    // x_out = x_mid + W2 gelu(W1 LN2(x_mid) + b1) + b2
    Tensor dg = linear_backward(p.at(block_param(li, "fc2.weight")), c.g, dx, G("fc2.weight"),
                                G("fc2.bias"));
    for (std::size_t i = 0; i < dg.size(); ++i) dg[i] *= gelu_derivative(c.u[i]);
    Tensor dh = linear_backward(p.at(block_param(li, "fc1.weight")), c.h, dg, G("fc1.weight"),
                                G("fc1.bias"));
    add_inplace(dx, layer_norm_backward(p.at(block_param(li, "ln2.gamma")), c.ln2, dh,
                                        G("ln2.gamma"), G("ln2.beta")));

    // x_mid = x_in + MHA(LN1(x_in))
    const AttentionGrads ag{G("attn.qkv.weight"), G("attn.qkv.bias"), G("attn.out.weight"),
                            G("attn.out.bias")};
    Tensor da = attention_backward(attention_weights(model, li), c.a, n, c.attn, dx, ag);
    add_inplace(dx, layer_norm_backward(p.at(block_param(li, "ln1.gamma")), c.ln1, da,
                                        G("ln1.gamma"), G("ln1.beta")));
    c = BlockCache{};
  }

  if (embed_trainable) {
    // tokens = [cls | E patches + b] + pos
    const std::size_t P = cfg.num_patches();
    if (Tensor* dpos = slot(gr, p, "pos")) {
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t j = 0; j < n; ++j) (*dpos)(i, j) += dx[i * T + b * n + j];
        }
      }
    }
    if (Tensor* dcls = slot(gr, p, "cls")) {
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t b = 0; b < B; ++b) (*dcls)[i] += dx[i * T + b * n];
      }
    }
    Tensor* dE = slot(gr, p, "embed.weight");
    Tensor* dEb = slot(gr, p, "embed.bias");
    if (dE || dEb) {
      for (std::size_t b = 0; b < B; ++b) {
        Tensor dtok({d, P});
        for (std::size_t i = 0; i < d; ++i) {
          for (std::size_t j = 0; j < P; ++j) dtok(i, j) = dx[i * T + b * n + 1 + j];
        }
        const Tensor patches = patchify(cfg, image_at(images, indices[b]));
        linear_backward(p.at("embed.weight"), patches, dtok, dE, dEb, false);
      }
    }
  }
  return out;
}

double evaluate_loss(const Model& model, const Tensor& images,
                     std::span<const std::size_t> indices, std::span<const int> labels,
                     FeatureTap tap) {
  const Tensor logits = head_logits(model, extract_features(model, images, indices, tap));
  return cross_entropy(logits, labels);
}

}  // namespace vitplast
