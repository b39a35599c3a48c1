#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "vitplast/backward.hpp"
#include "vitplast/errors.hpp"
#include "vitplast/linalg.hpp"
#include "vitplast/model.hpp"

using namespace vitplast;

namespace {

Tensor random_image(const ViTConfig& cfg, std::mt19937_64& rng) {
  return oracle::random_tensor({cfg.channels, cfg.image_size, cfg.image_size}, rng);
}

// Whole network by per-token loops, written against the tensor names only.
Tensor straight_line_logits(const Model& m, const Tensor& image) {
  const ViTConfig& c = m.config;
  const ParameterStore& p = m.params;
  const std::size_t d = c.embed_dim, P = c.patch_size, G = c.grid(), n = c.seq_len();
  Tensor x({d, n});
  for (std::size_t i = 0; i < d; ++i) x(i, 0) = p.at("cls")[i] + p.at("pos")(i, 0);
  for (std::size_t gy = 0; gy < G; ++gy) {
    for (std::size_t gx = 0; gx < G; ++gx) {
      std::vector<double> patch;
      for (std::size_t ch = 0; ch < c.channels; ++ch)
        for (std::size_t py = 0; py < P; ++py)
          for (std::size_t px = 0; px < P; ++px)
            patch.push_back(image[(ch * c.image_size + gy * P + py) * c.image_size + gx * P + px]);
      const auto tok = oracle::affine(p.at("embed.weight"), &p.at("embed.bias"), patch);
      const std::size_t col = 1 + gy * G + gx;
      for (std::size_t i = 0; i < d; ++i) x(i, col) = tok[i] + p.at("pos")(i, col);
    }
  }
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    auto W = [&](const char* s) -> const Tensor& { return p.at(block_param(l, s)); };
    Tensor a({d, n});
    for (std::size_t j = 0; j < n; ++j) {
      const auto y = oracle::layer_norm_token(oracle::column(x, j), W("ln1.gamma"), W("ln1.beta"), c.ln_eps);
      for (std::size_t i = 0; i < d; ++i) a(i, j) = y[i];
    }
    const Tensor att = oracle::attention(W("attn.qkv.weight"), &W("attn.qkv.bias"), W("attn.out.weight"),
                                         &W("attn.out.bias"), c.num_heads, a);
    x = x + att;
    for (std::size_t j = 0; j < n; ++j) {
      auto h = oracle::layer_norm_token(oracle::column(x, j), W("ln2.gamma"), W("ln2.beta"), c.ln_eps);
      auto u = oracle::affine(W("fc1.weight"), &W("fc1.bias"), h);
      for (double& v : u) v = oracle::gelu(v);
      const auto f = oracle::affine(W("fc2.weight"), &W("fc2.bias"), u);
      for (std::size_t i = 0; i < d; ++i) x(i, j) += f[i];
    }
  }
  const auto y = oracle::layer_norm_token(oracle::column(x, 0), p.at("head.norm.gamma"),
                                          p.at("head.norm.beta"), c.ln_eps);
  const auto logits = oracle::affine(p.at("head.weight"), &p.at("head.bias"), y);
  return Tensor({logits.size()}, logits);
}

}  // namespace

TEST(Embedding, ZeroImageGivesPositionalColumns) {
  ViTConfig cfg = vit_preset("tiny");
  Model m = make_model(cfg);
  const Tensor tok = embed_image(m, Tensor({cfg.channels, cfg.image_size, cfg.image_size}));
  const Tensor& pos = m.params.at("pos");
  for (std::size_t i = 0; i < cfg.embed_dim; ++i) {
    EXPECT_EQ(tok(i, 0), m.params.at("cls")[i] + pos(i, 0));
    for (std::size_t j = 1; j < cfg.seq_len(); ++j) EXPECT_EQ(tok(i, j), pos(i, j));
  }
}

TEST(Embedding, OneHotPatchThroughIdentityMap) {
  ViTConfig cfg{8, 4, 1, 16, 4, 0, 2, 1e-12, 0};
  Model m = make_model(cfg);
  m.params.at("embed.weight") = Tensor::identity(16);
  for (double& v : m.params.at("pos").values()) v = 0.0;
  Tensor image({1, 8, 8});
  image[5 * 8 + 2] = 7.0;  // row 5, col 2 -> patch (1, 0), offset (1, 2)
  const Tensor tok = embed_image(m, image);
  const std::size_t col = 1 + 1 * 2 + 0;
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(tok(i, col), i == 1 * 4 + 2 ? 7.0 : 0.0);
}

TEST(Embedding, SequenceLengthCountsClsToken) {
  ViTConfig cfg{32, 8, 3, 16, 4, 1, 2, 1e-12, 0};
  EXPECT_EQ(cfg.seq_len(), 17u);
  const Model m = make_model(cfg);
  EXPECT_EQ(embed_image(m, Tensor({3, 32, 32})).cols(), 17u);
}

TEST(Embedding, WrongImageShapeThrows) {
  const Model m = make_model(vit_preset("tiny"));
  EXPECT_THROW(embed_image(m, Tensor({3, 8, 8})), DimensionError);
}

TEST(Config, RejectsIndivisibleShapes) {
  EXPECT_THROW((ViTConfig{15, 4, 3, 16, 4, 1, 2, 1e-12, 0}.validate()), DimensionError);
  EXPECT_THROW((ViTConfig{16, 4, 3, 18, 4, 1, 2, 1e-12, 0}.validate()), DimensionError);
  EXPECT_THROW((ViTConfig{16, 4, 3, 16, 4, 1, 2, 0.0, 0}.validate()), AssumptionError);
}

TEST(LayerNormOp, NormalizesEachToken) {
  std::mt19937_64 rng(1);
  const std::size_t d = 32;
  const Tensor x = oracle::random_tensor({d, 20}, rng, 3.0);
  const Tensor y = layer_norm(Tensor({d}, 1.0), Tensor({d}), 1e-12, x);
  for (std::size_t j = 0; j < 20; ++j) {
    double mu = 0.0, var = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += y(i, j);
    mu /= d;
    for (std::size_t i = 0; i < d; ++i) var += (y(i, j) - mu) * (y(i, j) - mu);
    var /= d;
    EXPECT_LE(std::abs(mu), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-8);
  }
}

TEST(LayerNormOp, ConstantTokenMapsToBeta) {
  const Tensor x({4, 1}, 2.5);
  const Tensor y = layer_norm(Tensor({4}, 1.0), Tensor({4}), 1e-12, x);
  for (double v : y.values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(LayerNormOp, HandCase) {
  const Tensor y = layer_norm(Tensor({2}, 1.0), Tensor({2}), 1e-15, Tensor::matrix(2, 1, {0, 2}));
  EXPECT_NEAR(y[0], -1.0, 1e-12);
  EXPECT_NEAR(y[1], 1.0, 1e-12);
}

TEST(Attention, SingleTokenPassesValueThroughOutput) {
  std::mt19937_64 rng(2);
  const std::size_t d = 6;
  const Tensor qkv = oracle::random_tensor({3 * d, d}, rng);
  const Tensor out = oracle::random_tensor({d, d}, rng);
  const Tensor bq = oracle::random_tensor({3 * d}, rng);
  const Tensor bo = oracle::random_tensor({d}, rng);
  const Tensor x = oracle::random_tensor({d, 1}, rng);
  const Tensor y = multi_head_attention({&qkv, &bq, &out, &bo, 3}, x);
  Tensor vb({d});
  for (std::size_t i = 0; i < d; ++i) vb[i] = bq[2 * d + i];
  const Tensor vx = matmul(row_slice(qkv, 2 * d, 3 * d), x) + vb.reshaped({d, 1});
  const Tensor expected = matmul(out, vx) + bo.reshaped({d, 1});
  for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
}

TEST(Attention, ZeroQueryKeyGivesUniformMixing) {
  std::mt19937_64 rng(3);
  const std::size_t d = 4, n = 5;
  Tensor qkv = oracle::random_tensor({3 * d, d}, rng);
  for (std::size_t i = 0; i < 2 * d * d; ++i) qkv[i] = 0.0;
  const Tensor out = oracle::random_tensor({d, d}, rng);
  const Tensor x = oracle::random_tensor({d, n}, rng);
  const Tensor y = multi_head_attention({&qkv, nullptr, &out, nullptr, 2}, x);
  Tensor mean({d, 1});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < n; ++j) mean[i] += x(i, j) / n;
  }
  const Tensor expected = matmul(out, matmul(row_slice(qkv, 2 * d, 3 * d), mean));
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(y(i, j), expected[i], 1e-12);
}

TEST(Attention, MatchesScalarLoopOracle) {
  std::mt19937_64 rng(4);
  const std::size_t d = 4, n = 3;
  const Tensor qkv = oracle::random_tensor({3 * d, d}, rng);
  const Tensor bq = oracle::random_tensor({3 * d}, rng);
  const Tensor out = oracle::random_tensor({d, d}, rng);
  const Tensor bo = oracle::random_tensor({d}, rng);
  const Tensor x = oracle::random_tensor({d, n}, rng);
  const Tensor y = multi_head_attention({&qkv, &bq, &out, &bo, 2}, x);
  const Tensor ref = oracle::attention(qkv, &bq, out, &bo, 2, x);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(Attention, BatchedColumnsEqualSeparateSequences) {
  std::mt19937_64 rng(5);
  const std::size_t d = 8, n = 5;
  const Tensor qkv = oracle::random_tensor({3 * d, d}, rng);
  const Tensor out = oracle::random_tensor({d, d}, rng);
  const Tensor x1 = oracle::random_tensor({d, n}, rng);
  const Tensor x2 = oracle::random_tensor({d, n}, rng);
  Tensor both({d, 2 * n});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      both(i, j) = x1(i, j);
      both(i, n + j) = x2(i, j);
    }
  const AttentionWeights w{&qkv, nullptr, &out, nullptr, 2};
  const Tensor y = multi_head_attention(w, both, n);
  const Tensor y1 = multi_head_attention(w, x1);
  const Tensor y2 = multi_head_attention(w, x2);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      EXPECT_EQ(y(i, j), y1(i, j));
      EXPECT_EQ(y(i, n + j), y2(i, j));
    }
}

TEST(Attention, PermutingTokensPermutesOutputs) {
  std::mt19937_64 rng(6);
  const std::size_t d = 8, n = 6;
  const Tensor qkv = oracle::random_tensor({3 * d, d}, rng);
  const Tensor out = oracle::random_tensor({d, d}, rng);
  const Tensor x = oracle::random_tensor({d, n}, rng);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin() + 1, perm.end(), rng);  // CLS stays first
  Tensor xp({d, n});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < n; ++j) xp(i, j) = x(i, perm[j]);
  const AttentionWeights w{&qkv, nullptr, &out, nullptr, 4};
  const Tensor y = multi_head_attention(w, x);
  const Tensor yp = multi_head_attention(w, xp);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(yp(i, j), y(i, perm[j]), 1e-12);
}

TEST(Attention, IndivisibleHeadsThrow) {
  const Tensor qkv({9, 3}), out({3, 3});
  EXPECT_THROW(multi_head_attention({&qkv, nullptr, &out, nullptr, 2}, Tensor({3, 2})), DimensionError);
}

TEST(FeedForward, ZeroInputZeroBias) {
  std::mt19937_64 rng(7);
  const Tensor w1 = oracle::random_tensor({16, 4}, rng);
  const Tensor w2 = oracle::random_tensor({4, 16}, rng);
  const Tensor y = feedforward(w1, nullptr, w2, nullptr, Tensor({4, 3}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(FeedForward, GeluLimits) {
  EXPECT_EQ(gelu(0.0), 0.0);
  EXPECT_NEAR(gelu(10.0), 10.0, 1e-12);
  EXPECT_NEAR(gelu(-10.0), 0.0, 1e-12);
  for (double x : {-2.0, -0.5, 0.3, 1.7}) {
    const double fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
    EXPECT_NEAR(gelu_derivative(x), fd, 1e-8);
  }
}

TEST(FeedForward, MatchesScalarLoopOracle) {
  std::mt19937_64 rng(8);
  const Tensor w1 = oracle::random_tensor({16, 4}, rng), b1 = oracle::random_tensor({16}, rng);
  const Tensor w2 = oracle::random_tensor({4, 16}, rng), b2 = oracle::random_tensor({4}, rng);
  const Tensor x = oracle::random_tensor({4, 3}, rng);
  const Tensor y = feedforward(w1, &b1, w2, &b2, x);
  for (std::size_t j = 0; j < 3; ++j) {
    auto u = oracle::affine(w1, &b1, oracle::column(x, j));
    for (double& v : u) v = oracle::gelu(v);
    const auto f = oracle::affine(w2, &b2, u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y(i, j), f[i], 1e-12);
  }
}

TEST(Forward, MatchesStraightLineImplementation) {
  std::mt19937_64 rng(9);
  for (std::uint64_t seed : {1u, 2u}) {
    ViTConfig cfg = vit_preset("tiny");
    cfg.seed = seed;
    const Model m = gradcheck::perturbed_model(cfg, seed);
    const Tensor image = random_image(cfg, rng);
    const Tensor logits = forward(m, image).logits;
    const Tensor ref = straight_line_logits(m, image);
    for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_NEAR(logits[i], ref[i], 1e-10);
  }
}

TEST(Forward, ZeroDepthUsesEmbeddingAndHeadOnly) {
  ViTConfig cfg = vit_preset("tiny");
  cfg.num_layers = 0;
  const Model m = make_model(cfg);
  std::mt19937_64 rng(10);
  const Tensor image = random_image(cfg, rng);
  const Tensor tok = embed_image(m, image);
  const Tensor expected = head_logits(m, column_slice(tok, 0, 1));
  const Tensor logits = forward(m, image).logits;
  for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_EQ(logits[i], expected[i]);
}

TEST(Forward, DeterministicOnDuplicateImages) {
  const Model m = make_model(vit_preset("tiny"));
  std::mt19937_64 rng(11);
  const Tensor image = random_image(m.config, rng);
  EXPECT_EQ(forward(m, image).logits, forward(m, image).logits);
}

TEST(Forward, ZeroBlocksActAsIdentity) {
  Model m = gradcheck::perturbed_model(vit_preset("tiny"), 3);
  for (ParamEntry& e : m.params.entries()) {
    if (e.kind == ComponentKind::MHA || e.kind == ComponentKind::FC1 || e.kind == ComponentKind::FC2) {
      for (double& v : e.value.values()) v = 0.0;
    }
  }
  std::mt19937_64 rng(12);
  const Tensor tok = embed_image(m, random_image(m.config, rng));
  ActivationTrace trace;
  const Tensor feat = forward_tokens(m, tok, FeatureTap::BlockOutput, &trace);
  for (std::size_t l = 0; l < m.config.num_layers; ++l) EXPECT_EQ(trace.input(l, ComponentKind::LN1), tok);
  for (std::size_t i = 0; i < tok.rows(); ++i) EXPECT_EQ(feat[i], tok(i, 0));
}

TEST(Forward, TraceRecordsEverySite) {
  const Model m = make_model(vit_preset("tiny"));
  std::mt19937_64 rng(13);
  const auto r = forward(m, random_image(m.config, rng), true);
  ASSERT_TRUE(r.trace.has_value());
  EXPECT_EQ(r.trace->inputs.size(), m.config.num_layers);
  for (std::size_t l = 0; l < m.config.num_layers; ++l) {
    for (ComponentKind k : kComponentKinds) {
      const Tensor& t = r.trace->input(l, k);
      const std::size_t rows = k == ComponentKind::FC2 ? 4 * m.config.embed_dim : m.config.embed_dim;
      EXPECT_EQ(t.shape(), (Shape{rows, m.config.seq_len()}));
    }
  }
}

TEST(Forward, LastAttentionTapReadsMhaOutput) {
  const Model m = gradcheck::perturbed_model(vit_preset("tiny"), 4);
  std::mt19937_64 rng(14);
  const Tensor tok = embed_image(m, random_image(m.config, rng));
  ActivationTrace trace;
  const Tensor f = forward_tokens(m, tok, FeatureTap::LastAttention, &trace);
  const std::size_t last = m.config.num_layers - 1;
  const Tensor mha = apply_component(m, last, ComponentKind::MHA, trace.input(last, ComponentKind::MHA));
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(f[i], mha(i, 0));
}

TEST(Backward, UniformLogitsGiveLogClasses) {
  Model m = make_model(vit_preset("tiny"));
  for (double& v : m.params.at("head.weight").values()) v = 0.0;
  std::mt19937_64 rng(15);
  const auto batch = gradcheck::random_batch(m.config, 3, rng);
  m.params.set_trainable(ParamGroup::HEAD, true);
  const auto lg = backward(m, batch.images, batch.indices, batch.labels);
  EXPECT_NEAR(lg.loss, std::log(4.0), 1e-12);
}

TEST(Backward, FrozenTensorsGetNoGradient) {
  Model m = make_model(vit_preset("tiny"));
  m.params.set_trainable(ParamGroup::FC1, true);
  std::mt19937_64 rng(16);
  const auto batch = gradcheck::random_batch(m.config, 2, rng);
  const auto lg = backward(m, batch.images, batch.indices, batch.labels);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    EXPECT_EQ(lg.grads.slots[i].has_value(), m.params.entries()[i].trainable);
  }
}

TEST(Backward, PartialDepthMatchesFullBackward) {
  Model m = gradcheck::perturbed_model(vit_preset("gradcheck"), 5);
  std::mt19937_64 rng(17);
  const auto batch = gradcheck::random_batch(m.config, 3, rng);
  m.params.set_trainable(ParamGroup::FC2, true);
  const auto part = backward(m, batch.images, batch.indices, batch.labels);
  m.params.set_trainable(ParamGroup::ALL, true);
  const auto full = backward(m, batch.images, batch.indices, batch.labels);
  EXPECT_EQ(part.loss, full.loss);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    if (part.grads.slots[i]) EXPECT_EQ(*part.grads.slots[i], *full.grads.slots[i]);
  }
}

TEST(Backward, LabelOutOfRangeThrows) {
  Model m = make_model(vit_preset("tiny"));
  m.params.set_trainable(ParamGroup::HEAD, true);
  std::mt19937_64 rng(18);
  auto batch = gradcheck::random_batch(m.config, 2, rng);
  batch.labels[1] = 9;
  EXPECT_THROW(backward(m, batch.images, batch.indices, batch.labels), DataError);
}

TEST(Backward, MatchesFiniteDifferences) {
  const Model m = gradcheck::perturbed_model(vit_preset("gradcheck"), 7);
  std::mt19937_64 rng(19);
  const auto batch = gradcheck::random_batch(m.config, 3, rng);
  const auto errors = gradcheck::relative_errors(m, batch);
  EXPECT_EQ(errors.size(), 9u);
  for (const auto& [group, err] : errors) EXPECT_LE(err, 1e-5) << group;
}

TEST(Backward, HeadFeaturesPathMatchesFullPath) {
  Model m = gradcheck::perturbed_model(vit_preset("tiny"), 8);
  m.params.set_trainable(ParamGroup::HEAD, true);
  std::mt19937_64 rng(20);
  const auto batch = gradcheck::random_batch(m.config, 4, rng);
  const auto full = backward(m, batch.images, batch.indices, batch.labels);
  const Tensor feats = extract_features(m, batch.images, batch.indices, FeatureTap::BlockOutput);
  const auto cached = head_backward(m, feats, batch.labels);
  EXPECT_EQ(full.loss, cached.loss);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    ASSERT_EQ(full.grads.slots[i].has_value(), cached.grads.slots[i].has_value());
    if (full.grads.slots[i]) EXPECT_EQ(*full.grads.slots[i], *cached.grads.slots[i]);
  }
}

TEST(ParameterCount, BaseShapeGroups) {
  const ViTConfig base = vit_preset("base");
  EXPECT_EQ(count_parameters(base, ParamGroup::MHA), 28348416u);
  EXPECT_EQ(count_parameters(base, ParamGroup::FC1), 28348416u);
  EXPECT_EQ(count_parameters(base, ParamGroup::FC2), 28320768u);
  EXPECT_EQ(count_parameters(base, ParamGroup::LN1), 18432u);
  EXPECT_EQ(count_parameters(base, ParamGroup::LN2), 18432u);
  const double total = static_cast<double>(count_parameters(base, ParamGroup::ALL));
  EXPECT_NEAR(total / 86e6, 1.0, 0.02);
}

TEST(ParameterCount, AllIsSumOfParts) {
  for (const auto& name : vit_preset_names()) {
    const ViTConfig cfg = vit_preset(name);
    const OtherParameterCounts o = count_other_parameters(cfg);
    std::size_t sum = o.embedding + o.positions + o.cls + o.head;
    for (ComponentKind k : kComponentKinds) sum += count_parameters(cfg, group_of(k));
    EXPECT_EQ(count_parameters(cfg, ParamGroup::ALL), sum) << name;
  }
}

TEST(ParameterCount, AgreesWithAllocatedModel) {
  const Model m = make_model(vit_preset("tiny"));
  for (ParamGroup g : {ParamGroup::LN1, ParamGroup::MHA, ParamGroup::LN2, ParamGroup::FC1,
                       ParamGroup::FC2, ParamGroup::ALL, ParamGroup::HEAD}) {
    EXPECT_EQ(m.params.count(g), count_parameters(m.config, g)) << group_name(g);
  }
}

TEST(Init, MatchedScaleHasRequestedVariance) {
  ViTConfig cfg = vit_preset("tiny");
  cfg.embed_dim = 64;
  cfg.num_heads = 4;
  const Model m = make_model(cfg, {InitScheme::MatchedScale, 2.0});
  const Tensor& w = m.params.at(block_param(0, "fc1.weight"));
  double s = 0.0;
  for (double v : w.values()) s += v * v;
  EXPECT_NEAR(s / w.size(), 4.0 / 64.0, 0.1 * 4.0 / 64.0);
  for (double v : m.params.at(block_param(0, "fc1.bias")).values()) EXPECT_EQ(v, 0.0);
}

TEST(Init, TruncatedNormalIsBounded) {
  const Model m = make_model(vit_preset("tiny"));
  for (double v : m.params.at(block_param(1, "attn.qkv.weight")).values()) EXPECT_LE(std::abs(v), 0.04);
  for (double v : m.params.at(block_param(1, "ln1.gamma")).values()) EXPECT_EQ(v, 1.0);
}
