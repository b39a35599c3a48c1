#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "vitplast/bounds.hpp"
#include "vitplast/errors.hpp"
#include "vitplast/linalg.hpp"
#include "vitplast/plasticity.hpp"

using namespace vitplast;

namespace {

constexpr double kSlack = 1e-10;

Tensor scaled_identity(std::size_t d, double c) {
  Tensor w({d, d});
  for (std::size_t i = 0; i < d; ++i) w(i, i) = c;
  return w;
}

HeadWeights random_head(std::size_t d, std::size_t k, std::mt19937_64& rng, double scale = 1.0) {
  return {oracle::random_tensor({k, d}, rng, scale), oracle::random_tensor({k, d}, rng, scale),
          oracle::random_tensor({k, d}, rng, scale), oracle::random_tensor({d, k}, rng, scale)};
}

// Scales every column of x down to norm <= r.
void project_to_ball(Tensor& x, double r) {
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double nrm = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) nrm += x(i, j) * x(i, j);
    nrm = std::sqrt(nrm);
    if (nrm > r) {
      for (std::size_t i = 0; i < x.rows(); ++i) x(i, j) *= r / nrm;
    }
  }
}

// Per-column mean mu[j] and population std s[j].
Tensor with_token_statistics(Tensor x, const std::vector<double>& mu, const std::vector<double>& s) {
  const std::size_t d = x.rows();
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < d; ++i) m += x(i, j);
    m /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) v += (x(i, j) - m) * (x(i, j) - m);
    const double sd = std::sqrt(v / static_cast<double>(d));
    for (std::size_t i = 0; i < d; ++i) x(i, j) = mu[j] + s[j] * (x(i, j) - m) / sd;
  }
  return x;
}

// Both far pairs and nearby pairs, so local slopes are probed too.
Tensor partner(const Tensor& x, std::mt19937_64& rng, int t) {
  const double step = (t % 3 == 0) ? 1.0 : (t % 3 == 1 ? 1e-2 : 1e-4);
  Tensor y = x;
  const Tensor e = oracle::random_tensor(x.shape(), rng, step);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += e[i];
  return y;
}

struct TinyAttention {
  Tensor qkv_w, qkv_b, out_w, out_b;
  std::size_t heads;

  AttentionWeights weights() const { return {&qkv_w, &qkv_b, &out_w, &out_b, heads}; }
};

TinyAttention random_attention(std::size_t d, std::size_t heads, std::mt19937_64& rng,
                               double scale) {
  TinyAttention a{oracle::random_tensor({3 * d, d}, rng, scale), oracle::random_tensor({3 * d}, rng),
                  oracle::random_tensor({d, d}, rng, scale), oracle::random_tensor({d}, rng), heads};
  // The bound assumes bias-free queries and keys; V and output biases cancel.
  for (std::size_t i = 0; i < 2 * d; ++i) a.qkv_b[i] = 0.0;
  return a;
}

}  // namespace

// ---- LayerNorm ---------------------------------------------------------

TEST(LnBound, TrivialCases) {
  EXPECT_EQ(ln_bound(Tensor({8}, 1.0), 1.0), 1.0);
  EXPECT_EQ(ln_bound(Tensor({8}), 0.3), 0.0);
  EXPECT_EQ(ln_bound(Tensor({3}, std::vector<double>{0.5, -4.0, 2.0}), 2.0), 2.0);
  EXPECT_THROW(ln_bound(Tensor({3}, 1.0), 0.0), AssumptionError);
  EXPECT_THROW(ln_bound(Tensor({3}, 1.0), -1.0), AssumptionError);
}

TEST(LnBound, SoundOnPairsSharingPositionStatistics) {
  std::mt19937_64 rng(11);
  const std::size_t d = 12, n = 6;
  for (int draw = 0; draw < 10; ++draw) {
    const Tensor gamma = oracle::random_tensor({d}, rng, 2.0);
    const Tensor beta = oracle::random_tensor({d}, rng);
    std::vector<double> mu(n), s(n);
    std::uniform_real_distribution<double> pos(0.2, 3.0);
    for (std::size_t j = 0; j < n; ++j) {
      mu[j] = pos(rng) - 1.5;
      s[j] = pos(rng);
    }
    const double bound = ln_bound(gamma, *std::min_element(s.begin(), s.end()));
    auto f = [&](const Tensor& x) { return layer_norm(gamma, beta, 1e-12, x); };
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
      const Tensor x = with_token_statistics(oracle::random_tensor({d, n}, rng), mu, s);
      const Tensor y = with_token_statistics(partner(x, rng, t), mu, s);
      worst = std::max(worst, rate_of_change(f, x, y));
    }
    EXPECT_LE(worst, bound * (1 + kSlack));
    EXPECT_GT(worst, 0.05 * bound) << "bound should not be vacuous here";
  }
}

// ---- Feedforward --------------------------------------------------------

TEST(FcBound, TrivialCasesAndTightness) {
  EXPECT_NEAR(fc_bound(scaled_identity(7, -2.5)), 2.5, 1e-12);
  EXPECT_EQ(fc_bound(Tensor({5, 3})), 0.0);
  std::mt19937_64 rng(12);
  const Tensor w = scaled_identity(7, -2.5);
  auto f = [&](const Tensor& x) { return linear(w, nullptr, x); };
  for (int t = 0; t < 10; ++t) {
    EXPECT_NEAR(rate_of_change(f, oracle::random_tensor({7, 4}, rng), oracle::random_tensor({7, 4}, rng)),
                2.5, 1e-14);
  }
}

TEST(FcBound, MatchesJacobiAndIsSoundForRandomWeights) {
  std::mt19937_64 rng(13);
  for (auto [rows, cols] : {std::pair<std::size_t, std::size_t>{16, 64}, {64, 16}, {9, 9}}) {
    const Tensor w = oracle::random_tensor({rows, cols}, rng);
    const Tensor b = oracle::random_tensor({rows}, rng);
    const double bound = fc_bound(w);
    EXPECT_NEAR(bound, oracle::jacobi_spectral_norm(w), 1e-9 * bound);
    auto f = [&](const Tensor& x) { return linear(w, &b, x); };
    for (int t = 0; t < 1000; ++t) {
      const Tensor x = oracle::random_tensor({cols, 3}, rng);
      EXPECT_LE(rate_of_change(f, x, partner(x, rng, t)), bound * (1 + kSlack));
    }
  }
}

// ---- Attention: per head and ball form -----------------------------------

TEST(AttentionBounds, AttentionMatrixNormMatchesDenseOracle) {
  std::mt19937_64 rng(14);
  for (std::size_t k : {1u, 4u, 16u}) {
    const Tensor q = oracle::random_tensor({k, 24}, rng), kk = oracle::random_tensor({k, 24}, rng);
    const double expected =
        oracle::jacobi_spectral_norm(oracle::naive_matmul(transpose(q), kk)) / std::sqrt(double(k));
    EXPECT_NEAR(attention_matrix_norm(q, kk), expected, 1e-9 * expected);
  }
}

TEST(AttentionBounds, PerHeadFormula) {
  for (std::size_t n : {1u, 3u, 17u}) {
    EXPECT_NEAR(attention_lipschitz_per_head(0.0, 1.0, n, 5.0), std::sqrt(3.0 * n), 1e-14);
    const double base = attention_lipschitz_per_head(0.7, 1.3, n, 2.0);
    EXPECT_NEAR(base, std::sqrt(3.0) * 1.3 * std::sqrt(0.49 * 16 * (4.0 * n + 1) + n), 1e-12 * base);
    EXPECT_NEAR(attention_lipschitz_per_head(0.7, 3 * 1.3, n, 2.0), 3 * base, 1e-12 * base);
  }
  std::mt19937_64 rng(15);
  const HeadWeights h = random_head(8, 4, rng);
  const HeadNorms hn = head_norms(h);
  Tensor v3 = h.v;
  for (double& x : v3.values()) x *= -3.0;
  EXPECT_NEAR(attention_lipschitz_per_head(h.q, h.k, v3, 5, 1.5),
              3.0 * attention_lipschitz_per_head(hn.a, hn.v, 5, 1.5), 1e-9 * hn.v);
}

TEST(AttentionBounds, BallFormCollapses) {
  // One head, A = 0, unit O and V.
  const HeadNorms unit{1.0, 1.0, 0.0};
  for (std::size_t n : {1u, 4u, 197u}) {
    EXPECT_NEAR(mha_bound({unit}, n, 19.4).total, std::sqrt(3.0 * n), 1e-12);
  }
  std::mt19937_64 rng(16);
  std::vector<HeadWeights> heads;
  for (int h = 0; h < 3; ++h) heads.push_back(random_head(12, 4, rng));
  double ov = 0;
  for (const auto& h : heads) {
    const HeadNorms hn = head_norms(h);
    ov += hn.o * hn.v;
  }
  const MhaBound zero_r = mha_bound(heads, 10, 0.0);
  EXPECT_NEAR(zero_r.total, ov * std::sqrt(30.0), 1e-12 * zero_r.total);
  ASSERT_EQ(zero_r.per_head.size(), 3u);
  double sum = 0;
  for (double v : zero_r.per_head) sum += v;
  EXPECT_NEAR(sum, zero_r.total, 1e-14 * zero_r.total);
}

TEST(AttentionBounds, SingleHeadIsOutputNormTimesPerHeadBound) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 5; ++t) {
    const HeadWeights h = random_head(6, 3, rng);
    const HeadNorms hn = head_norms(h);
    for (double r : {0.0, 0.5, 3.0}) {
      const double total = mha_bound({h}, 9, r).total;
      EXPECT_NEAR(total, hn.o * attention_lipschitz_per_head(h.q, h.k, h.v, 9, r), 1e-12 * total);
    }
  }
}

TEST(AttentionBounds, BallFormMonotone) {
  const std::vector<HeadNorms> heads = {{1.2, 0.8, 0.3}, {0.5, 2.0, 1.1}};
  double prev = 0;
  for (std::size_t n = 1; n <= 64; n *= 2) {
    const double v = mha_bound(heads, n, 1.5).total;
    EXPECT_GT(v, prev);
    prev = v;
  }
  prev = 0;
  for (double r : {0.0, 0.1, 1.0, 2.0, 10.0}) {
    const double v = mha_bound(heads, 8, r).total;
    EXPECT_GE(v, prev);
    prev = v;
  }
  prev = 0;
  for (double a : {0.0, 0.2, 0.9, 4.0}) {
    std::vector<HeadNorms> h = heads;
    h[1].a = a;
    const double v = mha_bound(h, 8, 1.5).total;
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(AttentionBounds, BallFormSoundOnProjectedTokens) {
  std::mt19937_64 rng(18);
  const std::size_t d = 4, H = 2, n = 3;
  for (int draw = 0; draw < 20; ++draw) {
    const TinyAttention att = random_attention(d, H, rng, 1.0);
    const AttentionWeights w = att.weights();
    auto f = [&](const Tensor& x) { return multi_head_attention(w, x); };
    for (double r : {0.5, 1.0, 2.0}) {
      const double bound = mha_bound(split_heads(w), n, r).total;
      for (int t = 0; t < 200; ++t) {
        Tensor x = oracle::random_tensor({d, n}, rng, r);
        project_to_ball(x, r);
        Tensor y = partner(x, rng, t);
        project_to_ball(y, r);
        if (x == y) continue;
        EXPECT_LE(rate_of_change(f, x, y), bound * (1 + kSlack));
      }
    }
  }
}

// ---- Attention: energy form ---------------------------------------------

TEST(AttentionBounds, EnergyFormCollapses) {
  std::mt19937_64 rng(19);
  std::vector<HeadWeights> heads;
  for (int h = 0; h < 2; ++h) heads.push_back(random_head(8, 4, rng));
  double ov = 0;
  for (const auto& h : heads) {
    const HeadNorms hn = head_norms(h);
    ov += hn.o * hn.v;
  }
  for (std::size_t n : {1u, 5u, 17u}) {
    EXPECT_NEAR(mha_bound_tighter(heads, n, 0.0, 50.0).total, ov * std::sqrt(double(n)), 1e-12 * ov * n);
    EXPECT_NEAR(mha_bound_tighter(heads, n, 3.0, 0.0).total, ov * std::sqrt(double(n)), 1e-12 * ov * n);
  }
  const HeadNorms single{0.4, 2.5, 0.0};
  EXPECT_NEAR(mha_bound_tighter({single}, 9, 4.0, 100.0).total, 0.4 * 2.5 * 3.0, 1e-14);
  // Theta(sqrt(n)) once the attention term vanishes.
  const std::vector<HeadNorms> no_a = {{1.3, 0.7, 0.0}, {0.2, 5.0, 0.0}};
  for (std::size_t n : {1u, 7u, 50u}) {
    EXPECT_NEAR(mha_bound_tighter(no_a, 4 * n, 2.0, 9.0).total / mha_bound_tighter(no_a, n, 2.0, 9.0).total,
                2.0, 1e-14);
  }
  EXPECT_NEAR(mha_bound_tighter({{1.0, 1.0, 0.5}}, 4, 2.0, 9.0).total, 2.0 + 4.0 * 9.0 * 0.5, 1e-12);
}

TEST(AttentionBounds, EnergyFormBelowBallFormInComparableRegime) {
  const std::vector<HeadNorms> heads = {{1.0, 1.0, 0.8}, {0.6, 1.7, 0.3}};
  const double alpha = 2.0;
  // Every token of a sequence with |X|_F <= R lies in B_R, so r = R is
  // always comparable; the energy form wins for every n.
  for (std::size_t n : {1u, 4u, 17u, 197u}) {
    for (double big_r : {0.5, 3.0, 19.4}) {
      const double energy = big_r * big_r / (alpha * alpha);
      EXPECT_LE(mha_bound_tighter(heads, n, alpha, energy).total, mha_bound(heads, n, big_r).total);
    }
  }
  // R = r sqrt(n) with r^2 sqrt(n) >> sqrt(n): the leading terms compare as
  // n against sqrt(12 n + 3), so the energy form is smaller only up to n = 12.
  for (std::size_t n : {1u, 4u, 9u, 12u}) {
    for (double r : {10.0, 19.4}) {
      const double energy = r * r * n / (alpha * alpha);
      EXPECT_LE(mha_bound_tighter(heads, n, alpha, energy).total, mha_bound(heads, n, r).total);
    }
  }
  const double energy = 19.4 * 19.4 * 13 / (alpha * alpha);
  EXPECT_GT(mha_bound_tighter(heads, 13, alpha, energy).total, mha_bound(heads, 13, 19.4).total);
}

TEST(AttentionBounds, EnergyFormSoundOnEmbeddedImages) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ViTConfig cfg = vit_preset("tiny");
    cfg.seed = seed;
    Model m = make_model(cfg, {InitScheme::MatchedScale, 1.0});
    // Embedding that is linear in the pixels: no bias, CLS or positions.
    for (const char* name : {"embed.bias", "cls", "pos"}) {
      std::ranges::fill(m.params.at(name).values(), 0.0);
    }
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      Tensor& b = m.params.at(block_param(l, "attn.qkv.bias"));
      std::mt19937_64 brng(seed);
      b = oracle::random_tensor(b.shape(), brng);
      for (std::size_t i = 0; i < 2 * cfg.embed_dim; ++i) b[i] = 0.0;
    }
    const double alpha = embedding_alpha(m);
    EXPECT_NEAR(alpha, oracle::jacobi_spectral_norm(m.params.at("embed.weight")), 1e-9 * alpha);

    std::mt19937_64 rng(100 + seed);
    const Tensor images = oracle::random_tensor({24, 3, 16, 16}, rng);
    const double energy = max_image_energy(images);
    const std::size_t n = cfg.seq_len();
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const AttentionWeights w = attention_weights(m, l);
      const double bound = mha_bound_tighter(split_heads(w), n, alpha, energy).total;
      auto f = [&](const Tensor& x) { return multi_head_attention(w, x); };
      for (std::size_t i = 0; i + 1 < 24; ++i) {
        const Tensor x = embed_image(m, image_at(images, i));
        EXPECT_LE(frobenius_norm(x), alpha * std::sqrt(energy) * (1 + kSlack));
        EXPECT_LE(rate_of_change(f, x, embed_image(m, image_at(images, i + 1))),
                  bound * (1 + kSlack));
      }
    }
  }
}

TEST(AttentionBounds, ImageEnergyIsLargestSquaredSum) {
  Tensor images({2, 1, 2, 2}, std::vector<double>{1, 2, 0, 0, 3, 0, 0, -1});
  EXPECT_EQ(max_image_energy(images), 10.0);
}

// ---- Sigma estimate -----------------------------------------------------

TEST(SigmaEstimate, MinimumOverPositionsWithFloor) {
  std::mt19937_64 rng(20);
  const std::vector<double> mu = {0, 1, -2}, s = {2.0, 0.5, 1.0};
  std::vector<Tensor> seqs;
  for (int i = 0; i < 4; ++i) seqs.push_back(with_token_statistics(oracle::random_tensor({6, 3}, rng), mu, s));
  SigmaEstimate e = estimate_sigma(seqs);
  EXPECT_NEAR(e.raw_min, 0.5, 1e-12);
  EXPECT_NEAR(e.sigma_min, 0.5, 1e-12);
  EXPECT_NEAR(e.position_spread, 1.0, 1e-12);

  seqs.push_back(Tensor({6, 3}, 4.0));
  e = estimate_sigma(seqs);
  EXPECT_EQ(e.raw_min, 0.0);
  EXPECT_EQ(e.sigma_min, kSigmaFloor);
}

// ---- Whole model ---------------------------------------------------------

TEST(EvaluateAllBounds, ZeroWeightsGiveZeroBounds) {
  Model m = make_model(vit_preset("tiny"));
  for (auto& e : m.params.entries()) std::ranges::fill(e.value.values(), 0.0);
  BoundInputs in{17, 3.0, 0.5, 1.0, 10.0, true};
  const BoundReport r = evaluate_all_bounds(m, in);
  ASSERT_EQ(r.sites.size(), 20u);
  for (const SiteBound& s : r.sites) {
    EXPECT_EQ(s.value, 0.0) << component_name(s.kind);
    if (s.heads_tighter) EXPECT_EQ(s.heads_tighter->total, 0.0);
  }
}

TEST(EvaluateAllBounds, SitesUseTheComponentFormulas) {
  ViTConfig cfg = vit_preset("tiny");
  cfg.seed = 3;
  const Model m = make_model(cfg, {InitScheme::MatchedScale, 1.0});
  BoundInputs in{cfg.seq_len(), 2.5, 0.7, 1.5, 4.0, true};
  const BoundReport r = evaluate_all_bounds(m, in);
  EXPECT_NEAR(r.energy_radius, 1.5 * 2.0, 1e-15);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    EXPECT_EQ(r.site(l, ComponentKind::LN1).value, ln_bound(m.params.at(block_param(l, "ln1.gamma")), 0.7));
    EXPECT_EQ(r.site(l, ComponentKind::LN1).formula, BoundFormula::LayerNormGamma);
    EXPECT_EQ(r.site(l, ComponentKind::FC2).value, fc_bound(m.params.at(block_param(l, "fc2.weight"))));
    const SiteBound& mha = r.site(l, ComponentKind::MHA);
    EXPECT_EQ(mha.formula, BoundFormula::AttentionBall);
    EXPECT_EQ(mha.value, mha_bound(split_heads(attention_weights(m, l)), cfg.seq_len(), 2.5).total);
    ASSERT_TRUE(mha.heads_tighter.has_value());
    EXPECT_EQ(mha.heads_tighter->total,
              mha_bound_tighter(split_heads(attention_weights(m, l)), cfg.seq_len(), 1.5, 4.0).total);
    EXPECT_EQ(mha.heads->per_head.size(), cfg.num_heads);
  }
  // Sorted by bound value, largest first.
  for (std::size_t i = 0; i + 1 < 5; ++i) {
    EXPECT_GE(r.kind_means[static_cast<std::size_t>(r.ranking[i])],
              r.kind_means[static_cast<std::size_t>(r.ranking[i + 1])]);
  }
  EXPECT_THROW(evaluate_all_bounds(m, BoundInputs{cfg.seq_len(), 2.5, 0.0}), AssumptionError);
}

TEST(EvaluateAllBounds, DoublingSequenceLengthRaisesEveryAttentionBound) {
  const Model m = make_model(vit_preset("tiny"), {InitScheme::MatchedScale, 1.0});
  const BoundReport a = evaluate_all_bounds(m, {17, 1.0, 1.0});
  const BoundReport b = evaluate_all_bounds(m, {34, 1.0, 1.0});
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_GT(b.site(l, ComponentKind::MHA).value, a.site(l, ComponentKind::MHA).value);
    EXPECT_EQ(b.site(l, ComponentKind::FC1).value, a.site(l, ComponentKind::FC1).value);
  }
}

TEST(EvaluateAllBounds, MatchedInitOrdersAttentionThenFeedForwardThenLayerNorm) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ViTConfig cfg = vit_preset("tiny");
    cfg.seed = seed;
    const Model m = make_model(cfg, {InitScheme::MatchedScale, 1.0});
    // Unit-variance tokens: r = sqrt(d), sigma about 1.
    const BoundReport r = evaluate_all_bounds(m, {cfg.seq_len(), std::sqrt(16.0), 0.9});
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const double mha = r.site(l, ComponentKind::MHA).value;
      const double fc = std::max(r.site(l, ComponentKind::FC1).value, r.site(l, ComponentKind::FC2).value);
      const double ln = std::max(r.site(l, ComponentKind::LN1).value, r.site(l, ComponentKind::LN2).value);
      EXPECT_GT(mha, fc);
      EXPECT_GT(fc, ln);
      EXPECT_EQ(r.layer_order[l][0], ComponentKind::MHA);
    }
  }
}
