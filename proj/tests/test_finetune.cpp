#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "oracles.hpp"
#include "vitplast/backward.hpp"
#include "vitplast/errors.hpp"
#include "vitplast/finetune.hpp"
#include "vitplast/serialize.hpp"

using namespace vitplast;

namespace {

ParameterStore scalar_store(double theta) {
  ParameterStore s;
  s.add("w", ParamRole::Head, std::nullopt, -1, Tensor({1}, theta)).trainable = true;
  return s;
}

Gradients scalar_grad(double g) {
  Gradients grads;
  grads.slots.emplace_back(Tensor({1}, g));
  return grads;
}

Dataset synthetic_dataset(std::size_t n, std::uint64_t seed) {
  SyntheticOptions o;
  o.task = SyntheticTask::ShiftedPatchColor;
  o.n_samples = n;
  o.seed = seed;
  const SyntheticData raw = generate_synthetic(o);
  Dataset d;
  d.images = normalize_images(raw.pixels, true, {0.5, 0.5, 0.5}, {0.25, 0.25, 0.25});
  d.labels = raw.labels;
  d.num_classes = 4;
  return d;
}

FinetuneData small_splits() {
  return prepare_finetune_data(synthetic_dataset(160, 1), synthetic_dataset(48, 2), 0.2, 3);
}

Model tiny_model(std::uint64_t seed) {
  ViTConfig c = vit_preset("tiny");
  c.seed = seed;
  return make_model(c);
}

FinetuneConfig short_config(ParamGroup group, double lr = 0.01) {
  FinetuneConfig cfg;
  cfg.group = group;
  cfg.lr = lr;
  cfg.steps = 12;
  cfg.batch_size = 16;
  cfg.eval_every = 4;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

// ---- Optimizer pieces ----------------------------------------------------

TEST(CosineLr, EndpointsAndMidpoint) {
  EXPECT_EQ(cosine_lr(0, 300, 0.01), 0.01);
  EXPECT_NEAR(cosine_lr(300, 300, 0.01), 0.0, 1e-18);
  EXPECT_NEAR(cosine_lr(150, 300, 0.01), 0.005, 1e-15);
  EXPECT_NEAR(cosine_lr(75, 300, 1.0), 0.5 * (1 + std::cos(std::numbers::pi / 4)), 1e-15);
  EXPECT_THROW(cosine_lr(301, 300, 0.01), Error);
}

TEST(SgdStep, ZeroGradientLeavesParameterUnchanged) {
  ParameterStore s = scalar_store(1.25);
  Gradients g = scalar_grad(0.0);
  MomentumState st;
  EXPECT_EQ(sgd_step(s, g, st, {0.1, 0.9, 0.0, 1.0}), 0.0);
  EXPECT_EQ(s.at("w")[0], 1.25);
}

TEST(SgdStep, ClippedScalarStep) {
  ParameterStore s = scalar_store(1.0);
  Gradients g = scalar_grad(2.0);
  MomentumState st;
  EXPECT_EQ(sgd_step(s, g, st, {0.1, 0.0, 0.0, 1.0}), 2.0);
  EXPECT_NEAR(s.at("w")[0], 0.9, 1e-15);
}

TEST(SgdStep, MomentumRecurrence) {
  ParameterStore s = scalar_store(0.0);
  MomentumState st;
  const double g1 = 0.3, g2 = -0.2, lr = 0.1, mu = 0.9;
  Gradients a = scalar_grad(g1), b = scalar_grad(g2);
  sgd_step(s, a, st, {lr, mu, 0.0, 10.0});
  EXPECT_NEAR(s.at("w")[0], -lr * g1, 1e-16);
  sgd_step(s, b, st, {lr, mu, 0.0, 10.0});
  EXPECT_NEAR(s.at("w")[0], -lr * g1 - lr * (mu * g1 + g2), 1e-16);
}

TEST(SgdStep, PostClipNormNeverExceedsThreshold) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    ParameterStore s;
    s.add("a", ParamRole::Head, std::nullopt, -1, Tensor({3, 4})).trainable = true;
    s.add("b", ParamRole::Head, std::nullopt, -1, Tensor({5})).trainable = true;
    s.add("frozen", ParamRole::Head, std::nullopt, -1, Tensor({2}, 7.0));
    Gradients g;
    const double scale = std::pow(10.0, t % 5 - 2);
    g.slots = {oracle::random_tensor({3, 4}, rng, scale), oracle::random_tensor({5}, rng, scale),
               std::nullopt};
    const double pre = g.global_norm();
    MomentumState st;
    EXPECT_EQ(sgd_step(s, g, st, {1.0, 0.0, 0.0, 1.0}), pre);
    // With momentum 0 and lr 1 the update is the clipped gradient itself.
    double sq = 0;
    for (const char* name : {"a", "b"}) {
      for (double v : s.at(name).values()) sq += v * v;
    }
    EXPECT_LE(std::sqrt(sq), 1.0 + 1e-12);
    if (pre <= 1.0) EXPECT_NEAR(std::sqrt(sq), pre, 1e-14);
    EXPECT_EQ(s.at("frozen"), Tensor({2}, 7.0));
  }
}

TEST(SgdStep, RejectsNonFiniteAndFrozenGradients) {
  ParameterStore s = scalar_store(1.0);
  MomentumState st;
  Gradients bad = scalar_grad(std::nan(""));
  EXPECT_THROW(sgd_step(s, bad, st, {0.1}), NumericalError);
  EXPECT_EQ(s.at("w")[0], 1.0);
  s.entry("w").trainable = false;
  Gradients g = scalar_grad(1.0);
  EXPECT_THROW(sgd_step(s, g, st, {0.1}), Error);
}

// ---- Selection and accounting -------------------------------------------

TEST(SelectTrainable, LayerNormGroupOnBase) {
  Model m = make_model(vit_preset("base"));
  select_trainable(m.params, ParamGroup::LN1);
  std::size_t body = 0;
  for (const ParamEntry& e : m.params.entries()) {
    if (!e.trainable) continue;
    if (e.role == ParamRole::Component) {
      EXPECT_EQ(e.kind, ComponentKind::LN1) << e.name;
      body += e.value.size();
    } else {
      EXPECT_EQ(e.role, ParamRole::Head) << e.name;
    }
  }
  EXPECT_EQ(body, 18432u);
  EXPECT_EQ(m.params.trainable_count(), 18432u + count_parameters(m.config, ParamGroup::HEAD));
}

TEST(SelectTrainable, HeadOnlyAndPartition) {
  Model m = make_model(vit_preset("tiny"));
  select_trainable(m.params, ParamGroup::HEAD);
  for (const ParamEntry& e : m.params.entries()) EXPECT_EQ(e.trainable, e.role == ParamRole::Head) << e.name;

  std::vector<bool> union_set(m.params.size(), false);
  for (ParamGroup g : {ParamGroup::LN1, ParamGroup::MHA, ParamGroup::LN2, ParamGroup::FC1, ParamGroup::FC2}) {
    select_trainable(m.params, g);
    for (std::size_t i = 0; i < m.params.size(); ++i) union_set[i] = union_set[i] || m.params.entries()[i].trainable;
  }
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const ParamRole r = m.params.entries()[i].role;
    if (r == ParamRole::Embedding || r == ParamRole::PosEmbed || r == ParamRole::ClsToken) union_set[i] = true;
  }
  select_trainable(m.params, ParamGroup::ALL);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    EXPECT_TRUE(m.params.entries()[i].trainable);
    EXPECT_TRUE(union_set[i]) << m.params.entries()[i].name;
  }
}

TEST(Memory, MatchesReportedFootprints) {
  const ViTConfig base = vit_preset("base");
  const MemoryEstimate mha = estimate_memory(count_parameters(base, ParamGroup::MHA));
  EXPECT_EQ(mha.params, 28348416u);
  EXPECT_EQ(mha.grad_bytes, mha.params * 4);
  EXPECT_EQ(mha.optimizer_bytes, mha.params * 4);
  EXPECT_EQ(mha.total_bytes, 2 * mha.params * 4);
  EXPECT_LE(std::abs(mha.total_mib() - 220.0) / 220.0, 0.05);
  const MemoryEstimate ln = estimate_memory(count_parameters(base, ParamGroup::LN1));
  EXPECT_LE(std::abs(ln.total_mib() - 0.14) / 0.14, 0.10);
  EXPECT_EQ(estimate_memory(0).total_bytes, 0u);
  EXPECT_EQ(estimate_memory(10, 8).total_bytes, 160u);
}

TEST(RelativeGain, Cases) {
  EXPECT_EQ(relative_gain(80.0, 80.0), 0.0);
  EXPECT_NEAR(relative_gain(98.91, 91.95), 7.57, 5e-3);
  EXPECT_EQ(relative_gain(75.0, 50.0), 50.0);
  EXPECT_THROW(relative_gain(75.0, 0.0), Error);
}

// ---- Wilcoxon ----------------------------------------------------------

TEST(Wilcoxon, AllPositiveEightPairs) {
  const std::vector<double> d = {1.0, 2.0, 0.5, 3.0, 1.5, 0.25, 4.0, 2.5};
  const WilcoxonResult w = wilcoxon_signed_rank(d);
  EXPECT_TRUE(w.exact);
  EXPECT_EQ(w.n, 8u);
  EXPECT_EQ(w.w_plus, 36.0);
  EXPECT_EQ(w.statistic, 0.0);
  EXPECT_DOUBLE_EQ(w.p_value, 2.0 / 256.0);
  EXPECT_TRUE(w.significant);
}

TEST(Wilcoxon, AntisymmetricDifferences) {
  const std::vector<double> d = {1.0, -1.0, 2.0, -2.0, 3.0, -3.0};
  const WilcoxonResult w = wilcoxon_signed_rank(d);
  EXPECT_EQ(w.w_plus, w.w_minus);
  EXPECT_NEAR(w.p_value, 1.0, 1e-12);
  EXPECT_FALSE(w.significant);
}

TEST(Wilcoxon, MatchesBruteForceEnumeration) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> len(5, 10), value(-4, 4);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> d;
    const int n = len(rng);
    // Small integer values force ties and the odd zero.
    while (static_cast<int>(d.size()) < n) d.push_back(value(rng) * 0.5);
    const std::size_t nonzero = std::count_if(d.begin(), d.end(), [](double v) { return v != 0.0; });
    if (nonzero < 5) {
      if (nonzero == 0) EXPECT_THROW(wilcoxon_signed_rank(d), DegenerateInputError);
      else EXPECT_THROW(wilcoxon_signed_rank(d), DataError);
      continue;
    }
    const WilcoxonResult w = wilcoxon_signed_rank(d);
    EXPECT_TRUE(w.exact);
    EXPECT_NEAR(w.p_value, oracle::wilcoxon_exact_p(d), 1e-12) << "trial " << t;
  }
}

TEST(Wilcoxon, NormalApproximationBeyondTwelve) {
  std::vector<double> d;
  for (int i = 1; i <= 20; ++i) d.push_back(i % 4 == 0 ? -i : i);
  const WilcoxonResult w = wilcoxon_signed_rank(d);
  EXPECT_FALSE(w.exact);
  // No ties: var = n(n+1)(2n+1)/24, z = (W- - n(n+1)/4) / sqrt(var).
  const double n = 20, mean = n * (n + 1) / 4, var = n * (n + 1) * (2 * n + 1) / 24;
  const double z = (w.statistic - mean) / std::sqrt(var);
  EXPECT_NEAR(w.p_value, std::erfc(std::abs(z) / std::sqrt(2.0)), 1e-12);
  EXPECT_THROW(wilcoxon_signed_rank(std::vector<double>(6, 0.0)), DegenerateInputError);
  EXPECT_THROW(wilcoxon_signed_rank(std::vector<double>{1, 2, 3, 4}), DataError);
}

// ---- run_finetune --------------------------------------------------------

TEST(RunFinetune, ZeroLearningRateLeavesModelUntouched) {
  const FinetuneData data = small_splits();
  Model m = tiny_model(1);
  const Model before = m;
  const TrainLog log = run_finetune(m, data, short_config(ParamGroup::MHA, 0.0));
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    EXPECT_EQ(m.params.entries()[i].value, before.params.entries()[i].value);
  }
  const double acc = evaluate(before, data.test).accuracy;
  EXPECT_EQ(log.test_accuracy, acc);
  for (const EvalRecord& e : log.evals) EXPECT_EQ(e.val_accuracy, log.evals.front().val_accuracy);
  EXPECT_EQ(log.best_eval, 0u);
}

TEST(RunFinetune, LogShapeAndCheckpointRule) {
  const FinetuneData data = small_splits();
  Model m = tiny_model(2);
  const FinetuneConfig cfg = short_config(ParamGroup::FC1, 0.05);
  const TrainLog log = run_finetune(m, data, cfg);
  ASSERT_EQ(log.steps.size(), cfg.steps);
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    EXPECT_EQ(log.steps[t].step, t);
    EXPECT_NEAR(log.steps[t].lr, cosine_lr(t, cfg.steps, cfg.lr), 1e-18);
    EXPECT_TRUE(std::isfinite(log.steps[t].loss));
    EXPECT_GE(log.steps[t].grad_norm, log.steps[t].group_grad_norm);
  }
  std::vector<std::size_t> eval_steps;
  for (const EvalRecord& e : log.evals) eval_steps.push_back(e.step);
  EXPECT_EQ(eval_steps, (std::vector<std::size_t>{0, 4, 8, 12}));

  std::size_t best = 0;
  for (std::size_t i = 1; i < log.evals.size(); ++i) {
    if (log.evals[i].val_accuracy > log.evals[best].val_accuracy) best = i;
  }
  EXPECT_EQ(log.best_eval, best);
  // The model is left at the chosen checkpoint.
  EXPECT_EQ(evaluate(m, data.val).accuracy, log.evals[best].val_accuracy);
  EXPECT_EQ(evaluate(m, data.test).accuracy, log.test_accuracy);
  EXPECT_EQ(log.trainable_params,
            count_parameters(m.config, ParamGroup::FC1) + count_parameters(m.config, ParamGroup::HEAD));
}

TEST(RunFinetune, FrozenTensorsStayBitIdentical) {
  const FinetuneData data = small_splits();
  for (ParamGroup g : {ParamGroup::LN2, ParamGroup::MHA, ParamGroup::HEAD}) {
    Model m = tiny_model(3);
    const Model before = m;
    run_finetune(m, data, short_config(g, 0.1));
    bool any_changed = false;
    for (std::size_t i = 0; i < m.params.size(); ++i) {
      const ParamEntry& e = m.params.entries()[i];
      const bool trainable = belongs_to(e, g) || e.role == ParamRole::Head;
      if (!trainable) {
        EXPECT_EQ(e.value, before.params.entries()[i].value) << e.name;
      } else if (!(e.value == before.params.entries()[i].value)) {
        any_changed = true;
      }
    }
    EXPECT_TRUE(any_changed) << group_name(g);
  }
}

TEST(RunFinetune, DeterministicForIdenticalSeeds) {
  const FinetuneData data = small_splits();
  Model a = tiny_model(4), b = tiny_model(4);
  const std::string la = dump_json(to_json(run_finetune(a, data, short_config(ParamGroup::MHA))));
  const std::string lb = dump_json(to_json(run_finetune(b, data, short_config(ParamGroup::MHA))));
  EXPECT_EQ(la, lb);
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    EXPECT_EQ(a.params.entries()[i].value, b.params.entries()[i].value);
  }
  FinetuneConfig other = short_config(ParamGroup::MHA);
  other.seed = 6;
  Model c = tiny_model(4);
  EXPECT_NE(la, dump_json(to_json(run_finetune(c, data, other))));
}

TEST(RunFinetune, TrainLogJsonRoundTrip) {
  const FinetuneData data = small_splits();
  Model m = tiny_model(5);
  const TrainLog log = run_finetune(m, data, short_config(ParamGroup::LN1));
  const std::string text = dump_json(to_json(log));
  EXPECT_EQ(dump_json(to_json(train_log_from_json(Json::parse(text)))), text);
}

TEST(RunFinetune, RejectsBadConfigurationAndData) {
  const FinetuneData data = small_splits();
  Model m = tiny_model(6);
  FinetuneConfig cfg = short_config(ParamGroup::MHA);
  cfg.clip_norm = 0.0;
  EXPECT_THROW(run_finetune(m, data, cfg), Error);
  cfg = short_config(ParamGroup::MHA);
  cfg.momentum = 1.0;
  EXPECT_THROW(run_finetune(m, data, cfg), Error);
  cfg = short_config(ParamGroup::MHA);
  cfg.lr = -1.0;
  EXPECT_THROW(run_finetune(m, data, cfg), Error);
  FinetuneData empty = data;
  empty.val = Dataset{};
  empty.val.num_classes = 4;
  EXPECT_THROW(run_finetune(m, empty, short_config(ParamGroup::MHA)), DataError);
}

TEST(PrepareFinetuneData, DisjointDeterministicSplit) {
  const Dataset pool = synthetic_dataset(100, 7);
  const FinetuneData a = prepare_finetune_data(pool, synthetic_dataset(8, 8), 0.2, 9);
  const FinetuneData b = prepare_finetune_data(pool, synthetic_dataset(8, 8), 0.2, 9);
  EXPECT_EQ(a.train.size(), 80u);
  EXPECT_EQ(a.val.size(), 20u);
  EXPECT_EQ(a.train.labels, b.train.labels);
  EXPECT_EQ(a.val.images, b.val.images);
  EXPECT_EQ(a.test.size(), 8u);
}
