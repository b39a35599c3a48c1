#include "vitplast/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "vitplast/backward.hpp"
#include "vitplast/errors.hpp"
#include "vitplast/seeding.hpp"

namespace vitplast {

std::string_view schedule_name(LrSchedule schedule) {
  return schedule == LrSchedule::Cosine ? "cosine" : "constant";
}

LrSchedule parse_schedule(std::string_view name) {
  if (name == "cosine") return LrSchedule::Cosine;
  if (name == "constant") return LrSchedule::Constant;
  throw Error("unknown schedule '" + std::string(name) + "' (expected cosine|constant)");
}

void FinetuneConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error("lr must be finite and >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw Error("weight_decay must be >= 0");
  if (!(clip_norm > 0.0)) throw Error("clip_norm must be > 0");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw Error("val_fraction must lie in (0, 1)");
  if (batch_size == 0) throw Error("batch_size must be >= 1");
  if (eval_every == 0) throw Error("eval_every must be >= 1");
}

void select_trainable(ParameterStore& params, ParamGroup group) {
  params.freeze_all();
  params.set_trainable(group, true);
  params.set_trainable(ParamGroup::HEAD, true);
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (step > total_steps) throw Error("cosine_lr: step beyond total_steps");
  if (total_steps == 0) return base_lr;
  const double pi = std::acos(-1.0);
  return base_lr * 0.5 *
         (1.0 + std::cos(pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

double sgd_step(ParameterStore& params, Gradients& grads, MomentumState& state,
                const SgdOptions& o) {
  auto& entries = params.entries();
  if (grads.slots.size() != entries.size()) throw DimensionError("gradients do not match store");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!grads.slots[i]) continue;
    if (!entries[i].trainable) {
      throw Error("gradient supplied for frozen tensor '" + entries[i].name + "'");
    }
    if (!grads.slots[i]->all_finite()) {
      throw NumericalError("non-finite gradient in '" + entries[i].name + "'");
    }
  }
  const double norm = grads.global_norm();
  if (!std::isfinite(norm)) throw NumericalError("gradient norm overflowed");
  const double scale = norm > o.clip_norm ? o.clip_norm / norm : 1.0;

  state.buffers.resize(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!grads.slots[i]) continue;
    Tensor& g = *grads.slots[i];
    Tensor& theta = entries[i].value;
    if (scale != 1.0) {
      for (double& v : g.values()) v *= scale;
    }
    if (o.weight_decay != 0.0) add_inplace(g, theta, o.weight_decay);
    auto& buf = state.buffers[i];
    if (!buf) buf = Tensor(theta.shape());
    for (std::size_t j = 0; j < g.size(); ++j) {
      (*buf)[j] = o.momentum * (*buf)[j] + g[j];
      theta[j] -= o.lr * (*buf)[j];
    }
  }
  return norm;
}

FinetuneData prepare_finetune_data(const Dataset& pool, Dataset test, double val_fraction,
                                   std::uint64_t seed) {
  const Split s = split_indices(pool.size(), val_fraction, seed);
  return {subset(pool, s.train), subset(pool, s.val), std::move(test)};
}

EvalResult evaluate(const Model& model, const Dataset& data, FeatureTap tap) {
  if (data.size() == 0) throw DataError("evaluate: empty dataset");
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const Tensor logits = head_logits(model, extract_features(model, data.images, idx, tap));
  EvalResult r;
  r.loss = cross_entropy(logits, data.labels);
  std::size_t hits = 0;
  for (std::size_t b = 0; b < data.size(); ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.rows(); ++c) {
      if (logits(c, b) > logits(best, b)) best = c;
    }
    hits += static_cast<int>(best) == data.labels[b];
  }
  r.accuracy = static_cast<double>(hits) / static_cast<double>(data.size());
  return r;
}

TrainLog run_finetune(Model& model, const FinetuneData& data, const FinetuneConfig& cfg) {
  cfg.validate();
  if (data.train.size() == 0 || data.val.size() == 0 || data.test.size() == 0) {
    throw DataError("finetuning needs non-empty train, val and test splits");
  }
  if (data.train.size() < cfg.batch_size) {
    throw DataError("train split (" + std::to_string(data.train.size()) +
                    ") is smaller than one batch");
  }

  select_trainable(model.params, cfg.group);
  TrainLog log;
  log.config = cfg;
  log.trainable_params = model.params.trainable_count();

  std::vector<bool> in_group(model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const ParamEntry& e = model.params.entries()[i];
    in_group[i] = e.trainable && e.role != ParamRole::Head;
  }

  ParameterStore best = model.params;
  double best_accuracy = -1.0;
  auto run_eval = [&](std::size_t step) {
    const EvalResult r = evaluate(model, data.val, cfg.tap);
    log.evals.push_back({step, r.loss, r.accuracy});
    if (r.accuracy > best_accuracy) {
      best_accuracy = r.accuracy;
      log.best_eval = log.evals.size() - 1;
      best = model.params;
    }
  };

  const std::size_t per_epoch = data.train.size() / cfg.batch_size;
  std::vector<std::size_t> order(data.train.size());
  MomentumState state;
  run_eval(0);
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const std::size_t epoch = t / per_epoch, slot = t % per_epoch;
    if (slot == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::mt19937_64 rng(stream_seed(cfg.seed, epoch));
      std::shuffle(order.begin(), order.end(), rng);
    }
    const std::span<const std::size_t> batch(order.data() + slot * cfg.batch_size,
                                             cfg.batch_size);
    std::vector<int> labels;
    for (std::size_t i : batch) labels.push_back(data.train.labels[i]);

    LossAndGradients lg = backward(model, data.train.images, batch, labels, cfg.tap);
    if (!std::isfinite(lg.loss)) {
      throw NumericalError("non-finite training loss at step " + std::to_string(t));
    }
    double group_sq = 0.0;
    for (std::size_t i = 0; i < lg.grads.slots.size(); ++i) {
      if (!in_group[i] || !lg.grads.slots[i]) continue;
      for (double v : lg.grads.slots[i]->values()) group_sq += v * v;
    }
    const double lr = cfg.schedule == LrSchedule::Cosine ? cosine_lr(t, cfg.steps, cfg.lr) : cfg.lr;
    const double norm = sgd_step(model.params, lg.grads, state,
                                 {lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm});
    log.steps.push_back({t, lr, lg.loss, norm, std::sqrt(group_sq)});
    if ((t + 1) % cfg.eval_every == 0 || t + 1 == cfg.steps) run_eval(t + 1);
  }

  model.params = std::move(best);
  log.test_accuracy = evaluate(model, data.test, cfg.tap).accuracy;
  return log;
}

MemoryEstimate estimate_memory(std::size_t params, std::size_t bytes_per_scalar) {
  MemoryEstimate m;
  m.params = params;
  m.bytes_per_scalar = bytes_per_scalar;
  m.grad_bytes = params * bytes_per_scalar;
  m.optimizer_bytes = params * bytes_per_scalar;
  m.total_bytes = m.grad_bytes + m.optimizer_bytes;
  return m;
}

double relative_gain(double finetune_accuracy, double probe_accuracy) {
  if (!(probe_accuracy > 0.0)) throw Error("relative gain needs a positive probe accuracy");
  return 100.0 * (finetune_accuracy - probe_accuracy) / probe_accuracy;
}

}  // namespace vitplast
