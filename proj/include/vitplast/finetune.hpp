#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "vitplast/dataset.hpp"
#include "vitplast/model.hpp"
#include "vitplast/parameters.hpp"

namespace vitplast {

enum class LrSchedule { Cosine, Constant };

std::string_view schedule_name(LrSchedule schedule);
LrSchedule parse_schedule(std::string_view name);

struct FinetuneConfig {
  ParamGroup group = ParamGroup::MHA;
  double lr = 1e-2;  // 0 is accepted and leaves every tensor untouched
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  double clip_norm = 1.0;
  LrSchedule schedule = LrSchedule::Cosine;
  std::uint64_t seed = 0;
  std::size_t eval_every = 25;
  double val_fraction = 0.2;
  FeatureTap tap = FeatureTap::BlockOutput;

  void validate() const;  // throws Error on out-of-range fields
};

/// Marks the tensors of `group` in every block, plus the classification
/// head, as trainable and freezes everything else. ALL unfreezes every
/// tensor; HEAD leaves only the head trainable (linear probing).
void select_trainable(ParameterStore& params, ParamGroup group);

/// base_lr * (1 + cos(pi * step / total)) / 2.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

struct MomentumState {
  std::vector<std::optional<Tensor>> buffers;  // aligned with the store
};

struct SgdOptions {
  double lr = 0.0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
};

/// Clips the gradients to global norm clip_norm, then v <- momentum v + g
/// and theta <- theta - lr v on trainable entries. Returns the norm before
/// clipping. Throws NumericalError on a non-finite gradient.
double sgd_step(ParameterStore& params, Gradients& grads, MomentumState& state,
                const SgdOptions& options);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;        // global, before clipping (head included)
  double group_grad_norm = 0.0;  // same, restricted to the selected block group
};

struct EvalRecord {
  std::size_t step = 0;  // optimizer steps taken before this evaluation
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainLog {
  FinetuneConfig config;
  std::size_t trainable_params = 0;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::size_t best_eval = 0;  // earliest eval with the highest val accuracy
  double test_accuracy = 0.0;  // of the best-validation checkpoint
};

struct FinetuneData {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Splits `pool` into train/val by a seeded shuffle; `test` is kept apart.
FinetuneData prepare_finetune_data(const Dataset& pool, Dataset test, double val_fraction,
                                   std::uint64_t seed);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalResult evaluate(const Model& model, const Dataset& data,
                    FeatureTap tap = FeatureTap::BlockOutput);

/// Trains with seeded per-epoch shuffles (partial batches dropped),
/// evaluates before the first step, every eval_every steps and after the
/// last one, and leaves `model` at the best-validation checkpoint.
TrainLog run_finetune(Model& model, const FinetuneData& data, const FinetuneConfig& cfg);

// ---- Accounting and statistics ---------------------------------------

struct MemoryEstimate {
  std::size_t params = 0;
  std::size_t bytes_per_scalar = 4;
  std::size_t grad_bytes = 0;
  std::size_t optimizer_bytes = 0;
  std::size_t total_bytes = 0;

  double total_mib() const { return static_cast<double>(total_bytes) / (1024.0 * 1024.0); }
};

/// Gradients plus one SGD momentum buffer: 2 * params * bytes_per_scalar.
MemoryEstimate estimate_memory(std::size_t params, std::size_t bytes_per_scalar = 4);

/// 100 * (finetune - probe) / probe. Throws unless probe > 0.
double relative_gain(double finetune_accuracy, double probe_accuracy);

struct WilcoxonResult {
  std::size_t n = 0;        // nonzero differences used
  double w_plus = 0.0;      // sum of ranks of positive differences
  double w_minus = 0.0;
  double statistic = 0.0;   // min(w_plus, w_minus)
  double p_value = 1.0;     // two-sided
  bool exact = false;
  bool significant = false;  // p_value < alpha
};

inline constexpr std::size_t kWilcoxonExactMax = 12;
inline constexpr std::size_t kWilcoxonMinPairs = 5;

/// Two-sided signed-rank test on paired differences. Zero differences are
/// dropped and tied magnitudes get average ranks. Up to 12 nonzero
/// differences the null distribution is enumerated exactly; beyond, a normal
/// approximation with tie-corrected variance is used. Throws
/// DegenerateInputError if every difference is zero and DataError if fewer
/// than 5 remain.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> diffs, double alpha = 0.05);

}  // namespace vitplast
