#pragma once

#include <array>
#include <optional>
#include <string_view>
#include <vector>

#include "vitplast/linalg.hpp"
#include "vitplast/model.hpp"
#include "vitplast/parameters.hpp"

namespace vitplast {

// Which closed-form bound produced a value.
enum class BoundFormula {
  LayerNormGamma,   // |gamma|_inf / sigma
  WeightSpectral,   // |W|_2
  AttentionBall,    // sum_h |O|_2 |V|_2 sqrt(3n + (12n + 3) r^4 |A|_2^2), tokens in B_r
  AttentionEnergy,  // sum_h |O|_2 |V|_2 (sqrt(n) + alpha^2 E |A|_2), image energy <= E
};

std::string_view formula_name(BoundFormula formula);

struct BoundInputs {
  std::size_t n = 1;        // sequence length
  double r = 0.0;           // token ball radius
  double sigma_min = 0.0;   // minimal per-position token std (LN bound)
  double alpha = 0.0;       // spectral norm of the patch embedding
  double energy = 0.0;      // bound on the sum of squared pixel values
  bool tighter = false;     // also evaluate the energy-based attention bound
};

// One attention head in matrix form: Q, K, V are k x d, O is d x k.
struct HeadWeights {
  Tensor q, k, v, o;
};

std::vector<HeadWeights> split_heads(const AttentionWeights& w);

struct HeadNorms {
  double o = 0.0;  // |O^h|_2
  double v = 0.0;  // |V^h|_2
  double a = 0.0;  // |A^h|_2 with A^h = Q^T K / sqrt(k)
};

HeadNorms head_norms(const HeadWeights& head, const PowerIterationOptions& power = {});

/// |Q^T K|_2 / sqrt(k) by power iteration on A A^T applied in factored form.
double attention_matrix_norm(const Tensor& q, const Tensor& k,
                             const PowerIterationOptions& power = {});

/// |gamma|_inf / sigma_min. Throws AssumptionError unless sigma_min > 0.
double ln_bound(const Tensor& gamma, double sigma_min);

/// |W|_2.
double fc_bound(const Tensor& weight, const PowerIterationOptions& power = {});

/// sqrt(3) |V|_2 sqrt(|A|_2^2 r^4 (4n + 1) + n): the Lipschitz constant of one
/// head on sequences whose tokens lie in the ball of radius r.
double attention_lipschitz_per_head(double a_norm, double v_norm, std::size_t n, double r);
double attention_lipschitz_per_head(const Tensor& q, const Tensor& k, const Tensor& v,
                                    std::size_t n, double r,
                                    const PowerIterationOptions& power = {});

struct MhaBound {
  double total = 0.0;
  std::vector<HeadNorms> norms;
  std::vector<double> per_head;  // sums to total
};

MhaBound mha_bound(const std::vector<HeadNorms>& heads, std::size_t n, double r);
MhaBound mha_bound(const std::vector<HeadWeights>& heads, std::size_t n, double r,
                   const PowerIterationOptions& power = {});

/// Energy form; R = alpha sqrt(energy) is the resulting Frobenius radius.
MhaBound mha_bound_tighter(const std::vector<HeadNorms>& heads, std::size_t n, double alpha,
                           double energy);
MhaBound mha_bound_tighter(const std::vector<HeadWeights>& heads, std::size_t n, double alpha,
                           double energy, const PowerIterationOptions& power = {});

// ---- Constants estimated from probes -----------------------------------

struct SigmaEstimate {
  double sigma_min = 0.0;  // floored at kSigmaFloor
  double raw_min = 0.0;
  // max over positions of (largest / smallest std seen at that position);
  // 1 when the equal-statistics assumption holds exactly.
  double position_spread = 1.0;
};

inline constexpr double kSigmaFloor = 1e-6;

/// Per-token standard deviation (population, over the d coordinates) for
/// every position and every sequence; sigma_min is the smallest one.
SigmaEstimate estimate_sigma(const std::vector<Tensor>& sequences);

/// Spectral norm of the d x (P*P*C) patch-embedding matrix.
double embedding_alpha(const Model& model, const PowerIterationOptions& power = {});

/// Largest sum of squared pixel values over images [N, C, H, W].
double max_image_energy(const Tensor& images);

// ---- Whole-model evaluation --------------------------------------------

struct SiteBound {
  std::size_t layer = 0;
  ComponentKind kind = ComponentKind::LN1;
  BoundFormula formula = BoundFormula::LayerNormGamma;
  double value = 0.0;
  double gamma_inf = 0.0;     // LN sites
  double weight_norm = 0.0;   // FC sites
  std::optional<MhaBound> heads;            // MHA sites, ball form
  std::optional<MhaBound> heads_tighter;    // MHA sites when requested
};

struct BoundReport {
  ViTConfig config;
  BoundInputs inputs;
  double energy_radius = 0.0;  // alpha sqrt(energy)
  std::vector<SiteBound> sites;  // layer-major, kinds in block order
  std::vector<std::array<ComponentKind, 5>> layer_order;  // per layer, largest bound first
  std::array<double, 5> kind_means{};
  std::array<ComponentKind, 5> ranking{};

  const SiteBound& site(std::size_t layer, ComponentKind kind) const;
};

BoundReport evaluate_all_bounds(const Model& model, const BoundInputs& inputs,
                                const PowerIterationOptions& power = {});

}  // namespace vitplast
