#include "vitplast/bounds.hpp"

#include <algorithm>
#include <cmath>

#include "vitplast/errors.hpp"
#include "vitplast/kernels.hpp"
#include "vitplast/seeding.hpp"

namespace vitplast {

namespace {

std::array<ComponentKind, 5> order_by(const std::array<double, 5>& values) {
  std::array<ComponentKind, 5> order = kComponentKinds;
  std::stable_sort(order.begin(), order.end(), [&](ComponentKind a, ComponentKind b) {
    return values[static_cast<std::size_t>(a)] > values[static_cast<std::size_t>(b)];
  });
  return order;
}

void require_nonnegative(double v, const char* what) {
  if (!(v >= 0.0) || !std::isfinite(v)) {
    throw AssumptionError(std::string(what) + " must be finite and >= 0");
  }
}

}  // namespace

std::string_view formula_name(BoundFormula formula) {
  switch (formula) {
    case BoundFormula::LayerNormGamma: return "layernorm_gamma";
    case BoundFormula::WeightSpectral: return "weight_spectral";
    case BoundFormula::AttentionBall: return "attention_ball";
    case BoundFormula::AttentionEnergy: return "attention_energy";
  }
  return "?";
}

std::vector<HeadWeights> split_heads(const AttentionWeights& w) {
  std::vector<HeadWeights> heads;
  for (std::size_t h = 0; h < w.num_heads; ++h) {
    heads.push_back({head_query(*w.qkv_weight, h, w.num_heads),
                     head_key(*w.qkv_weight, h, w.num_heads),
                     head_value(*w.qkv_weight, h, w.num_heads),
                     head_output(*w.out_weight, h, w.num_heads)});
  }
  return heads;
}

double attention_matrix_norm(const Tensor& q, const Tensor& k, const PowerIterationOptions& power) {
  require_matrix(q, "query");
  require_same_shape(q, k, "attention_matrix_norm");
  const std::size_t kd = q.rows(), d = q.cols();
  if (inf_norm(q.values()) == 0.0 || inf_norm(k.values()) == 0.0) return 0.0;
  // A A^T = Q^T (K K^T) Q / k, applied without forming the d x d matrix.
  const Tensor kk = gram_rows(k);
  std::vector<double> u(kd), w(kd);
  auto apply = [&](std::span<const double> v, std::span<double> out) {
    kernels::gemv(kd, d, q.data(), v.data(), u.data());
    kernels::gemv(kd, kd, kk.data(), u.data(), w.data());
    kernels::gemv_t(kd, d, q.data(), w.data(), out.data());
    for (double& x : out) x /= static_cast<double>(kd);
  };
  const std::uint64_t seed = stream_seed(power.seed, kd * 0x10001ULL + d);
  return power_iteration_gram(apply, d, seed, power).value;
}

HeadNorms head_norms(const HeadWeights& head, const PowerIterationOptions& power) {
  return {spectral_norm(head.o, power).value, spectral_norm(head.v, power).value,
          attention_matrix_norm(head.q, head.k, power)};
}

double ln_bound(const Tensor& gamma, double sigma_min) {
  if (!(sigma_min > 0.0)) {
    throw AssumptionError("layer norm bound needs a positive minimal std, got " +
                          std::to_string(sigma_min));
  }
  return inf_norm(gamma.values()) / sigma_min;
}

double fc_bound(const Tensor& weight, const PowerIterationOptions& power) {
  return spectral_norm(weight, power).value;
}

double attention_lipschitz_per_head(double a_norm, double v_norm, std::size_t n, double r) {
  require_nonnegative(r, "radius");
  if (n == 0) throw AssumptionError("sequence length must be at least 1");
  const double nn = static_cast<double>(n);
  const double r4 = r * r * r * r;
  return std::sqrt(3.0) * v_norm * std::sqrt(a_norm * a_norm * r4 * (4 * nn + 1) + nn);
}

double attention_lipschitz_per_head(const Tensor& q, const Tensor& k, const Tensor& v,
                                    std::size_t n, double r, const PowerIterationOptions& power) {
  return attention_lipschitz_per_head(attention_matrix_norm(q, k, power),
                                      spectral_norm(v, power).value, n, r);
}

MhaBound mha_bound(const std::vector<HeadNorms>& heads, std::size_t n, double r) {
  require_nonnegative(r, "radius");
  if (n == 0) throw AssumptionError("sequence length must be at least 1");
  const double nn = static_cast<double>(n);
  const double r4 = r * r * r * r;
  MhaBound out;
  out.norms = heads;
  for (const HeadNorms& h : heads) {
    const double term = h.o * h.v * std::sqrt(3 * nn + (12 * nn + 3) * r4 * h.a * h.a);
    out.per_head.push_back(term);
    out.total += term;
  }
  return out;
}

MhaBound mha_bound(const std::vector<HeadWeights>& heads, std::size_t n, double r,
                   const PowerIterationOptions& power) {
  std::vector<HeadNorms> norms;
  for (const HeadWeights& h : heads) norms.push_back(head_norms(h, power));
  return mha_bound(norms, n, r);
}

MhaBound mha_bound_tighter(const std::vector<HeadNorms>& heads, std::size_t n, double alpha,
                           double energy) {
  require_nonnegative(alpha, "alpha");
  require_nonnegative(energy, "energy");
  if (n == 0) throw AssumptionError("sequence length must be at least 1");
  MhaBound out;
  out.norms = heads;
  for (const HeadNorms& h : heads) {
    const double term =
        h.o * h.v * (std::sqrt(static_cast<double>(n)) + alpha * alpha * energy * h.a);
    out.per_head.push_back(term);
    out.total += term;
  }
  return out;
}

MhaBound mha_bound_tighter(const std::vector<HeadWeights>& heads, std::size_t n, double alpha,
                           double energy, const PowerIterationOptions& power) {
  std::vector<HeadNorms> norms;
  for (const HeadWeights& h : heads) norms.push_back(head_norms(h, power));
  return mha_bound_tighter(norms, n, alpha, energy);
}

SigmaEstimate estimate_sigma(const std::vector<Tensor>& sequences) {
  if (sequences.empty()) throw DataError("estimate_sigma needs at least one sequence");
  const std::size_t d = sequences.front().rows(), n = sequences.front().cols();
  std::vector<double> lo(n, INFINITY), hi(n, 0.0);
  for (const Tensor& x : sequences) {
    require_same_shape(x, sequences.front(), "estimate_sigma");
    for (std::size_t j = 0; j < n; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < d; ++i) mean += x(i, j);
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t i = 0; i < d; ++i) var += (x(i, j) - mean) * (x(i, j) - mean);
      const double s = std::sqrt(var / static_cast<double>(d));
      lo[j] = std::min(lo[j], s);
      hi[j] = std::max(hi[j], s);
    }
  }
  SigmaEstimate est;
  est.raw_min = *std::min_element(lo.begin(), lo.end());
  est.sigma_min = std::max(est.raw_min, kSigmaFloor);
  for (std::size_t j = 0; j < n; ++j) {
    est.position_spread = std::max(est.position_spread, hi[j] / std::max(lo[j], kSigmaFloor));
  }
  return est;
}

double embedding_alpha(const Model& model, const PowerIterationOptions& power) {
  return spectral_norm(model.params.at("embed.weight"), power).value;
}

double max_image_energy(const Tensor& images) {
  if (images.rank() != 4) throw DimensionError("images must be [N, C, H, W]");
  const std::size_t stride = images.size() / images.dim(0);
  double best = 0.0;
  for (std::size_t i = 0; i < images.dim(0); ++i) {
    double e = 0.0;
    for (std::size_t p = 0; p < stride; ++p) e += images[i * stride + p] * images[i * stride + p];
    best = std::max(best, e);
  }
  return best;
}

const SiteBound& BoundReport::site(std::size_t layer, ComponentKind kind) const {
  for (const SiteBound& s : sites) {
    if (s.layer == layer && s.kind == kind) return s;
  }
  throw DataError("no bound for " + std::string(component_name(kind)) + " at layer " +
                  std::to_string(layer));
}

BoundReport evaluate_all_bounds(const Model& model, const BoundInputs& inputs,
                                const PowerIterationOptions& power) {
  const ViTConfig& cfg = model.config;
  const ParameterStore& p = model.params;
  BoundReport report;
  report.config = cfg;
  report.inputs = inputs;
  report.energy_radius = inputs.alpha * std::sqrt(inputs.energy);

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    std::array<double, 5> values{};
    for (ComponentKind k : kComponentKinds) {
      SiteBound s;
      s.layer = l;
      s.kind = k;
      switch (k) {
        case ComponentKind::LN1:
        case ComponentKind::LN2: {
          const Tensor& gamma =
              p.at(block_param(l, k == ComponentKind::LN1 ? "ln1.gamma" : "ln2.gamma"));
          s.formula = BoundFormula::LayerNormGamma;
          s.gamma_inf = inf_norm(gamma.values());
          s.value = ln_bound(gamma, inputs.sigma_min);
          break;
        }
        case ComponentKind::FC1:
        case ComponentKind::FC2:
          s.formula = BoundFormula::WeightSpectral;
          s.weight_norm = fc_bound(
              p.at(block_param(l, k == ComponentKind::FC1 ? "fc1.weight" : "fc2.weight")), power);
          s.value = s.weight_norm;
          break;
        case ComponentKind::MHA: {
          std::vector<HeadNorms> norms;
          for (const HeadWeights& h : split_heads(attention_weights(model, l))) {
            norms.push_back(head_norms(h, power));
          }
          s.formula = BoundFormula::AttentionBall;
          s.heads = mha_bound(norms, inputs.n, inputs.r);
          s.value = s.heads->total;
          if (inputs.tighter) {
            s.heads_tighter = mha_bound_tighter(norms, inputs.n, inputs.alpha, inputs.energy);
          }
          break;
        }
      }
      values[static_cast<std::size_t>(k)] = s.value;
      report.sites.push_back(std::move(s));
    }
    report.layer_order.push_back(order_by(values));
    for (std::size_t i = 0; i < 5; ++i) {
      report.kind_means[i] += values[i] / static_cast<double>(cfg.num_layers);
    }
  }
  report.ranking = order_by(report.kind_means);
  return report;
}

}  // namespace vitplast
