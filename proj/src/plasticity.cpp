#include "vitplast/plasticity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "vitplast/errors.hpp"
#include "vitplast/linalg.hpp"
#include "vitplast/seeding.hpp"

namespace vitplast {

namespace {

// Consecutive coincident candidates tolerated before giving up.
constexpr std::size_t kMaxConsecutiveRejects = 1000;

Tensor hstack(const std::vector<Tensor>& blocks) {
  const std::size_t rows = blocks.front().rows(), n = blocks.front().cols();
  Tensor out({rows, n * blocks.size()});
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(blocks[b].data() + r * n, n, out.data() + r * out.cols() + b * n);
    }
  }
  return out;
}

// Walks one source through a new seeded permutation on every pass.
class Cycler {
 public:
  Cycler(std::size_t size, std::uint64_t seed) : size_(size), seed_(seed) {}

  std::size_t at(std::size_t k) {
    const std::size_t pass = k / size_;
    if (perm_.empty() || pass != pass_) {
      perm_.resize(size_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      std::mt19937_64 rng(stream_seed(seed_, pass));
      std::shuffle(perm_.begin(), perm_.end(), rng);
      pass_ = pass;
    }
    return perm_[k % size_];
  }

 private:
  std::size_t size_;
  std::uint64_t seed_;
  std::size_t pass_ = 0;
  std::vector<std::size_t> perm_;
};

struct RunningStats {
  std::size_t count = 0;
  double sum = 0.0, mean = 0.0, m2 = 0.0;
  double min = 0.0, max = 0.0;

  void add(double v) {
    ++count;
    sum += v;
    const double delta = v - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (v - mean);
    min = count == 1 ? v : std::min(min, v);
    max = count == 1 ? v : std::max(max, v);
  }
};

void check_source(const SequenceSource* s, const char* which) {
  if (s == nullptr) throw DataError(std::string("pair sampler has no source ") + which);
  if (s->size() == 0) throw DataError(std::string("source ") + which + " is empty");
}

}  // namespace

// ---- Sources ------------------------------------------------------------

EmbeddedImageSource::EmbeddedImageSource(const Model& model, const Tensor& images,
                                         std::string label)
    : model_(model), images_(images), label_(std::move(label)) {
  const ViTConfig& c = model.config;
  if (images.rank() != 4 || images.dim(1) != c.channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size) {
    throw DimensionError("images " + shape_string(images.shape()) + " do not fit the model");
  }
}

Tensor EmbeddedImageSource::sequence(std::size_t index) const {
  return embed_image(model_, image_at(images_, index));
}

GaussianTokenSource::GaussianTokenSource(std::size_t dim, std::size_t length, std::size_t count,
                                         std::uint64_t seed, double scale)
    : dim_(dim), length_(length), count_(count), seed_(seed), scale_(scale) {
  if (dim == 0 || length == 0) throw DimensionError("gaussian tokens need positive d and n");
}

Tensor GaussianTokenSource::sequence(std::size_t index) const {
  if (index >= count_) throw DataError("gaussian source index out of range");
  std::mt19937_64 rng(stream_seed(seed_, index));
  std::normal_distribution<double> normal(0.0, scale_);
  Tensor t({dim_, length_});
  for (double& v : t.values()) v = normal(rng);
  return t;
}

std::string GaussianTokenSource::describe() const {
  return "gaussian(d=" + std::to_string(dim_) + ",n=" + std::to_string(length_) +
         ",seed=" + std::to_string(seed_) + ")";
}

TensorListSource::TensorListSource(std::vector<Tensor> sequences, std::string label)
    : sequences_(std::move(sequences)), label_(std::move(label)) {
  if (sequences_.empty()) throw DataError("tensor list source is empty");
  for (const Tensor& t : sequences_) {
    require_matrix(t, "sequence");
    require_same_shape(t, sequences_.front(), "tensor list source");
  }
}

std::string_view probe_mode_name(ProbeMode mode) {
  return mode == ProbeMode::EmbeddingLevel ? "embedding" : "insitu";
}

ProbeMode parse_probe_mode(std::string_view name) {
  if (name == "embedding") return ProbeMode::EmbeddingLevel;
  if (name == "insitu") return ProbeMode::InSitu;
  throw Error("unknown probe mode '" + std::string(name) + "' (expected embedding|insitu)");
}

// ---- Pairs --------------------------------------------------------------

double PairSampler::effective_min_discrepancy() const {
  if (min_discrepancy > 0) return min_discrepancy;
  const auto dn = static_cast<double>(source_a ? source_a->dim() * source_a->length() : 1);
  return 1e-8 * std::sqrt(dn);
}

SampledPairs sample_pairs(const PairSampler& s) {
  check_source(s.source_a, "a");
  check_source(s.source_b, "b");
  if (s.num_pairs == 0) throw DataError("num_pairs must be at least 1");
  if (s.source_a->dim() != s.source_b->dim() || s.source_a->length() != s.source_b->length()) {
    throw DimensionError("sources yield sequences of different shapes");
  }
  const double min_gap = s.effective_min_discrepancy();
  Cycler ca(s.source_a->size(), stream_seed(s.seed, 0xa));
  Cycler cb(s.source_b->size(), stream_seed(s.seed, 0xb));

  SampledPairs out;
  std::size_t streak = 0;
  for (std::size_t k = 0; out.pairs.size() < s.num_pairs; ++k) {
    const SequencePair p{ca.at(k), cb.at(k)};
    const Tensor x = s.source_a->sequence(p.index_a);
    const Tensor y = s.source_b->sequence(p.index_b);
    if (frobenius_norm(x - y) < min_gap) {
      ++out.rejected;
      if (++streak > kMaxConsecutiveRejects) {
        throw DataError("sources cannot produce " + std::to_string(s.num_pairs) +
                        " distinct pairs (" + std::to_string(out.pairs.size()) + " found)");
      }
      continue;
    }
    streak = 0;
    out.pairs.push_back(p);
  }
  return out;
}

double rate_of_change(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                      const Tensor& y, double min_discrepancy) {
  require_same_shape(x, y, "rate_of_change");
  const double denom = frobenius_norm(x - y);
  if (denom == 0.0 || denom < min_discrepancy) {
    throw DegenerateInputError("rate_of_change: |x - y|_F = " + std::to_string(denom) +
                               " is below the minimum discrepancy");
  }
  return frobenius_norm(f(x) - f(y)) / denom;
}

Tensor lift_to_hidden(const Tensor& x) {
  require_matrix(x, "lift_to_hidden");
  const std::size_t d = x.rows(), n = x.cols();
  Tensor out({4 * d, n});
  std::copy_n(x.data(), d * n, out.data());
  return out;
}

TokenSequence lift_to_hidden(const TokenSequence& x) {
  if (x.dim_label != DimLabel::ModelDim) {
    throw DimensionError("lift_to_hidden expects model-dim tokens");
  }
  return {lift_to_hidden(x.tokens), DimLabel::HiddenDim};
}

// ---- Estimation ---------------------------------------------------------

const SiteSamples& PlasticityReport::site(std::size_t layer, ComponentKind kind) const {
  for (const SiteSamples& s : sites) {
    if (s.layer == layer && s.kind == kind) return s;
  }
  throw DataError("no site " + std::string(component_name(kind)) + " at layer " +
                  std::to_string(layer));
}

PlasticityReport estimate_plasticity(const Model& model, const PairSampler& sampler,
                                     const PlasticityOptions& options) {
  const ViTConfig& cfg = model.config;
  const SampledPairs sampled = sample_pairs(sampler);
  const std::size_t d = sampler.source_a->dim(), n = sampler.source_a->length();
  if (d != cfg.embed_dim) {
    throw DimensionError("source token dim " + std::to_string(d) + " != model dim " +
                         std::to_string(cfg.embed_dim));
  }
  if (options.mode == ProbeMode::InSitu && n != cfg.seq_len()) {
    throw DimensionError("in-situ probing needs sequences of the model length " +
                         std::to_string(cfg.seq_len()));
  }
  const double min_gap = sampler.effective_min_discrepancy();
  const std::size_t layers = cfg.num_layers;
  std::vector<RunningStats> stats(layers * 5);

  PlasticityReport report;
  report.config = cfg;
  report.mode = options.mode;
  report.seed = sampler.seed;
  report.num_pairs = sampler.num_pairs;
  report.rejected_pairs = sampled.rejected;
  report.min_discrepancy = min_gap;
  report.source_a = sampler.source_a->describe();
  report.source_b = sampler.source_b->describe();
  report.sites.resize(layers * 5);
  for (std::size_t l = 0; l < layers; ++l) {
    for (ComponentKind k : kComponentKinds) {
      SiteSamples& s = report.sites[l * 5 + static_cast<std::size_t>(k)];
      s.layer = l;
      s.kind = k;
    }
  }

  // Rate of pair b within batched outputs fx, fy over inputs ix, iy.
  auto block_rate = [n](const Tensor& fx, const Tensor& fy, double denom, std::size_t b) {
    return frobenius_norm(column_slice(fx, b * n, (b + 1) * n) -
                          column_slice(fy, b * n, (b + 1) * n)) /
           denom;
  };
  auto record = [&](std::size_t site, double rate) {
    stats[site].add(rate);
    if (report.sites[site].samples.size() < options.sample_cap) {
      report.sites[site].samples.push_back(rate);
    }
  };

  const std::size_t batch = std::max<std::size_t>(1, sampler.batch_size);
  for (std::size_t start = 0; start < sampled.pairs.size(); start += batch) {
    const std::size_t count = std::min(batch, sampled.pairs.size() - start);
    std::vector<Tensor> xs, ys;
    for (std::size_t b = 0; b < count; ++b) {
      xs.push_back(sampler.source_a->sequence(sampled.pairs[start + b].index_a));
      ys.push_back(sampler.source_b->sequence(sampled.pairs[start + b].index_b));
    }
    const Tensor x = hstack(xs), y = hstack(ys);

    if (options.mode == ProbeMode::EmbeddingLevel) {
      std::vector<double> denom(count);
      for (std::size_t b = 0; b < count; ++b) denom[b] = frobenius_norm(xs[b] - ys[b]);
      const Tensor x4 = lift_to_hidden(x), y4 = lift_to_hidden(y);
      for (std::size_t l = 0; l < layers; ++l) {
        for (ComponentKind k : kComponentKinds) {
          const bool lifted = k == ComponentKind::FC2;
          const Tensor fx = apply_component(model, l, k, lifted ? x4 : x, n);
          const Tensor fy = apply_component(model, l, k, lifted ? y4 : y, n);
          for (std::size_t b = 0; b < count; ++b) {
            record(l * 5 + static_cast<std::size_t>(k), block_rate(fx, fy, denom[b], b));
          }
        }
      }
    } else {
      ActivationTrace tx, ty;
      forward_tokens(model, x, FeatureTap::BlockOutput, &tx);
      forward_tokens(model, y, FeatureTap::BlockOutput, &ty);
      for (std::size_t l = 0; l < layers; ++l) {
        for (ComponentKind k : kComponentKinds) {
          const Tensor& ix = tx.input(l, k);
          const Tensor& iy = ty.input(l, k);
          const Tensor fx = apply_component(model, l, k, ix, n);
          const Tensor fy = apply_component(model, l, k, iy, n);
          for (std::size_t b = 0; b < count; ++b) {
            const double denom = frobenius_norm(column_slice(ix, b * n, (b + 1) * n) -
                                                column_slice(iy, b * n, (b + 1) * n));
            if (denom < min_gap) {
              throw DegenerateInputError("traced inputs of pair " + std::to_string(start + b) +
                                         " coincide at " + std::string(component_name(k)) +
                                         " layer " + std::to_string(l));
            }
            record(l * 5 + static_cast<std::size_t>(k), block_rate(fx, fy, denom, b));
          }
        }
      }
    }
  }

  for (std::size_t i = 0; i < stats.size(); ++i) {
    SiteSamples& s = report.sites[i];
    const RunningStats& r = stats[i];
    s.count = r.count;
    s.mean = r.sum / static_cast<double>(r.count);
    s.min = r.min;
    s.max = r.max;
    s.std_error = r.count > 1 ? std::sqrt(r.m2 / static_cast<double>(r.count - 1) /
                                          static_cast<double>(r.count))
                              : 0.0;
  }
  for (ComponentKind k : kComponentKinds) {
    double sum = 0.0;
    for (std::size_t l = 0; l < layers; ++l) sum += report.site(l, k).mean;
    report.kind_means[static_cast<std::size_t>(k)] =
        layers ? sum / static_cast<double>(layers) : 0.0;
  }
  report.ranking = kComponentKinds;
  std::stable_sort(report.ranking.begin(), report.ranking.end(),
                   [&](ComponentKind a, ComponentKind b) {
                     return report.kind_means[static_cast<std::size_t>(a)] >
                            report.kind_means[static_cast<std::size_t>(b)];
                   });
  return report;
}

double compute_radius(const std::vector<Tensor>& sequences) {
  if (sequences.empty()) throw DataError("compute_radius needs at least one sequence");
  double total = 0.0;
  for (const Tensor& x : sequences) {
    require_matrix(x, "compute_radius");
    total += frobenius_norm(x) / std::sqrt(static_cast<double>(x.cols()));
  }
  return total / static_cast<double>(sequences.size());
}

double compute_radius(const SequenceSource& source, std::size_t limit) {
  const std::size_t count = limit == 0 ? source.size() : std::min(limit, source.size());
  if (count == 0) throw DataError("compute_radius needs at least one sequence");
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const Tensor x = source.sequence(i);
    total += frobenius_norm(x) / std::sqrt(static_cast<double>(x.cols()));
  }
  return total / static_cast<double>(count);
}

}  // namespace vitplast
