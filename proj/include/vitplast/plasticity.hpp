#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "vitplast/model.hpp"
#include "vitplast/parameters.hpp"
#include "vitplast/tensor.hpp"

namespace vitplast {

/// Indexed collection of embedding-level token sequences (d x n each).
class SequenceSource {
 public:
  virtual ~SequenceSource() = default;
  virtual std::size_t size() const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::size_t length() const = 0;
  virtual Tensor sequence(std::size_t index) const = 0;
  virtual std::string describe() const = 0;
};

/// Images [N, C, H, W] pushed through the model's patch embedding.
class EmbeddedImageSource final : public SequenceSource {
 public:
  EmbeddedImageSource(const Model& model, const Tensor& images, std::string label = "images");
  std::size_t size() const override { return images_.dim(0); }
  std::size_t dim() const override { return model_.config.embed_dim; }
  std::size_t length() const override { return model_.config.seq_len(); }
  Tensor sequence(std::size_t index) const override;
  std::string describe() const override { return label_; }

 private:
  const Model& model_;
  const Tensor& images_;
  std::string label_;
};

/// Sequences with i.i.d. N(0, scale^2) coordinates. Sequence i is drawn
/// from its own stream keyed on (seed, i), so it does not depend on which
/// other sequences were requested.
class GaussianTokenSource final : public SequenceSource {
 public:
  GaussianTokenSource(std::size_t dim, std::size_t length, std::size_t count, std::uint64_t seed,
                      double scale = 1.0);
  std::size_t size() const override { return count_; }
  std::size_t dim() const override { return dim_; }
  std::size_t length() const override { return length_; }
  Tensor sequence(std::size_t index) const override;
  std::string describe() const override;

 private:
  std::size_t dim_, length_, count_;
  std::uint64_t seed_;
  double scale_;
};

/// Explicit list of sequences, all of one shape.
class TensorListSource final : public SequenceSource {
 public:
  explicit TensorListSource(std::vector<Tensor> sequences, std::string label = "list");
  std::size_t size() const override { return sequences_.size(); }
  std::size_t dim() const override { return sequences_.front().rows(); }
  std::size_t length() const override { return sequences_.front().cols(); }
  Tensor sequence(std::size_t index) const override { return sequences_.at(index); }
  std::string describe() const override { return label_; }

 private:
  std::vector<Tensor> sequences_;
  std::string label_;
};

enum class ProbeMode {
  EmbeddingLevel,  // every site sees the source sequences directly (FC2 lifted to 4d)
  InSitu,          // every site sees its traced input from a forward pass on the sources
};

std::string_view probe_mode_name(ProbeMode mode);
ProbeMode parse_probe_mode(std::string_view name);

/// Draws pairs (x from a, y from b). Each source is walked through a fresh
/// seeded permutation per pass, so the shorter source cycles. Pairs closer
/// than min_discrepancy in Frobenius norm are skipped and replaced by the
/// next candidate.
struct PairSampler {
  const SequenceSource* source_a = nullptr;
  const SequenceSource* source_b = nullptr;
  std::size_t num_pairs = 256;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double min_discrepancy = 0.0;  // <= 0 selects 1e-8 * sqrt(d n)

  double effective_min_discrepancy() const;
};

struct SequencePair {
  std::size_t index_a = 0;
  std::size_t index_b = 0;
};

struct SampledPairs {
  std::vector<SequencePair> pairs;
  std::size_t rejected = 0;
};

/// Deterministic pair list for the sampler. Throws DataError if a source is
/// empty or too many consecutive candidates coincide.
SampledPairs sample_pairs(const PairSampler& sampler);

/// |f(x) - f(y)|_F / |x - y|_F. Throws DegenerateInputError when
/// |x - y|_F < min_discrepancy (or x == y when that is 0).
double rate_of_change(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                      const Tensor& y, double min_discrepancy = 0.0);

/// Zero-pads each d-dim token into the first d coordinates of R^{4d}.
TokenSequence lift_to_hidden(const TokenSequence& x);
Tensor lift_to_hidden(const Tensor& x);

struct SiteSamples {
  std::size_t layer = 0;
  ComponentKind kind = ComponentKind::LN1;
  std::vector<double> samples;  // the first `sample_cap` rates, in pair order
  std::size_t count = 0;        // rates seen, including those beyond the cap
  double mean = 0.0;
  double std_error = 0.0;
  double min = 0.0;
  double max = 0.0;

  bool amplifying() const { return mean > 1.0; }  // otherwise contracting
};

struct PlasticityReport {
  ViTConfig config;
  ProbeMode mode = ProbeMode::EmbeddingLevel;
  std::uint64_t seed = 0;
  std::size_t num_pairs = 0;
  std::size_t rejected_pairs = 0;
  double min_discrepancy = 0.0;
  std::string source_a;
  std::string source_b;
  std::vector<SiteSamples> sites;            // layer-major, kinds in block order
  std::array<double, 5> kind_means{};        // mean over depth, indexed by kind
  std::array<ComponentKind, 5> ranking{};    // kinds by kind_means, largest first

  const SiteSamples& site(std::size_t layer, ComponentKind kind) const;
};

struct PlasticityOptions {
  ProbeMode mode = ProbeMode::EmbeddingLevel;
  std::size_t sample_cap = 10000;
};

/// Monte-Carlo plasticity of every (layer, kind) site. Pairs are evaluated
/// in batches of sampler.batch_size sequences laid side by side; results are
/// gathered in pair order, so the report does not depend on thread count.
PlasticityReport estimate_plasticity(const Model& model, const PairSampler& sampler,
                                     const PlasticityOptions& options = {});

/// Mean over sequences of sqrt((1/n) sum_i |x_i|^2).
double compute_radius(const std::vector<Tensor>& sequences);
double compute_radius(const SequenceSource& source, std::size_t limit = 0);

}  // namespace vitplast
