#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "vitplast/tensor.hpp"

namespace vitplast {

enum class NormKind { Frobenius, Spectral, InfVector, Euclidean };

Tensor matmul(const Tensor& a, const Tensor& b);
// a^T b and a b^T without the caller materialising the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// a a^T, exactly symmetric.
Tensor gram_rows(const Tensor& a);
Tensor transpose(const Tensor& a);

double frobenius_norm(const Tensor& a);
double euclidean_norm(std::span<const double> v);
double inf_norm(std::span<const double> v);

struct PowerIterationOptions {
  double tol = 1e-10;
  int max_iters = 10000;
  std::uint64_t seed = 0x9e3779b97f4a7c15ULL;
};

struct SpectralNormResult {
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Largest singular value by power iteration on the Gram operator a^T a.
///
/// The Gram matrix of the smaller side is formed once (the nonzero spectra of
/// a^T a and a a^T coincide), so the result is identical for a and a^T. The
/// start vector is drawn from `seed` mixed with the shape. Iteration stops
/// once successive estimates of sigma_max^2 differ by less than
/// tol * estimate and the extrapolated remaining change is below that too.
/// If that never happens the last estimate is returned with
/// converged == false. An all-zero input returns 0 without iterating.
/// Grams of at least this size are iterated as (a^T a)^16, formed by four
/// GEMM squarings, which cuts the iteration count on spectra with near-tied
/// top values by about that factor. Smaller ones use a^T a directly.
inline constexpr std::size_t kGramSquaringMinDim = 256;
inline constexpr int kGramSquarings = 4;

SpectralNormResult spectral_norm(const Tensor& a, const PowerIterationOptions& options = {});

/// Power iteration for an implicit symmetric PSD operator of size `dim`
/// (typically v -> a^T a v applied in factored form). Returns sqrt of the
/// dominant eigenvalue estimate.
SpectralNormResult power_iteration_gram(
    const std::function<void(std::span<const double>, std::span<double>)>& apply_gram,
    std::size_t dim, std::uint64_t start_seed, const PowerIterationOptions& options = {});

double norm(const Tensor& a, NormKind kind);

/// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& a);
void softmax_inplace(std::span<double> row);

struct NormLemmaVerdict {
  bool frobenius_submultiplicative = false;  // |ab|_F <= |a|_F |b|_F
  bool spectral_left = false;                // |ab|_F <= |a|_2 |b|_F
  bool spectral_right = false;               // |ab|_F <= |a|_F |b|_2
  bool all() const { return frobenius_submultiplicative && spectral_left && spectral_right; }
};

inline constexpr double kNormLemmaSlack = 1e-10;

NormLemmaVerdict check_norm_lemma(const Tensor& a, const Tensor& b,
                                  double relative_slack = kNormLemmaSlack);

/// |softmax(u) - softmax(v)| / |u - v| for vectors of equal length.
/// Throws DegenerateInputError when u == v.
double softmax_lipschitz_witness(const Tensor& u, const Tensor& v);

}  // namespace vitplast
