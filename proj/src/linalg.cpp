#include "vitplast/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "vitplast/errors.hpp"
#include "vitplast/kernels.hpp"

namespace vitplast {

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()));
  }
  Tensor c({a.rows(), b.cols()});
  kernels::gemm(a.rows(), b.cols(), a.cols(), a.data(), a.cols(), b.data(), b.cols(), c.data(),
                c.cols());
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  Tensor t({n, m});
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < m; i0 += kBlock) {
    for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
      const std::size_t i1 = std::min(m, i0 + kBlock);
      const std::size_t j1 = std::min(n, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) t(j, i) = a(i, j);
      }
    }
  }
  return t;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) { return matmul(transpose(a), b); }

Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }

Tensor gram_rows(const Tensor& a) {
  require_matrix(a, "gram_rows");
  Tensor c({a.rows(), a.rows()});
  kernels::gram(a.rows(), a.cols(), a.data(), a.cols(), c.data(), a.rows());
  return c;
}

double euclidean_norm(std::span<const double> v) {
  // Scaled accumulation avoids overflow for very large entries.
  double scale = 0.0;
  for (double x : v) scale = std::max(scale, std::abs(x));
  if (scale == 0.0 || !std::isfinite(scale)) return scale;
  double s = 0.0;
  for (double x : v) {
    const double y = x / scale;
    s += y * y;
  }
  return scale * std::sqrt(s);
}

double frobenius_norm(const Tensor& a) { return euclidean_norm(a.values()); }

double inf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

SpectralNormResult power_iteration_gram(
    const std::function<void(std::span<const double>, std::span<double>)>& apply_gram,
    std::size_t dim, std::uint64_t start_seed, const PowerIterationOptions& options) {
  if (!(options.tol > 0.0) || options.max_iters < 1) {
    throw AssumptionError("power iteration needs tol > 0 and max_iters >= 1");
  }
  std::mt19937_64 rng(start_seed);
  std::normal_distribution<double> normal;
  std::vector<double> v(dim);
  std::vector<double> w(dim);
  for (double& x : v) x = normal(rng);
  double vn = euclidean_norm(v);
  for (double& x : v) x /= vn;

  SpectralNormResult result;
  double previous = -1.0;
  double previous_delta = -1.0;
  for (int it = 1; it <= options.max_iters; ++it) {
    apply_gram(v, w);
    // Rayleigh quotient of the Gram operator = sigma^2 estimate.
    const double lambda = std::max(0.0, dot(v, w));
    const double estimate = std::sqrt(lambda);
    result.value = estimate;
    result.iterations = it;
    const double wn = euclidean_norm(w);
    if (wn == 0.0) {
      // v landed in the null space; the operator is zero on it.
      result.converged = previous == 0.0;
      if (result.converged) break;
      previous = 0.0;
      for (std::size_t i = 0; i < dim; ++i) v[i] = normal(rng);
      vn = euclidean_norm(v);
      for (double& x : v) x /= vn;
      continue;
    }
    // Tested on the Gram eigenvalue, the quantity the iteration estimates.
    // Besides the successive-difference rule, the geometric tail
    // delta * q / (1 - q), with q the observed contraction of the
    // differences, must also be below tol; near-tied top eigenvalues
    // otherwise stop far from the limit.
    if (previous >= 0.0) {
      const double delta = std::abs(lambda - previous);
      const double limit = options.tol * lambda;
      bool done = delta <= 8.0 * std::numeric_limits<double>::epsilon() * lambda;
      if (!done && delta < limit && previous_delta > 0.0) {
        const double q = delta / previous_delta;
        done = q < 1.0 && delta * q / (1.0 - q) < limit;
      }
      if (done) {
        result.converged = true;
        break;
      }
      previous_delta = delta;
    }
    previous = lambda;
    for (std::size_t i = 0; i < dim; ++i) v[i] = w[i] / wn;
  }
  return result;
}

SpectralNormResult spectral_norm(const Tensor& a, const PowerIterationOptions& options) {
  if (!(options.tol > 0.0) || options.max_iters < 1) {
    throw AssumptionError("spectral_norm needs tol > 0 and max_iters >= 1");
  }
  Tensor m = a.rank() == 2 ? a : a.reshaped({a.size(), 1});
  if (inf_norm(m.values()) == 0.0) return {0.0, 0, true};

  const std::size_t rows = m.rows();
  const std::size_t cols = m.cols();
  // Gram of the smaller side: (cols x cols) = m^T m, or (rows x rows) = m m^T.
  const bool use_right = cols <= rows;
  Tensor gram = use_right ? gram_rows(transpose(m)) : gram_rows(m);
  const std::size_t g = gram.rows();

  std::uint64_t state = options.seed;
  std::uint64_t seed = splitmix64(state);
  state ^= static_cast<std::uint64_t>(std::min(rows, cols)) * 0x100000001b3ULL;
  seed ^= splitmix64(state);
  state ^= static_cast<std::uint64_t>(std::max(rows, cols)) * 0xc2b2ae3d27d4eb4fULL;
  seed ^= splitmix64(state);

  // Large Grams: iterate on (G / c)^16 instead. Same dominant eigenvector,
  // the contraction per step is raised to the 16th power, and each
  // squaring is a single GEMM. c keeps the powers in floating-point range.
  int squarings = 0;
  double scale = 1.0;
  if (g >= kGramSquaringMinDim) {
    scale = inf_norm(gram.values());
    for (double& x : gram.values()) x /= scale;
    for (; squarings < kGramSquarings; ++squarings) gram = gram_rows(gram);  // G symmetric
  }
  auto apply = [&](std::span<const double> v, std::span<double> out) {
    kernels::gemv(g, g, gram.data(), v.data(), out.data());
  };
  SpectralNormResult r = power_iteration_gram(apply, g, seed, options);
  if (squarings > 0) {
    const double lambda = scale * std::pow(r.value * r.value, 1.0 / (1 << squarings));
    r.value = std::sqrt(lambda);
  }
  return r;
}

double norm(const Tensor& a, NormKind kind) {
  switch (kind) {
    case NormKind::Frobenius:
    case NormKind::Euclidean:
      return frobenius_norm(a);
    case NormKind::Spectral:
      return spectral_norm(a).value;
    case NormKind::InfVector:
      return inf_norm(a.values());
  }
  return 0.0;
}

void softmax_inplace(std::span<double> row) {
  if (row.empty()) return;
  const double mx = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double& x : row) {
    x = std::exp(x - mx);
    s += x;
  }
  for (double& x : row) x /= s;
}

Tensor softmax_rows(const Tensor& a) {
  Tensor m = a.rank() == 2 ? a : a.reshaped({1, a.size()});
  const std::size_t cols = m.cols();
  for (std::size_t i = 0; i < m.rows(); ++i) softmax_inplace({m.data() + i * cols, cols});
  return a.rank() == 2 ? m : m.reshaped(a.shape());
}

NormLemmaVerdict check_norm_lemma(const Tensor& a, const Tensor& b, double relative_slack) {
  const Tensor ab = matmul(a, b);
  const double lhs = frobenius_norm(ab);
  const double fa = frobenius_norm(a);
  const double fb = frobenius_norm(b);
  const double sa = spectral_norm(a).value;
  const double sb = spectral_norm(b).value;
  auto holds = [&](double rhs) { return lhs <= rhs * (1.0 + relative_slack); };
  return {holds(fa * fb), holds(sa * fb), holds(fa * sb)};
}

double softmax_lipschitz_witness(const Tensor& u, const Tensor& v) {
  if (u.size() != v.size()) throw DimensionError("softmax_lipschitz_witness: length mismatch");
  const Tensor diff_in = (u - v).reshaped({u.size()});
  const double denom = euclidean_norm(diff_in.values());
  if (denom == 0.0) throw DegenerateInputError("softmax_lipschitz_witness: u == v");
  Tensor su = u.reshaped({u.size()});
  Tensor sv = v.reshaped({v.size()});
  softmax_inplace(su.values());
  softmax_inplace(sv.values());
  return euclidean_norm((su - sv).values()) / denom;
}

}  // namespace vitplast
