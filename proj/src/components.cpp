#include "vitplast/components.hpp"

#include <cmath>
#include <numbers>

#include "vitplast/errors.hpp"
#include "vitplast/kernels.hpp"
#include "vitplast/linalg.hpp"

namespace vitplast {

double gelu(double x) { return 0.5 * x * std::erfc(-x / std::numbers::sqrt2); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Tensor layer_norm(const Tensor& gamma, const Tensor& beta, double eps, const Tensor& x,
                  LayerNormCache* cache) {
  require_matrix(x, "layer_norm");
  const std::size_t d = x.rows();
  const std::size_t t_count = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: gamma/beta length does not match token dim " +
                         std::to_string(d));
  }
  std::vector<double> mean(t_count, 0.0);
  std::vector<double> var(t_count, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const double* row = x.data() + i * t_count;
    for (std::size_t t = 0; t < t_count; ++t) mean[t] += row[t];
  }
  for (double& m : mean) m /= static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double* row = x.data() + i * t_count;
    for (std::size_t t = 0; t < t_count; ++t) {
      const double c = row[t] - mean[t];
      var[t] += c * c;
    }
  }
  std::vector<double> inv(t_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    inv[t] = 1.0 / std::sqrt(var[t] / static_cast<double>(d) + eps);
  }

  Tensor y({d, t_count});
  if (cache) cache->xhat = Tensor({d, t_count});
  for (std::size_t i = 0; i < d; ++i) {
    const double* row = x.data() + i * t_count;
    double* out = y.data() + i * t_count;
    const double g = gamma[i];
    const double b = beta[i];
    for (std::size_t t = 0; t < t_count; ++t) {
      const double xh = (row[t] - mean[t]) * inv[t];
      if (cache) cache->xhat[i * t_count + t] = xh;
      out[t] = g * xh + b;
    }
  }
  if (cache) cache->inv_std = std::move(inv);
  return y;
}

Tensor layer_norm_backward(const Tensor& gamma, const LayerNormCache& cache, const Tensor& dy,
                           Tensor* dgamma, Tensor* dbeta) {
  const Tensor& xhat = cache.xhat;
  require_same_shape(xhat, dy, "layer_norm_backward");
  const std::size_t d = dy.rows();
  const std::size_t t_count = dy.cols();
  std::vector<double> s1(t_count, 0.0);
  std::vector<double> s2(t_count, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const double* g = dy.data() + i * t_count;
    const double* xh = xhat.data() + i * t_count;
    double gsum = 0.0;
    double bsum = 0.0;
    for (std::size_t t = 0; t < t_count; ++t) {
      const double dxh = g[t] * gamma[i];
      s1[t] += dxh;
      s2[t] += dxh * xh[t];
      gsum += g[t] * xh[t];
      bsum += g[t];
    }
    if (dgamma) (*dgamma)[i] += gsum;
    if (dbeta) (*dbeta)[i] += bsum;
  }
  Tensor dx({d, t_count});
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double* g = dy.data() + i * t_count;
    const double* xh = xhat.data() + i * t_count;
    double* out = dx.data() + i * t_count;
    for (std::size_t t = 0; t < t_count; ++t) {
      const double dxh = g[t] * gamma[i];
      out[t] = cache.inv_std[t] * (dxh - s1[t] * inv_d - xh[t] * s2[t] * inv_d);
    }
  }
  return dx;
}

Tensor linear(const Tensor& weight, const Tensor* bias, const Tensor& x) {
  Tensor y = matmul(weight, x);
  if (bias) {
    if (bias->size() != y.rows()) throw DimensionError("linear: bias length mismatch");
    const std::size_t t_count = y.cols();
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double* row = y.data() + i * t_count;
      const double b = (*bias)[i];
      for (std::size_t t = 0; t < t_count; ++t) row[t] += b;
    }
  }
  return y;
}

Tensor linear_backward(const Tensor& weight, const Tensor& x, const Tensor& dy, Tensor* dweight,
                       Tensor* dbias, bool want_dx) {
  if (dweight) add_inplace(*dweight, matmul(dy, transpose(x)));
  if (dbias) {
    const std::size_t t_count = dy.cols();
    for (std::size_t i = 0; i < dy.rows(); ++i) {
      const double* row = dy.data() + i * t_count;
      double s = 0.0;
      for (std::size_t t = 0; t < t_count; ++t) s += row[t];
      (*dbias)[i] += s;
    }
  }
  if (!want_dx) return Tensor();
  return matmul(transpose(weight), dy);
}

namespace {

struct AttentionShape {
  std::size_t d, t_count, n, seqs, heads, k;
};

AttentionShape attention_shape(const AttentionWeights& w, const Tensor& x, std::size_t seq_len) {
  require_matrix(x, "multi_head_attention");
  if (!w.qkv_weight || !w.out_weight) throw Error("multi_head_attention: missing weights");
  AttentionShape s{};
  s.d = x.rows();
  s.t_count = x.cols();
  s.n = seq_len ? seq_len : s.t_count;
  s.heads = w.num_heads;
  if (s.heads == 0 || s.d % s.heads != 0) {
    throw DimensionError("multi_head_attention: d=" + std::to_string(s.d) +
                         " not divisible by H=" + std::to_string(s.heads));
  }
  if (s.t_count % s.n != 0) throw DimensionError("multi_head_attention: ragged batch");
  if (w.qkv_weight->shape() != Shape{3 * s.d, s.d} || w.out_weight->shape() != Shape{s.d, s.d}) {
    throw DimensionError("multi_head_attention: weight shapes do not match d=" +
                         std::to_string(s.d));
  }
  s.seqs = s.t_count / s.n;
  s.k = s.d / s.heads;
  return s;
}

// Copy a rows x cols block with leading dimension ld into its transpose.
void transpose_block(const double* src, std::size_t ld, std::size_t rows, std::size_t cols,
                     double* dst) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * ld + j];
  }
}

}  // namespace

Tensor multi_head_attention(const AttentionWeights& w, const Tensor& x, std::size_t seq_len,
                            AttentionCache* cache) {
  const AttentionShape s = attention_shape(w, x, seq_len);
  Tensor qkv = linear(*w.qkv_weight, w.qkv_bias, x);
  Tensor z({s.d, s.t_count});
  const std::size_t T = s.t_count;
  const std::size_t n = s.n;
  const std::size_t k = s.k;
  const double scale = 1.0 / std::sqrt(static_cast<double>(k));
  if (cache) cache->probs.assign(s.seqs * s.heads, {});

  const long jobs = static_cast<long>(s.seqs * s.heads);
#pragma omp parallel for schedule(static) num_threads(kernels::thread_limit()) if (jobs > 1)
  for (long job = 0; job < jobs; ++job) {
    const std::size_t seq = static_cast<std::size_t>(job) / s.heads;
    const std::size_t h = static_cast<std::size_t>(job) % s.heads;
    const std::size_t col = seq * n;
    const double* q = qkv.data() + (h * k) * T + col;
    const double* kk = qkv.data() + (s.d + h * k) * T + col;
    const double* v = qkv.data() + (2 * s.d + h * k) * T + col;

    std::vector<double> qt(n * k);
    transpose_block(q, T, k, n, qt.data());
    std::vector<double> p(n * n);
    kernels::gemm(n, n, k, qt.data(), k, kk, T, p.data(), n);
    for (double& e : p) e *= scale;
    for (std::size_t i = 0; i < n; ++i) softmax_inplace({p.data() + i * n, n});

    std::vector<double> pt(n * n);
    transpose_block(p.data(), n, n, n, pt.data());
    kernels::gemm(k, n, n, v, T, pt.data(), n, z.data() + (h * k) * T + col, T);
    if (cache) cache->probs[static_cast<std::size_t>(job)] = std::move(p);
  }

  Tensor out = linear(*w.out_weight, w.out_bias, z);
  if (cache) {
    cache->qkv = std::move(qkv);
    cache->z = std::move(z);
  }
  return out;
}

Tensor attention_backward(const AttentionWeights& w, const Tensor& x, std::size_t seq_len,
                          const AttentionCache& cache, const Tensor& dy,
                          const AttentionGrads& grads, bool want_dx) {
  const AttentionShape s = attention_shape(w, x, seq_len);
  const std::size_t T = s.t_count;
  const std::size_t n = s.n;
  const std::size_t k = s.k;
  const double scale = 1.0 / std::sqrt(static_cast<double>(k));

  const Tensor dz =
      linear_backward(*w.out_weight, cache.z, dy, grads.out_weight, grads.out_bias, true);
  Tensor dqkv({3 * s.d, T});
  const Tensor& qkv = cache.qkv;

  const long jobs = static_cast<long>(s.seqs * s.heads);
#pragma omp parallel for schedule(static) num_threads(kernels::thread_limit()) if (jobs > 1)
  for (long job = 0; job < jobs; ++job) {
    const std::size_t seq = static_cast<std::size_t>(job) / s.heads;
    const std::size_t h = static_cast<std::size_t>(job) % s.heads;
    const std::size_t col = seq * n;
    const double* q = qkv.data() + (h * k) * T + col;
    const double* kk = qkv.data() + (s.d + h * k) * T + col;
    const double* v = qkv.data() + (2 * s.d + h * k) * T + col;
    const double* dzh = dz.data() + (h * k) * T + col;
    const std::vector<double>& p = cache.probs[static_cast<std::size_t>(job)];

    // Z = V P^T  =>  dV = dZ P,  dP = dZ^T V.
    kernels::gemm(k, n, n, dzh, T, p.data(), n, dqkv.data() + (2 * s.d + h * k) * T + col, T);
    std::vector<double> dzt(n * k);
    transpose_block(dzh, T, k, n, dzt.data());
    std::vector<double> g(n * n);
    kernels::gemm(n, n, k, dzt.data(), k, v, T, g.data(), n);

    // Row-wise softmax Jacobian, then the 1/sqrt(k) of the scores.
    for (std::size_t i = 0; i < n; ++i) {
      const double* pr = p.data() + i * n;
      double* gr = g.data() + i * n;
      double dotp = 0.0;
      for (std::size_t j = 0; j < n; ++j) dotp += pr[j] * gr[j];
      for (std::size_t j = 0; j < n; ++j) gr[j] = pr[j] * (gr[j] - dotp) * scale;
    }
    // scores = Q^T K  =>  dQ = K G^T,  dK = Q G.
    std::vector<double> gt(n * n);
    transpose_block(g.data(), n, n, n, gt.data());
    kernels::gemm(k, n, n, kk, T, gt.data(), n, dqkv.data() + (h * k) * T + col, T);
    kernels::gemm(k, n, n, q, T, g.data(), n, dqkv.data() + (s.d + h * k) * T + col, T);
  }

  return linear_backward(*w.qkv_weight, x, dqkv, grads.qkv_weight, grads.qkv_bias, want_dx);
}

Tensor feedforward(const Tensor& w1, const Tensor* b1, const Tensor& w2, const Tensor* b2,
                   const Tensor& x) {
  Tensor h = linear(w1, b1, x);
  for (double& v : h.values()) v = gelu(v);
  return linear(w2, b2, h);
}

namespace {

std::size_t checked_head_dim(std::size_t d, std::size_t head, std::size_t num_heads) {
  if (num_heads == 0 || d % num_heads != 0 || head >= num_heads) {
    throw DimensionError("bad head index " + std::to_string(head) + " of " +
                         std::to_string(num_heads) + " for d=" + std::to_string(d));
  }
  return d / num_heads;
}

}  // namespace

Tensor head_query(const Tensor& qkv_weight, std::size_t head, std::size_t num_heads) {
  const std::size_t d = qkv_weight.cols();
  const std::size_t k = checked_head_dim(d, head, num_heads);
  return row_slice(qkv_weight, head * k, (head + 1) * k);
}

Tensor head_key(const Tensor& qkv_weight, std::size_t head, std::size_t num_heads) {
  const std::size_t d = qkv_weight.cols();
  const std::size_t k = checked_head_dim(d, head, num_heads);
  return row_slice(qkv_weight, d + head * k, d + (head + 1) * k);
}

Tensor head_value(const Tensor& qkv_weight, std::size_t head, std::size_t num_heads) {
  const std::size_t d = qkv_weight.cols();
  const std::size_t k = checked_head_dim(d, head, num_heads);
  return row_slice(qkv_weight, 2 * d + head * k, 2 * d + (head + 1) * k);
}

Tensor head_output(const Tensor& out_weight, std::size_t head, std::size_t num_heads) {
  const std::size_t d = out_weight.rows();
  const std::size_t k = checked_head_dim(d, head, num_heads);
  return column_slice(out_weight, head * k, (head + 1) * k);
}

}  // namespace vitplast
