#pragma once

#include <cstddef>
#include <vector>

#include "vitplast/tensor.hpp"

// Block components acting on token matrices. A token matrix is d x T with
// one token per column; T may hold several sequences of length `seq_len`
// side by side, in which case attention mixes tokens only within each
// sequence and every other operation is per column. Evaluating a batch this
// way gives bit-identical columns to evaluating each sequence alone.

namespace vitplast {

enum class DimLabel { ModelDim, HiddenDim };

struct TokenSequence {
  Tensor tokens;  // dim x n
  DimLabel dim_label = DimLabel::ModelDim;

  std::size_t dim() const { return tokens.rows(); }
  std::size_t length() const { return tokens.cols(); }
};

double gelu(double x);
double gelu_derivative(double x);

// ---- LayerNorm ---------------------------------------------------------

struct LayerNormCache {
  Tensor xhat;                  // normalized tokens, d x T
  std::vector<double> inv_std;  // 1 / sqrt(var + eps) per token
};

/// gamma * (x - mean) / sqrt(var + eps) + beta per token, population variance.
Tensor layer_norm(const Tensor& gamma, const Tensor& beta, double eps, const Tensor& x,
                  LayerNormCache* cache = nullptr);

/// Returns dx; accumulates into dgamma / dbeta when they are non-null.
Tensor layer_norm_backward(const Tensor& gamma, const LayerNormCache& cache, const Tensor& dy,
                           Tensor* dgamma, Tensor* dbeta);

// ---- Linear ------------------------------------------------------------

/// W x + b with b broadcast over columns; `bias` may be null.
Tensor linear(const Tensor& weight, const Tensor* bias, const Tensor& x);

/// Returns W^T dy when `want_dx`, otherwise an empty scalar tensor.
/// Accumulates dy x^T into dweight and row sums of dy into dbias.
Tensor linear_backward(const Tensor& weight, const Tensor& x, const Tensor& dy, Tensor* dweight,
                       Tensor* dbias, bool want_dx = true);

// ---- Multi-head attention ---------------------------------------------

struct AttentionWeights {
  const Tensor* qkv_weight = nullptr;  // 3d x d: rows [0,d) Q, [d,2d) K, [2d,3d) V
  const Tensor* qkv_bias = nullptr;    // 3d, optional
  const Tensor* out_weight = nullptr;  // d x d
  const Tensor* out_bias = nullptr;    // d, optional
  std::size_t num_heads = 1;
};

struct AttentionCache {
  Tensor qkv;                       // 3d x T
  std::vector<std::vector<double>> probs;  // [seq * H + h] -> n x n row-major
  Tensor z;                         // concatenated head outputs, d x T
};

/// sum_h O^h (V^h x) softmax((Q^h x)^T K^h x / sqrt(k))^T with k = d / H.
/// Output token i of head h is sum_j S_ij V^h x_j.
Tensor multi_head_attention(const AttentionWeights& w, const Tensor& x, std::size_t seq_len = 0,
                            AttentionCache* cache = nullptr);

struct AttentionGrads {
  Tensor* qkv_weight = nullptr;
  Tensor* qkv_bias = nullptr;
  Tensor* out_weight = nullptr;
  Tensor* out_bias = nullptr;
};

Tensor attention_backward(const AttentionWeights& w, const Tensor& x, std::size_t seq_len,
                          const AttentionCache& cache, const Tensor& dy,
                          const AttentionGrads& grads, bool want_dx = true);

// ---- Feedforward --------------------------------------------------------

/// W2 gelu(W1 x + b1) + b2.
Tensor feedforward(const Tensor& w1, const Tensor* b1, const Tensor& w2, const Tensor* b2,
                   const Tensor& x);

// ---- Per-head views -----------------------------------------------------

// Q^h, K^h, V^h are k x d row blocks of the fused weight; O^h is the d x k
// column block of the output weight.
Tensor head_query(const Tensor& qkv_weight, std::size_t head, std::size_t num_heads);
Tensor head_key(const Tensor& qkv_weight, std::size_t head, std::size_t num_heads);
Tensor head_value(const Tensor& qkv_weight, std::size_t head, std::size_t num_heads);
Tensor head_output(const Tensor& out_weight, std::size_t head, std::size_t num_heads);

}  // namespace vitplast
