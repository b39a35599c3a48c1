#pragma once

#include <cstddef>
#include <span>

#include "vitplast/model.hpp"
#include "vitplast/parameters.hpp"

namespace vitplast {

/// Mean softmax cross-entropy over the columns of logits (classes x B).
/// Writes d loss / d logits when `dlogits` is non-null. Labels must be in
/// [0, classes).
double cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits = nullptr);

struct LossAndGradients {
  double loss = 0.0;
  std::size_t correct = 0;  // argmax hits in the batch
  Gradients grads;          // slots set only for trainable entries
};

/// Loss and gradients of images[indices] with the given labels.
///
/// Reverse mode runs only as deep as the lowest trainable tensor: with just
/// the head trainable the blocks are evaluated forward only.
LossAndGradients backward(const Model& model, const Tensor& images,
                          std::span<const std::size_t> indices, std::span<const int> labels,
                          FeatureTap tap = FeatureTap::BlockOutput);

/// Same, starting from precomputed head features (d x B). Only head
/// tensors receive gradients; used for linear probing on cached features.
LossAndGradients head_backward(const Model& model, const Tensor& features,
                               std::span<const int> labels);

/// Loss only; no gradients, nothing cached.
double evaluate_loss(const Model& model, const Tensor& images,
                     std::span<const std::size_t> indices, std::span<const int> labels,
                     FeatureTap tap = FeatureTap::BlockOutput);

}  // namespace vitplast
