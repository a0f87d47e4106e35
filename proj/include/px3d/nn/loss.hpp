#pragma once

#include <vector>

#include "px3d/nn/array.hpp"

namespace px3d::nn {

/// Mean over the batch of -log softmax(logits)[label]. logits (N,K).
Array cross_entropy(const Array& logits, const std::vector<int>& labels);

/// Mean binary cross-entropy on logits; targets in [0,1], same shape.
Array bce_with_logits(const Array& logits, const Array& targets);

/// 1 - mean over samples of (2 sum(p t) + eps) / (sum p + sum t + eps), p = sigmoid(logits).
Array dice_loss(const Array& logits, const Array& targets, double eps = 1.0);

}  // namespace px3d::nn
