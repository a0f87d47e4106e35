#pragma once

#include <vector>

#include "px3d/nn/array.hpp"

namespace px3d::nn {

// Elementwise; operands must have identical shapes.
Array add(const Array& a, const Array& b);
Array sub(const Array& a, const Array& b);
Array mul(const Array& a, const Array& b);
Array scale(const Array& a, double k);
Array relu(const Array& x);
Array sigmoid(const Array& x);
/// Exact GELU, x * Phi(x).
Array gelu(const Array& x);

Array sum(const Array& x);
Array mean(const Array& x);
Array reshape(const Array& x, Shape shape);

Array concat(const std::vector<Array>& parts, int axis);
Array narrow(const Array& x, int axis, std::int64_t start, std::int64_t length);
/// Mean over one axis, which is removed.
Array mean_axis(const Array& x, int axis);

/// Zero-pads the trailing two axes on the bottom/right to (rows, cols).
Array pad2d(const Array& x, std::int64_t rows, std::int64_t cols);
/// Keeps the top-left (rows, cols) of the trailing two axes.
Array crop2d(const Array& x, std::int64_t rows, std::int64_t cols);

/// Stride-1 convolution with "same" zero padding. x is (N,C,H,W) with
/// weight (O,C,k,k), or (N,C,D,H,W) with weight (O,C,k,k,k); k odd.
Array conv(const Array& x, const Array& weight, const Array& bias);

struct BatchNormState {
    std::vector<double>* running_mean;
    std::vector<double>* running_var;
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Per-channel (axis 1) batch normalization. Training mode normalizes with
/// batch statistics and updates the running buffers; evaluation mode uses them.
Array batch_norm(const Array& x, const Array& gamma, const Array& beta, const BatchNormState& state, bool training);

/// 2x2 (4D input) or 2x2x2 (5D input) max pooling; odd sizes are zero-padded
/// on the far side first.
Array max_pool2(const Array& x);
/// Bilinear resize of the trailing two axes (half-pixel centers, edge clamp).
Array resize_bilinear(const Array& x, std::int64_t rows, std::int64_t cols);
/// Doubles H and W bilinearly, then crops to (rows, cols) when given.
Array upsample2(const Array& x, std::int64_t rows = -1, std::int64_t cols = -1);

/// Mean over all axes after the channel axis: (N,C,...) -> (N,C).
Array global_avg_pool(const Array& x);
/// x (N,F), weight (O,F), bias (O) -> (N,O).
Array linear(const Array& x, const Array& weight, const Array& bias);
/// x (N,C,...) times s (N,C) broadcast over the spatial axes.
Array channel_scale(const Array& x, const Array& s);
/// Row-wise L2 normalization of (N,E).
Array l2_normalize(const Array& x);

enum class MixMode { local, global };

/// Token mixing for the multi-axis gated MLP on (N,C,H,W), H and W divisible
/// by block. local: tokens are the block*block positions inside each window;
/// global: tokens are the cells of a block x block grid, mixed at equal
/// in-cell offsets. weight (P,P), bias (P), P = block*block.
Array spatial_mix(const Array& x, const Array& weight, const Array& bias, int block, MixMode mode);

}  // namespace px3d::nn
