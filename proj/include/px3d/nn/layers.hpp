#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "px3d/nn/array.hpp"
#include "px3d/nn/ops.hpp"

namespace px3d::nn {

using Rng = std::mt19937_64;

struct ParamRef {
    std::string name;
    Array param;
};

struct BufferRef {
    std::string name;
    std::vector<double>* data;
};

/// Flat, ordered view of a model's trainable parameters and running buffers.
struct ParamList {
    std::vector<ParamRef> params;
    std::vector<BufferRef> buffers;

    void add(const std::string& name, const Array& p) { params.push_back({name, p}); }
    void add_buffer(const std::string& name, std::vector<double>& b) { buffers.push_back({name, &b}); }
    std::int64_t parameter_count() const;
    void zero_grad();
};

/// He-normal weights with std sqrt(2 / fan_in).
Array he_normal(Shape shape, std::int64_t fan_in, Rng& rng);

/// 'Same'-padded convolution, 2D (spatial_rank 2) or 3D (spatial_rank 3).
struct Conv {
    Array weight, bias;
    std::int64_t in = 0, out = 0;
    int kernel = 3;

    Conv() = default;
    Conv(std::int64_t in, std::int64_t out, int kernel, int spatial_rank, Rng& rng);
    Array operator()(const Array& x) const;
    void collect(ParamList& list, const std::string& prefix) const;
};

struct BatchNorm {
    Array gamma, beta;
    std::vector<double> running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    BatchNorm() = default;
    explicit BatchNorm(std::int64_t channels);
    Array operator()(const Array& x, bool training);
    void collect(ParamList& list, const std::string& prefix);
};

struct Linear {
    Array weight, bias;

    Linear() = default;
    Linear(std::int64_t in, std::int64_t out, Rng& rng);
    Array operator()(const Array& x) const;
    void collect(ParamList& list, const std::string& prefix) const;
};

/// conv3 -> BN -> ReLU -> conv3 -> BN -> ReLU; 2D or 3D depending on spatial_rank.
struct ConvBlock {
    Conv conv1, conv2;
    BatchNorm bn1, bn2;

    ConvBlock() = default;
    ConvBlock(std::int64_t in, std::int64_t out, int spatial_rank, Rng& rng);
    Array operator()(const Array& x, bool training);
    void collect(ParamList& list, const std::string& prefix);
};

/// Multi-axis gated MLP with a residual connection:
///   h = gelu(proj_in(x)); (u, v) = channel split of h
///   y = proj_out(u * mix_local(v) + u * mix_global(v)); out = x + y
/// Inputs whose H or W is not a multiple of block are zero-padded, then cropped back.
struct GatedMlp {
    Conv proj_in, proj_out;
    Array local_weight, local_bias, global_weight, global_bias;
    int block = 8;

    GatedMlp() = default;
    /// Throws ConfigError for odd channel counts.
    GatedMlp(std::int64_t channels, int block, Rng& rng, bool zero_out_proj = false);
    Array operator()(const Array& x) const;
    void collect(ParamList& list, const std::string& prefix) const;
};

/// x * sigmoid(W2 relu(W1 gap(x))) per channel.
struct ChannelAttention {
    Linear fc1, fc2;

    ChannelAttention() = default;
    /// Throws ConfigError when reduction exceeds or does not divide channels.
    ChannelAttention(std::int64_t channels, int reduction, Rng& rng);
    Array scales(const Array& x) const;
    Array operator()(const Array& x) const;
    void collect(ParamList& list, const std::string& prefix) const;
};

/// Hybrid MLP-CNN decoder block:
///   f = relu(bn(conv3(concat(x, skip))))
///   out = conv3(attention(gated_mlp(f))) + f
/// With `ablated` the gated MLP and attention are skipped.
struct HbBlock {
    Conv fuse, out;
    BatchNorm bn;
    GatedMlp mlp;
    ChannelAttention attention;
    bool ablated = false;

    HbBlock() = default;
    HbBlock(std::int64_t in_x, std::int64_t in_skip, std::int64_t channels, Rng& rng, int block = 8,
            int reduction = 4, bool ablated = false);
    Array operator()(const Array& x, const Array& skip, bool training);
    void collect(ParamList& list, const std::string& prefix);
};

}  // namespace px3d::nn
