#include "px3d/nn/layers.hpp"

#include <cmath>

#include "px3d/error.hpp"

namespace px3d::nn {

std::int64_t ParamList::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params) n += p.param.numel();
    return n;
}

void ParamList::zero_grad() {
    for (auto& p : params) p.param.zero_grad();
}

Array he_normal(Shape shape, std::int64_t fan_in, Rng& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(std::max<std::int64_t>(1, fan_in))));
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (double& x : v) x = dist(rng);
    return Array(std::move(shape), std::move(v), true);
}

Conv::Conv(std::int64_t in_, std::int64_t out_, int kernel_, int spatial_rank, Rng& rng)
    : in(in_), out(out_), kernel(kernel_) {
    if (spatial_rank != 2 && spatial_rank != 3) throw ConfigError("Conv: spatial_rank must be 2 or 3");
    if (in <= 0 || out <= 0) throw ConfigError("Conv: channel counts must be positive");
    Shape ws{out, in};
    std::int64_t fan_in = in;
    for (int i = 0; i < spatial_rank; ++i) {
        ws.push_back(kernel);
        fan_in *= kernel;
    }
    weight = he_normal(ws, fan_in, rng);
    bias = Array(Shape{out}, 0.0, true);
}

Array Conv::operator()(const Array& x) const { return conv(x, weight, bias); }

void Conv::collect(ParamList& list, const std::string& prefix) const {
    list.add(prefix + ".weight", weight);
    list.add(prefix + ".bias", bias);
}

BatchNorm::BatchNorm(std::int64_t channels)
    : gamma(Shape{channels}, 1.0, true),
      beta(Shape{channels}, 0.0, true),
      running_mean(static_cast<std::size_t>(channels), 0.0),
      running_var(static_cast<std::size_t>(channels), 1.0) {}

Array BatchNorm::operator()(const Array& x, bool training) {
    return batch_norm(x, gamma, beta, BatchNormState{&running_mean, &running_var, momentum, eps}, training);
}

void BatchNorm::collect(ParamList& list, const std::string& prefix) {
    list.add(prefix + ".gamma", gamma);
    list.add(prefix + ".beta", beta);
    list.add_buffer(prefix + ".running_mean", running_mean);
    list.add_buffer(prefix + ".running_var", running_var);
}

Linear::Linear(std::int64_t in, std::int64_t out, Rng& rng)
    : weight(he_normal(Shape{out, in}, in, rng)), bias(Shape{out}, 0.0, true) {}

Array Linear::operator()(const Array& x) const { return linear(x, weight, bias); }

void Linear::collect(ParamList& list, const std::string& prefix) const {
    list.add(prefix + ".weight", weight);
    list.add(prefix + ".bias", bias);
}

ConvBlock::ConvBlock(std::int64_t in, std::int64_t out, int spatial_rank, Rng& rng)
    : conv1(in, out, 3, spatial_rank, rng), conv2(out, out, 3, spatial_rank, rng), bn1(out), bn2(out) {}

Array ConvBlock::operator()(const Array& x, bool training) {
    Array h = relu(bn1(conv1(x), training));
    return relu(bn2(conv2(h), training));
}

void ConvBlock::collect(ParamList& list, const std::string& prefix) {
    conv1.collect(list, prefix + ".conv1");
    bn1.collect(list, prefix + ".bn1");
    conv2.collect(list, prefix + ".conv2");
    bn2.collect(list, prefix + ".bn2");
}

namespace {

// Token-mixing weights start near zero with unit bias so each gate opens at ~1.
void init_mix(Array& w, Array& b, std::int64_t tokens, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0 / static_cast<double>(tokens));
    std::vector<double> v(static_cast<std::size_t>(tokens * tokens));
    for (double& x : v) x = dist(rng);
    w = Array(Shape{tokens, tokens}, std::move(v), true);
    b = Array(Shape{tokens}, 1.0, true);
}

std::int64_t round_up(std::int64_t v, std::int64_t m) { return (v + m - 1) / m * m; }

}  // namespace

GatedMlp::GatedMlp(std::int64_t channels, int block_, Rng& rng, bool zero_out_proj) : block(block_) {
    if (channels % 2 != 0)
        throw ConfigError("GatedMlp: channels must be even to split into gate halves, got " + std::to_string(channels));
    if (block <= 0) throw ConfigError("GatedMlp: block must be positive");
    proj_in = Conv(channels, channels, 1, 2, rng);
    const std::int64_t P = static_cast<std::int64_t>(block) * block;
    init_mix(local_weight, local_bias, P, rng);
    init_mix(global_weight, global_bias, P, rng);
    proj_out = Conv(channels / 2, channels, 1, 2, rng);
    if (zero_out_proj) std::fill(proj_out.weight.mutable_values().begin(), proj_out.weight.mutable_values().end(), 0.0);
}

Array GatedMlp::operator()(const Array& x) const {
    if (x.rank() != 4) throw ShapeError("GatedMlp: expected (N,C,H,W), got " + shape_str(x.shape()));
    const std::int64_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (C != proj_in.in)
        throw ShapeError("GatedMlp: expected " + std::to_string(proj_in.in) + " channels, got " + shape_str(x.shape()));
    const Array xp = pad2d(x, round_up(H, block), round_up(W, block));
    const Array h = gelu(proj_in(xp));
    const Array u = narrow(h, 1, 0, C / 2);
    const Array v = narrow(h, 1, C / 2, C / 2);
    const Array local = mul(u, spatial_mix(v, local_weight, local_bias, block, MixMode::local));
    const Array global = mul(u, spatial_mix(v, global_weight, global_bias, block, MixMode::global));
    const Array y = proj_out(add(local, global));
    return add(x, crop2d(y, H, W));
}

void GatedMlp::collect(ParamList& list, const std::string& prefix) const {
    proj_in.collect(list, prefix + ".proj_in");
    list.add(prefix + ".local_weight", local_weight);
    list.add(prefix + ".local_bias", local_bias);
    list.add(prefix + ".global_weight", global_weight);
    list.add(prefix + ".global_bias", global_bias);
    proj_out.collect(list, prefix + ".proj_out");
}

ChannelAttention::ChannelAttention(std::int64_t channels, int reduction, Rng& rng) {
    if (reduction <= 0 || reduction > channels)
        throw ConfigError("ChannelAttention: reduction " + std::to_string(reduction) + " invalid for " +
                          std::to_string(channels) + " channels");
    if (channels % reduction != 0)
        throw ConfigError("ChannelAttention: channels " + std::to_string(channels) + " not divisible by reduction " +
                          std::to_string(reduction));
    fc1 = Linear(channels, channels / reduction, rng);
    fc2 = Linear(channels / reduction, channels, rng);
}

Array ChannelAttention::scales(const Array& x) const { return sigmoid(fc2(relu(fc1(global_avg_pool(x))))); }

Array ChannelAttention::operator()(const Array& x) const { return channel_scale(x, scales(x)); }

void ChannelAttention::collect(ParamList& list, const std::string& prefix) const {
    fc1.collect(list, prefix + ".fc1");
    fc2.collect(list, prefix + ".fc2");
}

HbBlock::HbBlock(std::int64_t in_x, std::int64_t in_skip, std::int64_t channels, Rng& rng, int block, int reduction,
                 bool ablated_)
    : fuse(in_x + in_skip, channels, 3, 2, rng),
      out(channels, channels, 3, 2, rng),
      bn(channels),
      mlp(channels, block, rng),
      attention(channels, reduction, rng),
      ablated(ablated_) {}

Array HbBlock::operator()(const Array& x, const Array& skip, bool training) {
    if (x.rank() != 4 || skip.rank() != 4 || x.dim(0) != skip.dim(0) || x.dim(2) != skip.dim(2) ||
        x.dim(3) != skip.dim(3))
        throw ShapeError("HbBlock: input " + shape_str(x.shape()) + " and skip " + shape_str(skip.shape()) +
                         " are not spatially aligned");
    const Array f = relu(bn(fuse(concat({x, skip}, 1)), training));
    const Array a = ablated ? f : attention(mlp(f));
    return add(out(a), f);
}

void HbBlock::collect(ParamList& list, const std::string& prefix) {
    fuse.collect(list, prefix + ".fuse");
    bn.collect(list, prefix + ".bn");
    mlp.collect(list, prefix + ".mlp");
    attention.collect(list, prefix + ".attention");
    out.collect(list, prefix + ".out");
}

}  // namespace px3d::nn
