#pragma once

// Finite-difference checks for every differentiable primitive, shared by the
// unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "px3d/fusion.hpp"
#include "px3d/nn/gradcheck.hpp"
#include "px3d/nn/layers.hpp"
#include "px3d/nn/loss.hpp"
#include "px3d/nn/ops.hpp"
#include "px3d/pgr.hpp"

namespace px3d::testing {

struct GradCase {
    std::string name;
    double tolerance = 1e-6;
    double max_rel_error = 0.0;
    bool ok = false;
    std::string failure;
};

inline nn::Array random_array(nn::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(nn::numel(shape)));
    for (double& x : v) x = u(rng);
    return nn::Array(std::move(shape), std::move(v));
}

// Values with |x| >= margin, for ops with a kink at 0.
inline nn::Array away_from_zero(nn::Shape shape, std::mt19937_64& rng, double margin) {
    nn::Array a = random_array(std::move(shape), rng);
    for (double& x : a.mutable_values()) x = std::copysign(margin + std::abs(x), x);
    return a;
}

// Distinct, well separated values in random order (max pooling has no ties).
inline nn::Array separated(nn::Shape shape, std::mt19937_64& rng) {
    const auto n = static_cast<std::size_t>(nn::numel(shape));
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = 0.01 * static_cast<double>(i);
    std::shuffle(v.begin(), v.end(), rng);
    return nn::Array(std::move(shape), std::move(v));
}

inline nn::Array unit_rows(std::int64_t n, std::int64_t e, std::mt19937_64& rng) {
    return nn::l2_normalize(random_array({n, e}, rng)).detach();
}

// Eval-mode batch norm needs non-trivial running statistics to be a real test.
inline void randomize_stats(nn::BatchNorm& bn, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> mu(-0.3, 0.3), var(0.5, 2.0), g(0.5, 1.5);
    for (double& x : bn.running_mean) x = mu(rng);
    for (double& x : bn.running_var) x = var(rng);
    for (double& x : bn.gamma.mutable_values()) x = g(rng);
    for (double& x : bn.beta.mutable_values()) x = mu(rng);
}

inline void add_params(std::vector<nn::GradInput>& inputs, nn::ParamList& list) {
    for (auto& p : list.params) inputs.push_back({p.name, p.param});
}

inline std::vector<GradCase> run_gradient_suite(std::uint64_t seed = 1) {
    using nn::Array;
    using nn::GradInput;
    using Fn = std::function<Array(const std::vector<Array>&)>;
    std::mt19937_64 rng(seed);
    nn::Rng init(seed);
    std::vector<GradCase> cases;
    constexpr double smooth = 1e-6;
    constexpr double composite = 1e-3;

    auto run = [&](const std::string& name, double tol, const Fn& f, std::vector<GradInput> inputs,
                   std::int64_t max_entries = 24) {
        nn::GradCheckOptions opt;
        opt.tolerance = tol;
        // A bias step shifts every pre-activation of its channel at once, and at
        // 1e-4 some of them cross a ReLU kink. 1e-5 keeps the difference local.
        if (tol == composite) opt.eps = 1e-5;
        opt.max_entries = max_entries;
        opt.seed = seed + cases.size();
        const nn::GradCheckReport r = nn::grad_check(f, std::move(inputs), opt);
        std::string failure = r.failure;
        for (const auto& g : r.groups)
            if (!(g.max_rel_error < tol)) failure += g.name + " ";
        cases.push_back({name, tol, r.max_rel_error(), r.ok, failure});
    };

    // Elementwise and structural ops.
    run("add", smooth, [](const auto& a) { return nn::add(a[0], a[1]); },
        {{"a", random_array({2, 3, 4}, rng)}, {"b", random_array({2, 3, 4}, rng)}});
    run("mul", smooth, [](const auto& a) { return nn::mul(a[0], a[1]); },
        {{"a", random_array({2, 3, 4}, rng)}, {"b", random_array({2, 3, 4}, rng)}});
    run("sub_scale", smooth, [](const auto& a) { return nn::scale(nn::sub(a[0], a[1]), -2.5); },
        {{"a", random_array({5}, rng)}, {"b", random_array({5}, rng)}});
    run("relu", smooth, [](const auto& a) { return nn::relu(a[0]); }, {{"x", away_from_zero({3, 7}, rng, 0.1)}});
    run("sigmoid", smooth, [](const auto& a) { return nn::sigmoid(a[0]); }, {{"x", random_array({3, 7}, rng, -4, 4)}});
    run("gelu", smooth, [](const auto& a) { return nn::gelu(a[0]); }, {{"x", random_array({3, 7}, rng, -3, 3)}});
    run("sum_mean", smooth, [](const auto& a) { return nn::add(nn::sum(a[0]), nn::mean(nn::mul(a[0], a[0]))); },
        {{"x", random_array({4, 5}, rng)}});
    run("reshape_concat_narrow", smooth,
        [](const auto& a) {
            const Array c = nn::concat({a[0], nn::reshape(a[1], {2, 2, 3})}, 1);
            return nn::mul(nn::narrow(c, 1, 1, 3), nn::narrow(c, 1, 0, 3));
        },
        {{"a", random_array({2, 2, 3}, rng)}, {"b", random_array({2, 6}, rng)}});
    run("mean_axis", smooth, [](const auto& a) { return nn::mean_axis(a[0], 2); },
        {{"x", random_array({2, 3, 4, 5}, rng)}});
    run("pad_crop", smooth,
        [](const auto& a) { return nn::crop2d(nn::mul(nn::pad2d(a[0], 6, 7), nn::pad2d(a[0], 6, 7)), 4, 6); },
        {{"x", random_array({1, 2, 5, 5}, rng)}});

    // Convolution, normalization, resampling.
    run("conv2d", smooth, [](const auto& a) { return nn::conv(a[0], a[1], a[2]); },
        {{"x", random_array({2, 3, 5, 6}, rng)}, {"w", random_array({4, 3, 3, 3}, rng)}, {"b", random_array({4}, rng)}});
    run("conv2d_1x1", smooth, [](const auto& a) { return nn::conv(a[0], a[1], a[2]); },
        {{"x", random_array({2, 3, 4, 4}, rng)}, {"w", random_array({5, 3, 1, 1}, rng)}, {"b", random_array({5}, rng)}});
    run("conv3d", smooth, [](const auto& a) { return nn::conv(a[0], a[1], a[2]); },
        {{"x", random_array({1, 2, 4, 3, 5}, rng)},
         {"w", random_array({3, 2, 3, 3, 3}, rng)},
         {"b", random_array({3}, rng)}});
    {
        nn::BatchNorm bn(3);
        randomize_stats(bn, rng);
        run("batch_norm_eval", smooth,
            [&bn](const auto& a) { return bn(a[0], false); },
            {{"x", random_array({2, 3, 4, 4}, rng)}, {"gamma", bn.gamma}, {"beta", bn.beta}});
    }
    run("max_pool2_2d", smooth, [](const auto& a) { return nn::max_pool2(a[0]); }, {{"x", separated({2, 2, 5, 6}, rng)}});
    run("max_pool2_3d", smooth, [](const auto& a) { return nn::max_pool2(a[0]); },
        {{"x", separated({1, 2, 4, 4, 3}, rng)}});
    run("resize_bilinear", smooth, [](const auto& a) { return nn::resize_bilinear(a[0], 7, 3); },
        {{"x", random_array({1, 2, 4, 5}, rng)}});
    run("upsample2", smooth, [](const auto& a) { return nn::upsample2(a[0], 7, 9); },
        {{"x", random_array({1, 2, 4, 5}, rng)}});
    run("global_avg_pool", smooth, [](const auto& a) { return nn::global_avg_pool(a[0]); },
        {{"x", random_array({2, 3, 2, 4, 4}, rng)}});
    run("linear", smooth, [](const auto& a) { return nn::linear(a[0], a[1], a[2]); },
        {{"x", random_array({3, 5}, rng)}, {"w", random_array({4, 5}, rng)}, {"b", random_array({4}, rng)}});
    run("channel_scale", smooth, [](const auto& a) { return nn::channel_scale(a[0], a[1]); },
        {{"x", random_array({2, 3, 4, 4}, rng)}, {"s", random_array({2, 3}, rng)}});
    run("l2_normalize", smooth, [](const auto& a) { return nn::l2_normalize(a[0]); },
        {{"x", random_array({3, 6}, rng)}});
    for (const auto mode : {nn::MixMode::local, nn::MixMode::global})
        run(mode == nn::MixMode::local ? "spatial_mix_local" : "spatial_mix_global", smooth,
            [mode](const auto& a) { return nn::spatial_mix(a[0], a[1], a[2], 2, mode); },
            {{"x", random_array({1, 2, 4, 6}, rng)}, {"w", random_array({4, 4}, rng)}, {"b", random_array({4}, rng)}});

    // Layers (eval-mode normalization).
    {
        nn::ConvBlock block(3, 4, 2, init);
        randomize_stats(block.bn1, rng);
        randomize_stats(block.bn2, rng);
        nn::ParamList list;
        block.collect(list, "conv_block");
        std::vector<GradInput> in{{"x", random_array({2, 3, 6, 6}, rng)}};
        add_params(in, list);
        run("conv_block", composite, [&block](const auto& a) { return block(a[0], false); }, std::move(in));
    }
    {
        nn::ConvBlock block(2, 3, 3, init);
        randomize_stats(block.bn1, rng);
        randomize_stats(block.bn2, rng);
        nn::ParamList list;
        block.collect(list, "conv_block3d");
        std::vector<GradInput> in{{"x", random_array({1, 2, 3, 4, 4}, rng)}};
        add_params(in, list);
        run("conv_block_3d", composite, [&block](const auto& a) { return block(a[0], false); }, std::move(in));
    }
    {
        nn::GatedMlp mlp(4, 4, init);
        nn::ParamList list;
        mlp.collect(list, "gated_mlp");
        std::vector<GradInput> in{{"x", random_array({2, 4, 6, 8}, rng)}};
        add_params(in, list);
        run("gated_mlp", composite, [&mlp](const auto& a) { return mlp(a[0]); }, std::move(in));
    }
    {
        nn::ChannelAttention att(8, 4, init);
        nn::ParamList list;
        att.collect(list, "channel_attention");
        std::vector<GradInput> in{{"x", random_array({2, 8, 3, 3}, rng)}};
        add_params(in, list);
        run("channel_attention", composite, [&att](const auto& a) { return att(a[0]); }, std::move(in));
    }
    {
        nn::HbBlock hb(4, 2, 4, init, 4, 2);
        randomize_stats(hb.bn, rng);
        nn::ParamList list;
        hb.collect(list, "hb_block");
        std::vector<GradInput> in{{"x", random_array({2, 4, 4, 8}, rng)}, {"skip", random_array({2, 2, 4, 8}, rng)}};
        add_params(in, list);
        run("hb_block", composite, [&hb](const auto& a) { return hb(a[0], a[1], false); }, std::move(in), 16);
    }

    // Fusion.
    run("depth_fuse", smooth,
        [](const auto& a) {
            const FusedPair p = depth_fuse(a[0], a[1]);
            return nn::add(nn::sum(nn::mul(p.f2d, p.f2d)), nn::sum(nn::mul(p.f3d, p.f3d)));
        },
        {{"f2d", random_array({2, 3, 4, 5}, rng)}, {"f3d", random_array({2, 3, 2, 4, 5}, rng)}});

    // Losses.
    run("sse_loss", smooth, [](const auto& a) { return sse_loss(a[0], a[1]); },
        {{"f", random_array({2, 3, 4, 4}, rng)}, {"y", random_array({2, 3, 4, 4}, rng)}});
    {
        PgrConfig cfg = PgrConfig::desk();
        const WeightSchedule schedule = WeightSchedule::standard();
        std::vector<GradInput> in;
        std::vector<Array> labels(kPgrStages);
        std::vector<int> used;
        for (int i = 0; i < kPgrStages; ++i) {
            if (schedule.alphas[i] == 0.0) continue;
            const auto d = cfg.stage_dims(i);
            const nn::Shape shape{1, cfg.stage_channels(i), d[0], d[1]};
            in.push_back({"f" + std::to_string(i), random_array(shape, rng)});
            labels[i] = random_array(shape, rng);
            used.push_back(i);
        }
        run("progressive_loss", smooth,
            [labels, used, schedule, cfg](const auto& a) {
                std::vector<Array> stages(kPgrStages);
                for (std::size_t k = 0; k < used.size(); ++k) stages[used[k]] = a[k];
                return progressive_loss(stages, labels, schedule, cfg);
            },
            std::move(in), 16);
    }
    for (const auto mode : {CmaMode::literal, CmaMode::inclusive})
        run(mode == CmaMode::literal ? "cma_literal" : "cma_inclusive", smooth,
            [mode](const auto& a) { return cma_loss(nn::l2_normalize(a[0]), nn::l2_normalize(a[1]), 0.1, mode); },
            {{"z", random_array({4, 5}, rng)}, {"z_star", random_array({4, 5}, rng)}});
    run("cross_entropy", smooth, [](const auto& a) { return nn::cross_entropy(a[0], {0, 4, 2}); },
        {{"logits", random_array({3, 5}, rng, -2, 2)}});
    {
        Array t = random_array({2, 1, 3, 4}, rng, 0, 1);
        run("bce_with_logits", smooth, [t](const auto& a) { return nn::bce_with_logits(a[0], t); },
            {{"logits", random_array({2, 1, 3, 4}, rng, -3, 3)}});
        run("dice_loss", smooth, [t](const auto& a) { return nn::dice_loss(a[0], t); },
            {{"logits", random_array({2, 1, 3, 4}, rng, -3, 3)}});
    }
    return cases;
}

}  // namespace px3d::testing
