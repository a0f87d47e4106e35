#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "grad_suite.hpp"
#include "px3d/error.hpp"
#include "px3d/geometry.hpp"
#include "px3d/metrics.hpp"
#include "px3d/nn/optim.hpp"
#include "px3d/pgr.hpp"

using namespace px3d;
using nn::Array;
using px3d::testing::random_array;

namespace {

// Separable Gaussian blur over H and W of an (H, W, D) volume, edge clamped.
Volume blur_hw(const Volume& v, double sigma) {
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * r + 1);
    double total = 0.0;
    for (int i = -r; i <= r; ++i) total += k[i + r] = std::exp(-i * i / (2.0 * sigma * sigma));
    for (double& x : k) x /= total;
    Volume a = v, b = v;
    for (int axis = 0; axis < 2; ++axis) {
        for (int i = 0; i < v.dims[0]; ++i)
            for (int j = 0; j < v.dims[1]; ++j)
                for (int d = 0; d < v.dims[2]; ++d) {
                    double acc = 0.0;
                    for (int o = -r; o <= r; ++o) {
                        const int ii = std::clamp(i + (axis == 0 ? o : 0), 0, v.dims[0] - 1);
                        const int jj = std::clamp(j + (axis == 1 ? o : 0), 0, v.dims[1] - 1);
                        acc += k[o + r] * a.at(ii, jj, d);
                    }
                    b.at(i, j, d) = static_cast<float>(acc);
                }
        a = b;
    }
    return a;
}

std::vector<Sample> desk_samples(std::uint64_t seed) {
    PhantomConfig c;
    c.seed = seed;
    return build_samples(generate_phantom(c), ProjectionConfig::desk());
}

// Stage tensors whose SSE against zero labels is exactly 1 per guided stage.
std::vector<Array> unit_error_stages(const PgrConfig& cfg, std::vector<Array>& labels) {
    std::vector<Array> stages(kPgrStages);
    labels.assign(kPgrStages, Array());
    for (int i = 0; i < kPgrStages; ++i) {
        const auto d = cfg.stage_dims(i);
        const nn::Shape shape{1, cfg.stage_channels(i), d[0], d[1]};
        Array f(shape, 0.0);
        f.mutable_values()[static_cast<std::size_t>(i) % f.values().size()] = 1.0;
        stages[i] = f;
        labels[i] = Array(shape, 0.0);
    }
    return stages;
}

}  // namespace

TEST_CASE("full-size forward pass shapes") {
    PgrModel model(PgrConfig::full());
    std::mt19937_64 g(1);
    nn::NoGradGuard guard;
    const PgrOutputs out = model.forward(random_array({2, 1, 128, 256}, g, 0, 1), false);
    CHECK(out.reconstruction.shape() == nn::Shape{2, 128, 128, 256});
    REQUIRE(out.stages.size() == 8);
    CHECK(out.stages[3].shape() == nn::Shape{2, 128, 16, 32});
    CHECK(out.stages[5].shape() == nn::Shape{2, 128, 32, 64});
    CHECK(out.stages[7].shape() == out.reconstruction.shape());
    const PgrConfig full = PgrConfig::full();
    for (int i = 0; i < kPgrStages; ++i) {
        const auto d = full.stage_dims(i);
        CHECK(out.stages[i].shape() == nn::Shape{2, full.stage_channels(i), d[0], d[1]});
    }
}

TEST_CASE("stage channel layout") {
    const PgrConfig c = PgrConfig::full();
    const int expected[] = {32, 64, 128, 128, 128, 128, 128, 128};
    for (int i = 0; i < kPgrStages; ++i) CHECK(c.stage_channels(i) == expected[i]);
    for (int i = 3; i < kPgrStages; ++i) CHECK(c.guidable(i));
    for (int i = 0; i < 3; ++i) CHECK_FALSE(c.guidable(i));
    CHECK(c.stage_dims(0) == std::array<int, 2>{128, 256});
    CHECK(c.stage_dims(3) == std::array<int, 2>{16, 32});
    CHECK(c.stage_dims(7) == std::array<int, 2>{128, 256});
    const PgrConfig d = PgrConfig::desk();
    CHECK(d.in_rows == 32);
    CHECK(d.in_cols == 64);
    CHECK(d.depth() == 32);
    CHECK(d.stage_dims(3) == std::array<int, 2>{4, 8});
}

TEST_CASE("wrong input dims are shape errors") {
    PgrModel model(PgrConfig::desk());
    std::mt19937_64 g(1);
    CHECK_THROWS_AS(model.forward(random_array({1, 1, 32, 48}, g), false), ShapeError);
    CHECK_THROWS_AS(model.forward(random_array({1, 2, 32, 64}, g), false), ShapeError);
}

TEST_CASE("forward is deterministic") {
    std::mt19937_64 g(2);
    const Array x = random_array({2, 1, 32, 64}, g, 0, 1);
    PgrModel a(PgrConfig::desk()), b(PgrConfig::desk());
    const Array ya = a.forward(x, false).reconstruction;
    const Array yb = b.forward(x, false).reconstruction;
    const Array ya2 = a.forward(x, false).reconstruction;
    CHECK(std::equal(ya.values().begin(), ya.values().end(), yb.values().begin()));
    CHECK(std::equal(ya.values().begin(), ya.values().end(), ya2.values().begin()));
}

TEST_CASE("default weight schedule") {
    const WeightSchedule w = WeightSchedule::standard();
    CHECK(w.alphas == std::vector<double>{0, 0, 0, 16, 8, 4, 2, 1});
    for (int i = 3; i < 7; ++i) CHECK(w.alphas[i] > w.alphas[i + 1]);
    CHECK(w.alphas[7] > 0.0);
    CHECK(WeightSchedule::reversed().alphas == std::vector<double>{0, 0, 0, 1, 2, 4, 8, 16});
    CHECK(WeightSchedule::by_name("standard").alphas == w.alphas);
    CHECK(WeightSchedule::by_name("reversed").alphas == WeightSchedule::reversed().alphas);
    CHECK_THROWS_AS(WeightSchedule::by_name("bogus"), ConfigError);
    // 2^(n-1-i) for the guided stages.
    for (int i = 3; i < 8; ++i) CHECK(w.alphas[i] == std::ldexp(1.0, 7 - i));
}

TEST_CASE("progressive loss arithmetic") {
    const PgrConfig cfg = PgrConfig::desk();
    std::vector<Array> labels;
    const std::vector<Array> stages = unit_error_stages(cfg, labels);
    std::vector<double> parts;
    const Array total = progressive_loss(stages, labels, WeightSchedule::standard(), cfg, &parts);
    CHECK(total.item() == 31.0);
    CHECK(parts == std::vector<double>{0, 0, 0, 1, 1, 1, 1, 1});

    // Perfect reconstruction at every stage.
    CHECK(progressive_loss(labels, labels, WeightSchedule::standard(), cfg).item() == 0.0);

    // One-hot decomposition is exact.
    std::mt19937_64 g(3);
    std::vector<Array> f(kPgrStages), y(kPgrStages);
    for (int i = 0; i < kPgrStages; ++i) {
        const auto d = cfg.stage_dims(i);
        f[i] = random_array({2, cfg.stage_channels(i), d[0], d[1]}, g);
        y[i] = random_array({2, cfg.stage_channels(i), d[0], d[1]}, g);
    }
    for (int i = 3; i < kPgrStages; ++i) {
        const double alpha = 0.75 * (i + 1);
        const double lhs = progressive_loss(f, y, WeightSchedule::one_hot(i, alpha), cfg).item();
        CHECK(lhs == alpha * sse_loss(f[i], y[i]).item());
    }
}

TEST_CASE("guidance on an unguidable stage is a configuration error") {
    const PgrConfig cfg = PgrConfig::desk();
    std::vector<Array> labels;
    const std::vector<Array> stages = unit_error_stages(cfg, labels);
    for (int i = 0; i < 3; ++i)
        CHECK_THROWS_AS(progressive_loss(stages, labels, WeightSchedule::one_hot(i, 1.0), cfg), ConfigError);
    WeightSchedule short_schedule;
    short_schedule.alphas = {1, 2, 3};
    CHECK_THROWS_AS(progressive_loss(stages, labels, short_schedule, cfg), ConfigError);
}

TEST_CASE("zero-weight stages are never scaled") {
    // An undefined label on a zero-weight stage must not be touched.
    const PgrConfig cfg = PgrConfig::desk();
    std::vector<Array> labels;
    const std::vector<Array> stages = unit_error_stages(cfg, labels);
    labels[0] = Array();
    labels[4] = Array();
    WeightSchedule w = WeightSchedule::standard();
    w.alphas[4] = 0.0;
    CHECK(progressive_loss(stages, labels, w, cfg).item() == 23.0);
}

TEST_CASE("sse loss examples") {
    const Array ones({1, 2, 2, 2}, 1.0), zeros({1, 2, 2, 2}, 0.0);
    CHECK(sse_loss(ones, zeros).item() == 8.0);
    CHECK(sse_loss(ones, ones).item() == 0.0);
    const Array two({2, 2, 2, 2}, 1.0), two0({2, 2, 2, 2}, 0.0);
    CHECK(sse_loss(two, two0).item() == 8.0);
    std::mt19937_64 g(4);
    const Array f = random_array({3, 4, 5}, g), y = random_array({3, 4, 5}, g);
    const double k = 2.5;
    CHECK(sse_loss(nn::scale(f, k), nn::scale(y, k)).item() ==
          doctest::Approx(k * k * sse_loss(f, y).item()).epsilon(1e-12));
    CHECK_THROWS_AS(sse_loss(f, random_array({3, 4, 6}, g)), ShapeError);
}

TEST_CASE("scale_label") {
    const PgrConfig cfg = PgrConfig::desk();
    const std::vector<Sample> s = desk_samples(1);
    const Volume& gt = s[0].unfolded;
    const Array y7 = scale_label(gt, 7, cfg);
    CHECK(y7.shape() == nn::Shape{32, 32, 64});
    for (int d = 0; d < 32; ++d)
        for (int h = 0; h < 32; ++h)
            for (int w = 0; w < 64; ++w) REQUIRE(y7.values()[(d * 32 + h) * 64 + w] == gt.at(h, w, d));

    const Volume constant({32, 64, 32}, {1, 1, 1}, 0.42f);
    const Array y3 = scale_label(constant, 3, cfg);
    CHECK(y3.shape() == nn::Shape{32, 4, 8});
    for (double v : y3.values()) CHECK(v == doctest::Approx(0.42).epsilon(1e-6));

    for (int i = 0; i < 3; ++i) CHECK_THROWS_AS(scale_label(gt, i, cfg), ConfigError);
}

TEST_CASE("scale_label round trip on smooth phantoms") {
    // Stage 5 shrinks H and W by 4; blurring with sigma = 4 / 2 pixels band-limits
    // the phantom for that scale.
    const PgrConfig cfg = PgrConfig::desk();
    const auto [rows, cols] = cfg.stage_dims(5);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Volume gt = blur_hw(desk_samples(seed)[0].unfolded, 2.0);
        const Array y = scale_label(gt, 5, cfg);
        Volume back(gt.dims, gt.spacing);
        for (int d = 0; d < cfg.depth(); ++d) {
            ImageD slice(rows, cols);
            std::copy_n(y.values().begin() + static_cast<std::ptrdiff_t>(d) * rows * cols, slice.size(),
                        slice.data.begin());
            const ImageD up = resample(slice, cfg.in_rows, cfg.in_cols);
            for (int h = 0; h < cfg.in_rows; ++h)
                for (int w = 0; w < cfg.in_cols; ++w) back.at(h, w, d) = static_cast<float>(up.at(h, w));
        }
        CHECK(psnr(back, gt) >= 30.0);
    }
}

TEST_CASE("learning rate halves every 5000 steps") {
    const nn::LrSchedule s = nn::LrSchedule::step_halving(4e-4, 5000);
    CHECK(s.at(0) == 4e-4);
    CHECK(s.at(4999) == 4e-4);
    CHECK(s.at(5000) == 2e-4);
    CHECK(s.at(10000) == doctest::Approx(1e-4).epsilon(1e-12));
    const PgrTrainOptions o;
    CHECK(o.lr == 4e-4);
    CHECK(o.halve_every == 5000);
    CHECK(o.batch_size == 8);
}

TEST_CASE("guidance reaches the stem") {
    PgrModel model(PgrConfig::desk());
    std::mt19937_64 g(5);
    const std::vector<Sample> s = desk_samples(2);
    const std::vector<const Volume*> gts{&s[0].unfolded, &s[1].unfolded};
    const Array x = nn::concat({image_to_array(s[0].px), image_to_array(s[1].px)}, 0);
    nn::ParamList params = model.parameters();
    params.zero_grad();
    const PgrOutputs out = model.forward(x, true);
    progressive_loss(out.stages, gts, WeightSchedule::standard(), model.config()).backward();
    int stem_params = 0;
    for (const auto& p : params.params) {
        if (p.name.rfind("stem", 0) != 0) continue;
        ++stem_params;
        REQUIRE(p.param.has_grad());
        double norm = 0.0;
        for (double v : p.param.grad()) norm += v * v;
        CHECK(norm > 0.0);
    }
    CHECK(stem_params == 2);
}

TEST_CASE("training is deterministic and reduces the loss") {
    std::vector<PgrExample> data;
    for (const Sample& s : desk_samples(3)) data.push_back({s.px, s.unfolded, "x"});
    auto run = [&data]() {
        PgrModel model(PgrConfig::desk());
        PgrTrainOptions o;
        o.steps = 6;
        o.batch_size = 2;
        PgrTrainer trainer(model, data, o);
        std::vector<double> losses;
        for (int i = 0; i < 6; ++i) losses.push_back(trainer.step().loss);
        return losses;
    };
    const std::vector<double> a = run(), b = run();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-6);
}

TEST_CASE("batch order is a pure function of seed and step") {
    for (int n : {1, 5, 7}) {
        for (std::int64_t step = 0; step < 20; ++step) {
            const auto a = batch_indices(9, step, 3, n);
            CHECK(a == batch_indices(9, step, 3, n));
            CHECK(a.size() == static_cast<std::size_t>(std::min(3, n)));
            for (int i : a) CHECK((i >= 0 && i < n));
        }
    }
    // One epoch of n = 6 at batch 3 visits every sample once.
    std::vector<int> seen;
    for (std::int64_t step = 0; step < 2; ++step)
        for (int i : batch_indices(4, step, 3, 6)) seen.push_back(i);
    std::sort(seen.begin(), seen.end());
    CHECK(seen == std::vector<int>{0, 1, 2, 3, 4, 5});
    CHECK(batch_indices(4, 0, 3, 6) != batch_indices(5, 0, 3, 6));
}

TEST_CASE("non-finite loss names the batch") {
    std::vector<PgrExample> data;
    const std::vector<Sample> s = desk_samples(4);
    data.push_back({s[0].px, s[0].unfolded, "good"});
    data.push_back({s[1].px, s[1].unfolded, "poisoned"});
    data[1].px.data[5] = std::numeric_limits<float>::quiet_NaN();
    PgrModel model(PgrConfig::desk());
    PgrTrainOptions o;
    o.batch_size = 2;
    PgrTrainer trainer(model, data, o);
    CHECK_THROWS_WITH_AS(trainer.step(), doctest::Contains("poisoned"), NumericError);
}

TEST_CASE("volume channel reordering round trips") {
    const std::vector<Sample> s = desk_samples(5);
    const Volume& v = s[2].unfolded;
    const Array a = volume_to_channels(v);
    CHECK(a.shape() == nn::Shape{32, 32, 64});
    const Array batched = nn::reshape(a, {1, 32, 32, 64});
    const Volume back = channels_to_volume(batched, 0, false);
    CHECK(back.dims == v.dims);
    CHECK(back.data == v.data);
}
