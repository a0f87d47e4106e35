#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "grad_suite.hpp"
#include "px3d/error.hpp"
#include "px3d/fusion.hpp"
#include "px3d/geometry.hpp"
#include "px3d/nn/loss.hpp"

using namespace px3d;
using nn::Array;
using px3d::testing::random_array;
using px3d::testing::unit_rows;

namespace {

// Literal/inclusive contrastive loss evaluated straight from the formula.
double cma_oracle(const Array& z, const Array& zs, double tau, bool inclusive) {
    const std::int64_t n = z.dim(0), e = z.dim(1);
    auto sim = [&](std::int64_t i, std::int64_t k) {
        double d = 0.0;
        for (std::int64_t j = 0; j < e; ++j) d += z.values()[i * e + j] * zs.values()[k * e + j];
        return d / tau;
    };
    double loss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double den = 0.0;
        for (std::int64_t k = 0; k < n; ++k)
            if (inclusive || k != i) den += std::exp(sim(i, k));
        loss -= std::log(std::exp(sim(i, i)) / den);
    }
    return loss;
}

Array permute_rows(const Array& a, const std::vector<int>& perm) {
    const std::int64_t e = a.dim(1);
    std::vector<double> v(a.values().size());
    for (std::size_t r = 0; r < perm.size(); ++r)
        std::copy_n(a.values().begin() + perm[r] * e, e, v.begin() + static_cast<std::ptrdiff_t>(r) * e);
    return Array(a.shape(), std::move(v));
}

Array identity_rows(std::int64_t n, std::int64_t e) {
    Array a({n, e}, 0.0);
    for (std::int64_t i = 0; i < n; ++i) a.mutable_values()[i * e + i] = 1.0;
    return a;
}

JointConfig small_config(JointTask task, int rows = 16, int cols = 24, int depth = 8) {
    JointConfig c = JointConfig::desk(task);
    c.channels = {4, 6, 8, 8};
    c.in_rows = rows;
    c.in_cols = cols;
    c.depth = depth;
    return c;
}

double grad_norm(nn::ParamList& list, const std::string& prefix) {
    double s = 0.0;
    for (auto& p : list.params) {
        if (p.name.rfind(prefix, 0) != 0 || !p.param.has_grad()) continue;
        for (double g : p.param.grad()) s += g * g;
    }
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("depth_fuse shapes and values") {
    std::mt19937_64 g(1);
    const Array f2d = random_array({2, 128, 16, 32}, g), f3d = random_array({2, 128, 16, 16, 32}, g);
    const FusedPair p = depth_fuse(f2d, f3d);
    CHECK(p.f3d.shape() == nn::Shape{2, 128, 17, 16, 32});
    CHECK(p.f2d.shape() == f2d.shape());

    const Array zero3d({2, 128, 16, 16, 32}, 0.0);
    const FusedPair z = depth_fuse(f2d, zero3d);
    for (std::int64_t i = 0; i < f2d.numel(); ++i)
        CHECK(z.f2d.values()[i] == doctest::Approx(f2d.values()[i] / 17.0).epsilon(1e-12));

    CHECK_THROWS_AS(depth_fuse(random_array({2, 64, 16, 32}, g), f3d), ShapeError);
    CHECK_THROWS_AS(depth_fuse(random_array({2, 128, 16, 30}, g), f3d), ShapeError);
}

TEST_CASE("depth_fuse mixed 2D is the brute-force depth mean") {
    std::mt19937_64 g(2);
    std::uniform_int_distribution<int> dim(1, 6);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = dim(g), c = dim(g), d = dim(g), h = dim(g), w = dim(g);
        const Array f2d = random_array({n, c, h, w}, g), f3d = random_array({n, c, d, h, w}, g);
        const FusedPair p = depth_fuse(f2d, f3d);
        REQUIRE(p.f3d.shape() == nn::Shape{n, c, d + 1, h, w});
        double worst = 0.0;
        for (int a = 0; a < n; ++a)
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) {
                        double acc = f2d.values()[((a * c + ch) * h + y) * w + x];
                        for (int k = 0; k < d; ++k) acc += f3d.values()[(((a * c + ch) * d + k) * h + y) * w + x];
                        const double got = p.f2d.values()[((a * c + ch) * h + y) * w + x];
                        worst = std::max(worst, std::abs(got - acc / (d + 1)));
                        // The appended slice is the 2D map itself.
                        CHECK(p.f3d.values()[(((a * c + ch) * (d + 1) + d) * h + y) * w + x] ==
                              f2d.values()[((a * c + ch) * h + y) * w + x]);
                    }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("cma literal examples") {
    const Array e = identity_rows(2, 4);
    CHECK(cma_loss(e, e, 1.0, CmaMode::literal).item() == doctest::Approx(-2.0).epsilon(1e-12));
    CHECK(std::abs(cma_loss(e, e, 1.0).item() + 2.0) <= 1e-9);

    // Equal similarities everywhere: every row is the same unit vector.
    for (int n : {2, 3, 5, 9}) {
        Array same({n, 3}, 0.0);
        for (int i = 0; i < n; ++i) same.mutable_values()[i * 3 + 1] = 1.0;
        for (double tau : {0.1, 1.0, 3.0}) {
            const double got = cma_loss(same, same, tau).item();
            CHECK(std::abs(got - n * std::log(n - 1.0)) <= 1e-9);
        }
    }
}

TEST_CASE("cma orthonormal closed forms") {
    for (int n : {2, 3, 4, 6}) {
        const Array e = identity_rows(n, 8);
        for (double tau : {0.1, 0.5, 1.0}) {
            const double lit = cma_loss(e, e, tau, CmaMode::literal).item();
            CHECK(std::abs(lit - n * (std::log(n - 1.0) - 1.0 / tau)) <= 1e-9);
            const double inc = cma_loss(e, e, tau, CmaMode::inclusive).item();
            CHECK(std::abs(inc - n * std::log1p((n - 1) * std::exp(-1.0 / tau))) <= 1e-9);
            CHECK(std::abs(inc - cma_oracle(e, e, tau, true)) <= 1e-9);
        }
    }
}

TEST_CASE("cma matches the direct formula on random embeddings") {
    std::mt19937_64 g(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Array z = unit_rows(6, 5, g), zs = unit_rows(6, 5, g);
        for (double tau : {0.1, 0.7})
            for (const auto mode : {CmaMode::literal, CmaMode::inclusive}) {
                const double got = cma_loss(z, zs, tau, mode).item();
                const double want = cma_oracle(z, zs, tau, mode == CmaMode::inclusive);
                CHECK(std::abs(got - want) <= 1e-9 * std::max(1.0, std::abs(want)));
            }
    }
}

TEST_CASE("cma is invariant to batch order") {
    std::mt19937_64 g(4);
    const Array z = unit_rows(7, 6, g), zs = unit_rows(7, 6, g);
    std::vector<int> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    for (int trial = 0; trial < 10; ++trial) {
        std::shuffle(perm.begin(), perm.end(), g);
        for (const auto mode : {CmaMode::literal, CmaMode::inclusive}) {
            const double a = cma_loss(z, zs, 0.1, mode).item();
            const double b = cma_loss(permute_rows(z, perm), permute_rows(zs, perm), 0.1, mode).item();
            CHECK(a == b);
        }
    }
}

TEST_CASE("cma rejects degenerate batches") {
    const Array one = identity_rows(1, 3);
    CHECK_THROWS_AS(cma_loss(one, one, 0.1), ConfigError);
    CHECK_THROWS_AS(cma_loss(identity_rows(2, 3), identity_rows(2, 3), 0.0), ConfigError);
    CHECK_THROWS_AS(cma_loss(identity_rows(2, 3), identity_rows(2, 4), 0.1), ShapeError);
}

TEST_CASE("fused shapes at every level") {
    std::mt19937_64 g(5);
    const int dims[][3] = {{16, 24, 8}, {32, 64, 32}, {8, 8, 16}, {24, 40, 12}};
    for (const auto& d : dims) {
        JointModel model(small_config(JointTask::cls5, d[0], d[1], d[2]));
        const JointOutputs out =
            model.forward(random_array({2, 1, d[0], d[1]}, g, 0, 1), random_array({2, 1, d[2], d[0], d[1]}, g, 0, 1),
                          false);
        REQUIRE(out.fused_shapes.size() == 4);
        int h = d[0], w = d[1], depth = d[2];
        for (int l = 0; l < 4; ++l) {
            if (l > 0) {
                h = (h + 1) / 2;
                w = (w + 1) / 2;
                depth = (depth + 1 + 1) / 2;  // previous level carried depth + 1 slices
            }
            const std::int64_t c = model.config().channels[l];
            CHECK(out.fused_shapes[l][0] == nn::Shape{2, c, h, w});
            CHECK(out.fused_shapes[l][1] == nn::Shape{2, c, (l == 0 ? d[2] : depth) + 1, h, w});
            if (l == 0) depth = d[2];
        }
    }
}

TEST_CASE("classification forward") {
    std::mt19937_64 g(6);
    JointModel model(small_config(JointTask::cls5));
    const Array px = random_array({1, 1, 16, 24}, g, 0, 1), vol = random_array({1, 1, 8, 16, 24}, g, 0, 1);
    const JointOutputs out = model.forward(nn::concat({px, px}, 0), nn::concat({vol, vol}, 0), false);
    REQUIRE(out.logits.shape() == nn::Shape{2, 5});
    for (int k = 0; k < 5; ++k) CHECK(out.logits.values()[k] == out.logits.values()[5 + k]);
    double m = *std::max_element(out.logits.values().begin(), out.logits.values().begin() + 5), s = 0.0;
    for (int k = 0; k < 5; ++k) s += std::exp(out.logits.values()[k] - m);
    double total = 0.0;
    for (int k = 0; k < 5; ++k) total += std::exp(out.logits.values()[k] - m) / s;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    REQUIRE(out.z.shape() == nn::Shape{2, 8});
    for (int i = 0; i < 2; ++i) {
        double nz = 0.0, ns = 0.0;
        for (int j = 0; j < 8; ++j) {
            nz += out.z.values()[i * 8 + j] * out.z.values()[i * 8 + j];
            ns += out.z_star.values()[i * 8 + j] * out.z_star.values()[i * 8 + j];
        }
        CHECK(std::abs(std::sqrt(nz) - 1.0) < 1e-6);
        CHECK(std::abs(std::sqrt(ns) - 1.0) < 1e-6);
    }
    JointModel binary(small_config(JointTask::cls2));
    CHECK(binary.forward(px, vol, false).logits.shape() == nn::Shape{1, 2});
    CHECK_THROWS_AS(model.forward(px, random_array({1, 1, 7, 16, 24}, g), false), ShapeError);
    CHECK_THROWS_AS(model.forward(random_array({1, 1, 16, 20}, g), vol, false), ShapeError);
}

TEST_CASE("full-size embeddings are 128 long") {
    const JointConfig c = JointConfig::full(JointTask::cls5);
    CHECK(c.channels == std::array<int, 4>{32, 64, 128, 128});
    CHECK(c.channels[c.resolved_tap()] == 128);
    CHECK(c.resolved_tap() == 3);
    CHECK(JointConfig::full(JointTask::seg).resolved_tap() == 1);
    CHECK(c.tau == 0.1);
    CHECK(c.lambda == 0.1);
}

TEST_CASE("segmentation forward") {
    std::mt19937_64 g(7);
    JointModel model(small_config(JointTask::seg));
    const JointOutputs out =
        model.forward(random_array({3, 1, 16, 24}, g, 0, 1), random_array({3, 1, 8, 16, 24}, g, 0, 1), false);
    CHECK(out.logits.shape() == nn::Shape{3, 1, 16, 24});
    const Array p = nn::sigmoid(out.logits);
    for (double v : p.values()) CHECK((v > 0.0 && v < 1.0));
    CHECK(out.z.shape() == out.z_star.shape());
}

TEST_CASE("2D-only baseline has no 3D path") {
    std::mt19937_64 g(8);
    JointConfig c = small_config(JointTask::cls5);
    c.use_3d = false;
    JointModel model(c);
    const JointOutputs out = model.forward(random_array({2, 1, 16, 24}, g, 0, 1), Array(), false);
    CHECK(out.logits.shape() == nn::Shape{2, 5});
    CHECK_FALSE(out.z.defined());
    CHECK(out.fused_shapes.empty());
    for (const auto& p : model.parameters().params) CHECK(p.name.rfind("enc3d", 0) != 0);
}

TEST_CASE("cma sends gradients into both branches") {
    std::mt19937_64 g(9);
    for (const JointTask task : {JointTask::cls5, JointTask::seg}) {
        JointModel model(small_config(task));
        nn::ParamList params = model.parameters();
        params.zero_grad();
        const JointOutputs out =
            model.forward(random_array({4, 1, 16, 24}, g, 0, 1), random_array({4, 1, 8, 16, 24}, g, 0, 1), true);
        cma_loss(out.z, out.z_star, 0.1).backward();
        CHECK(grad_norm(params, "enc2d") > 0.0);
        CHECK(grad_norm(params, "enc3d") > 0.0);
    }
}

TEST_CASE("lambda zero leaves only the task loss") {
    std::mt19937_64 g(10);
    JointConfig c = small_config(JointTask::cls5);
    c.lambda = 0.0;
    JointModel model(c);
    const JointOutputs out =
        model.forward(random_array({4, 1, 16, 24}, g, 0, 1), random_array({4, 1, 8, 16, 24}, g, 0, 1), false);
    const std::vector<int> labels{0, 1, 4, 2};
    const JointLoss l = joint_loss(out, c, labels, Array());
    CHECK(l.total.item() == nn::cross_entropy(out.logits, labels).item());
    CHECK(l.cma == 0.0);

    c.lambda = 0.5;
    const JointLoss l2 = joint_loss(out, c, labels, Array());
    CHECK(l2.total.item() == doctest::Approx(l2.task + 0.5 * cma_loss(out.z, out.z_star, c.tau).item()).epsilon(1e-12));
}

TEST_CASE("segmentation task loss is the mean of dice and bce") {
    std::mt19937_64 g(11);
    JointConfig c = small_config(JointTask::seg);
    c.lambda = 0.0;
    JointModel model(c);
    const JointOutputs out =
        model.forward(random_array({2, 1, 16, 24}, g, 0, 1), random_array({2, 1, 8, 16, 24}, g, 0, 1), false);
    Array masks({2, 1, 16, 24}, 0.0);
    for (std::int64_t i = 0; i < masks.numel(); i += 3) masks.mutable_values()[i] = 1.0;
    const JointLoss l = joint_loss(out, c, {}, masks);
    const double want =
        0.5 * (nn::dice_loss(out.logits, masks).item() + nn::bce_with_logits(out.logits, masks).item());
    CHECK(l.task == doctest::Approx(want).epsilon(1e-12));
    CHECK_THROWS_AS(joint_loss(out, c, {}, Array()), ShapeError);
}

TEST_CASE("cross entropy is a per-sample mean") {
    std::mt19937_64 g(12);
    const Array a = random_array({3, 5}, g, -2, 2), b = random_array({2, 5}, g, -2, 2);
    const double ea = nn::cross_entropy(a, {1, 2, 3}).item(), eb = nn::cross_entropy(b, {4, 0}).item();
    const double joint = nn::cross_entropy(nn::concat({a, b}, 0), {1, 2, 3, 4, 0}).item();
    CHECK(joint == doctest::Approx((3 * ea + 2 * eb) / 5.0).epsilon(1e-12));
    CHECK_THROWS_AS(nn::cross_entropy(a, {1, 2, 7}), ShapeError);
}

TEST_CASE("joint learning rate schedules") {
    JointTrainOptions o;
    CHECK(o.lr == 1e-4);
    CHECK(o.batch_size == 8);
    CHECK(o.cosine_t_max == 200);
    const nn::LrSchedule cls = joint_lr_schedule(JointTask::cls5, o);
    CHECK(cls.at(0) == 1e-4);
    CHECK(std::abs(cls.at(100) - 5e-5) <= 1e-15);
    CHECK(std::abs(cls.at(200)) <= 1e-15);
    o.steps = 1000;
    const nn::LrSchedule seg = joint_lr_schedule(JointTask::seg, o);
    CHECK(seg.at(599) == 1e-4);
    CHECK(seg.at(600) == 5e-5);
}

TEST_CASE("config validation") {
    JointConfig c = JointConfig::desk(JointTask::seg);
    c.cma_tap = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = JointConfig::desk(JointTask::cls5);
    c.tau = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = JointConfig::desk(JointTask::cls5);
    c.lambda = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(parse_task("seg") == JointTask::seg);
    CHECK_THROWS_AS(parse_task("cls3"), ConfigError);
}

TEST_CASE("trainer is deterministic and the 3D input matters after training") {
    PhantomConfig pc;
    pc.seed = 3;
    const std::vector<Sample> samples = build_samples(generate_phantom(pc), ProjectionConfig::desk());
    std::vector<JointExample> data;
    for (const Sample& s : samples)
        data.push_back({s.px, s.unfolded, static_cast<int>(s.misalignment), s.binary_label, std::nullopt, "s"});
    auto run = [&data](JointModel& model) {
        JointTrainOptions o;
        o.steps = 4;
        o.batch_size = 4;
        JointTrainer t(model, data, o);
        std::vector<double> losses;
        for (int i = 0; i < 4; ++i) losses.push_back(t.step().loss);
        return losses;
    };
    JointModel a(JointConfig::desk(JointTask::cls5)), b(JointConfig::desk(JointTask::cls5));
    const auto la = run(a), lb = run(b);
    for (std::size_t i = 0; i < la.size(); ++i) CHECK(std::abs(la[i] - lb[i]) <= 1e-6);

    const Array px = image_to_array(data[0].px);
    const Array gt = volume_to_input(data[0].volume);
    const Array zero(gt.shape(), 0.0);
    const Array with_gt = a.forward(px, gt, false).logits;
    const Array with_zero = a.forward(px, zero, false).logits;
    double linf = 0.0;
    for (std::int64_t k = 0; k < with_gt.numel(); ++k)
        linf = std::max(linf, std::abs(with_gt.values()[k] - with_zero.values()[k]));
    CHECK(linf > 0.0);
}
