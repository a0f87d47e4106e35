#include <doctest.h>

#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <random>

#include "px3d/error.hpp"
#include "px3d/metrics.hpp"
#include "oracles.hpp"

using namespace px3d;
using px3d::testing::oracle_ssim;

namespace {

ImageD random_image(int rows, int cols, std::mt19937_64& g) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ImageD im(rows, cols);
    for (double& v : im.data) v = u(g);
    return im;
}

std::vector<float> random_mask(std::size_t n, double p, std::mt19937_64& g) {
    std::bernoulli_distribution b(p);
    std::vector<float> m(n);
    for (float& v : m) v = b(g) ? 1.0f : 0.0f;
    return m;
}

}  // namespace

TEST_CASE("psnr examples") {
    Image a(4, 6, 0.0f), b(4, 6, 0.5f);
    CHECK(psnr(a, b) == doctest::Approx(6.0206).epsilon(1e-5));
    CHECK(psnr(a, b) == psnr(b, a));
    CHECK(std::isinf(psnr(b, b)));
    CHECK(psnr(b, b) > 0);
    CHECK_THROWS_AS(psnr(a, Image(4, 5)), MetricError);
    Volume va({2, 3, 4}, {1, 1, 1}, 0.25f), vb({2, 3, 4}, {1, 1, 1}, 0.75f);
    CHECK(psnr(va, vb) == doctest::Approx(6.0206).epsilon(1e-5));
    CHECK_THROWS_AS(psnr(va, Volume({2, 3, 5})), MetricError);
}

TEST_CASE("ssim closed form for constant images") {
    ImageD a(16, 16, 0.2), b(16, 16, 0.8);
    const double want = (2 * 0.16 + 1e-4) / (0.04 + 0.64 + 1e-4);
    CHECK(std::abs(ssim(a, b) - want) < 1e-12);
    CHECK(ssim(a, b) == doctest::Approx(0.47066).epsilon(1e-4));
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(ssim(ImageD(10, 20), ImageD(10, 20)), MetricError);
    CHECK_THROWS_AS(ssim(ImageD(12, 12), ImageD(12, 13)), MetricError);
}

TEST_CASE("ssim matches a per-window oracle") {
    std::mt19937_64 g(1);
    for (const auto [r, c] : {std::pair{11, 11}, std::pair{13, 17}, std::pair{24, 20}}) {
        const ImageD a = random_image(r, c, g);
        ImageD b = a;
        std::normal_distribution<double> n(0.0, 0.1);
        for (double& v : b.data) v = std::clamp(v + n(g), 0.0, 1.0);
        CHECK(std::abs(ssim(a, b) - oracle_ssim(a, b)) < 1e-6);
        CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
        const ImageD other = random_image(r, c, g);
        CHECK(std::abs(ssim(a, other) - oracle_ssim(a, other)) < 1e-6);
    }
}

TEST_CASE("volume ssim is the mean over axial slices") {
    std::mt19937_64 g(2);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Volume a({3, 12, 14}), b({3, 12, 14});
    for (float& v : a.data) v = u(g);
    for (float& v : b.data) v = u(g);
    double sum = 0.0;
    for (int k = 0; k < 3; ++k) {
        ImageD sa(12, 14), sb(12, 14);
        for (int r = 0; r < 12; ++r)
            for (int c = 0; c < 14; ++c) {
                sa.at(r, c) = a.at(k, r, c);
                sb.at(r, c) = b.at(k, r, c);
            }
        sum += oracle_ssim(sa, sb);
    }
    CHECK(std::abs(ssim(a, b) - sum / 3.0) < 1e-6);
    CHECK(ssim(a, a) == doctest::Approx(1.0));
}

TEST_CASE("dsc_volumes thresholding") {
    std::mt19937_64 g(3);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Volume v({6, 8, 10});
    for (float& x : v.data) x = u(g);
    CHECK(dsc_volumes(v, v) == 1.0);

    Volume left({4, 4, 8}, {1, 1, 1}, 0.0f), right = left;
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
            left.at(a, b, 1) = 1.0f;
            right.at(a, b, 6) = 1.0f;
        }
    CHECK(dsc_volumes(left, right) == 0.0);
    CHECK(dsc_volumes(Volume({2, 2, 2}), Volume({2, 2, 2})) == 1.0);
    CHECK_THROWS_AS(dsc_volumes(left, Volume({4, 4, 7})), MetricError);

    // Positive scaling moves the threshold with the mean.
    for (float k : {0.5f, 3.0f, 17.0f}) {
        Volume s = v;
        for (float& x : s.data) x *= k;
        CHECK(threshold_mask(s) == threshold_mask(v));
        CHECK(dsc_volumes(s, v) == 1.0);
    }
}

TEST_CASE("threshold mask matches an analytic region") {
    // Radial ramp: density 1 - r/R inside a ball, so the above-threshold set is a smaller ball.
    const int n = 40;
    Volume v({n, n, n});
    const double c = (n - 1) / 2.0, R = 18.0;
    double sum = 0.0;
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            for (int d = 0; d < n; ++d) {
                const double r = std::sqrt((a - c) * (a - c) + (b - c) * (b - c) + (d - c) * (d - c));
                v.at(a, b, d) = static_cast<float>(std::max(0.0, 1.0 - r / R));
                sum += v.at(a, b, d);
            }
    const double thr = 1.5 * sum / static_cast<double>(v.size());
    const double r_in = R * (1.0 - thr);
    const auto mask = threshold_mask(v);
    std::size_t agree = 0;
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            for (int d = 0; d < n; ++d) {
                const double r = std::sqrt((a - c) * (a - c) + (b - c) * (b - c) + (d - c) * (d - c));
                agree += (mask[v.index(a, b, d)] != 0) == (r < r_in);
            }
    CHECK(static_cast<double>(agree) / static_cast<double>(v.size()) >= 0.99);

    Volume gt = v;
    for (float& x : gt.data) x *= 2.0f;
    CHECK(dsc_volumes(v, gt, ThresholdReference::own_mean) == 1.0);
    CHECK(dsc_volumes(v, gt, ThresholdReference::gt_mean) < 1.0);
}

TEST_CASE("mask metrics examples") {
    std::vector<float> gt(20, 0.0f), pred(20, 0.0f);
    for (int i = 0; i < 8; ++i) gt[i] = 1.0f;
    MaskMetrics same = mask_metrics(gt, gt);
    CHECK(same.dsc == 1.0);
    CHECK(same.iou == 1.0);
    CHECK(same.precision == 1.0);
    CHECK(same.recall == 1.0);

    for (int i = 0; i < 4; ++i) pred[i] = 1.0f;
    const MaskMetrics half = mask_metrics(pred, gt);
    CHECK(half.recall == 0.5);
    CHECK(half.precision == 1.0);
    CHECK(half.dsc == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(half.iou == 0.5);

    const std::vector<float> empty(20, 0.0f);
    const MaskMetrics none = mask_metrics(empty, empty);
    CHECK(none.dsc == 1.0);
    CHECK(none.iou == 1.0);
    CHECK(none.precision == 1.0);
    CHECK(none.recall == 1.0);
    const MaskMetrics missed = mask_metrics(empty, gt);
    CHECK(missed.dsc == 0.0);
    CHECK(missed.recall == 0.0);

    std::vector<float> soft = gt;
    soft[3] = 0.5f;
    CHECK_THROWS_AS(mask_metrics(soft, gt), MetricError);
    CHECK_THROWS_AS(mask_metrics(std::vector<float>(19, 0.0f), gt), MetricError);
}

TEST_CASE("dsc and iou identity over random masks") {
    std::mt19937_64 g(4);
    std::uniform_int_distribution<int> size(1, 200);
    std::uniform_real_distribution<double> density(0.0, 1.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = static_cast<std::size_t>(size(g));
        const auto a = random_mask(n, density(g), g), b = random_mask(n, density(g), g);
        const MaskMetrics m = mask_metrics(a, b), r = mask_metrics(b, a);
        CHECK(std::abs(m.dsc - 2 * m.iou / (1 + m.iou)) <= 1e-12);
        CHECK(m.dsc == r.dsc);
        CHECK(m.iou == r.iou);
        for (double v : {m.dsc, m.iou, m.precision, m.recall}) CHECK((v >= 0.0 && v <= 1.0));
    }
}

TEST_CASE("binary classification example") {
    std::vector<int> preds, labels;
    auto push = [&](int p, int l, int times) {
        for (int i = 0; i < times; ++i) {
            preds.push_back(p);
            labels.push_back(l);
        }
    };
    push(1, 1, 6);
    push(1, 0, 2);
    push(0, 1, 1);
    push(0, 0, 5);
    const ClassificationReport r = classification_report(preds, labels, 2);
    CHECK(r.per_class[1].precision == 0.75);
    CHECK(r.per_class[1].recall == doctest::Approx(6.0 / 7.0).epsilon(1e-12));
    CHECK(r.per_class[1].f1 == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(r.accuracy == doctest::Approx(11.0 / 14.0).epsilon(1e-12));

    const MetricReport m = to_metric_report(r, "cls2");
    CHECK(m.get("f1").value() == doctest::Approx(0.8));
    const auto j = nlohmann::json::parse(m.to_json());
    CHECK(j["samples"] == 14);
    CHECK(j["per_class"].size() == 2);
    CHECK(m.to_text().find("accuracy") != std::string::npos);
}

TEST_CASE("classification report invariants") {
    std::mt19937_64 g(5);
    std::uniform_int_distribution<int> cls(0, 4);
    std::vector<int> preds(60), labels(60);
    for (int i = 0; i < 60; ++i) {
        labels[i] = cls(g);
        preds[i] = (i % 3 == 0) ? cls(g) : labels[i];
    }
    const ClassificationReport perfect = classification_report(labels, labels, 5);
    CHECK(perfect.accuracy == 1.0);
    CHECK(perfect.macro_f1 == 1.0);

    const ClassificationReport base = classification_report(preds, labels, 5);
    const int relabel[5] = {3, 0, 4, 1, 2};
    std::vector<int> p2, l2;
    for (int i = 0; i < 60; ++i) {
        p2.push_back(relabel[preds[i]]);
        l2.push_back(relabel[labels[i]]);
    }
    const ClassificationReport moved = classification_report(p2, l2, 5);
    CHECK(moved.accuracy == base.accuracy);
    CHECK(moved.macro_f1 == doctest::Approx(base.macro_f1).epsilon(1e-12));
    for (double v : {base.accuracy, base.macro_precision, base.macro_recall, base.macro_f1})
        CHECK((v >= 0.0 && v <= 1.0));

    // Class 4 never appears: it contributes zero and a warning.
    const ClassificationReport sparse = classification_report({0, 1, 2, 3}, {0, 1, 2, 3}, 5);
    CHECK(sparse.macro_f1 == doctest::Approx(0.8).epsilon(1e-12));
    CHECK_FALSE(sparse.warnings.empty());

    CHECK_THROWS_AS(classification_report({0, 5}, {0, 1}, 5), MetricError);
    CHECK_THROWS_AS(classification_report({0}, {0, 1}, 5), MetricError);
}
