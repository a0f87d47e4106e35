#include "px3d/nn/loss.hpp"

#include <algorithm>
#include <cmath>

#include "px3d/error.hpp"

namespace px3d::nn {

Array cross_entropy(const Array& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size()))
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
    const std::int64_t N = logits.dim(0), K = logits.dim(1);
    if (N == 0) throw ShapeError("cross_entropy: empty batch");
    for (int l : labels)
        if (l < 0 || l >= K) throw ShapeError("cross_entropy: label " + std::to_string(l) + " outside [0," +
                                              std::to_string(K) + ")");
    const auto z = logits.values();
    std::vector<double> prob(static_cast<std::size_t>(N * K));
    double loss = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
        const double* row = z.data() + n * K;
        const double m = *std::max_element(row, row + K);
        double s = 0.0;
        for (std::int64_t k = 0; k < K; ++k) s += std::exp(row[k] - m);
        const double lse = m + std::log(s);
        for (std::int64_t k = 0; k < K; ++k) prob[n * K + k] = std::exp(row[k] - lse);
        loss += lse - row[labels[n]];
    }
    loss /= static_cast<double>(N);
    return make_result("cross_entropy", Shape{}, {loss}, {logits},
                       [N, K, labels, prob = std::move(prob)](detail::Node& self) {
                           auto& g = self.inputs[0]->ensure_grad();
                           const double s = self.grad[0] / static_cast<double>(N);
                           for (std::int64_t n = 0; n < N; ++n)
                               for (std::int64_t k = 0; k < K; ++k)
                                   g[n * K + k] += s * (prob[n * K + k] - (k == labels[n] ? 1.0 : 0.0));
                       });
}

namespace {

double stable_sigmoid(double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

}  // namespace

Array bce_with_logits(const Array& logits, const Array& targets) {
    if (logits.shape() != targets.shape())
        throw ShapeError("bce_with_logits: " + shape_str(logits.shape()) + " vs " + shape_str(targets.shape()));
    const auto z = logits.values(), t = targets.values();
    const double n = static_cast<double>(std::max<std::int64_t>(1, logits.numel()));
    double loss = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i)
        loss += std::max(z[i], 0.0) - z[i] * t[i] + std::log1p(std::exp(-std::abs(z[i])));
    return make_result("bce_with_logits", Shape{}, {loss / n}, {logits, targets}, [n](detail::Node& self) {
        const auto& z = self.inputs[0]->value;
        const auto& t = self.inputs[1]->value;
        const double s = self.grad[0] / n;
        if (self.input_needs_grad(0)) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t i = 0; i < z.size(); ++i) g[i] += s * (stable_sigmoid(z[i]) - t[i]);
        }
        if (self.input_needs_grad(1)) {
            auto& g = self.inputs[1]->ensure_grad();
            for (std::size_t i = 0; i < z.size(); ++i) g[i] -= s * z[i];
        }
    });
}

Array dice_loss(const Array& logits, const Array& targets, double eps) {
    if (logits.shape() != targets.shape() || logits.rank() < 1)
        throw ShapeError("dice_loss: " + shape_str(logits.shape()) + " vs " + shape_str(targets.shape()));
    const std::int64_t N = logits.dim(0);
    const std::int64_t M = logits.numel() / std::max<std::int64_t>(1, N);
    const auto z = logits.values(), t = targets.values();
    std::vector<double> p(z.size()), inter(N, 0.0), denom(N, 0.0);
    double loss = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t i = 0; i < M; ++i) {
            const std::size_t k = static_cast<std::size_t>(n * M + i);
            p[k] = stable_sigmoid(z[k]);
            inter[n] += p[k] * t[k];
            denom[n] += p[k] + t[k];
        }
        loss += 1.0 - (2.0 * inter[n] + eps) / (denom[n] + eps);
    }
    loss /= static_cast<double>(N);
    return make_result("dice_loss", Shape{}, {loss}, {logits, targets},
                       [N, M, eps, p = std::move(p), inter = std::move(inter),
                        denom = std::move(denom)](detail::Node& self) {
                           const auto& t = self.inputs[1]->value;
                           const double s = self.grad[0] / static_cast<double>(N);
                           const bool nz = self.input_needs_grad(0), nt = self.input_needs_grad(1);
                           double* gz = nz ? self.inputs[0]->ensure_grad().data() : nullptr;
                           double* gt = nt ? self.inputs[1]->ensure_grad().data() : nullptr;
                           for (std::int64_t n = 0; n < N; ++n) {
                               const double num = 2.0 * inter[n] + eps, den = denom[n] + eps;
                               for (std::int64_t i = 0; i < M; ++i) {
                                   const std::size_t k = static_cast<std::size_t>(n * M + i);
                                   // d(-num/den)/dp and /dt
                                   const double dp = -(2.0 * t[k] * den - num) / (den * den);
                                   const double dt = -(2.0 * p[k] * den - num) / (den * den);
                                   if (nz) gz[k] += s * dp * p[k] * (1.0 - p[k]);
                                   if (nt) gt[k] += s * dt;
                               }
                           }
                       });
}

}  // namespace px3d::nn
