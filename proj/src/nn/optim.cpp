#include "px3d/nn/optim.hpp"

#include <cmath>
#include <numbers>

#include "px3d/error.hpp"

namespace px3d::nn {

Adam::Adam(ParamList params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_.params) {
        state_.m.emplace_back(static_cast<std::size_t>(p.param.numel()), 0.0);
        state_.v.emplace_back(static_cast<std::size_t>(p.param.numel()), 0.0);
    }
}

void Adam::step(double lr) {
    ++state_.step;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.step));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.step));
    for (std::size_t k = 0; k < params_.params.size(); ++k) {
        Array& p = params_.params[k].param;
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        auto w = p.mutable_values();
        auto& m = state_.m[k];
        auto& v = state_.v[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
    }
}

double LrSchedule::at(std::int64_t step) const {
    switch (kind) {
        case Kind::constant:
            return base;
        case Kind::step_halving:
            if (period <= 0) throw ConfigError("LrSchedule: halving period must be positive");
            return base * std::pow(0.5, static_cast<double>(step / period));
        case Kind::cosine:
            if (period <= 0) throw ConfigError("LrSchedule: cosine T_max must be positive");
            return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(period)));
        case Kind::halve_once:
            return step >= period ? 0.5 * base : base;
    }
    return base;
}

}  // namespace px3d::nn
