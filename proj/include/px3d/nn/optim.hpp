#pragma once

#include <cstdint>
#include <vector>

#include "px3d/nn/layers.hpp"

namespace px3d::nn {

struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::int64_t step = 0;
};

class Adam {
public:
    Adam(ParamList params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    /// One update with the given learning rate; parameters without a gradient are left alone.
    void step(double lr);
    void zero_grad() { params_.zero_grad(); }

    const ParamList& params() const { return params_; }
    AdamState& state() { return state_; }
    const AdamState& state() const { return state_; }

private:
    ParamList params_;
    double beta1_, beta2_, eps_;
    AdamState state_;
};

struct LrSchedule {
    enum class Kind { constant, step_halving, cosine, halve_once };
    Kind kind = Kind::constant;
    double base = 1e-3;
    /// step_halving: halve every `period` steps; cosine: T_max; halve_once: step at which lr halves.
    std::int64_t period = 0;

    double at(std::int64_t step) const;

    static LrSchedule constant(double lr) { return {Kind::constant, lr, 0}; }
    static LrSchedule step_halving(double lr, std::int64_t every) { return {Kind::step_halving, lr, every}; }
    /// base * (1 + cos(pi * step / t_max)) / 2, continued periodically past t_max.
    static LrSchedule cosine(double lr, std::int64_t t_max) { return {Kind::cosine, lr, t_max}; }
    static LrSchedule halve_once(double lr, std::int64_t at_step) { return {Kind::halve_once, lr, at_step}; }
};

}  // namespace px3d::nn
