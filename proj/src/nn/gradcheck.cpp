#include "px3d/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "px3d/error.hpp"
#include "px3d/nn/ops.hpp"

namespace px3d::nn {

double GradCheckReport::max_rel_error() const {
    double m = 0.0;
    for (const auto& g : groups) m = std::max(m, g.max_rel_error);
    return m;
}

GradCheckReport grad_check(const std::function<Array(const std::vector<Array>&)>& f, std::vector<GradInput> inputs,
                           const GradCheckOptions& options) {
    GradCheckReport report;
    std::vector<Array> args;
    for (auto& in : inputs) {
        in.value.set_requires_grad(true);
        in.value.zero_grad();
        args.push_back(in.value);
    }
    std::mt19937_64 rng(options.seed);
    Array projection;

    auto objective = [&]() -> double {
        NoGradGuard guard;
        return sum(mul(f(args), projection)).item();
    };

    try {
        const Array out = f(args);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        std::vector<double> r(static_cast<std::size_t>(out.numel()));
        for (double& v : r) v = u(rng);
        projection = Array(out.shape(), std::move(r));
        sum(mul(out, projection)).backward();

        for (auto& in : inputs) {
            GradCheckReport::Group group{in.name, 0.0, 0};
            const std::int64_t n = in.value.numel();
            std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
            std::iota(idx.begin(), idx.end(), 0);
            if (n > options.max_entries) {
                std::shuffle(idx.begin(), idx.end(), rng);
                idx.resize(static_cast<std::size_t>(options.max_entries));
            }
            std::vector<double> analytic, numeric;
            const auto grad = in.value.has_grad() ? in.value.grad() : std::span<const double>{};
            auto vals = in.value.mutable_values();
            for (std::int64_t i : idx) {
                const double saved = vals[i];
                vals[i] = saved + options.eps;
                const double fp = objective();
                vals[i] = saved - options.eps;
                const double fm = objective();
                vals[i] = saved;
                numeric.push_back((fp - fm) / (2.0 * options.eps));
                analytic.push_back(grad.empty() ? 0.0 : grad[i]);
            }
            double diff = 0.0, scale = 0.0;
            for (std::size_t k = 0; k < analytic.size(); ++k) {
                if (!std::isfinite(analytic[k]) || !std::isfinite(numeric[k]))
                    throw NumericError("grad_check: non-finite gradient in " + in.name);
                diff = std::max(diff, std::abs(analytic[k] - numeric[k]));
                scale = std::max({scale, std::abs(analytic[k]), std::abs(numeric[k])});
            }
            group.max_rel_error = scale > 1e-12 ? diff / scale : diff;
            group.checked = static_cast<std::int64_t>(idx.size());
            if (!(group.max_rel_error < options.tolerance)) report.ok = false;
            report.groups.push_back(group);
        }
    } catch (const NumericError& e) {
        report.ok = false;
        report.failure = e.what();
    }
    return report;
}

}  // namespace px3d::nn
