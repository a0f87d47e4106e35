#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "px3d/nn/array.hpp"

namespace px3d::nn {

struct GradCheckOptions {
    double eps = 1e-4;
    double tolerance = 1e-3;
    /// Entries probed per group; groups smaller than this are checked exhaustively.
    std::int64_t max_entries = 64;
    std::uint64_t seed = 7;
};

struct GradCheckReport {
    struct Group {
        std::string name;
        double max_rel_error = 0.0;
        std::int64_t checked = 0;
    };
    std::vector<Group> groups;
    bool ok = true;
    std::string failure;  ///< set when a non-finite value was produced

    double max_rel_error() const;
};

struct GradInput {
    std::string name;
    Array value;  ///< leaf; perturbed in place during the check
};

/// Compares reverse-mode gradients of sum(R * f(inputs)), R a fixed random
/// projection, with central differences. Error per group is
/// max|analytic - numeric| / max(max|analytic|, max|numeric|).
GradCheckReport grad_check(const std::function<Array(const std::vector<Array>&)>& f, std::vector<GradInput> inputs,
                           const GradCheckOptions& options = {});

}  // namespace px3d::nn
