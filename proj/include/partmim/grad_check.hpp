#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "partmim/losses.hpp"
#include "partmim/model.hpp"
#include "partmim/training.hpp"

namespace partmim {

struct GradCheckGroup {
    std::string name;
    std::size_t size = 0;
    double max_abs_err = 0.0;
    /// |analytic - numeric| / (|analytic| + |numeric|) over the whole group,
    /// 0 when both are zero.
    double rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    double worst_rel_err = 0.0;
    std::string worst_group;

    bool passed(double tol) const { return worst_rel_err <= tol; }
};

struct GradCheckOptions {
    double step = 1e-5;
    /// Name of a parameter group whose analytic gradient is deliberately
    /// perturbed, to confirm the check can fail.
    std::string corrupt_group;
};

/// Central differences of the total objective against evaluate_objective's gradients.
GradCheckReport grad_check(const ModelParams& params, std::span<const ViewPair> batch,
                           const LossConfig& cfg, const GradCheckOptions& options = {});

/// Two-sample batch over a tiny random image, for quick checks.
std::vector<ViewPair> grad_check_batch(const TrainConfig& cfg, std::uint64_t seed);

}  // namespace partmim
