#pragma once

#include <cstdint>

#include "partmim/model.hpp"

namespace partmim {

/// Adaptive-moment optimizer state with decoupled weight decay.
struct OptimizerState {
    ModelParams first_moment;
    ModelParams second_moment;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
};

OptimizerState make_optimizer_state(const ModelParams& params, double beta1 = 0.9,
                                    double beta2 = 0.95, double eps = 1e-8);

/// One update. Groups flagged `decay` are first scaled by (1 - lr * wd);
/// biases, norms and the learned tokens are not decayed.
void adamw_step(ModelParams& params, const ModelParams& grads, OptimizerState& state, double lr,
                double weight_decay);

struct LrSchedule {
    double peak_lr = 0.0;
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 0;
};

/// Linear scaling rule: base_lr * batch_size / 256.
double scaled_peak_lr(double base_lr, int batch_size);

/// Linear warmup from 0, then half-cosine decay reaching 0 at total_steps.
double lr_at(std::int64_t step, const LrSchedule& schedule);

}  // namespace partmim
