#include "partmim/optimizer.hpp"

#include <algorithm>
#include <cmath>

namespace partmim {

OptimizerState make_optimizer_state(const ModelParams& params, double beta1, double beta2,
                                    double eps) {
    OptimizerState s;
    s.first_moment = params.zeros_like();
    s.second_moment = params.zeros_like();
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    return s;
}

void adamw_step(ModelParams& params, const ModelParams& grads, OptimizerState& state, double lr,
                double weight_decay) {
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(state.beta1, t);
    const double bias2 = 1.0 - std::pow(state.beta2, t);
    const double decay_factor = 1.0 - lr * weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Mat& p = params[i];
        const Mat& g = grads[i];
        Mat& m = state.first_moment[i];
        Mat& v = state.second_moment[i];
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
        if (params.info[i].decay) p *= decay_factor;
        const Mat update =
            (m.array() / bias1) / ((v.array() / bias2).sqrt() + state.eps);
        p -= lr * update;
    }
}

double scaled_peak_lr(double base_lr, int batch_size) { return base_lr * batch_size / 256.0; }

double lr_at(std::int64_t step, const LrSchedule& s) {
    if (step <= 0 || s.total_steps <= 0) return 0.0;
    if (step >= s.total_steps) return 0.0;
    if (step < s.warmup_steps)
        return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    const auto decay_steps = std::max<std::int64_t>(1, s.total_steps - s.warmup_steps);
    const double progress = static_cast<double>(step - s.warmup_steps) / decay_steps;
    return 0.5 * s.peak_lr * (1.0 + std::cos(M_PI * progress));
}

}  // namespace partmim
