#include "partmim/grad_check.hpp"

#include <cmath>

#include "partmim/data_io.hpp"
#include "partmim/error.hpp"

namespace partmim {

GradCheckReport grad_check(const ModelParams& params, std::span<const ViewPair> batch,
                           const LossConfig& cfg, const GradCheckOptions& options) {
    ModelParams analytic = params.zeros_like();
    evaluate_objective(params, batch, cfg, &analytic);
    if (!options.corrupt_group.empty()) {
        Mat& g = analytic[analytic.index_of(options.corrupt_group)];
        g = g * 1.01 + Mat::Constant(g.rows(), g.cols(), 1e-3);
    }

    ModelParams probe = params;
    GradCheckReport report;
    for (std::size_t t = 0; t < probe.size(); ++t) {
        Mat& w = probe[t];
        const Mat& a = analytic[t];
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0, max_abs = 0.0;
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            const double orig = w.data()[i];
            w.data()[i] = orig + options.step;
            const double plus = evaluate_objective(probe, batch, cfg).total;
            w.data()[i] = orig - options.step;
            const double minus = evaluate_objective(probe, batch, cfg).total;
            w.data()[i] = orig;
            const double numeric = (plus - minus) / (2.0 * options.step);
            const double d = a.data()[i] - numeric;
            diff2 += d * d;
            a2 += a.data()[i] * a.data()[i];
            n2 += numeric * numeric;
            max_abs = std::max(max_abs, std::abs(d));
        }
        const double denom = std::sqrt(a2) + std::sqrt(n2);
        GradCheckGroup g{params.info[t].name, static_cast<std::size_t>(w.size()), max_abs,
                         denom > 0.0 ? std::sqrt(diff2) / denom : 0.0};
        if (!std::isfinite(g.rel_err)) throw NumericalError("non-finite gradient in " + g.name);
        if (g.rel_err > report.worst_rel_err || report.groups.empty()) {
            report.worst_rel_err = g.rel_err;
            report.worst_group = g.name;
        }
        report.groups.push_back(std::move(g));
    }
    return report;
}

std::vector<ViewPair> grad_check_batch(const TrainConfig& cfg, std::uint64_t seed) {
    const PatchGrid grid = cfg.model.grid();
    Rng rng(derive_seed({seed, 17}));
    std::vector<ViewPair> batch;
    for (int s = 0; s < 2; ++s) {
        ImageBuffer img(grid.image_height(), grid.image_width());
        for (auto& v : img.data) v = rng.uniform();
        KeypointSet kps{};
        for (auto& k : kps)
            k = {rng.uniform(0.0, grid.image_width()), rng.uniform(0.0, grid.image_height()), 1.0};
        batch.push_back(build_views(rng, "check_" + std::to_string(s), img, kps, cfg));
    }
    return batch;
}

}  // namespace partmim
