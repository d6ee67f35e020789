#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "partmim/cli.hpp"
#include "partmim/config.hpp"
#include "partmim/error.hpp"
#include "partmim/geometry.hpp"
#include "partmim/grad_check.hpp"
#include "partmim/losses.hpp"
#include "partmim/mask_sampling.hpp"
#include "partmim/model.hpp"
#include "partmim/optimizer.hpp"

namespace py = pybind11;
using namespace partmim;

namespace {

KeypointSet keypoints_from(const Mat& m) {
    if (m.rows() != kNumKeypoints || m.cols() != 3)
        throw ConfigError("keypoints must have shape (17, 3)");
    KeypointSet k{};
    for (int i = 0; i < kNumKeypoints; ++i) k[i] = {m(i, 0), m(i, 1), m(i, 2)};
    return k;
}

py::dict plan_dict(const MaskPlan& plan) {
    std::vector<std::string> tags;
    for (const auto& p : plan.provenance) tags.push_back(p.tag());
    std::vector<std::string> selection;
    for (PartId p : plan.selection) selection.emplace_back(part_name(p));
    py::dict d;
    d["grid"] = py::make_tuple(plan.grid.grid_h, plan.grid.grid_w);
    d["masked"] = plan.masked;
    d["provenance"] = tags;
    d["selection"] = selection;
    return d;
}

}  // namespace

PYBIND11_MODULE(_partmim, m) {
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

    m.def(
        "num_masked", [](int n_patches, double ratio) { return num_masked(ratio, n_patches); },
        py::arg("n_patches"), py::arg("mask_ratio"));

    m.def(
        "part_patches",
        [](const Mat& keypoints, const std::string& part, int grid_h, int grid_w, int patch_size,
           double threshold) {
            const auto id = part_from_name(part);
            if (!id) throw ConfigError("unknown part '" + part + "'");
            return part_patches(keypoints_from(keypoints), *id, PatchGrid{grid_h, grid_w, patch_size}, threshold);
        },
        py::arg("keypoints"), py::arg("part"), py::arg("grid_h"), py::arg("grid_w"), py::arg("patch_size"),
        py::arg("threshold") = 0.0);

    m.def(
        "sample_mask",
        [](const Mat& keypoints, int grid_h, int grid_w, int patch_size, double mask_ratio, std::uint64_t seed,
           const std::string& strategy) {
            SamplerConfig cfg;
            cfg.mask_ratio = mask_ratio;
            cfg.strategy = strategy_from_name(strategy);
            Rng rng(seed);
            return plan_dict(sample_mask(rng, keypoints_from(keypoints), PatchGrid{grid_h, grid_w, patch_size}, cfg));
        },
        py::arg("keypoints"), py::arg("grid_h"), py::arg("grid_w"), py::arg("patch_size"),
        py::arg("mask_ratio") = 0.5, py::arg("seed") = 0, py::arg("strategy") = "part_guided");

    m.def(
        "align_loss",
        [](const Mat& z, const Mat& zt, double temperature, const std::string& negatives) {
            Mat dz, dzt;
            const double v = align_loss(z, zt, temperature, negatives_from_name(negatives), &dz, &dzt);
            return py::make_tuple(v, dz, dzt);
        },
        py::arg("z"), py::arg("zt"), py::arg("temperature") = 0.2, py::arg("negatives") = "cross_view",
        "Returns (loss, d_z, d_zt).");

    m.def(
        "normalize_targets", [](const Mat& patches, double eps) { return normalize_targets(patches, eps); },
        py::arg("patches"), py::arg("eps") = 1e-6);

    m.def(
        "lr_at",
        [](std::int64_t step, double peak, std::int64_t warmup, std::int64_t total) {
            return lr_at(step, LrSchedule{peak, warmup, total});
        },
        py::arg("step"), py::arg("peak_lr"), py::arg("warmup_steps"), py::arg("total_steps"));

    m.def(
        "parameter_count",
        [](int embed_dim, int depth, int n_heads, int decoder_dim, int decoder_depth, int patch_size, int grid_h,
           int grid_w) {
            ModelConfig c;
            c.embed_dim = embed_dim;
            c.depth = depth;
            c.n_heads = n_heads;
            c.decoder_dim = decoder_dim;
            c.decoder_depth = decoder_depth;
            c.patch_size = patch_size;
            c.grid_h = grid_h;
            c.grid_w = grid_w;
            return make_params(c).scalar_count();
        },
        py::arg("embed_dim") = 32, py::arg("depth") = 2, py::arg("n_heads") = 2, py::arg("decoder_dim") = 16,
        py::arg("decoder_depth") = 1, py::arg("patch_size") = 8, py::arg("grid_h") = 8, py::arg("grid_w") = 4);

    m.def(
        "grad_check_tiny",
        [](std::uint64_t seed, const std::string& corrupt) {
            const TrainConfig cfg = tiny_check_config();
            Rng rng(seed);
            const ModelParams params = init_params(rng, cfg.model);
            GradCheckOptions opts;
            opts.corrupt_group = corrupt;
            const GradCheckReport r = grad_check(params, grad_check_batch(cfg, seed), cfg.loss, opts);
            return py::make_tuple(r.worst_group, r.worst_rel_err);
        },
        py::arg("seed") = 0, py::arg("corrupt") = "", "Returns (worst_group, worst_rel_err) on the tiny model.");

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::vector<std::string> owned{"partmim"};
            owned.insert(owned.end(), args.begin(), args.end());
            std::vector<const char*> argv;
            for (const auto& a : owned) argv.push_back(a.c_str());
            py::gil_scoped_release release;
            return run_cli(static_cast<int>(argv.size()), argv.data());
        },
        py::arg("args"), "Runs the command-line tool in-process; returns its exit code.");
}
