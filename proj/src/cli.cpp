#include "partmim/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "partmim/config.hpp"
#include "partmim/data_io.hpp"
#include "partmim/error.hpp"
#include "partmim/grad_check.hpp"
#include "partmim/training.hpp"

namespace partmim {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr std::size_t kGradCheckParamCap = 50000;
constexpr double kGradCheckTolerance = 1e-4;
constexpr double kMaskedGray = 0.5;
// derive_seed stream tags for subcommands that draw masks outside training.
constexpr std::uint64_t kPlanStream = 4;
constexpr std::uint64_t kSynthStream = 5;
constexpr std::uint64_t kInitStream = 1;  // matches run_pretrain's initialization

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> sets;
    std::string out;
    std::string manifest;
};

void add_common(CLI::App* sub, CommonOptions& o) {
    sub->add_option("--config", o.config, "JSON config file");
    sub->add_option("--seed", o.seed, "random seed (default 0)");
    sub->add_option("--set,--override", o.sets, "config override KEY=VALUE (repeatable)");
    sub->add_option("--out", o.out, "output path");
}

TrainConfig resolve_config(const CommonOptions& o, const TrainConfig& base) {
    TrainConfig cfg = load_train_config(o.config, o.sets, base);
    if (o.seed) cfg.seed = *o.seed;
    if (!o.manifest.empty()) cfg.manifest = o.manifest;
    return cfg;
}

Dataset open_dataset(const std::string& manifest) {
    if (manifest.empty()) throw ConfigError("no manifest given (use --manifest or data.manifest)");
    Dataset d = load_dataset(load_manifest(manifest));
    if (d.size() == 0) throw ConfigError("manifest '" + manifest + "' has no loadable records");
    return d;
}

// The whole source image resized to the model input, no flip.
struct Framed {
    ImageBuffer image;
    Mat patches;
    KeypointSet keypoints{};
};

Framed frame(const ImageBuffer& src, const KeypointSet& kps, const PatchGrid& grid) {
    const CropParams crop{0.0, 0.0, static_cast<double>(src.width), static_cast<double>(src.height),
                          false};
    Framed f;
    f.image = apply_crop(src, crop, grid.image_height(), grid.image_width());
    f.keypoints = transform_keypoints(kps, crop, grid.image_height(), grid.image_width());
    f.patches = patchify(f.image, grid);
    return f;
}

std::vector<MaskPlanRecord> draw_plans(const Dataset& data, const TrainConfig& cfg) {
    const PatchGrid grid = cfg.model.grid();
    std::vector<MaskPlanRecord> plans;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& rec = data.manifest.records[i];
        const Framed f = frame(data.images[i], rec.keypoints, grid);
        Rng rng(derive_seed({cfg.seed, kPlanStream, i}));
        plans.push_back({rec.id, "a", sample_mask(rng, f.keypoints, grid, cfg.sampler)});
        plans.push_back({rec.id, "b", sample_mask(rng, f.keypoints, grid, cfg.sampler)});
    }
    return plans;
}

std::map<std::string, std::size_t> index_by_id(const Dataset& data) {
    std::map<std::string, std::size_t> out;
    for (std::size_t i = 0; i < data.size(); ++i) out[data.manifest.records[i].id] = i;
    return out;
}

void check_plans(const std::vector<MaskPlanRecord>& plans, const std::map<std::string, std::size_t>& ids,
                 const PatchGrid& grid, const std::string& source) {
    if (plans.empty()) throw ConfigError("plan file '" + source + "' is empty");
    for (const auto& p : plans) {
        if (!ids.count(p.id))
            throw ConfigError("plan file '" + source + "': id '" + p.id + "' is not in the manifest");
        if (!(p.plan.grid == grid))
            throw ConfigError("plan file '" + source + "': id '" + p.id + "' has grid " +
                              std::to_string(p.plan.grid.grid_h) + "x" + std::to_string(p.plan.grid.grid_w) +
                              ", model grid is " + std::to_string(grid.grid_h) + "x" +
                              std::to_string(grid.grid_w));
    }
}

void emit(const json& j, const std::string& path) {
    if (path.empty()) {
        std::cout << j.dump(2) << "\n";
    } else {
        write_file(path, j.dump(2) + "\n");
    }
}

// ---- pretrain ----

int cmd_pretrain(const CommonOptions& o, const std::string& resume, bool quiet) {
    TrainConfig cfg = resolve_config(o, TrainConfig{});
    if (!o.out.empty()) cfg.out_dir = o.out;
    if (cfg.out_dir.empty()) cfg.out_dir = "pretrain_out";
    if (!resume.empty()) cfg.resume_from = resume;
    const Dataset data = open_dataset(cfg.manifest);
    RunOptions opts;
    opts.verbose = !quiet;
    const PretrainResult res = run_pretrain(cfg, data, opts);
    json summary = {{"steps", res.final_step}, {"out_dir", cfg.out_dir}, {"samples", data.size()}};
    if (!res.log.records.empty()) {
        const auto& last = res.log.records.back();
        summary["final"] = {{"recon", last.recon}, {"align", last.align}, {"total", last.total}};
    }
    std::cout << summary.dump() << "\n";
    return 0;
}

// ---- mask-plan ----

int cmd_mask_plan(const CommonOptions& o) {
    const TrainConfig cfg = resolve_config(o, TrainConfig{});
    const Dataset data = open_dataset(cfg.manifest);
    const auto plans = draw_plans(data, cfg);
    if (o.out.empty()) {
        std::cout << encode_mask_plans(plans);
    } else {
        write_mask_plans(plans, o.out);
    }
    return 0;
}

// ---- stats ----

json stats_json(const std::string& label, const MaskStats& s) {
    json hist = json::object();
    for (const auto& [size, count] : s.size_histogram) hist[std::to_string(size)] = count;
    return {{"label", label},
            {"n_plans", s.n_plans},
            {"n_degenerate", s.n_degenerate},
            {"mean_masked_in_part", s.mean_masked_in_part},
            {"mean_part_coverage", s.mean_part_coverage},
            {"size_histogram", hist}};
}

int cmd_stats(const CommonOptions& o, const std::vector<std::string>& plan_files) {
    const TrainConfig cfg = resolve_config(o, TrainConfig{});
    const Dataset data = open_dataset(cfg.manifest);
    const PatchGrid grid = cfg.model.grid();
    const auto ids = index_by_id(data);
    std::vector<std::vector<int>> regions_by_index(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
        regions_by_index[i] =
            all_part_patches(frame(data.images[i], data.manifest.records[i].keypoints, grid).keypoints,
                             grid, cfg.sampler.keypoint_conf_threshold);

    std::vector<std::pair<std::string, std::vector<MaskPlanRecord>>> sets;
    if (plan_files.empty()) {
        for (MaskStrategy s : {MaskStrategy::part_guided, MaskStrategy::random, MaskStrategy::blockwise}) {
            TrainConfig c = cfg;
            c.sampler.strategy = s;
            sets.emplace_back(std::string(strategy_name(s)), draw_plans(data, c));
        }
    } else {
        for (const auto& f : plan_files) {
            auto plans = read_mask_plans(f);
            check_plans(plans, ids, grid, f);
            sets.emplace_back(f, std::move(plans));
        }
    }

    json reports = json::array();
    std::vector<MaskStats> stats;
    for (const auto& [label, records] : sets) {
        std::vector<MaskPlan> plans;
        std::vector<std::vector<int>> regions;
        for (const auto& r : records) {
            plans.push_back(r.plan);
            regions.push_back(regions_by_index[ids.at(r.id)]);
        }
        stats.push_back(mask_stats(plans, regions));
        reports.push_back(stats_json(label, stats.back()));
    }
    json out = {{"reports", reports}};
    if (stats.size() >= 2) {
        const MaskStatsDelta d = compare_stats(stats[0], stats[1]);
        out["delta"] = {{"a", sets[0].first},
                        {"b", sets[1].first},
                        {"masked_in_part", d.masked_in_part},
                        {"part_coverage", d.part_coverage}};
    }
    emit(out, o.out);
    return 0;
}

// ---- visualize ----

void paste(ImageBuffer& canvas, const ImageBuffer& panel, int x_offset) {
    for (int y = 0; y < panel.height; ++y)
        for (int x = 0; x < panel.width; ++x)
            for (int c = 0; c < ImageBuffer::kChannels; ++c) canvas.at(y, x + x_offset, c) = panel.at(y, x, c);
}

ImageBuffer gray_masked(const Framed& f, const MaskPlan& plan) {
    Mat patches = f.patches;
    for (int idx : plan.masked) patches.row(idx).setConstant(kMaskedGray);
    return unpatchify(patches, plan.grid);
}

ImageBuffer reconstruct(const ModelParams& params, const Framed& f, const MaskPlan& plan,
                        bool normalized_targets, double eps) {
    const EncoderOutput enc = encode(params, f.patches, plan);
    const DecoderOutput dec = decode(params, enc, plan);
    Mat out = f.patches;
    const double n = static_cast<double>(out.cols());
    for (int idx : plan.masked) {
        RowVec pred = dec.predictions.row(idx);
        if (normalized_targets) {
            const double mean = f.patches.row(idx).sum() / n;
            const double var = (f.patches.row(idx).array() - mean).square().sum() / n;
            pred = (pred.array() * std::sqrt(var + eps) + mean).matrix();
        }
        out.row(idx) = pred;
    }
    return unpatchify(out, plan.grid);
}

int cmd_visualize(const CommonOptions& o, const std::string& plans_path, const std::string& checkpoint,
                  const std::string& view) {
    TrainConfig cfg = resolve_config(o, TrainConfig{});
    if (o.out.empty()) throw ConfigError("visualize needs --out DIR");
    std::optional<ModelParams> params;
    if (!checkpoint.empty()) {
        Checkpoint ckpt = load_checkpoint(checkpoint);
        const TrainConfig trained = train_config_from_json(json::parse(ckpt.config_json));
        cfg.model = ckpt.params.config;
        cfg.loss = trained.loss;
        params = std::move(ckpt.params);
    }
    const Dataset data = open_dataset(cfg.manifest);
    const PatchGrid grid = cfg.model.grid();
    const auto ids = index_by_id(data);

    std::vector<MaskPlanRecord> plans;
    if (plans_path.empty()) {
        plans = draw_plans(data, cfg);
    } else {
        plans = read_mask_plans(plans_path);
        check_plans(plans, ids, grid, plans_path);
    }

    fs::create_directories(o.out);
    const int h = grid.image_height();
    const int w = grid.image_width();
    json written = json::array();
    for (const auto& rec : plans) {
        if (rec.view != view) continue;
        const std::size_t i = ids.at(rec.id);
        const Framed f = frame(data.images[i], data.manifest.records[i].keypoints, grid);
        ImageBuffer canvas(h, 3 * w + 2, 1.0);
        paste(canvas, f.image, 0);
        paste(canvas, gray_masked(f, rec.plan), w + 1);
        paste(canvas, params ? reconstruct(*params, f, rec.plan, cfg.loss.normalize_targets, cfg.loss.target_eps)
                             : ImageBuffer(h, w, kMaskedGray),
              2 * w + 2);
        const fs::path path = fs::path(o.out) / (rec.id + "_" + rec.view + ".ppm");
        write_ppm(canvas, path);
        written.push_back(path.string());
    }
    std::cout << json{{"written", written}}.dump() << "\n";
    return 0;
}

// ---- attn-map ----

int cmd_attn_map(const CommonOptions& o, const std::string& checkpoint, const std::string& sample, int query) {
    TrainConfig cfg = resolve_config(o, TrainConfig{});
    ModelParams params;
    if (!checkpoint.empty()) {
        params = load_checkpoint(checkpoint).params;
        cfg.model = params.config;
    } else {
        Rng init_rng(derive_seed({cfg.seed, kInitStream}));
        params = init_params(init_rng, cfg.model);
    }
    const Dataset data = open_dataset(cfg.manifest);
    const PatchGrid grid = cfg.model.grid();
    std::size_t i = 0;
    if (!sample.empty()) {
        const auto ids = index_by_id(data);
        auto it = ids.find(sample);
        if (it == ids.end()) throw ConfigError("sample '" + sample + "' is not in the manifest");
        i = it->second;
    }
    if (query < 0 || query >= grid.n_patches())
        throw ConfigError("query patch " + std::to_string(query) + " is outside [0, " +
                          std::to_string(grid.n_patches()) + ")");

    const Framed f = frame(data.images[i], data.manifest.records[i].keypoints, grid);
    MaskPlan empty;
    empty.grid = grid;
    EncoderCache cache;
    encode(params, f.patches, empty, &cache);
    const Mat attn = last_block_attention(cache);
    const RowVec row = attn.row(query + 1);

    std::vector<double> weights(static_cast<std::size_t>(grid.n_patches()));
    for (int p = 0; p < grid.n_patches(); ++p) weights[static_cast<std::size_t>(p)] = row(p + 1);
    const double peak = *std::max_element(weights.begin(), weights.end());
    Mat heat(grid.n_patches(), grid.patch_dim());
    for (int p = 0; p < grid.n_patches(); ++p)
        heat.row(p).setConstant(peak > 0.0 ? weights[static_cast<std::size_t>(p)] / peak : 0.0);

    const std::string prefix = o.out.empty() ? "attn" : o.out;
    const fs::path parent = fs::path(prefix).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    write_ppm(unpatchify(heat, grid), prefix + ".ppm");
    const json dump = {{"sample", data.manifest.records[i].id},
                       {"query", query},
                       {"grid", {grid.grid_h, grid.grid_w}},
                       {"cls_weight", row(0)},
                       {"self_weight", row(query + 1)},
                       {"row_sum", row.sum()},
                       {"weights", weights}};
    write_file(prefix + ".json", dump.dump(2) + "\n");
    std::cout << dump.dump() << "\n";
    return 0;
}

// ---- grad-check ----

int cmd_grad_check(const CommonOptions& o, const std::string& corrupt, double step) {
    const TrainConfig cfg = resolve_config(o, tiny_check_config());
    const std::size_t count = make_params(cfg.model).scalar_count();
    if (count > kGradCheckParamCap)
        throw ConfigError("grad-check needs a tiny model: " + std::to_string(count) + " parameters exceed the cap of " +
                          std::to_string(kGradCheckParamCap));
    Rng init_rng(derive_seed({cfg.seed, kInitStream}));
    const ModelParams params = init_params(init_rng, cfg.model);
    const auto batch = grad_check_batch(cfg, cfg.seed);
    GradCheckOptions opts;
    opts.step = step;
    opts.corrupt_group = corrupt;
    const GradCheckReport report = grad_check(params, batch, cfg.loss, opts);

    json groups = json::array();
    for (const auto& g : report.groups)
        groups.push_back({{"name", g.name}, {"size", g.size}, {"rel_err", g.rel_err}, {"max_abs_err", g.max_abs_err}});
    const bool passed = report.passed(kGradCheckTolerance);
    emit({{"parameters", count},
          {"step", step},
          {"tolerance", kGradCheckTolerance},
          {"groups", groups},
          {"worst_group", report.worst_group},
          {"worst_rel_err", report.worst_rel_err},
          {"passed", passed}},
         o.out);
    if (!passed) {
        std::cerr << "gradient check failed: group '" << report.worst_group << "' has relative error "
                  << report.worst_rel_err << " > " << kGradCheckTolerance << "\n";
        return 3;
    }
    return 0;
}

// ---- synth ----

int cmd_synth(const CommonOptions& o, int count, int height, int width, double noise) {
    if (o.out.empty()) throw ConfigError("synth needs --out DIR");
    if (count < 1) throw ConfigError("--count must be >= 1");
    Rng rng(derive_seed({o.seed.value_or(0), kSynthStream}));
    std::vector<SyntheticSpec> specs;
    for (int k = 0; k < count; ++k) specs.push_back(random_synthetic_spec(rng, height, width, noise));
    const DatasetManifest m = write_synthetic_dataset(generate_synthetic(specs), o.out);
    std::cout << json{{"manifest", (fs::path(o.out) / "manifest.jsonl").string()}, {"records", m.records.size()}}.dump()
              << "\n";
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Part-guided masked image modeling on human images"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "partmim 0.1.0");

    CommonOptions common;
    std::string resume, plans_path, checkpoint, sample, corrupt, view = "a";
    std::vector<std::string> plan_files;
    bool quiet = false;
    int query = -1;
    double fd_step = 1e-5;
    int count = 64, height = 64, width = 32;
    double noise = 0.02;

    auto* pretrain = app.add_subcommand("pretrain", "run pre-training and write checkpoints and metrics");
    add_common(pretrain, common);
    pretrain->add_option("--manifest", common.manifest, "dataset manifest (JSON lines)");
    pretrain->add_option("--resume", resume, "checkpoint to resume from");
    pretrain->add_flag("--quiet", quiet, "no progress lines on stderr");

    auto* mask_plan = app.add_subcommand("mask-plan", "emit two mask plans per record");
    add_common(mask_plan, common);
    mask_plan->add_option("--manifest", common.manifest, "dataset manifest");

    auto* visualize = app.add_subcommand("visualize", "write original | masked | reconstruction triptychs");
    add_common(visualize, common);
    visualize->add_option("--manifest", common.manifest, "dataset manifest");
    visualize->add_option("--plans", plans_path, "mask plan file (drawn from the seed when absent)");
    visualize->add_option("--checkpoint", checkpoint, "checkpoint used for the reconstruction panel");
    visualize->add_option("--view", view, "which plan view to draw (a or b)");

    auto* stats = app.add_subcommand("stats", "mask statistics against part regions, as JSON");
    add_common(stats, common);
    stats->add_option("--manifest", common.manifest, "dataset manifest");
    stats->add_option("--plans", plan_files, "plan files to compare (repeatable); default compares strategies");

    auto* attn = app.add_subcommand("attn-map", "last-block attention of one query patch");
    add_common(attn, common);
    attn->add_option("--manifest", common.manifest, "dataset manifest");
    attn->add_option("--checkpoint", checkpoint, "trained checkpoint (random weights when absent)");
    attn->add_option("--sample", sample, "record id (default: first record)");
    attn->add_option("--query", query, "query patch index")->required();

    auto* grad = app.add_subcommand("grad-check", "finite-difference check of every parameter group");
    add_common(grad, common);
    grad->add_option("--corrupt", corrupt, "perturb this group's analytic gradient");
    grad->add_option("--step", fd_step, "finite-difference step");

    auto* synth = app.add_subcommand("synth", "render a synthetic stick-figure dataset");
    add_common(synth, common);
    synth->add_option("--count", count, "number of images");
    synth->add_option("--height", height, "image height");
    synth->add_option("--width", width, "image width");
    synth->add_option("--noise", noise, "pixel noise std");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*pretrain) return cmd_pretrain(common, resume, quiet);
        if (*mask_plan) return cmd_mask_plan(common);
        if (*visualize) return cmd_visualize(common, plans_path, checkpoint, view);
        if (*stats) return cmd_stats(common, plan_files);
        if (*attn) return cmd_attn_map(common, checkpoint, sample, query);
        if (*grad) return cmd_grad_check(common, corrupt, fd_step);
        if (*synth) return cmd_synth(common, count, height, width, noise);
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}

}  // namespace partmim
