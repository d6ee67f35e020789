#include "partmim/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "partmim/config.hpp"
#include "partmim/error.hpp"

namespace partmim {

namespace {

using nlohmann::json;

// Stream tags for derive_seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kViewStream = 3;

View make_view(Rng& rng, const ImageBuffer& image, const KeypointSet& keypoints,
               const TrainConfig& cfg) {
    const PatchGrid grid = cfg.model.grid();
    const int out_h = grid.image_height();
    const int out_w = grid.image_width();
    const CropParams crop = sample_crop(rng, image.height, image.width, cfg.scale_min,
                                        static_cast<double>(out_h) / out_w);
    View v;
    v.patches = patchify(apply_crop(image, crop, out_h, out_w), grid);
    v.keypoints = transform_keypoints(keypoints, crop, out_h, out_w);
    return v;
}

MaskPlan complement_plan(const MaskPlan& plan) {
    MaskPlan out;
    out.grid = plan.grid;
    out.masked = plan.visible();
    out.provenance.assign(out.masked.size(), Provenance::filled());
    return out;
}

}  // namespace

std::string_view pairing_name(ViewPairing p) {
    switch (p) {
        case ViewPairing::masked: return "masked";
        case ViewPairing::visible: return "visible";
        case ViewPairing::global: return "global";
    }
    return "?";
}

ViewPairing pairing_from_name(std::string_view name) {
    if (name == "masked") return ViewPairing::masked;
    if (name == "visible") return ViewPairing::visible;
    if (name == "global") return ViewPairing::global;
    throw ConfigError("unknown view_pairing '" + std::string(name) +
                      "' (expected masked, visible or global)");
}

void TrainConfig::validate() const {
    model.validate();
    sampler.validate();
    loss.validate();
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (total_epochs < 0) throw ConfigError("train.total_epochs must be >= 0");
    if (warmup_epochs < 0 || warmup_epochs > total_epochs)
        throw ConfigError("train.warmup_epochs must lie in [0, total_epochs]");
    if (!(base_lr >= 0.0)) throw ConfigError("train.base_lr must be non-negative");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
    if (max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
    if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
    if (!(scale_min > 0.0 && scale_min <= 1.0)) throw ConfigError("data.scale_min must lie in (0, 1]");
}

ViewPair build_views(Rng& rng, const std::string& id, const ImageBuffer& image,
                     const KeypointSet& keypoints, const TrainConfig& cfg) {
    const PatchGrid grid = cfg.model.grid();
    ViewPair pair;
    pair.id = id;
    pair.a = make_view(rng, image, keypoints, cfg);
    pair.a.plan = sample_mask(rng, pair.a.keypoints, grid, cfg.sampler);
    if (cfg.independent_crops) {
        pair.b = make_view(rng, image, keypoints, cfg);
    } else {
        pair.b.patches = pair.a.patches;
        pair.b.keypoints = pair.a.keypoints;
    }
    switch (cfg.view_pairing) {
        case ViewPairing::masked:
            pair.b.plan = sample_mask(rng, pair.b.keypoints, grid, cfg.sampler);
            break;
        case ViewPairing::visible:
            pair.b.plan = complement_plan(pair.a.plan);
            break;
        case ViewPairing::global:
            pair.b.plan.grid = grid;
            break;
    }
    return pair;
}

LossBreakdown evaluate_objective(const ModelParams& params, std::span<const ViewPair> batch,
                                 const LossConfig& cfg, ModelParams* grads) {
    if (batch.empty()) throw ConfigError("evaluate_objective: empty batch");
    const std::size_t n_views = 2 * batch.size();
    std::vector<EncoderCache> enc_cache(n_views);
    std::vector<DecoderCache> dec_cache(n_views);
    std::vector<Mat> d_pred(n_views);
    std::vector<const View*> views(n_views);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        views[2 * b] = &batch[b].a;
        views[2 * b + 1] = &batch[b].b;
    }

    const auto dim = params.config.embed_dim;
    Mat z(static_cast<Eigen::Index>(batch.size()), dim);
    Mat zt(static_cast<Eigen::Index>(batch.size()), dim);
    std::vector<double> recon(n_views, 0.0);
    std::size_t active = 0;
    for (std::size_t v = 0; v < n_views; ++v) {
        const View& view = *views[v];
        const EncoderOutput enc = encode(params, view.patches, view.plan, &enc_cache[v]);
        const DecoderOutput dec = decode(params, enc, view.plan, &dec_cache[v]);
        const ReconResult r =
            recon_loss(dec.predictions, view.patches, view.plan, cfg, grads ? &d_pred[v] : nullptr);
        recon[v] = r.value;
        if (!r.degenerate) ++active;
        (v % 2 == 0 ? z : zt).row(static_cast<Eigen::Index>(v / 2)) = enc.cls;
    }
    double recon_mean = 0.0;
    if (active > 0) {
        for (double r : recon) recon_mean += r;
        recon_mean /= static_cast<double>(active);
    }

    const bool align_grads = grads && cfg.align_weight > 0.0;
    Mat dz, dzt;
    const double align = alignment_term(z, zt, cfg, align_grads ? &dz : nullptr,
                                        align_grads ? &dzt : nullptr);
    const LossBreakdown loss = total_loss(recon_mean, align, cfg);
    if (!grads) return loss;

    grads->set_zero();
    const RowVec zero_cls = RowVec::Zero(dim);
    for (std::size_t v = 0; v < n_views; ++v) {
        const bool has_recon = !views[v]->plan.masked.empty() && active > 0;
        if (!has_recon && !align_grads) continue;
        Mat d_tokens = Mat::Zero(static_cast<Eigen::Index>(enc_cache[v].patches.rows()), dim);
        if (has_recon) {
            d_pred[v] /= static_cast<double>(active);
            d_tokens = decoder_backward(params, dec_cache[v], d_pred[v], *grads);
        }
        RowVec d_cls = zero_cls;
        if (align_grads) {
            const auto row = static_cast<Eigen::Index>(v / 2);
            d_cls = cfg.align_weight * (v % 2 == 0 ? dz.row(row) : dzt.row(row));
        }
        encoder_backward(params, enc_cache[v], d_tokens, d_cls, *grads);
    }
    return loss;
}

StepResult train_step(ModelParams& params, OptimizerState& opt, std::span<const ViewPair> batch,
                      const TrainConfig& cfg, double lr) {
    ModelParams grads = params.zeros_like();
    StepResult res;
    res.lr = lr;
    res.loss = evaluate_objective(params, batch, cfg.loss, &grads);
    if (!std::isfinite(res.loss.total) || !grads.all_finite()) {
        std::string ids;
        for (const auto& p : batch) ids += (ids.empty() ? "" : ", ") + p.id;
        std::ostringstream msg;
        msg << "non-finite loss (recon=" << res.loss.recon << ", align=" << res.loss.align
            << ") in batch [" << ids << "]";
        throw NumericalError(msg.str());
    }
    adamw_step(params, grads, opt, lr, cfg.weight_decay);
    return res;
}

void MetricsLog::append(const MetricsRecord& r) {
    if (!records.empty() && r.step <= records.back().step)
        throw ConfigError("metrics log steps must increase");
    records.push_back(r);
}

namespace {

std::string metrics_line(const MetricsRecord& r) {
    const json j = {{"step", r.step},   {"lr", r.lr},       {"recon", r.recon},
                    {"align", r.align}, {"total", r.total}, {"secs", r.secs}};
    return j.dump() + "\n";
}

}  // namespace

std::string MetricsLog::to_jsonl() const {
    std::string out;
    for (const auto& r : records) out += metrics_line(r);
    return out;
}

MetricsLog MetricsLog::from_jsonl(const std::string& text) {
    MetricsLog log;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw FormatError("metrics line " + std::to_string(line_no) + " is not JSON");
        try {
            log.append({j.at("step").get<std::int64_t>(), j.at("lr").get<double>(),
                        j.at("recon").get<double>(), j.at("align").get<double>(),
                        j.at("total").get<double>(), j.at("secs").get<double>()});
        } catch (const json::exception& e) {
            throw FormatError("metrics line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return log;
}

Dataset load_dataset(const DatasetManifest& manifest) {
    Dataset d;
    d.manifest = manifest;
    d.manifest.records.clear();
    for (const auto& rec : manifest.records) {
        try {
            d.images.push_back(resolve_image(rec, manifest.base_dir));
            d.manifest.records.push_back(rec);
        } catch (const std::exception& e) {
            std::cerr << "skipping record '" << rec.id << "': " << e.what() << "\n";
            d.skipped.push_back(rec.id);
        }
    }
    return d;
}

std::int64_t steps_per_epoch(const TrainConfig& cfg, std::size_t dataset_size) {
    if (dataset_size == 0) return 0;
    const auto batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), dataset_size);
    return static_cast<std::int64_t>(dataset_size / batch);
}

LrSchedule make_schedule(const TrainConfig& cfg, std::size_t dataset_size) {
    const auto spe = steps_per_epoch(cfg, dataset_size);
    LrSchedule s;
    s.peak_lr = scaled_peak_lr(cfg.base_lr, cfg.batch_size);
    s.total_steps = cfg.max_steps > 0 ? cfg.max_steps : cfg.total_epochs * spe;
    s.warmup_steps = std::min<std::int64_t>(cfg.warmup_epochs * spe, s.total_steps);
    return s;
}

PretrainResult run_pretrain(const TrainConfig& cfg, const Dataset& data, const RunOptions& options) {
    cfg.validate();
    const std::size_t n = data.size();
    if (n == 0) throw ConfigError("training dataset is empty");
    const auto spe = steps_per_epoch(cfg, n);
    const auto batch_size = static_cast<std::size_t>(std::min<std::size_t>(cfg.batch_size, n));
    const LrSchedule schedule = make_schedule(cfg, n);
    const std::string config_echo = to_json(cfg).dump();

    PretrainResult res;
    std::int64_t start = 0;
    if (!cfg.resume_from.empty()) {
        Checkpoint ckpt = load_checkpoint(cfg.resume_from);
        if (!(ckpt.params.config == cfg.model))
            throw ConfigError("checkpoint '" + cfg.resume_from + "' was trained with a different model config");
        res.params = std::move(ckpt.params);
        res.opt = std::move(ckpt.opt);
        start = static_cast<std::int64_t>(ckpt.step);
    } else {
        Rng init_rng(derive_seed({cfg.seed, kInitStream}));
        res.params = init_params(init_rng, cfg.model);
        res.opt = make_optimizer_state(res.params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    }

    const std::filesystem::path out_dir = cfg.out_dir;
    std::ofstream metrics_out;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        const auto metrics_path = out_dir / "metrics.jsonl";
        MetricsLog kept;
        if (start > 0 && std::filesystem::exists(metrics_path)) {
            for (const auto& r : MetricsLog::from_jsonl(read_file(metrics_path)).records)
                if (r.step <= start) kept.append(r);
        }
        write_file(metrics_path, kept.to_jsonl());
        metrics_out.open(metrics_path, std::ios::app | std::ios::binary);
        if (!metrics_out) throw ConfigError("cannot write '" + metrics_path.string() + "'");
    }

    auto save = [&](std::int64_t step, const std::string& name) {
        if (out_dir.empty()) return;
        save_checkpoint(Checkpoint{res.params, res.opt, static_cast<std::uint64_t>(step), config_echo},
                        out_dir / name);
    };

    std::vector<std::size_t> order(n);
    std::int64_t order_epoch = -1;
    std::int64_t step = start;
    for (; step < schedule.total_steps; ++step) {
        if (options.stop_after >= 0 && step >= options.stop_after) break;
        const std::int64_t epoch = step / spe;
        if (epoch != order_epoch) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            Rng shuffle_rng(derive_seed({cfg.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)}));
            shuffle_rng.shuffle(order);
            order_epoch = epoch;
        }
        const auto offset = static_cast<std::size_t>(step % spe) * batch_size;
        std::vector<ViewPair> batch;
        batch.reserve(batch_size);
        for (std::size_t k = 0; k < batch_size; ++k) {
            const std::size_t idx = order[offset + k];
            const auto& rec = data.manifest.records[idx];
            Rng view_rng(derive_seed({cfg.seed, kViewStream, static_cast<std::uint64_t>(step), idx}));
            batch.push_back(build_views(view_rng, rec.id, data.images[idx], rec.keypoints, cfg));
        }
        const double lr = lr_at(step, schedule);
        const auto t0 = std::chrono::steady_clock::now();
        const StepResult sr = train_step(res.params, res.opt, batch, cfg, lr);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        MetricsRecord rec{step + 1, lr, sr.loss.recon, sr.loss.align, sr.loss.total,
                          cfg.log_wall_time ? secs : 0.0};
        res.log.append(rec);
        if (metrics_out.is_open()) {
            metrics_out << metrics_line(rec);
            metrics_out.flush();
        }
        if (options.verbose && ((step + 1) % 50 == 0 || step + 1 == schedule.total_steps))
            std::cerr << "step " << step + 1 << "/" << schedule.total_steps << " lr " << lr
                      << " recon " << sr.loss.recon << " align " << sr.loss.align << " total "
                      << sr.loss.total << "\n";
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
            save(step + 1, "ckpt_step" + std::to_string(step + 1) + ".pmim");
    }
    res.final_step = step;
    save(step, step >= schedule.total_steps ? "final.pmim" : "last.pmim");
    return res;
}

}  // namespace partmim
