#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>

#include "partmim/config.hpp"
#include "partmim/data_io.hpp"
#include "partmim/error.hpp"
#include "partmim/optimizer.hpp"
#include "partmim/training.hpp"

using namespace partmim;
namespace fs = std::filesystem;

namespace {

Dataset small_dataset(int n, std::uint64_t seed = 0) {
    Rng rng(derive_seed({seed, 5}));
    std::vector<SyntheticSpec> specs;
    for (int k = 0; k < n; ++k) specs.push_back(random_synthetic_spec(rng, 64, 32));
    SyntheticDataset s = generate_synthetic(specs);
    return Dataset{s.manifest, s.images, {}};
}

TrainConfig small_config() {
    TrainConfig cfg = desk_scale_config();
    cfg.batch_size = 4;
    cfg.max_steps = 6;
    cfg.log_wall_time = false;
    return cfg;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("partmim_test_training_" + name);
    fs::remove_all(p);
    return p;
}

bool bit_equal(const ModelParams& a, const ModelParams& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].size() != b[i].size() ||
            std::memcmp(a[i].data(), b[i].data(), sizeof(double) * static_cast<std::size_t>(a[i].size())) != 0)
            return false;
    return true;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
    const LrSchedule s{0.004, 10, 100};
    CHECK(lr_at(0, s) == 0.0);
    CHECK(lr_at(5, s) == doctest::Approx(0.002));
    CHECK(lr_at(10, s) == 0.004);
    CHECK(std::abs(lr_at(100, s)) <= 1e-12);
    CHECK(std::abs(lr_at(99, s)) < 1e-5);
    CHECK(std::abs(lr_at(9, s) - lr_at(10, s)) < 0.004 / 10 + 1e-15);
    CHECK(std::abs(lr_at(11, s) - lr_at(10, s)) < 1e-5);
    CHECK(lr_at(55, s) == doctest::Approx(0.002).epsilon(1e-12));
    CHECK(scaled_peak_lr(1.5e-4, 4096) == doctest::Approx(2.4e-3));
}

TEST_CASE("schedule from config") {
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.total_epochs = 10;
    cfg.warmup_epochs = 2;
    CHECK(steps_per_epoch(cfg, 64) == 8);
    CHECK(steps_per_epoch(cfg, 67) == 8);
    const LrSchedule s = make_schedule(cfg, 64);
    CHECK(s.total_steps == 80);
    CHECK(s.warmup_steps == 16);
    cfg.max_steps = 30;
    CHECK(make_schedule(cfg, 64).total_steps == 30);
}

TEST_CASE("decoupled weight decay") {
    Rng rng(41);
    ModelParams p = init_params(rng, ModelConfig{});
    const ModelParams before = p;
    OptimizerState opt = make_optimizer_state(p);
    const ModelParams zero = p.zeros_like();
    adamw_step(p, zero, opt, 0.01, 0.05);
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p.info[i].decay)
            CHECK(p[i] == before[i] * (1.0 - 0.01 * 0.05));
        else
            CHECK(p[i] == before[i]);
    }

    ModelParams q = before;
    OptimizerState opt2 = make_optimizer_state(q);
    ModelParams g = q.zeros_like();
    for (std::size_t i = 0; i < g.size(); ++i) g[i].setConstant(0.3);
    adamw_step(q, g, opt2, 0.0, 0.05);
    CHECK(bit_equal(q, before));
}

TEST_CASE("first Adam step moves each weight by lr") {
    Rng rng(42);
    ModelParams p = init_params(rng, ModelConfig{});
    const ModelParams before = p;
    OptimizerState opt = make_optimizer_state(p);
    ModelParams g = p.zeros_like();
    for (std::size_t i = 0; i < g.size(); ++i) g[i].setConstant(-2.0);
    adamw_step(p, g, opt, 1e-3, 0.0);
    for (std::size_t i = 0; i < p.size(); ++i)
        CHECK(((p[i] - before[i]).array() - 1e-3).abs().maxCoeff() < 1e-11);
}

TEST_CASE("build_views") {
    const Dataset d = small_dataset(2);
    TrainConfig cfg = small_config();
    Rng a(7), b(7);
    const ViewPair x = build_views(a, "s", d.images[0], d.manifest.records[0].keypoints, cfg);
    const ViewPair y = build_views(b, "s", d.images[0], d.manifest.records[0].keypoints, cfg);
    CHECK(x.a.patches == y.a.patches);
    CHECK(x.a.plan == y.a.plan);
    CHECK(x.b.plan == y.b.plan);
    CHECK(x.a.patches == x.b.patches);  // shared crop
    CHECK(x.a.plan.masked.size() == 16);

    cfg.view_pairing = ViewPairing::visible;
    Rng c(8);
    const ViewPair v = build_views(c, "s", d.images[0], d.manifest.records[0].keypoints, cfg);
    CHECK(v.b.plan.masked == v.a.plan.visible());
    cfg.view_pairing = ViewPairing::global;
    Rng e(8);
    CHECK(build_views(e, "s", d.images[0], d.manifest.records[0].keypoints, cfg).b.plan.masked.empty());
    cfg.independent_crops = true;
    cfg.view_pairing = ViewPairing::masked;
    int differ = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        Rng r(s);
        const ViewPair w = build_views(r, "s", d.images[0], d.manifest.records[0].keypoints, cfg);
        differ += w.a.patches != w.b.patches;
    }
    CHECK(differ > 10);
}

TEST_CASE("two views rarely share a plan on the 128-patch grid") {
    TrainConfig cfg;
    cfg.model.patch_size = 4;
    cfg.model.grid_h = 16;
    cfg.model.grid_w = 8;
    const Dataset d = small_dataset(10);
    int same = 0;
    const int draws = 2000;
    for (int t = 0; t < draws; ++t) {
        Rng r(derive_seed({43, static_cast<std::uint64_t>(t)}));
        const auto i = static_cast<std::size_t>(t % 10);
        const ViewPair v = build_views(r, "s", d.images[i], d.manifest.records[i].keypoints, cfg);
        REQUIRE(v.a.plan.masked.size() == 64);
        same += std::set<int>(v.a.plan.masked.begin(), v.a.plan.masked.end()) ==
                std::set<int>(v.b.plan.masked.begin(), v.b.plan.masked.end());
    }
    CHECK(same < draws / 100);
}

TEST_CASE("gamma 0 with identical views equals the single-view gradient") {
    const Dataset d = small_dataset(3);
    TrainConfig cfg = small_config();
    cfg.loss.align_weight = 0.0;
    Rng init(44);
    const ModelParams p = init_params(init, cfg.model);
    std::vector<ViewPair> batch;
    for (std::size_t i = 0; i < 3; ++i) {
        Rng r(i);
        ViewPair v = build_views(r, "s", d.images[i], d.manifest.records[i].keypoints, cfg);
        v.b = v.a;
        batch.push_back(v);
    }
    ModelParams g = p.zeros_like();
    const LossBreakdown both = evaluate_objective(p, batch, cfg.loss, &g);

    // Single-view masked autoencoder: mean over samples of recon, gradients by hand.
    ModelParams single = p.zeros_like();
    double recon = 0.0;
    for (const auto& v : batch) {
        EncoderCache ec;
        DecoderCache dc;
        const EncoderOutput enc = encode(p, v.a.patches, v.a.plan, &ec);
        const DecoderOutput dec = decode(p, enc, v.a.plan, &dc);
        Mat d_pred;
        recon += recon_loss(dec.predictions, v.a.patches, v.a.plan, cfg.loss, &d_pred).value / 3.0;
        d_pred /= 3.0;
        encoder_backward(p, ec, decoder_backward(p, dc, d_pred, single), RowVec::Zero(cfg.model.embed_dim), single);
    }
    CHECK(both.recon == doctest::Approx(recon).epsilon(1e-14));
    CHECK(both.total == both.recon);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double scale = std::max(1e-12, single[i].cwiseAbs().maxCoeff());
        CHECK((g[i] - single[i]).cwiseAbs().maxCoeff() / scale < 1e-12);
    }
}

TEST_CASE("gamma 0 trajectories ignore the alignment settings") {
    const Dataset d = small_dataset(8);
    TrainConfig a = small_config();
    a.loss.align_weight = 0.0;
    TrainConfig b = a;
    b.loss.align_mode = AlignMode::cosine_stopgrad;
    b.loss.temperature = 0.7;
    CHECK(bit_equal(run_pretrain(a, d).params, run_pretrain(b, d).params));
}

TEST_CASE("train_step determinism and numerical abort") {
    const Dataset d = small_dataset(4);
    const TrainConfig cfg = small_config();
    Rng init(45);
    const ModelParams p0 = init_params(init, cfg.model);
    std::vector<ViewPair> batch;
    for (std::size_t i = 0; i < 4; ++i) {
        Rng r(i);
        batch.push_back(build_views(r, d.manifest.records[i].id, d.images[i], d.manifest.records[i].keypoints, cfg));
    }
    ModelParams p1 = p0, p2 = p0;
    OptimizerState o1 = make_optimizer_state(p1), o2 = make_optimizer_state(p2);
    const StepResult s1 = train_step(p1, o1, batch, cfg, 1e-3);
    const StepResult s2 = train_step(p2, o2, batch, cfg, 1e-3);
    CHECK(std::memcmp(&s1.loss.total, &s2.loss.total, sizeof(double)) == 0);
    CHECK(std::memcmp(&s1.loss.align, &s2.loss.align, sizeof(double)) == 0);
    CHECK(bit_equal(p1, p2));

    ModelParams bad = p0;
    bad[bad.index_of("decoder.pred.bias")](0, 0) = NAN;
    OptimizerState ob = make_optimizer_state(bad);
    try {
        train_step(bad, ob, batch, cfg, 1e-3);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find(d.manifest.records[2].id) != std::string::npos);
    }
}

TEST_CASE("mask ratio 0 still trains") {
    const Dataset d = small_dataset(4);
    TrainConfig cfg = small_config();
    cfg.sampler.mask_ratio = 0.0;
    cfg.max_steps = 2;
    const PretrainResult r = run_pretrain(cfg, d);
    REQUIRE(r.log.records.size() == 2);
    CHECK(r.log.records[0].recon == 0.0);
    CHECK(std::isfinite(r.log.records[1].total));
}

TEST_CASE("run_pretrain: zero epochs, logs, resume") {
    const Dataset d = small_dataset(8);
    TrainConfig zero = small_config();
    zero.max_steps = 0;
    zero.total_epochs = 0;
    zero.warmup_epochs = 0;
    const PretrainResult z = run_pretrain(zero, d);
    Rng init(derive_seed({zero.seed, 1}));
    CHECK(bit_equal(z.params, init_params(init, zero.model)));
    CHECK(z.log.records.empty());

    const fs::path full = scratch("full"), part = scratch("part");
    TrainConfig cfg = small_config();
    cfg.checkpoint_every = 3;
    cfg.out_dir = full.string();
    const PretrainResult a = run_pretrain(cfg, d);
    REQUIRE(a.log.records.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) CHECK(a.log.records[i].step == static_cast<std::int64_t>(i + 1));
    CHECK(fs::exists(full / "ckpt_step3.pmim"));
    CHECK(fs::exists(full / "final.pmim"));
    CHECK(MetricsLog::from_jsonl(read_file(full / "metrics.jsonl")).to_jsonl() == a.log.to_jsonl());

    cfg.out_dir = part.string();
    RunOptions stop;
    stop.stop_after = 4;
    run_pretrain(cfg, d, stop);
    CHECK(fs::exists(part / "last.pmim"));
    cfg.resume_from = (part / "ckpt_step3.pmim").string();
    const PretrainResult b = run_pretrain(cfg, d);
    CHECK(bit_equal(a.params, b.params));
    CHECK(read_file(full / "metrics.jsonl") == read_file(part / "metrics.jsonl"));

    TrainConfig other = cfg;
    other.model.embed_dim = 16;
    CHECK_THROWS_AS(run_pretrain(other, d), ConfigError);
    fs::remove_all(full);
    fs::remove_all(part);
}

TEST_CASE("metrics log") {
    MetricsLog log;
    log.append({1, 0.1, 1.0, 2.0, 1.1, 0.0});
    log.append({2, 0.2, 0.9, 1.9, 0.995, 0.5});
    CHECK_THROWS_AS(log.append({2, 0.2, 0.9, 1.9, 0.995, 0.5}), ConfigError);
    const MetricsLog back = MetricsLog::from_jsonl(log.to_jsonl());
    REQUIRE(back.records.size() == 2);
    CHECK(back.records[1].total == 0.995);
    CHECK(back.to_jsonl() == log.to_jsonl());
    CHECK_THROWS_AS(MetricsLog::from_jsonl("{\"step\": 1}\n"), FormatError);
}

TEST_CASE("load_dataset skips unreadable images") {
    DatasetManifest m;
    SampleRecord good;
    good.id = "ok";
    good.image = SyntheticSpec{};
    good.keypoints = synthetic_keypoints(SyntheticSpec{});
    SampleRecord bad;
    bad.id = "missing";
    bad.image = std::string("/nonexistent/image.ppm");
    m.records = {good, bad};
    const Dataset d = load_dataset(m);
    CHECK(d.size() == 1);
    CHECK(d.skipped == std::vector<std::string>{"missing"});
    CHECK(d.manifest.records.at(0).id == "ok");
}

TEST_CASE("TrainConfig validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.warmup_epochs = cfg.total_epochs + 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.scale_min = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK(pairing_from_name("visible") == ViewPairing::visible);
    CHECK(pairing_name(ViewPairing::global) == "global");
    CHECK_THROWS_AS(pairing_from_name("cropped"), ConfigError);
}
