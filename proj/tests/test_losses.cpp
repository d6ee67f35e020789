#include "doctest.h"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "oracles.hpp"
#include "partmim/error.hpp"
#include "partmim/losses.hpp"

using namespace partmim;

namespace {

MaskPlan plan_of(const PatchGrid& g, std::vector<int> masked) {
    MaskPlan p;
    p.grid = g;
    p.provenance.assign(masked.size(), Provenance::filled());
    p.masked = std::move(masked);
    return p;
}

template <typename F>
Mat numeric_grad(Mat x, F f, double h = 1e-6) {
    Mat g(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double o = x.data()[i];
        x.data()[i] = o + h;
        const double up = f(x);
        x.data()[i] = o - h;
        const double down = f(x);
        x.data()[i] = o;
        g.data()[i] = (up - down) / (2 * h);
    }
    return g;
}

}  // namespace

TEST_CASE("recon_loss") {
    const PatchGrid g{2, 2, 2};
    Rng rng(31);
    Mat target(4, 12);
    for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] = rng.uniform();
    LossConfig raw;
    raw.normalize_targets = false;

    CHECK(recon_loss(target, target, plan_of(g, {0, 2}), raw).value == 0.0);

    Mat off = target;
    off.row(1).array() += 0.5;
    CHECK(recon_loss(off, target, plan_of(g, {1}), raw).value == doctest::Approx(0.25).epsilon(1e-14));

    LossConfig cfg;
    Mat pred = target;
    for (Eigen::Index i = 0; i < pred.size(); ++i) pred.data()[i] += rng.normal();
    const double before = recon_loss(pred, target, plan_of(g, {0, 3}), cfg).value;
    Mat pred2 = pred;
    pred2.row(1).setConstant(7.0);
    pred2.row(2).setConstant(-3.0);
    CHECK(recon_loss(pred2, target, plan_of(g, {0, 3}), cfg).value == before);

    const ReconResult empty = recon_loss(pred, target, plan_of(g, {}), cfg);
    CHECK(empty.value == 0.0);
    CHECK(empty.degenerate);

    // Normalized targets: the value equals the raw loss against normalize_targets(target).
    const Mat nt = normalize_targets(target, cfg.target_eps);
    CHECK(recon_loss(pred, target, plan_of(g, {0, 3}), cfg).value ==
          doctest::Approx(recon_loss(pred, nt, plan_of(g, {0, 3}), raw).value).epsilon(1e-15));

    Mat d;
    recon_loss(pred, target, plan_of(g, {0, 3}), cfg, &d);
    const Mat num = numeric_grad(pred, [&](const Mat& x) { return recon_loss(x, target, plan_of(g, {0, 3}), cfg).value; });
    CHECK((d - num).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(d.row(1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("align_loss worked values") {
    Mat one(1, 3);
    one << 0.6, 0.8, 0.0;
    CHECK(std::abs(align_loss(one, one, 0.2)) <= 1e-12);

    Mat z(2, 2), zt(2, 2);
    z << 1, 0, 0, 1;
    zt = z;
    CHECK(align_loss(z, zt, 0.2) == doctest::Approx(0.006715348489117967).epsilon(1e-12));

    Mat same(4, 3);
    for (int i = 0; i < 4; ++i) same.row(i) = one.row(0);
    CHECK(align_loss(same, same, 0.2) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(std::abs(align_loss(same, same, 0.2) - 1.386294) < 1e-6);

    Mat bad = one * 1.01;
    CHECK_THROWS_AS(align_loss(bad, one, 0.2), std::invalid_argument);
}

TEST_CASE("align_loss properties and oracle") {
    Rng rng(32);
    for (int t = 0; t < 200; ++t) {
        const int b = 1 + static_cast<int>(rng.index(16));
        const int dim = 2 + static_cast<int>(rng.index(7));
        const Mat z = oracle::random_unit_rows(rng, b, dim);
        const Mat zt = oracle::random_unit_rows(rng, b, dim);
        const double v = align_loss(z, zt, 0.2);
        CHECK(v >= 0.0);
        CHECK(std::abs(v - static_cast<double>(oracle::align_loss(z, zt, 0.2L))) <= 1e-10);
        const double sv = align_loss(z, zt, 0.2, AlignNegatives::same_view);
        CHECK(std::abs(sv - static_cast<double>(oracle::align_loss(z, zt, 0.2L, true))) <= 1e-10);

        std::vector<int> perm(static_cast<std::size_t>(b));
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        Mat zp(b, dim), ztp(b, dim);
        for (int i = 0; i < b; ++i) {
            zp.row(i) = z.row(perm[static_cast<std::size_t>(i)]);
            ztp.row(i) = zt.row(perm[static_cast<std::size_t>(i)]);
        }
        CHECK(align_loss(zp, ztp, 0.2) == doctest::Approx(v).epsilon(1e-12));
    }
}

TEST_CASE("alignment gradients match finite differences") {
    Rng rng(33);
    const Mat z = oracle::random_unit_rows(rng, 5, 4);
    const Mat zt = oracle::random_unit_rows(rng, 5, 4);
    for (AlignNegatives neg : {AlignNegatives::cross_view, AlignNegatives::same_view}) {
        Mat dz, dzt;
        align_loss(z, zt, 0.2, neg, &dz, &dzt);
        // The loss is evaluated off the unit sphere here, so finite differences use the raw formula.
        auto raw = [&](const Mat& a, const Mat& b) {
            double total = 0;
            for (Eigen::Index i = 0; i < a.rows(); ++i) {
                double pos = a.row(i).dot(b.row(i)) / 0.2, sum = 0;
                for (Eigen::Index j = 0; j < a.rows(); ++j) {
                    double l = a.row(i).dot(b.row(j)) / 0.2;
                    if (neg == AlignNegatives::same_view) l = a.row(i).dot(a.row(j)) / 0.2;
                    sum += std::exp(l);
                }
                total += -(pos - std::log(sum));
            }
            return total / static_cast<double>(a.rows());
        };
        CHECK((dz - numeric_grad(z, [&](const Mat& x) { return raw(x, zt); })).cwiseAbs().maxCoeff() < 1e-8);
        CHECK((dzt - numeric_grad(zt, [&](const Mat& x) { return raw(z, x); })).cwiseAbs().maxCoeff() < 1e-8);
    }

    // Each side sees the other as a constant target, so it gets half the plain gradient.
    Mat dz, dzt;
    align_loss_stopgrad(z, zt, &dz, &dzt);
    auto cos_loss = [](const Mat& a, const Mat& b) {
        return -(a.array() * b.array()).rowwise().sum().mean();
    };
    CHECK((dz - 0.5 * numeric_grad(z, [&](const Mat& x) { return cos_loss(x, zt); })).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((dzt - 0.5 * numeric_grad(zt, [&](const Mat& x) { return cos_loss(z, x); })).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("stop-gradient cosine variant") {
    Rng rng(34);
    const Mat z = oracle::random_unit_rows(rng, 6, 5);
    CHECK(align_loss_stopgrad(z, z) == doctest::Approx(-1.0).epsilon(1e-14));
    Mat a(2, 2), b(2, 2);
    a << 1, 0, 0, 1;
    b << 0, 1, 1, 0;
    CHECK(align_loss_stopgrad(a, b) == 0.0);
    const Mat zt = oracle::random_unit_rows(rng, 6, 5);
    Mat zp = z, ztp = zt;
    zp.row(0).swap(zp.row(4));
    ztp.row(0).swap(ztp.row(4));
    CHECK(align_loss_stopgrad(zp, ztp) == doctest::Approx(align_loss_stopgrad(z, zt)).epsilon(1e-14));
}

TEST_CASE("alignment_term dispatch and symmetry") {
    Rng rng(35);
    const Mat z = oracle::random_unit_rows(rng, 4, 6);
    const Mat zt = oracle::random_unit_rows(rng, 4, 6);
    LossConfig cfg;
    CHECK(alignment_term(z, zt, cfg) == align_loss(z, zt, 0.2));
    cfg.symmetric = true;
    CHECK(alignment_term(z, zt, cfg) == doctest::Approx(0.5 * (align_loss(z, zt, 0.2) + align_loss(zt, z, 0.2))));
    cfg.symmetric = false;
    cfg.align_mode = AlignMode::cosine_stopgrad;
    CHECK(alignment_term(z, zt, cfg) == align_loss_stopgrad(z, zt));
}

TEST_CASE("total_loss") {
    LossConfig cfg;
    CHECK(cfg.align_weight == 0.05);
    CHECK(cfg.temperature == 0.2);
    const LossBreakdown a = total_loss(0.0, std::log(4.0), cfg);
    CHECK(a.total == doctest::Approx(0.06931471805599453).epsilon(1e-14));
    cfg.align_weight = 0.0;
    const LossBreakdown b = total_loss(0.7, 3.0, cfg);
    CHECK(b.total == 0.7);
    CHECK(b.align == 3.0);
    for (double gamma : {0.0, 0.1, 0.2, 0.5}) {
        cfg.align_weight = gamma;
        CHECK(total_loss(0.7, 3.0, cfg).total == doctest::Approx(0.7 + 3.0 * gamma).epsilon(1e-15));
    }
}

TEST_CASE("LossConfig validation and names") {
    LossConfig cfg;
    cfg.temperature = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.align_weight = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK(align_mode_from_name("cosine_stopgrad") == AlignMode::cosine_stopgrad);
    CHECK(negatives_from_name(negatives_name(AlignNegatives::same_view)) == AlignNegatives::same_view);
    CHECK_THROWS_AS(align_mode_from_name("triplet"), ConfigError);
}
