#include "doctest.h"

#include <cmath>

#include "partmim/error.hpp"
#include "partmim/geometry.hpp"
#include "partmim/rng.hpp"

using namespace partmim;

namespace {

ImageBuffer random_image(Rng& rng, int h, int w) {
    ImageBuffer img(h, w);
    for (auto& v : img.data) v = rng.uniform();
    return img;
}

}  // namespace

TEST_CASE("make_patch_grid arithmetic") {
    const PatchGrid a = make_patch_grid(256, 128, 16);
    CHECK(a.grid_h == 16);
    CHECK(a.grid_w == 8);
    CHECK(a.n_patches() == 128);
    CHECK(make_patch_grid(16, 16, 16).n_patches() == 1);
    const PatchGrid c = make_patch_grid(64, 32, 8);
    CHECK(c.grid_h == 8);
    CHECK(c.grid_w == 4);
    CHECK(c.n_patches() == 32);
    CHECK(c.row_of(5) == 1);
    CHECK(c.col_of(5) == 1);
}

TEST_CASE("make_patch_grid names the non-divisible dimension") {
    try {
        make_patch_grid(64, 30, 8);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("width") != std::string::npos);
    }
    CHECK_THROWS_AS(make_patch_grid(60, 32, 8), ConfigError);
}

TEST_CASE("sample_crop respects the area bound and aspect") {
    Rng rng(1);
    CropParams full = sample_crop(rng, 64, 32, 1.0, 2.0);
    CHECK(full.crop_w * full.crop_h == doctest::Approx(64.0 * 32.0));

    double min_ratio = 1.0;
    int flips = 0;
    for (int i = 0; i < 10000; ++i) {
        const CropParams c = sample_crop(rng, 64, 32, 0.8, 2.0);
        const double ratio = c.crop_w * c.crop_h / (64.0 * 32.0);
        min_ratio = std::min(min_ratio, ratio);
        CHECK(ratio <= 1.0 + 1e-12);
        CHECK(c.crop_h / c.crop_w == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(c.x0 >= 0.0);
        CHECK(c.y0 >= 0.0);
        CHECK(c.x0 + c.crop_w <= 32.0 + 1e-9);
        CHECK(c.y0 + c.crop_h <= 64.0 + 1e-9);
        flips += c.flip;
    }
    CHECK(min_ratio >= 0.8 - 1e-12);
    CHECK(flips > 4700);
    CHECK(flips < 5300);

    bool below_half = false;
    for (int i = 0; i < 2000 && !below_half; ++i) {
        const CropParams c = sample_crop(rng, 64, 32, 0.2, 2.0);
        below_half = c.crop_w * c.crop_h / (64.0 * 32.0) < 0.5;
    }
    CHECK(below_half);
}

TEST_CASE("apply_crop identity, flip involution, constant downscale") {
    Rng rng(2);
    const ImageBuffer img = random_image(rng, 16, 8);
    const CropParams id{0, 0, 8, 16, false};
    CHECK(apply_crop(img, id, 16, 8).data == img.data);

    const CropParams flip{0, 0, 8, 16, true};
    const ImageBuffer once = apply_crop(img, flip, 16, 8);
    CHECK(once.data != img.data);
    CHECK(apply_crop(once, flip, 16, 8).data == img.data);

    const ImageBuffer flat(16, 8, 0.375);
    const ImageBuffer small = apply_crop(flat, id, 8, 4);
    CHECK(small.height == 8);
    CHECK(small.width == 4);
    for (double v : small.data) CHECK(v == doctest::Approx(0.375).epsilon(1e-15));
}

TEST_CASE("transform_keypoints rules") {
    KeypointSet kps{};
    for (int j = 0; j < kNumKeypoints; ++j) kps[j] = {1.0 + j, 2.0 + 0.5 * j, 0.9};
    const CropParams id{0, 0, 32, 64, false};
    const KeypointSet same = transform_keypoints(kps, id, 64, 32);
    for (int j = 0; j < kNumKeypoints; ++j) {
        CHECK(same[j].x == kps[j].x);
        CHECK(same[j].y == kps[j].y);
        CHECK(same[j].confidence == kps[j].confidence);
    }

    const CropParams window{10, 0, 16, 32, false};
    const KeypointSet cut = transform_keypoints(kps, window, 64, 32);
    CHECK(cut[0].confidence == 0.0);   // x = 1 lies left of the window
    CHECK(cut[12].confidence == 0.9);  // x = 13
    CHECK(cut[12].x == doctest::Approx((13.0 - 10.0) * 2.0));

    const CropParams flip{0, 0, 32, 64, true};
    const KeypointSet f = transform_keypoints(kps, flip, 64, 32);
    const auto ls = static_cast<int>(Joint::left_shoulder);
    const auto rs = static_cast<int>(Joint::right_shoulder);
    CHECK(f[ls].x == doctest::Approx(32.0 - kps[rs].x));
    CHECK(f[rs].x == doctest::Approx(32.0 - kps[ls].x));
    CHECK(f[ls].y == kps[rs].y);
    const KeypointSet back = transform_keypoints(f, flip, 64, 32);
    for (int j = 0; j < kNumKeypoints; ++j) {
        CHECK(back[j].x == doctest::Approx(kps[j].x));
        CHECK(back[j].y == kps[j].y);
    }
}

TEST_CASE("keypoints follow pixels through crop and resize") {
    Rng rng(3);
    for (int t = 0; t < 200; ++t) {
        ImageBuffer img(48, 24, 0.0);
        const int px = static_cast<int>(rng.index(24));
        const int py = static_cast<int>(rng.index(48));
        img.at(py, px, 0) = 1.0;
        KeypointSet kps{};
        kps[0] = {px + 0.5, py + 0.5, 1.0};
        const CropParams crop = sample_crop(rng, 48, 24, 0.6, 2.0);
        const ImageBuffer out = apply_crop(img, crop, 32, 16);
        const Keypoint k = transform_keypoints(kps, crop, 32, 16)[0];
        int by = -1, bx = -1;
        double best = 0.0;
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 16; ++x)
                if (out.at(y, x, 0) > best) {
                    best = out.at(y, x, 0);
                    by = y;
                    bx = x;
                }
        if (best == 0.0 || k.confidence == 0.0) continue;
        CHECK(std::abs(bx + 0.5 - k.x) <= 1.0 + 1e-9);
        CHECK(std::abs(by + 0.5 - k.y) <= 1.0 + 1e-9);
    }
}

TEST_CASE("patchify layout and round trip") {
    Rng rng(4);
    const ImageBuffer img = random_image(rng, 8, 8);
    const Mat one = patchify(img, PatchGrid{1, 1, 8});
    REQUIRE(one.rows() == 1);
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(one(0, static_cast<Eigen::Index>(i)) == img.data[i]);

    const PatchGrid grid{4, 2, 4};
    const ImageBuffer big = random_image(rng, 16, 8);
    const Mat p = patchify(big, grid);
    CHECK(p.rows() == 8);
    CHECK(p.cols() == 48);
    CHECK(p(3, 0) == big.at(4, 4, 0));  // patch 3 = row 1, col 1
    CHECK(unpatchify(p, grid).data == big.data);

    const Mat flat = patchify(ImageBuffer(16, 8, 0.25), grid);
    for (Eigen::Index r = 1; r < flat.rows(); ++r) CHECK(flat.row(r) == flat.row(0));
    CHECK_THROWS(patchify(big, PatchGrid{2, 2, 4}));
}

TEST_CASE("normalize_targets") {
    Mat m(3, 2);
    m << 0.3, 0.3, 0.0, 1.0, -1.0, 1.0;
    const Mat n = normalize_targets(m, 1e-6);
    CHECK(n(0, 0) == 0.0);
    CHECK(n(0, 1) == 0.0);
    // (0 - 0.5) / sqrt(0.25 + 1e-6)
    CHECK(n(1, 0) == doctest::Approx(-0.999998000006).epsilon(1e-12));
    CHECK(n(1, 1) == doctest::Approx(0.999998000006).epsilon(1e-12));

    Rng rng(5);
    Mat r(20, 48);
    for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.uniform();
    const Mat rn = normalize_targets(r, 1e-6);
    for (Eigen::Index i = 0; i < rn.rows(); ++i) {
        const double raw = (r.row(i).array() - r.row(i).mean()).square().mean();
        const double mean = rn.row(i).mean();
        const double var = (rn.row(i).array() - mean).square().mean();
        CHECK(std::abs(mean) <= 1e-9);
        CHECK(var < 1.0);
        CHECK(var == doctest::Approx(raw / (raw + 1e-6)).epsilon(1e-12));
        const RowVec twice = normalize_targets(rn.row(i), 1e-6);
        CHECK((twice - rn.row(i) / std::sqrt(var + 1e-6)).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("mirror_joint pairs left and right") {
    CHECK(mirror_joint(Joint::nose) == Joint::nose);
    CHECK(mirror_joint(Joint::left_ankle) == Joint::right_ankle);
    CHECK(mirror_joint(Joint::right_ear) == Joint::left_ear);
    for (int j = 0; j < kNumKeypoints; ++j)
        CHECK(mirror_joint(mirror_joint(static_cast<Joint>(j))) == static_cast<Joint>(j));
    CHECK(joint_name(Joint::left_wrist) == "left_wrist");
}
