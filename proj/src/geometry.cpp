#include "partmim/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "partmim/error.hpp"

namespace partmim {

namespace {

constexpr std::array<std::string_view, kNumKeypoints> kJointNames = {
    "nose",          "left_eye",       "right_eye",  "left_ear",    "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow", "left_wrist",
    "right_wrist",   "left_hip",       "right_hip",  "left_knee",   "right_knee",
    "left_ankle",    "right_ankle",
};

double lerp(double a, double b, double t) { return a + t * (b - a); }

}  // namespace

std::string_view joint_name(Joint j) { return kJointNames[static_cast<std::size_t>(j)]; }

Joint mirror_joint(Joint j) {
    const int i = static_cast<int>(j);
    if (i == 0) return j;
    // Pairs are adjacent in COCO order: odd = left, even = right.
    return static_cast<Joint>(i % 2 == 1 ? i + 1 : i - 1);
}

PatchGrid make_patch_grid(int height, int width, int patch_size) {
    if (patch_size <= 0) {
        throw ConfigError("patch_size must be positive, got " + std::to_string(patch_size));
    }
    if (height <= 0 || height % patch_size != 0) {
        throw ConfigError("image height " + std::to_string(height) +
                          " is not a positive multiple of patch_size " +
                          std::to_string(patch_size));
    }
    if (width <= 0 || width % patch_size != 0) {
        throw ConfigError("image width " + std::to_string(width) +
                          " is not a positive multiple of patch_size " +
                          std::to_string(patch_size));
    }
    return PatchGrid{height / patch_size, width / patch_size, patch_size};
}

CropParams sample_crop(Rng& rng, int src_h, int src_w, double scale_min, double out_aspect) {
    if (!(scale_min > 0.0 && scale_min <= 1.0)) {
        throw ConfigError("scale_min must lie in (0, 1], got " + std::to_string(scale_min));
    }
    if (!(out_aspect > 0.0) || src_h <= 0 || src_w <= 0) {
        throw ConfigError("sample_crop: invalid source size or aspect");
    }
    const double src_area = static_cast<double>(src_h) * src_w;
    CropParams crop;
    bool found = false;
    for (int attempt = 0; attempt < 10 && !found; ++attempt) {
        const double area = src_area * rng.uniform(scale_min, 1.0);
        const double w = std::sqrt(area / out_aspect);
        const double h = w * out_aspect;
        if (w <= src_w && h <= src_h && w >= 1.0 && h >= 1.0) {
            crop.crop_w = w;
            crop.crop_h = h;
            crop.x0 = rng.uniform() * (src_w - w);
            crop.y0 = rng.uniform() * (src_h - h);
            found = true;
        }
    }
    if (!found) {
        // Largest centered crop with the requested aspect.
        if (static_cast<double>(src_h) / src_w > out_aspect) {
            crop.crop_w = src_w;
            crop.crop_h = src_w * out_aspect;
        } else {
            crop.crop_h = src_h;
            crop.crop_w = src_h / out_aspect;
        }
        crop.x0 = 0.5 * (src_w - crop.crop_w);
        crop.y0 = 0.5 * (src_h - crop.crop_h);
    }
    crop.flip = rng.bernoulli(0.5);
    return crop;
}

ImageBuffer apply_crop(const ImageBuffer& image, const CropParams& crop, int out_h, int out_w) {
    if (crop.x0 < 0.0 || crop.y0 < 0.0 || crop.crop_w <= 0.0 || crop.crop_h <= 0.0 ||
        crop.x0 + crop.crop_w > image.width || crop.y0 + crop.crop_h > image.height) {
        throw ConfigError("apply_crop: crop rectangle is not inside the image");
    }
    if (out_h <= 0 || out_w <= 0) throw ConfigError("apply_crop: output size must be positive");

    ImageBuffer out(out_h, out_w);
    const double sx_scale = crop.crop_w / out_w;
    const double sy_scale = crop.crop_h / out_h;
    for (int v = 0; v < out_h; ++v) {
        double sy = crop.y0 + (v + 0.5) * sy_scale - 0.5;
        sy = std::clamp(sy, 0.0, static_cast<double>(image.height - 1));
        const int y0 = static_cast<int>(std::floor(sy));
        const int y1 = std::min(y0 + 1, image.height - 1);
        const double fy = sy - y0;
        for (int u = 0; u < out_w; ++u) {
            const int src_u = crop.flip ? out_w - 1 - u : u;
            double sx = crop.x0 + (src_u + 0.5) * sx_scale - 0.5;
            sx = std::clamp(sx, 0.0, static_cast<double>(image.width - 1));
            const int x0 = static_cast<int>(std::floor(sx));
            const int x1 = std::min(x0 + 1, image.width - 1);
            const double fx = sx - x0;
            for (int c = 0; c < ImageBuffer::kChannels; ++c) {
                const double top = lerp(image.at(y0, x0, c), image.at(y0, x1, c), fx);
                const double bottom = lerp(image.at(y1, x0, c), image.at(y1, x1, c), fx);
                out.at(v, u, c) = std::clamp(lerp(top, bottom, fy), 0.0, 1.0);
            }
        }
    }
    return out;
}

KeypointSet transform_keypoints(const KeypointSet& kps, const CropParams& crop, int out_h,
                                int out_w) {
    KeypointSet out{};
    for (std::size_t j = 0; j < kNumKeypoints; ++j) {
        Keypoint k = kps[j];
        k.x = (k.x - crop.x0) * out_w / crop.crop_w;
        k.y = (k.y - crop.y0) * out_h / crop.crop_h;
        if (crop.flip) k.x = out_w - k.x;
        if (!(k.x >= 0.0 && k.x < out_w && k.y >= 0.0 && k.y < out_h)) k.confidence = 0.0;
        const auto dst = crop.flip ? mirror_joint(static_cast<Joint>(j)) : static_cast<Joint>(j);
        out[static_cast<std::size_t>(dst)] = k;
    }
    return out;
}

Mat patchify(const ImageBuffer& image, const PatchGrid& grid) {
    if (image.height != grid.image_height() || image.width != grid.image_width()) {
        throw ConfigError("patchify: image is " + std::to_string(image.height) + "x" +
                          std::to_string(image.width) + " but grid expects " +
                          std::to_string(grid.image_height()) + "x" +
                          std::to_string(grid.image_width()));
    }
    const int p = grid.patch_size;
    Mat out(grid.n_patches(), grid.patch_dim());
    for (int idx = 0; idx < grid.n_patches(); ++idx) {
        const int r0 = grid.row_of(idx) * p;
        const int c0 = grid.col_of(idx) * p;
        int k = 0;
        for (int dy = 0; dy < p; ++dy)
            for (int dx = 0; dx < p; ++dx)
                for (int c = 0; c < ImageBuffer::kChannels; ++c)
                    out(idx, k++) = image.at(r0 + dy, c0 + dx, c);
    }
    return out;
}

ImageBuffer unpatchify(const Mat& patches, const PatchGrid& grid) {
    if (patches.rows() != grid.n_patches() || patches.cols() != grid.patch_dim()) {
        throw ConfigError("unpatchify: patch matrix shape does not match the grid");
    }
    const int p = grid.patch_size;
    ImageBuffer out(grid.image_height(), grid.image_width());
    for (int idx = 0; idx < grid.n_patches(); ++idx) {
        const int r0 = grid.row_of(idx) * p;
        const int c0 = grid.col_of(idx) * p;
        int k = 0;
        for (int dy = 0; dy < p; ++dy)
            for (int dx = 0; dx < p; ++dx)
                for (int c = 0; c < ImageBuffer::kChannels; ++c)
                    out.at(r0 + dy, c0 + dx, c) = patches(idx, k++);
    }
    return out;
}

Mat normalize_targets(const Mat& patches, double eps) {
    Mat out(patches.rows(), patches.cols());
    const double n = static_cast<double>(patches.cols());
    for (Eigen::Index r = 0; r < patches.rows(); ++r) {
        const double mean = patches.row(r).sum() / n;
        const double var = (patches.row(r).array() - mean).square().sum() / n;
        out.row(r) = (patches.row(r).array() - mean) / std::sqrt(var + eps);
    }
    return out;
}

}  // namespace partmim
