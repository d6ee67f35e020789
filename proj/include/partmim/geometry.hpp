#pragma once

#include <array>
#include <cstddef>
#include <string_view>
#include <vector>

#include "partmim/rng.hpp"
#include "partmim/tensor.hpp"

namespace partmim {

/// RGB image, row-major, interleaved channels, values in [0, 1].
struct ImageBuffer {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    static constexpr int kChannels = 3;

    ImageBuffer() = default;
    ImageBuffer(int h, int w, double fill = 0.0)
        : height(h), width(w), data(static_cast<std::size_t>(h) * w * kChannels, fill) {}

    double& at(int y, int x, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * kChannels + c];
    }
    double at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * kChannels + c];
    }

    bool operator==(const ImageBuffer&) const = default;
};

/// Non-overlapping square patches; indices are row-major over the grid.
struct PatchGrid {
    int grid_h = 0;
    int grid_w = 0;
    int patch_size = 0;

    int n_patches() const { return grid_h * grid_w; }
    int image_height() const { return grid_h * patch_size; }
    int image_width() const { return grid_w * patch_size; }
    int patch_dim() const { return patch_size * patch_size * ImageBuffer::kChannels; }
    int row_of(int index) const { return index / grid_w; }
    int col_of(int index) const { return index % grid_w; }

    bool operator==(const PatchGrid&) const = default;
};

/// Crop rectangle in source pixels (continuous), plus horizontal flip.
struct CropParams {
    double x0 = 0.0;
    double y0 = 0.0;
    double crop_w = 1.0;
    double crop_h = 1.0;
    bool flip = false;
};

/// Continuous pixel coordinates: pixel (i, j) covers [j, j+1) x [i, i+1).
struct Keypoint {
    double x = 0.0;
    double y = 0.0;
    double confidence = 0.0;

    bool operator==(const Keypoint&) const = default;
};

inline constexpr std::size_t kNumKeypoints = 17;

// COCO order.
enum class Joint : int {
    nose = 0,
    left_eye,
    right_eye,
    left_ear,
    right_ear,
    left_shoulder,
    right_shoulder,
    left_elbow,
    right_elbow,
    left_wrist,
    right_wrist,
    left_hip,
    right_hip,
    left_knee,
    right_knee,
    left_ankle,
    right_ankle,
};

using KeypointSet = std::array<Keypoint, kNumKeypoints>;

std::string_view joint_name(Joint j);

/// Left/right mirror of a joint (nose maps to itself).
Joint mirror_joint(Joint j);

PatchGrid make_patch_grid(int height, int width, int patch_size);

CropParams sample_crop(Rng& rng, int src_h, int src_w, double scale_min, double out_aspect);

/// Crop, bilinear resize (half-pixel centers) and optional horizontal flip.
ImageBuffer apply_crop(const ImageBuffer& image, const CropParams& crop, int out_h, int out_w);

KeypointSet transform_keypoints(const KeypointSet& kps, const CropParams& crop, int out_h,
                                int out_w);

/// Rows are patches in raster order; each row is the patch's pixels in raster
/// order with interleaved RGB.
Mat patchify(const ImageBuffer& image, const PatchGrid& grid);
ImageBuffer unpatchify(const Mat& patches, const PatchGrid& grid);

/// Per-row (v - mean) / sqrt(var + eps), population variance.
Mat normalize_targets(const Mat& patches, double eps = 1e-6);

}  // namespace partmim
