#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "partmim/geometry.hpp"
#include "partmim/mask_sampling.hpp"
#include "partmim/model.hpp"
#include "partmim/optimizer.hpp"

namespace partmim {

/// Parameters of one rendered stick figure. Limb angles are radians from
/// straight down, positive pointing away from the body midline.
struct SyntheticSpec {
    int height = 64;
    int width = 32;
    double neck_x = 16.0;   // shoulder midpoint
    double neck_y = 18.0;
    double scale = 12.0;    // shoulder-to-hip distance in pixels
    std::array<double, 8> limb_angles{};  // l/r upper arm, l/r forearm, l/r thigh, l/r shin
    std::array<double, 3> background{0.2, 0.2, 0.2};
    std::array<double, 3> foreground{0.9, 0.9, 0.9};
    double noise = 0.0;              // std of additive Gaussian pixel noise
    double keypoint_dropout = 0.0;   // probability a keypoint's confidence is zeroed
    std::uint64_t seed = 0;

    bool operator==(const SyntheticSpec&) const = default;
};

struct SampleRecord {
    std::string id;
    /// File path (relative paths resolve against the manifest's directory) or
    /// an inline synthetic figure.
    std::variant<std::string, SyntheticSpec> image;
    KeypointSet keypoints{};
};

struct DatasetManifest {
    static constexpr int kFormatVersion = 1;
    int format_version = kFormatVersion;
    int image_height = 0;  // 0 when unknown
    int image_width = 0;
    std::filesystem::path base_dir;
    std::vector<SampleRecord> records;
};

/// JSON-lines manifest: optional header {"format":"partmim-manifest",...}
/// followed by one {id, image, keypoints:[[x,y,c] x17]} object per line.
DatasetManifest load_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest(const std::string& text,
                               const std::filesystem::path& base_dir = {});
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Binary P6 (RGB) or P5 (gray, broadcast to RGB), maxval <= 255 or <= 65535.
ImageBuffer load_image(const std::filesystem::path& path);
ImageBuffer decode_pnm(const std::string& bytes);

/// P6, maxval 255; values are clamped to [0, 1] and rounded half away from zero.
void write_ppm(const ImageBuffer& image, const std::filesystem::path& path);
std::string encode_ppm(const ImageBuffer& image);

ImageBuffer resolve_image(const SampleRecord& record, const std::filesystem::path& base_dir);

struct RenderedFigure {
    ImageBuffer image;
    KeypointSet keypoints{};
};

/// Joint positions for a spec (confidence 1).
KeypointSet synthetic_keypoints(const SyntheticSpec& spec);

/// Throws ConfigError when the figure leaves the canvas.
RenderedFigure render_synthetic(const SyntheticSpec& spec);

/// Draws a random pose that fits the canvas.
SyntheticSpec random_synthetic_spec(Rng& rng, int height, int width, double noise = 0.02);

struct SyntheticDataset {
    DatasetManifest manifest;
    std::vector<ImageBuffer> images;
};

/// Renders every spec; ids are "synth_<k>". Records reference the inline spec.
SyntheticDataset generate_synthetic(const std::vector<SyntheticSpec>& specs);

/// Writes images as PPM files plus manifest.jsonl into `dir`; records then
/// reference the files.
DatasetManifest write_synthetic_dataset(const SyntheticDataset& data,
                                        const std::filesystem::path& dir);

struct Checkpoint {
    ModelParams params;
    OptimizerState opt;
    std::uint64_t step = 0;
    std::string config_json;  // echo of the run configuration
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "PMIM", u32 version, u64 config length + config JSON, u64 step,
/// u64 optimizer step, u64 array count, then per array: u32 name length,
/// name, u32 rank, u64 dims[rank], little-endian f64 values.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

struct MaskPlanRecord {
    std::string id;
    std::string view;
    MaskPlan plan;

    bool operator==(const MaskPlanRecord&) const = default;
};

/// JSON lines {id, view, grid:[h,w], patch_size, masked, provenance, blocks, selection}.
void write_mask_plans(const std::vector<MaskPlanRecord>& plans, const std::filesystem::path& path);
std::string encode_mask_plans(const std::vector<MaskPlanRecord>& plans);
std::vector<MaskPlanRecord> read_mask_plans(const std::filesystem::path& path);
std::vector<MaskPlanRecord> parse_mask_plans(const std::string& text);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace partmim
