#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "partmim/data_io.hpp"
#include "partmim/geometry.hpp"
#include "partmim/losses.hpp"
#include "partmim/mask_sampling.hpp"
#include "partmim/model.hpp"
#include "partmim/optimizer.hpp"

namespace partmim {

/// How the second view's mask relates to the first.
///   masked:  an independent part-guided mask (default)
///   visible: the complement of the first view's mask
///   global:  no masking
enum class ViewPairing { masked, visible, global };

std::string_view pairing_name(ViewPairing p);
ViewPairing pairing_from_name(std::string_view name);

struct TrainConfig {
    std::uint64_t seed = 0;
    int batch_size = 8;
    int total_epochs = 40;
    int warmup_epochs = 4;
    double base_lr = 1.5e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    /// When positive, overrides total_epochs * steps_per_epoch.
    std::int64_t max_steps = 0;
    double scale_min = 0.8;
    bool independent_crops = false;
    ViewPairing view_pairing = ViewPairing::masked;

    ModelConfig model;
    SamplerConfig sampler;
    LossConfig loss;

    std::string manifest;
    std::string out_dir;  // empty: nothing is written
    std::int64_t checkpoint_every = 0;
    std::string resume_from;
    /// When false the "secs" metrics field is written as 0 so logs are byte-stable.
    bool log_wall_time = true;

    void validate() const;
};

/// One augmented, masked view of a sample.
struct View {
    Mat patches;
    KeypointSet keypoints{};
    MaskPlan plan;
};

struct ViewPair {
    std::string id;
    View a;
    View b;
};

/// One shared crop+flip (unless independent_crops), two mask plans.
ViewPair build_views(Rng& rng, const std::string& id, const ImageBuffer& image,
                     const KeypointSet& keypoints, const TrainConfig& cfg);

/// Total objective over a batch of view pairs. When `grads` is non-null it
/// is overwritten with exact gradients. Reconstruction is averaged over all
/// views with a non-empty mask; alignment pairs view a (anchors) with view b.
LossBreakdown evaluate_objective(const ModelParams& params, std::span<const ViewPair> batch,
                                 const LossConfig& cfg, ModelParams* grads = nullptr);

struct StepResult {
    LossBreakdown loss;
    double lr = 0.0;
};

/// Gradient + optimizer update. Throws NumericalError (naming the batch ids)
/// when the loss is not finite.
StepResult train_step(ModelParams& params, OptimizerState& opt, std::span<const ViewPair> batch,
                      const TrainConfig& cfg, double lr);

struct MetricsRecord {
    std::int64_t step = 0;
    double lr = 0.0;
    double recon = 0.0;
    double align = 0.0;
    double total = 0.0;
    double secs = 0.0;
};

struct MetricsLog {
    std::vector<MetricsRecord> records;

    void append(const MetricsRecord& r);
    std::string to_jsonl() const;
    static MetricsLog from_jsonl(const std::string& text);
};

/// Images decoded up front; records whose image fails to load are dropped
/// with a message on stderr.
struct Dataset {
    DatasetManifest manifest;
    std::vector<ImageBuffer> images;
    std::vector<std::string> skipped;

    std::size_t size() const { return images.size(); }
};

Dataset load_dataset(const DatasetManifest& manifest);

struct RunOptions {
    /// Stop (as if interrupted) once this many steps have completed; -1 runs to the end.
    std::int64_t stop_after = -1;
    bool verbose = false;
};

struct PretrainResult {
    ModelParams params;
    OptimizerState opt;
    MetricsLog log;
    std::int64_t final_step = 0;
};

std::int64_t steps_per_epoch(const TrainConfig& cfg, std::size_t dataset_size);
LrSchedule make_schedule(const TrainConfig& cfg, std::size_t dataset_size);

PretrainResult run_pretrain(const TrainConfig& cfg, const Dataset& data,
                            const RunOptions& options = {});

}  // namespace partmim
