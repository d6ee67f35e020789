#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "partmim/geometry.hpp"
#include "partmim/rng.hpp"

namespace partmim {

/// The six body parts used as the masking prior.
enum class PartId : int { head = 0, upper_body, left_arm, right_arm, left_leg, right_leg };

inline constexpr std::size_t kNumParts = 6;
inline constexpr std::array<PartId, kNumParts> kAllParts = {
    PartId::head,      PartId::upper_body, PartId::left_arm,
    PartId::right_arm, PartId::left_leg,   PartId::right_leg,
};

std::string_view part_name(PartId part);
std::optional<PartId> part_from_name(std::string_view name);

/// Distinct parts in the order they were drawn.
using PartSelection = std::vector<PartId>;

using JointPair = std::pair<Joint, Joint>;

enum class MaskStrategy { part_guided, blockwise, random };

std::string_view strategy_name(MaskStrategy s);
MaskStrategy strategy_from_name(std::string_view name);

struct SamplerConfig {
    double mask_ratio = 0.5;
    int part_count_max = 6;
    double keypoint_conf_threshold = 0.2;
    int blockwise_min_area = 4;
    double blockwise_aspect_min = 0.3;
    double blockwise_aspect_max = 10.0 / 3.0;
    int blockwise_attempts = 10;
    MaskStrategy strategy = MaskStrategy::part_guided;

    /// Throws ConfigError on out-of-range fields.
    void validate() const;
};

/// Where a masked index came from.
struct Provenance {
    enum class Kind { part, block, fill };
    Kind kind = Kind::fill;
    PartId part = PartId::head;  // valid when kind == part
    int block = -1;              // index into MaskPlan::blocks when kind == block

    static Provenance from_part(PartId p) { return {Kind::part, p, -1}; }
    static Provenance from_block(int b) { return {Kind::block, PartId::head, b}; }
    static Provenance filled() { return {}; }

    /// "part:<name>", "block:<k>" or "fill".
    std::string tag() const;
    static Provenance parse(std::string_view tag);

    bool operator==(const Provenance& o) const {
        return kind == o.kind && (kind != Kind::part || part == o.part) &&
               (kind != Kind::block || block == o.block);
    }
};

/// Rectangle of patches, in grid units.
struct BlockRect {
    int top = 0;
    int left = 0;
    int height = 0;
    int width = 0;

    bool contains(int row, int col) const {
        return row >= top && row < top + height && col >= left && col < left + width;
    }
    bool operator==(const BlockRect&) const = default;
};

struct MaskPlan {
    PatchGrid grid;
    std::vector<int> masked;             // distinct, in insertion order
    std::vector<Provenance> provenance;  // parallel to `masked`
    std::vector<BlockRect> blocks;       // rectangles referenced by block tags
    PartSelection selection;             // parts drawn (part-guided only)

    std::size_t n_masked() const { return masked.size(); }

    /// Per-patch flag, length n_patches.
    std::vector<bool> mask_flags() const;
    /// Unmasked indices in ascending order.
    std::vector<int> visible() const;

    bool operator==(const MaskPlan&) const = default;
};

/// floor(ratio * n_patches), robust to representation error in the product.
int num_masked(double ratio, int n_patches);

/// Keypoint pairs whose bounding boxes define a part region.
const std::vector<JointPair>& part_keypoint_pairs(PartId part);

/// Sorted patch indices covered by the union of a part's pair boxes.
std::vector<int> part_patches(const KeypointSet& kps, PartId part, const PatchGrid& grid,
                              double conf_threshold);

/// Union over all six parts.
std::vector<int> all_part_patches(const KeypointSet& kps, const PatchGrid& grid,
                                  double conf_threshold);

PartSelection select_parts(Rng& rng, int part_count_max = 6);

/// Extends `plan` with block-wise rectangles until it holds exactly `target`
/// indices; falls back to uniform single patches after `blockwise_attempts`
/// consecutive failed rectangle draws.
void blockwise_fill(Rng& rng, MaskPlan& plan, int target, const SamplerConfig& cfg);

MaskPlan part_guided_mask(Rng& rng, const KeypointSet& kps, const PatchGrid& grid,
                          const SamplerConfig& cfg);

MaskPlan random_mask(Rng& rng, const PatchGrid& grid, int target);

/// Dispatches on cfg.strategy.
MaskPlan sample_mask(Rng& rng, const KeypointSet& kps, const PatchGrid& grid,
                     const SamplerConfig& cfg);

struct MaskStats {
    std::size_t n_plans = 0;
    std::size_t n_degenerate = 0;          // empty masks or empty part regions
    double mean_masked_in_part = 0.0;      // |mask ∩ R| / |mask|
    double mean_part_coverage = 0.0;       // |mask ∩ R| / |R|
    std::map<int, std::size_t> size_histogram;
};

MaskStats mask_stats(const std::vector<MaskPlan>& plans,
                     const std::vector<std::vector<int>>& part_regions);

struct MaskStatsDelta {
    double masked_in_part = 0.0;
    double part_coverage = 0.0;
};

/// a - b for each mean statistic.
MaskStatsDelta compare_stats(const MaskStats& a, const MaskStats& b);

}  // namespace partmim
