#include "partmim/mask_sampling.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <string>

#include "partmim/error.hpp"

namespace partmim {

namespace {

constexpr std::array<std::string_view, kNumParts> kPartNames = {
    "head", "upper_body", "left_arm", "right_arm", "left_leg", "right_leg",
};

using J = Joint;

// Keypoint pairs per part, in the order head, upper body, arms, legs.
const std::array<std::vector<JointPair>, kNumParts> kPartPairs = {{
    {{J::nose, J::left_eye},
     {J::nose, J::right_eye},
     {J::left_eye, J::right_eye},
     {J::left_eye, J::left_ear},
     {J::right_eye, J::right_ear}},
    {{J::left_shoulder, J::right_hip}, {J::right_shoulder, J::left_hip}},
    {{J::left_shoulder, J::left_elbow}, {J::left_elbow, J::left_wrist}},
    {{J::right_shoulder, J::right_elbow}, {J::right_elbow, J::right_wrist}},
    {{J::left_hip, J::left_knee}, {J::left_knee, J::left_ankle}},
    {{J::right_hip, J::right_knee}, {J::right_knee, J::right_ankle}},
}};

void add_index(MaskPlan& plan, std::vector<bool>& flags, int idx, Provenance tag) {
    flags[static_cast<std::size_t>(idx)] = true;
    plan.masked.push_back(idx);
    plan.provenance.push_back(tag);
}

}  // namespace

std::string_view part_name(PartId part) { return kPartNames[static_cast<std::size_t>(part)]; }

std::optional<PartId> part_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kNumParts; ++i)
        if (kPartNames[i] == name) return static_cast<PartId>(i);
    return std::nullopt;
}

std::string_view strategy_name(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::part_guided: return "part_guided";
        case MaskStrategy::blockwise: return "blockwise";
        case MaskStrategy::random: return "random";
    }
    return "?";
}

MaskStrategy strategy_from_name(std::string_view name) {
    if (name == "part_guided") return MaskStrategy::part_guided;
    if (name == "blockwise") return MaskStrategy::blockwise;
    if (name == "random") return MaskStrategy::random;
    throw ConfigError("unknown mask strategy '" + std::string(name) +
                      "' (expected part_guided, blockwise or random)");
}

void SamplerConfig::validate() const {
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0))
        throw ConfigError("sampler.mask_ratio must lie in [0, 1]");
    if (part_count_max < 0 || part_count_max > static_cast<int>(kNumParts))
        throw ConfigError("sampler.part_count_max must lie in [0, 6]");
    if (!(keypoint_conf_threshold >= 0.0 && keypoint_conf_threshold <= 1.0))
        throw ConfigError("sampler.keypoint_conf_threshold must lie in [0, 1]");
    if (blockwise_min_area < 1) throw ConfigError("sampler.blockwise_min_area must be >= 1");
    if (!(blockwise_aspect_min > 0.0 && blockwise_aspect_min <= blockwise_aspect_max))
        throw ConfigError("sampler.blockwise_aspect range is invalid");
    if (blockwise_attempts < 1) throw ConfigError("sampler.blockwise_attempts must be >= 1");
}

std::string Provenance::tag() const {
    switch (kind) {
        case Kind::part: return "part:" + std::string(part_name(part));
        case Kind::block: return "block:" + std::to_string(block);
        case Kind::fill: return "fill";
    }
    return "fill";
}

Provenance Provenance::parse(std::string_view tag) {
    if (tag == "fill") return filled();
    if (tag.starts_with("part:")) {
        if (auto p = part_from_name(tag.substr(5))) return from_part(*p);
    } else if (tag.starts_with("block:")) {
        const auto digits = tag.substr(6);
        int b = -1;
        auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), b);
        if (ec == std::errc() && ptr == digits.data() + digits.size() && b >= 0)
            return from_block(b);
    }
    throw FormatError("invalid provenance tag '" + std::string(tag) + "'");
}

std::vector<bool> MaskPlan::mask_flags() const {
    std::vector<bool> flags(static_cast<std::size_t>(grid.n_patches()), false);
    for (int idx : masked) flags[static_cast<std::size_t>(idx)] = true;
    return flags;
}

std::vector<int> MaskPlan::visible() const {
    const auto flags = mask_flags();
    std::vector<int> out;
    out.reserve(flags.size() - masked.size());
    for (int i = 0; i < grid.n_patches(); ++i)
        if (!flags[static_cast<std::size_t>(i)]) out.push_back(i);
    return out;
}

int num_masked(double ratio, int n_patches) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mask ratio must lie in [0, 1]");
    // The small slack absorbs products like 0.29 * 100 = 28.999999999999996.
    const double n = std::floor(ratio * n_patches + 1e-9);
    return std::clamp(static_cast<int>(n), 0, n_patches);
}

const std::vector<JointPair>& part_keypoint_pairs(PartId part) {
    return kPartPairs[static_cast<std::size_t>(part)];
}

std::vector<int> part_patches(const KeypointSet& kps, PartId part, const PatchGrid& grid,
                              double conf_threshold) {
    std::vector<bool> hit(static_cast<std::size_t>(grid.n_patches()), false);
    const double p = grid.patch_size;
    const double width = grid.image_width();
    const double height = grid.image_height();
    for (const auto& [ja, jb] : part_keypoint_pairs(part)) {
        const Keypoint& a = kps[static_cast<std::size_t>(ja)];
        const Keypoint& b = kps[static_cast<std::size_t>(jb)];
        if (a.confidence < conf_threshold || b.confidence < conf_threshold) continue;
        if (!std::isfinite(a.x) || !std::isfinite(a.y) || !std::isfinite(b.x) ||
            !std::isfinite(b.y))
            continue;
        const double xmin = std::min(a.x, b.x), xmax = std::max(a.x, b.x);
        const double ymin = std::min(a.y, b.y), ymax = std::max(a.y, b.y);
        if (xmax < 0.0 || ymax < 0.0 || xmin >= width || ymin >= height) continue;
        const int c0 = std::max(0, static_cast<int>(std::floor(xmin / p)));
        const int c1 = std::min(grid.grid_w - 1, static_cast<int>(std::floor(xmax / p)));
        const int r0 = std::max(0, static_cast<int>(std::floor(ymin / p)));
        const int r1 = std::min(grid.grid_h - 1, static_cast<int>(std::floor(ymax / p)));
        for (int r = r0; r <= r1; ++r)
            for (int c = c0; c <= c1; ++c) hit[static_cast<std::size_t>(r * grid.grid_w + c)] = true;
    }
    std::vector<int> out;
    for (int i = 0; i < grid.n_patches(); ++i)
        if (hit[static_cast<std::size_t>(i)]) out.push_back(i);
    return out;
}

std::vector<int> all_part_patches(const KeypointSet& kps, const PatchGrid& grid,
                                  double conf_threshold) {
    std::vector<bool> hit(static_cast<std::size_t>(grid.n_patches()), false);
    for (PartId part : kAllParts)
        for (int idx : part_patches(kps, part, grid, conf_threshold))
            hit[static_cast<std::size_t>(idx)] = true;
    std::vector<int> out;
    for (int i = 0; i < grid.n_patches(); ++i)
        if (hit[static_cast<std::size_t>(i)]) out.push_back(i);
    return out;
}

PartSelection select_parts(Rng& rng, int part_count_max) {
    const int max_count = std::clamp(part_count_max, 0, static_cast<int>(kNumParts));
    const auto count = rng.index(static_cast<std::size_t>(max_count) + 1);
    std::array<PartId, kNumParts> parts = kAllParts;
    rng.partial_shuffle(std::span<PartId>(parts), count);
    return PartSelection(parts.begin(), parts.begin() + static_cast<std::ptrdiff_t>(count));
}

void blockwise_fill(Rng& rng, MaskPlan& plan, int target, const SamplerConfig& cfg) {
    const PatchGrid& grid = plan.grid;
    const int n = grid.n_patches();
    const int existing = static_cast<int>(plan.masked.size());
    if (target > n) {
        throw ConfigError("blockwise_fill: target " + std::to_string(target) + " exceeds " +
                          std::to_string(n) + " patches");
    }
    if (target < existing) {
        throw ConfigError("blockwise_fill: target is smaller than the existing mask");
    }
    auto flags = plan.mask_flags();
    int count = existing;
    const double log_lo = std::log(cfg.blockwise_aspect_min);
    const double log_hi = std::log(cfg.blockwise_aspect_max);
    int failures = 0;
    std::vector<int> fresh;
    while (count < target && failures < cfg.blockwise_attempts) {
        const int need = target - count;
        const int min_area = std::min(cfg.blockwise_min_area, need);
        const double area = rng.uniform(min_area, need);
        const double aspect = std::exp(rng.uniform(log_lo, log_hi));
        const int h = static_cast<int>(std::lround(std::sqrt(area * aspect)));
        const int w = static_cast<int>(std::lround(std::sqrt(area / aspect)));
        const double rect_aspect = static_cast<double>(h) / std::max(w, 1);
        if (h < 1 || w < 1 || h > grid.grid_h || w > grid.grid_w || h * w < min_area ||
            rect_aspect < cfg.blockwise_aspect_min || rect_aspect > cfg.blockwise_aspect_max) {
            ++failures;
            continue;
        }
        const int top = static_cast<int>(rng.index(static_cast<std::size_t>(grid.grid_h - h + 1)));
        const int left = static_cast<int>(rng.index(static_cast<std::size_t>(grid.grid_w - w + 1)));
        fresh.clear();
        for (int r = top; r < top + h; ++r)
            for (int c = left; c < left + w; ++c) {
                const int idx = r * grid.grid_w + c;
                if (!flags[static_cast<std::size_t>(idx)]) fresh.push_back(idx);
            }
        if (fresh.empty() || static_cast<int>(fresh.size()) > need) {
            ++failures;
            continue;
        }
        const int block_id = static_cast<int>(plan.blocks.size());
        plan.blocks.push_back(BlockRect{top, left, h, w});
        for (int idx : fresh) add_index(plan, flags, idx, Provenance::from_block(block_id));
        count += static_cast<int>(fresh.size());
        failures = 0;
    }
    if (count < target) {
        std::vector<int> remaining;
        remaining.reserve(static_cast<std::size_t>(n - count));
        for (int i = 0; i < n; ++i)
            if (!flags[static_cast<std::size_t>(i)]) remaining.push_back(i);
        const auto k = static_cast<std::size_t>(target - count);
        rng.partial_shuffle(std::span<int>(remaining), k);
        for (std::size_t i = 0; i < k; ++i)
            add_index(plan, flags, remaining[i], Provenance::filled());
    }
}

MaskPlan part_guided_mask(Rng& rng, const KeypointSet& kps, const PatchGrid& grid,
                          const SamplerConfig& cfg) {
    MaskPlan plan;
    plan.grid = grid;
    const int budget = num_masked(cfg.mask_ratio, grid.n_patches());
    plan.selection = select_parts(rng, cfg.part_count_max);

    auto flags = plan.mask_flags();
    int count = 0;
    std::vector<int> fresh;
    for (PartId part : plan.selection) {
        fresh.clear();
        for (int idx : part_patches(kps, part, grid, cfg.keypoint_conf_threshold))
            if (!flags[static_cast<std::size_t>(idx)]) fresh.push_back(idx);
        const int room = budget - count;
        if (static_cast<int>(fresh.size()) <= room) {
            for (int idx : fresh) add_index(plan, flags, idx, Provenance::from_part(part));
            count += static_cast<int>(fresh.size());
            continue;
        }
        // Overflow: this part contributes a uniform subset, later parts are dropped.
        const auto k = static_cast<std::size_t>(room);
        rng.partial_shuffle(std::span<int>(fresh), k);
        for (std::size_t i = 0; i < k; ++i)
            add_index(plan, flags, fresh[i], Provenance::from_part(part));
        count += room;
        break;
    }
    if (count < budget) blockwise_fill(rng, plan, budget, cfg);
    return plan;
}

MaskPlan random_mask(Rng& rng, const PatchGrid& grid, int target) {
    const int n = grid.n_patches();
    if (target < 0 || target > n) {
        throw ConfigError("random_mask: target " + std::to_string(target) + " exceeds " +
                          std::to_string(n) + " patches");
    }
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.partial_shuffle(std::span<int>(order), static_cast<std::size_t>(target));
    MaskPlan plan;
    plan.grid = grid;
    plan.masked.assign(order.begin(), order.begin() + target);
    plan.provenance.assign(static_cast<std::size_t>(target), Provenance::filled());
    return plan;
}

MaskPlan sample_mask(Rng& rng, const KeypointSet& kps, const PatchGrid& grid,
                     const SamplerConfig& cfg) {
    switch (cfg.strategy) {
        case MaskStrategy::part_guided: return part_guided_mask(rng, kps, grid, cfg);
        case MaskStrategy::random:
            return random_mask(rng, grid, num_masked(cfg.mask_ratio, grid.n_patches()));
        case MaskStrategy::blockwise: {
            MaskPlan plan;
            plan.grid = grid;
            blockwise_fill(rng, plan, num_masked(cfg.mask_ratio, grid.n_patches()), cfg);
            return plan;
        }
    }
    throw ConfigError("unknown mask strategy");
}

MaskStats mask_stats(const std::vector<MaskPlan>& plans,
                     const std::vector<std::vector<int>>& part_regions) {
    if (plans.size() != part_regions.size())
        throw ConfigError("mask_stats: plans and part regions are not aligned");
    MaskStats stats;
    stats.n_plans = plans.size();
    double sum_in_part = 0.0;
    double sum_coverage = 0.0;
    std::size_t n_in_part = 0;
    std::size_t n_coverage = 0;
    for (std::size_t i = 0; i < plans.size(); ++i) {
        const auto flags = plans[i].mask_flags();
        std::size_t inter = 0;
        for (int idx : part_regions[i])
            if (idx >= 0 && idx < static_cast<int>(flags.size()) && flags[static_cast<std::size_t>(idx)])
                ++inter;
        const std::size_t m = plans[i].masked.size();
        const std::size_t r = part_regions[i].size();
        if (m == 0 || r == 0) ++stats.n_degenerate;
        if (m > 0) {
            sum_in_part += static_cast<double>(inter) / static_cast<double>(m);
            ++n_in_part;
        }
        if (r > 0) {
            sum_coverage += static_cast<double>(inter) / static_cast<double>(r);
            ++n_coverage;
        }
        ++stats.size_histogram[static_cast<int>(m)];
    }
    // Each mean skips plans whose denominator is empty; all-degenerate input reports 0.
    if (n_in_part > 0) stats.mean_masked_in_part = sum_in_part / static_cast<double>(n_in_part);
    if (n_coverage > 0) stats.mean_part_coverage = sum_coverage / static_cast<double>(n_coverage);
    return stats;
}

MaskStatsDelta compare_stats(const MaskStats& a, const MaskStats& b) {
    return {a.mean_masked_in_part - b.mean_masked_in_part,
            a.mean_part_coverage - b.mean_part_coverage};
}

}  // namespace partmim
