#include "partmim/config.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "partmim/error.hpp"

namespace partmim {

namespace {

// Reads known keys out of one JSON object and rejects the rest.
class FieldReader {
public:
    FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + " must be a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end() || it->is_null()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(path_ + "." + key + ": " + e.what());
        }
    }

    template <typename Enum, typename Parse>
    void get_enum(const char* key, Enum& out, Parse parse) {
        std::string name;
        const bool present = j_.contains(key);
        get(key, name);
        if (present) out = parse(name);
    }

    const json* child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError("unknown config key '" + path_ + "." + it.key() + "'");
    }

private:
    std::string where() const { return path_.empty() ? "config" : path_; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

const std::map<std::string, std::string>& aliases() {
    static const std::map<std::string, std::string> table = {
        {"gamma", "loss.align_weight"},
        {"tau", "loss.temperature"},
        {"beta", "sampler.mask_ratio"},
        {"strategy", "sampler.strategy"},
    };
    return table;
}

}  // namespace

json to_json(const ModelConfig& c) {
    return {{"embed_dim", c.embed_dim},         {"depth", c.depth},
            {"n_heads", c.n_heads},             {"mlp_ratio", c.mlp_ratio},
            {"decoder_dim", c.decoder_dim},     {"decoder_depth", c.decoder_depth},
            {"decoder_heads", c.decoder_heads}, {"patch_size", c.patch_size},
            {"grid_h", c.grid_h},               {"grid_w", c.grid_w},
            {"projection_head", c.projection_head}};
}

json to_json(const SamplerConfig& c) {
    return {{"mask_ratio", c.mask_ratio},
            {"part_count_max", c.part_count_max},
            {"keypoint_conf_threshold", c.keypoint_conf_threshold},
            {"blockwise_min_area", c.blockwise_min_area},
            {"blockwise_aspect_min", c.blockwise_aspect_min},
            {"blockwise_aspect_max", c.blockwise_aspect_max},
            {"blockwise_attempts", c.blockwise_attempts},
            {"strategy", std::string(strategy_name(c.strategy))}};
}

json to_json(const LossConfig& c) {
    return {{"temperature", c.temperature},
            {"align_weight", c.align_weight},
            {"normalize_targets", c.normalize_targets},
            {"target_eps", c.target_eps},
            {"align_mode", std::string(align_mode_name(c.align_mode))},
            {"negatives", std::string(negatives_name(c.negatives))},
            {"symmetric", c.symmetric}};
}

json to_json(const TrainConfig& c) {
    return {{"seed", c.seed},
            {"model", to_json(c.model)},
            {"sampler", to_json(c.sampler)},
            {"loss", to_json(c.loss)},
            {"data",
             {{"manifest", c.manifest},
              {"scale_min", c.scale_min},
              {"independent_crops", c.independent_crops},
              {"view_pairing", std::string(pairing_name(c.view_pairing))}}},
            {"train",
             {{"batch_size", c.batch_size},
              {"total_epochs", c.total_epochs},
              {"warmup_epochs", c.warmup_epochs},
              {"base_lr", c.base_lr},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"max_steps", c.max_steps},
              {"out_dir", c.out_dir},
              {"checkpoint_every", c.checkpoint_every},
              {"resume_from", c.resume_from},
              {"log_wall_time", c.log_wall_time}}}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    FieldReader r(j, "model");
    r.get("embed_dim", c.embed_dim);
    r.get("depth", c.depth);
    r.get("n_heads", c.n_heads);
    r.get("mlp_ratio", c.mlp_ratio);
    r.get("decoder_dim", c.decoder_dim);
    r.get("decoder_depth", c.decoder_depth);
    r.get("decoder_heads", c.decoder_heads);
    r.get("patch_size", c.patch_size);
    r.get("grid_h", c.grid_h);
    r.get("grid_w", c.grid_w);
    r.get("projection_head", c.projection_head);
    r.finish();
    return c;
}

SamplerConfig sampler_config_from_json(const json& j) {
    SamplerConfig c;
    FieldReader r(j, "sampler");
    r.get("mask_ratio", c.mask_ratio);
    r.get("part_count_max", c.part_count_max);
    r.get("keypoint_conf_threshold", c.keypoint_conf_threshold);
    r.get("blockwise_min_area", c.blockwise_min_area);
    r.get("blockwise_aspect_min", c.blockwise_aspect_min);
    r.get("blockwise_aspect_max", c.blockwise_aspect_max);
    r.get("blockwise_attempts", c.blockwise_attempts);
    r.get_enum("strategy", c.strategy, strategy_from_name);
    r.finish();
    return c;
}

LossConfig loss_config_from_json(const json& j) {
    LossConfig c;
    FieldReader r(j, "loss");
    r.get("temperature", c.temperature);
    r.get("align_weight", c.align_weight);
    r.get("normalize_targets", c.normalize_targets);
    r.get("target_eps", c.target_eps);
    r.get_enum("align_mode", c.align_mode, align_mode_from_name);
    r.get_enum("negatives", c.negatives, negatives_from_name);
    r.get("symmetric", c.symmetric);
    r.finish();
    return c;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    FieldReader r(j, "");
    r.get("seed", c.seed);
    if (const json* m = r.child("model")) c.model = model_config_from_json(*m);
    if (const json* s = r.child("sampler")) c.sampler = sampler_config_from_json(*s);
    if (const json* l = r.child("loss")) c.loss = loss_config_from_json(*l);
    if (const json* d = r.child("data")) {
        FieldReader dr(*d, "data");
        dr.get("manifest", c.manifest);
        dr.get("scale_min", c.scale_min);
        dr.get("independent_crops", c.independent_crops);
        dr.get_enum("view_pairing", c.view_pairing, pairing_from_name);
        dr.finish();
    }
    if (const json* t = r.child("train")) {
        FieldReader tr(*t, "train");
        tr.get("batch_size", c.batch_size);
        tr.get("total_epochs", c.total_epochs);
        tr.get("warmup_epochs", c.warmup_epochs);
        tr.get("base_lr", c.base_lr);
        tr.get("weight_decay", c.weight_decay);
        tr.get("beta1", c.beta1);
        tr.get("beta2", c.beta2);
        tr.get("adam_eps", c.adam_eps);
        tr.get("max_steps", c.max_steps);
        tr.get("out_dir", c.out_dir);
        tr.get("checkpoint_every", c.checkpoint_every);
        tr.get("resume_from", c.resume_from);
        tr.get("log_wall_time", c.log_wall_time);
        tr.finish();
    }
    r.finish();
    return c;
}

void apply_overrides(json& config, const std::vector<std::string>& assignments) {
    if (config.is_null()) config = json::object();
    for (const auto& assignment : assignments) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("override '" + assignment + "' is not of the form key=value");
        std::string key = assignment.substr(0, eq);
        const std::string raw = assignment.substr(eq + 1);
        if (auto it = aliases().find(key); it != aliases().end()) key = it->second;

        json value = json::parse(raw, nullptr, /*allow_exceptions=*/false);
        if (value.is_discarded()) value = raw;

        json* node = &config;
        std::stringstream ss(key);
        std::string part;
        std::vector<std::string> parts;
        while (std::getline(ss, part, '.')) parts.push_back(part);
        for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
            json& next = (*node)[parts[i]];
            if (next.is_null()) next = json::object();
            if (!next.is_object())
                throw ConfigError("override '" + key + "': '" + parts[i] + "' is not a section");
            node = &next;
        }
        (*node)[parts.back()] = value;
    }
}

TrainConfig load_train_config(const std::string& path, const std::vector<std::string>& overrides,
                              const TrainConfig& base) {
    json j = to_json(base);
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file '" + path + "'");
        const json file = json::parse(in, nullptr, false);
        if (file.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
        if (!file.is_object()) throw ConfigError("config file '" + path + "' must hold a JSON object");
        j.merge_patch(file);
    }
    apply_overrides(j, overrides);
    TrainConfig c = train_config_from_json(j);
    c.validate();
    return c;
}

TrainConfig desk_scale_config() {
    TrainConfig c;
    c.model = ModelConfig{};  // dim 32, depth 2, 2 heads, decoder 16/1, patch 8, grid 8x4
    c.batch_size = 8;
    c.max_steps = 300;
    c.total_epochs = 38;
    c.warmup_epochs = 2;
    c.base_lr = 0.128;  // peak 4e-3 at batch 8 under the linear scaling rule
    c.weight_decay = 0.05;
    c.scale_min = 0.8;
    return c;
}

TrainConfig tiny_check_config() {
    TrainConfig c;
    c.model.embed_dim = 8;
    c.model.depth = 1;
    c.model.n_heads = 2;
    c.model.decoder_dim = 8;
    c.model.decoder_depth = 1;
    c.model.decoder_heads = 2;
    c.model.patch_size = 8;
    c.model.grid_h = 2;
    c.model.grid_w = 2;
    c.batch_size = 2;
    return c;
}

}  // namespace partmim
