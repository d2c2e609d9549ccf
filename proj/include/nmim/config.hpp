#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmim/augment.hpp"
#include "nmim/common.hpp"
#include "nmim/encoder.hpp"

namespace nmim {

struct ModelConfig {
    int dim = 64;
    int layers = 2;
    int heads = 2;
    int patch = 8;
    int image_size = 64;
    int n_max = 16;
    int k = 3;
    int samples_per_bin = 2;
    int t = 2;
    int vocab = 64;
};

struct MaskingConfig {
    double ratio = 0.4;
    int min_block = 4;
    int max_block = 16;
};

struct TokenizerConfig {
    std::string kind = "luminance"; // "luminance" or "vq"
    int cell_px = 0;                // 0 means: use the patch size
    std::string codebook_path;      // trained codebook checkpoint for "vq"
    int train_iterations = 10;
};

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int warmup_steps = 0;
};

struct ScheduleEntry {
    std::string path;
    int start_epoch = 1;
};

struct DataConfig {
    std::string root;
    std::string train_split = "train";
    std::string eval_split = "test";
    std::vector<ScheduleEntry> schedule;
};

struct TrainingConfig {
    int batch = 16;
    int epochs = 30;
    double lambda_inst = 1.0;
    bool instance_term = true;
    bool class_weights = false;
    int probe_epochs = 60;
    double probe_lr = 0.05;
    int finetune_epochs = 8;
    double finetune_lr = 1e-4;
    int finetune_batch = 8;
};

struct RunConfig {
    ModelConfig model;
    MaskingConfig masking;
    TokenizerConfig tokenizer;
    OptimizerConfig optimizer;
    DataConfig data;
    TrainingConfig training;
    AugmentConfig augment;
    uint64_t seed = 42;
    std::string precision = "f32"; // training default; verification paths force "f64"

    int grid_edge() const { return model.image_size / model.patch; }
    int grid_len() const { return grid_edge() * grid_edge(); }
    int tokenizer_cell_px() const {
        return tokenizer.cell_px > 0 ? tokenizer.cell_px : model.patch;
    }

    EncoderShape encoder_shape() const {
        EncoderShape s;
        s.dim = model.dim;
        s.layers = model.layers;
        s.heads = model.heads;
        s.patch_dim = model.patch * model.patch * 3;
        s.k = model.k;
        s.vocab = model.vocab;
        s.t = model.t;
        return s;
    }

    void validate() const {
        require(model.dim >= 8 && model.dim % 8 == 0,
                "config field model.dim: must be a positive multiple of 8, got ", model.dim);
        require(model.heads >= 1 && model.dim % model.heads == 0,
                "config field model.heads: dim ", model.dim, " not divisible by ", model.heads);
        require(model.layers >= 0, "config field model.layers: must be non-negative");
        require(model.patch >= 1, "config field model.patch: must be positive");
        require(model.image_size >= model.patch && model.image_size % model.patch == 0,
                "config field model.image_size: ", model.image_size, " not divisible by patch ",
                model.patch);
        require(model.n_max >= 0, "config field model.n_max: must be non-negative");
        require(model.k >= 1, "config field model.k: must be positive");
        require(model.samples_per_bin >= 1,
                "config field model.samples_per_bin: must be positive");
        require(model.t >= 1 && 32 % model.t == 0,
                "config field model.t: must divide the 32-pixel instance crop, got ", model.t);
        require(model.vocab >= 1, "config field model.vocab: must be positive");
        require(masking.ratio >= 0.0 && masking.ratio < 1.0,
                "config field masking.ratio: must lie in [0,1), got ", masking.ratio);
        require(masking.min_block >= 1 && masking.max_block >= masking.min_block,
                "config field masking.min_block/max_block: invalid range [", masking.min_block,
                ",", masking.max_block, "]");
        require(tokenizer.kind == "luminance" || tokenizer.kind == "vq",
                "config field tokenizer.kind: unknown kind '", tokenizer.kind, "'");
        require(tokenizer.cell_px >= 0, "config field tokenizer.cell_px: must be non-negative");
        require(tokenizer.train_iterations >= 0,
                "config field tokenizer.train_iterations: must be non-negative");
        require(optimizer.lr > 0, "config field optimizer.lr: must be positive");
        require(optimizer.beta1 >= 0 && optimizer.beta1 < 1,
                "config field optimizer.beta1: must lie in [0,1)");
        require(optimizer.beta2 >= 0 && optimizer.beta2 < 1,
                "config field optimizer.beta2: must lie in [0,1)");
        require(optimizer.eps > 0, "config field optimizer.eps: must be positive");
        require(optimizer.weight_decay >= 0,
                "config field optimizer.weight_decay: must be non-negative");
        require(optimizer.warmup_steps >= 0,
                "config field optimizer.warmup_steps: must be non-negative");
        for (const auto& entry : data.schedule) {
            require(!entry.path.empty(), "config field data.schedule: entry with empty path");
            require(entry.start_epoch >= 1,
                    "config field data.schedule: start_epoch must be >= 1, got ",
                    entry.start_epoch);
        }
        require(training.batch >= 1, "config field training.batch: must be positive");
        require(training.epochs >= 0, "config field training.epochs: must be non-negative");
        require(training.lambda_inst >= 0,
                "config field training.lambda_inst: must be non-negative");
        require(training.probe_epochs >= 1,
                "config field training.probe_epochs: must be positive");
        require(training.probe_lr > 0, "config field training.probe_lr: must be positive");
        require(training.finetune_epochs >= 0,
                "config field training.finetune_epochs: must be non-negative");
        require(training.finetune_lr > 0,
                "config field training.finetune_lr: must be positive");
        require(training.finetune_batch >= 1,
                "config field training.finetune_batch: must be positive");
        require(precision == "f64" || precision == "f32",
                "config field precision: must be 'f64' or 'f32', got '", precision, "'");
    }
};

// Acceptance-scale defaults: small model, synthetic 64-pixel images.
inline RunConfig desk_preset() {
    return RunConfig{};
}

// The published working point: 448-pixel inputs, 16-pixel patches, a 28 x 28
// grid, 768-wide encoder with 12 layers and 12 heads, 8192-token vocabulary.
inline RunConfig paper_preset() {
    RunConfig c;
    c.model.dim = 768;
    c.model.layers = 12;
    c.model.heads = 12;
    c.model.patch = 16;
    c.model.image_size = 448;
    c.model.n_max = 16;
    c.model.vocab = 8192;
    c.masking.min_block = 16;
    c.masking.max_block = 75;
    c.optimizer.lr = 1.5e-3;
    c.optimizer.weight_decay = 0.05;
    c.optimizer.warmup_steps = 800;
    c.training.batch = 96;
    c.training.epochs = 800;
    c.augment.random_resized_crop = true;
    c.augment.hflip = true;
    c.augment.color_jitter = 0.4;
    c.augment.out_size = 448;
    c.augment.patch_size = 16;
    return c;
}

namespace detail {

// Applies `obj` onto `section`, complaining about unknown keys with their
// dotted path so config typos surface immediately.
template <typename Fn>
void apply_json_fields(const nlohmann::json& obj, const std::string& prefix, Fn&& set_field) {
    require(obj.is_object(), "config field ", prefix.empty() ? "<root>" : prefix,
            ": expected an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        set_field(path, it.key(), it.value());
    }
}

inline int json_int(const nlohmann::json& v, const std::string& path) {
    require(v.is_number_integer(), "config field ", path, ": expected an integer");
    return v.get<int>();
}

inline double json_num(const nlohmann::json& v, const std::string& path) {
    require(v.is_number(), "config field ", path, ": expected a number");
    return v.get<double>();
}

inline bool json_bool(const nlohmann::json& v, const std::string& path) {
    require(v.is_boolean(), "config field ", path, ": expected a boolean");
    return v.get<bool>();
}

inline std::string json_str(const nlohmann::json& v, const std::string& path) {
    require(v.is_string(), "config field ", path, ": expected a string");
    return v.get<std::string>();
}

} // namespace detail

// Merges a JSON document onto a config. A top-level "preset" ("desk" or
// "paper") replaces the whole base first; every other field overrides one
// setting. Unknown fields are errors.
inline void apply_config_json(RunConfig& cfg, const nlohmann::json& doc) {
    using nlohmann::json;
    require(doc.is_object(), "config field <root>: expected a JSON object");
    if (doc.contains("preset")) {
        const std::string p = detail::json_str(doc["preset"], "preset");
        if (p == "desk") {
            cfg = desk_preset();
        } else if (p == "paper") {
            cfg = paper_preset();
        } else {
            require(false, "config field preset: unknown preset '", p, "'");
        }
    }
    detail::apply_json_fields(doc, "", [&](const std::string& path, const std::string& key,
                                           const json& v) {
        if (key == "preset") return;
        if (key == "seed") {
            require(v.is_number_integer(), "config field seed: expected an integer");
            cfg.seed = v.get<uint64_t>();
        } else if (key == "precision") {
            cfg.precision = detail::json_str(v, path);
        } else if (key == "model") {
            detail::apply_json_fields(v, "model", [&](const std::string& p2,
                                                      const std::string& k2, const json& v2) {
                if (k2 == "dim") cfg.model.dim = detail::json_int(v2, p2);
                else if (k2 == "layers") cfg.model.layers = detail::json_int(v2, p2);
                else if (k2 == "heads") cfg.model.heads = detail::json_int(v2, p2);
                else if (k2 == "patch") cfg.model.patch = detail::json_int(v2, p2);
                else if (k2 == "image_size") cfg.model.image_size = detail::json_int(v2, p2);
                else if (k2 == "n_max") cfg.model.n_max = detail::json_int(v2, p2);
                else if (k2 == "k") cfg.model.k = detail::json_int(v2, p2);
                else if (k2 == "samples_per_bin")
                    cfg.model.samples_per_bin = detail::json_int(v2, p2);
                else if (k2 == "t") cfg.model.t = detail::json_int(v2, p2);
                else if (k2 == "vocab") cfg.model.vocab = detail::json_int(v2, p2);
                else require(false, "config field ", p2, ": unknown field");
            });
        } else if (key == "masking") {
            detail::apply_json_fields(v, "masking", [&](const std::string& p2,
                                                        const std::string& k2, const json& v2) {
                if (k2 == "ratio") cfg.masking.ratio = detail::json_num(v2, p2);
                else if (k2 == "min_block") cfg.masking.min_block = detail::json_int(v2, p2);
                else if (k2 == "max_block") cfg.masking.max_block = detail::json_int(v2, p2);
                else require(false, "config field ", p2, ": unknown field");
            });
        } else if (key == "tokenizer") {
            detail::apply_json_fields(v, "tokenizer", [&](const std::string& p2,
                                                          const std::string& k2,
                                                          const json& v2) {
                if (k2 == "kind") cfg.tokenizer.kind = detail::json_str(v2, p2);
                else if (k2 == "cell_px") cfg.tokenizer.cell_px = detail::json_int(v2, p2);
                else if (k2 == "codebook_path")
                    cfg.tokenizer.codebook_path = detail::json_str(v2, p2);
                else if (k2 == "train_iterations")
                    cfg.tokenizer.train_iterations = detail::json_int(v2, p2);
                else require(false, "config field ", p2, ": unknown field");
            });
        } else if (key == "optimizer") {
            detail::apply_json_fields(v, "optimizer", [&](const std::string& p2,
                                                          const std::string& k2,
                                                          const json& v2) {
                if (k2 == "lr") cfg.optimizer.lr = detail::json_num(v2, p2);
                else if (k2 == "beta1") cfg.optimizer.beta1 = detail::json_num(v2, p2);
                else if (k2 == "beta2") cfg.optimizer.beta2 = detail::json_num(v2, p2);
                else if (k2 == "eps") cfg.optimizer.eps = detail::json_num(v2, p2);
                else if (k2 == "weight_decay")
                    cfg.optimizer.weight_decay = detail::json_num(v2, p2);
                else if (k2 == "warmup_steps")
                    cfg.optimizer.warmup_steps = detail::json_int(v2, p2);
                else require(false, "config field ", p2, ": unknown field");
            });
        } else if (key == "data") {
            detail::apply_json_fields(v, "data", [&](const std::string& p2,
                                                     const std::string& k2, const json& v2) {
                if (k2 == "root") cfg.data.root = detail::json_str(v2, p2);
                else if (k2 == "train_split") cfg.data.train_split = detail::json_str(v2, p2);
                else if (k2 == "eval_split") cfg.data.eval_split = detail::json_str(v2, p2);
                else if (k2 == "schedule") {
                    require(v2.is_array(), "config field data.schedule: expected an array");
                    cfg.data.schedule.clear();
                    for (const auto& e : v2) {
                        require(e.is_object(),
                                "config field data.schedule: entries must be objects");
                        ScheduleEntry entry;
                        for (auto it = e.begin(); it != e.end(); ++it) {
                            if (it.key() == "path") {
                                entry.path = detail::json_str(it.value(), "data.schedule.path");
                            } else if (it.key() == "start_epoch") {
                                entry.start_epoch =
                                    detail::json_int(it.value(), "data.schedule.start_epoch");
                            } else {
                                require(false, "config field data.schedule.", it.key(),
                                        ": unknown field");
                            }
                        }
                        cfg.data.schedule.push_back(entry);
                    }
                } else {
                    require(false, "config field ", p2, ": unknown field");
                }
            });
        } else if (key == "training") {
            detail::apply_json_fields(v, "training", [&](const std::string& p2,
                                                         const std::string& k2,
                                                         const json& v2) {
                if (k2 == "batch") cfg.training.batch = detail::json_int(v2, p2);
                else if (k2 == "epochs") cfg.training.epochs = detail::json_int(v2, p2);
                else if (k2 == "lambda_inst")
                    cfg.training.lambda_inst = detail::json_num(v2, p2);
                else if (k2 == "instance_term")
                    cfg.training.instance_term = detail::json_bool(v2, p2);
                else if (k2 == "class_weights")
                    cfg.training.class_weights = detail::json_bool(v2, p2);
                else if (k2 == "probe_epochs")
                    cfg.training.probe_epochs = detail::json_int(v2, p2);
                else if (k2 == "probe_lr") cfg.training.probe_lr = detail::json_num(v2, p2);
                else if (k2 == "finetune_epochs")
                    cfg.training.finetune_epochs = detail::json_int(v2, p2);
                else if (k2 == "finetune_lr")
                    cfg.training.finetune_lr = detail::json_num(v2, p2);
                else if (k2 == "finetune_batch")
                    cfg.training.finetune_batch = detail::json_int(v2, p2);
                else require(false, "config field ", p2, ": unknown field");
            });
        } else if (key == "augment") {
            detail::apply_json_fields(v, "augment", [&](const std::string& p2,
                                                        const std::string& k2, const json& v2) {
                if (k2 == "random_resized_crop")
                    cfg.augment.random_resized_crop = detail::json_bool(v2, p2);
                else if (k2 == "crop_scale_min")
                    cfg.augment.crop_scale_min = detail::json_num(v2, p2);
                else if (k2 == "crop_scale_max")
                    cfg.augment.crop_scale_max = detail::json_num(v2, p2);
                else if (k2 == "hflip") cfg.augment.hflip = detail::json_bool(v2, p2);
                else if (k2 == "vflip") cfg.augment.vflip = detail::json_bool(v2, p2);
                else if (k2 == "flip_prob") cfg.augment.flip_prob = detail::json_num(v2, p2);
                else if (k2 == "color_jitter")
                    cfg.augment.color_jitter = detail::json_num(v2, p2);
                else if (k2 == "out_size") cfg.augment.out_size = detail::json_int(v2, p2);
                else require(false, "config field ", p2, ": unknown field");
            });
        } else {
            require(false, "config field ", path, ": unknown field");
        }
    });
    cfg.augment.patch_size = cfg.model.patch;
    if (cfg.augment.out_size == 0) cfg.augment.out_size = cfg.model.image_size;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["precision"] = cfg.precision;
    j["model"] = {{"dim", cfg.model.dim},
                  {"layers", cfg.model.layers},
                  {"heads", cfg.model.heads},
                  {"patch", cfg.model.patch},
                  {"image_size", cfg.model.image_size},
                  {"n_max", cfg.model.n_max},
                  {"k", cfg.model.k},
                  {"samples_per_bin", cfg.model.samples_per_bin},
                  {"t", cfg.model.t},
                  {"vocab", cfg.model.vocab}};
    j["masking"] = {{"ratio", cfg.masking.ratio},
                    {"min_block", cfg.masking.min_block},
                    {"max_block", cfg.masking.max_block}};
    j["tokenizer"] = {{"kind", cfg.tokenizer.kind},
                      {"cell_px", cfg.tokenizer.cell_px},
                      {"codebook_path", cfg.tokenizer.codebook_path},
                      {"train_iterations", cfg.tokenizer.train_iterations}};
    j["optimizer"] = {{"lr", cfg.optimizer.lr},
                      {"beta1", cfg.optimizer.beta1},
                      {"beta2", cfg.optimizer.beta2},
                      {"eps", cfg.optimizer.eps},
                      {"weight_decay", cfg.optimizer.weight_decay},
                      {"warmup_steps", cfg.optimizer.warmup_steps}};
    nlohmann::json sched = nlohmann::json::array();
    for (const auto& e : cfg.data.schedule) {
        sched.push_back({{"path", e.path}, {"start_epoch", e.start_epoch}});
    }
    j["data"] = {{"root", cfg.data.root},
                 {"train_split", cfg.data.train_split},
                 {"eval_split", cfg.data.eval_split},
                 {"schedule", sched}};
    j["training"] = {{"batch", cfg.training.batch},
                     {"epochs", cfg.training.epochs},
                     {"lambda_inst", cfg.training.lambda_inst},
                     {"instance_term", cfg.training.instance_term},
                     {"class_weights", cfg.training.class_weights},
                     {"probe_epochs", cfg.training.probe_epochs},
                     {"probe_lr", cfg.training.probe_lr},
                     {"finetune_epochs", cfg.training.finetune_epochs},
                     {"finetune_lr", cfg.training.finetune_lr},
                     {"finetune_batch", cfg.training.finetune_batch}};
    j["augment"] = {{"random_resized_crop", cfg.augment.random_resized_crop},
                    {"crop_scale_min", cfg.augment.crop_scale_min},
                    {"crop_scale_max", cfg.augment.crop_scale_max},
                    {"hflip", cfg.augment.hflip},
                    {"vflip", cfg.augment.vflip},
                    {"flip_prob", cfg.augment.flip_prob},
                    {"color_jitter", cfg.augment.color_jitter},
                    // Serialized in resolved form: zero is shorthand for the
                    // model's input size, fixed the same way when parsing.
                    {"out_size", cfg.augment.out_size == 0 ? cfg.model.image_size
                                                           : cfg.augment.out_size}};
    return j;
}

inline RunConfig config_from_json(const nlohmann::json& doc) {
    RunConfig cfg = desk_preset();
    apply_config_json(cfg, doc);
    cfg.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "config: cannot open '", path, "'");
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::parse_error& e) {
        require(false, "config: parse error in '", path, "': ", e.what());
    }
    return config_from_json(doc);
}

} // namespace nmim
