#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moadepth/heads.hpp"
#include "moadepth/losses.hpp"
#include "moadepth/moa.hpp"
#include "moadepth/vit.hpp"

namespace moadepth {

// Flat "key = value" configuration with dotted keys and '#' comments. CLI
// flags of the same dotted names override file values.
struct FlatConfig {
    std::map<std::string, std::string> values;

    static FlatConfig parse_text(const std::string& text);
    static FlatConfig parse_file(const std::string& path);

    bool has(const std::string& key) const { return values.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values[key] = value; }

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    // Comma-separated integers (e.g. moa layer lists, ablation grids).
    std::vector<std::int64_t> get_int_list(const std::string& key,
                                           const std::vector<std::int64_t>& fallback) const;
    // Semicolon-separated strings (prompts contain spaces and commas).
    std::vector<std::string> get_string_list(const std::string& key,
                                             const std::vector<std::string>& fallback) const;

    std::string serialize() const;
};

// Full run configuration: optimizer hyperparameters plus every module config.
struct TrainConfig {
    std::int64_t epochs = 500;
    std::int64_t max_steps = 0;  // 0 = no cap
    std::int64_t batch_size = 8;
    double learning_rate = 3e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 42;
    bool shuffle = false;
    std::string data_dir;
    std::string out_dir;

    ViTConfig backbone;       // toy preset by default
    MoAConfig moa;            // d_b 16 / gate 32 at toy scale
    BinSpec bins;             // 128 log bins on [0.1, 10]
    LossWeights loss;
    bool supervise_fused = false;

    std::vector<std::string> prompts;  // default 10 indoor categories
    std::int64_t context_dim = 64;     // d_ctx = d_model in both presets
    bool context_renormalize = false;

    double fusion_weight = 0.5;
    std::int64_t d_head = 64;  // = d_model in both presets

    void validate() const;
    // Applies preset defaults first ("toy" scales MoA and training down,
    // "paper" uses the full-scale published values), then explicit keys.
    static TrainConfig from_flat(const FlatConfig& flat);
    FlatConfig to_flat() const;

    static TrainConfig preset(const std::string& name);
};

// Every key from_flat understands; unknown keys are rejected with ConfigError.
const std::vector<std::string>& known_config_keys();

}  // namespace moadepth
