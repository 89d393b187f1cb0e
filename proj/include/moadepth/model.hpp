#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "moadepth/config.hpp"
#include "moadepth/context.hpp"
#include "moadepth/heads.hpp"
#include "moadepth/moa.hpp"
#include "moadepth/vit.hpp"

namespace moadepth {

// The assembled network: frozen randomly-initialized backbone with MoA
// modules at the configured layers, the fixed prompt-derived context vector,
// and the dual depth head over the fused features.
struct DepthModel {
    TrainConfig config;
    BackboneParams backbone;
    std::map<std::int64_t, MoAModule> moa;  // keyed by layer index
    ContextVector context;
    DepthHeads heads;

    std::map<std::int64_t, const MoAModule*> moa_pointers() const;
};

// Seeds every tensor from config.seed in a fixed order and applies the
// freezing policy.
DepthModel build_model(const TrainConfig& config);

// Fixed-order (name, tensor) pairs: backbone.*, moa.layerNN.*, heads.*.
std::vector<std::pair<std::string, TensorPtr>> named_params(const DepthModel& model);

// Trainable set: parameters of the final trainable_final_blocks blocks, all
// MoA parameters, and all head parameters. Everything else (patch projection,
// positional embedding, class token, early blocks) stays frozen.
std::set<std::string> freezing_mask(const DepthModel& model);
bool name_is_trainable(const ViTConfig& config, const std::string& name);

struct ParamCounts {
    std::int64_t total = 0;
    std::int64_t trainable = 0;
    std::map<std::string, std::int64_t> by_component;            // backbone / moa / heads
    std::map<std::string, std::int64_t> trainable_by_component;

    double trainable_fraction() const {
        return total == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total);
    }
};

ParamCounts count_params(const DepthModel& model);

struct ModelForward {
    DepthPrediction pred;
    // (layer, gate probabilities) per MoA layer, in layer order.
    std::vector<std::pair<std::int64_t, TensorPtr>> gates;
};

ModelForward model_forward(const DepthModel& model, const TensorPtr& rgb);

}  // namespace moadepth
