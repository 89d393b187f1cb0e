#include "moadepth/model.hpp"

#include <cstdio>
#include <cstring>

#include "moadepth/error.hpp"

namespace moadepth {

std::map<std::int64_t, const MoAModule*> DepthModel::moa_pointers() const {
    std::map<std::int64_t, const MoAModule*> out;
    for (const auto& [layer, module] : moa) out[layer] = &module;
    return out;
}

DepthModel build_model(const TrainConfig& config) {
    config.validate();
    DepthModel model;
    model.config = config;
    Rng rng(config.seed);
    model.backbone = init_backbone(config.backbone, rng);
    for (std::int64_t layer : config.backbone.moa_layers) {
        MoAConfig mc = config.moa;
        mc.d_model = config.backbone.d_model;
        model.moa.emplace(layer, init_moa_module(mc, rng));
    }
    const std::int64_t d_in = config.backbone.d_model + config.context_dim;
    model.heads = init_heads(d_in, config.d_head, config.bins, config.fusion_weight, rng);

    PromptSet prompts;
    prompts.prompts = config.prompts;
    prompts.dim = config.context_dim;
    model.context = build_context(prompts, config.seed, config.context_renormalize);

    const auto mask = freezing_mask(model);
    for (auto& [name, tensor] : named_params(model)) {
        tensor->requires_grad = mask.count(name) != 0;
    }
    return model;
}

std::vector<std::pair<std::string, TensorPtr>> named_params(const DepthModel& model) {
    std::vector<std::pair<std::string, TensorPtr>> out;
    for (auto& [suffix, tensor] : backbone_named_params(model.backbone)) {
        out.emplace_back("backbone." + suffix, tensor);
    }
    char tag[16];
    for (const auto& [layer, module] : model.moa) {
        std::snprintf(tag, sizeof(tag), "moa.layer%02lld.", static_cast<long long>(layer));
        for (auto& [suffix, tensor] : moa_named_params(module)) {
            out.emplace_back(tag + suffix, tensor);
        }
    }
    for (auto& [suffix, tensor] : heads_named_params(model.heads)) {
        out.emplace_back("heads." + suffix, tensor);
    }
    return out;
}

bool name_is_trainable(const ViTConfig& config, const std::string& name) {
    if (name.rfind("moa.", 0) == 0 || name.rfind("heads.", 0) == 0) return true;
    constexpr const char* kBlockPrefix = "backbone.block";
    if (name.rfind(kBlockPrefix, 0) == 0) {
        const std::int64_t block = std::stoll(name.substr(std::strlen(kBlockPrefix), 2));
        return config.block_is_trainable(block);
    }
    return false;  // patch projection, positional embedding, class token
}

std::set<std::string> freezing_mask(const DepthModel& model) {
    std::set<std::string> mask;
    for (const auto& [name, tensor] : named_params(model)) {
        (void)tensor;
        if (name_is_trainable(model.config.backbone, name)) mask.insert(name);
    }
    return mask;
}

ParamCounts count_params(const DepthModel& model) {
    ParamCounts counts;
    for (const auto& [name, tensor] : named_params(model)) {
        const std::string component = name.substr(0, name.find('.'));
        const std::int64_t n = tensor->numel();
        counts.total += n;
        counts.by_component[component] += n;
        if (tensor->requires_grad) {
            counts.trainable += n;
            counts.trainable_by_component[component] += n;
        }
    }
    return counts;
}

ModelForward model_forward(const DepthModel& model, const TensorPtr& rgb) {
    EncodeResult enc = encode(rgb, model.backbone, model.config.backbone,
                              model.moa_pointers());
    TensorPtr fused_map = fuse(enc.feature_map.features, model.context);
    ModelForward out;
    out.pred = heads_forward(fused_map, model.heads);
    out.gates = std::move(enc.gates);
    return out;
}

}  // namespace moadepth
