#include "moadepth/vit.hpp"

#include <algorithm>
#include <cmath>

#include "moadepth/error.hpp"

namespace moadepth {

void ViTConfig::validate() const {
    if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0) {
        throw ConfigError("vit: image size " + std::to_string(image_size) +
                          " not divisible by patch size " + std::to_string(patch_size));
    }
    if (depth < 1) throw ConfigError("vit: depth must be >= 1");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
        throw ConfigError("vit: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (mlp_ratio < 1) throw ConfigError("vit: mlp_ratio must be >= 1");
    for (std::int64_t layer : moa_layers) {
        if (layer < 0 || layer >= depth) {
            throw ConfigError("vit: moa layer " + std::to_string(layer) +
                              " out of range for depth " + std::to_string(depth));
        }
    }
    if (trainable_final_blocks < 0 || trainable_final_blocks > depth) {
        throw ConfigError("vit: trainable_final_blocks " +
                          std::to_string(trainable_final_blocks) + " exceeds depth " +
                          std::to_string(depth));
    }
}

bool ViTConfig::has_moa_at(std::int64_t layer) const {
    return std::find(moa_layers.begin(), moa_layers.end(), layer) != moa_layers.end();
}

ViTConfig ViTConfig::toy_preset() {
    ViTConfig c;
    c.preset = "toy";
    return c;
}

ViTConfig ViTConfig::paper_preset() {
    ViTConfig c;
    c.image_size = 224;
    c.patch_size = 32;
    c.depth = 12;
    c.d_model = 768;
    c.n_heads = 12;
    c.mlp_ratio = 4;
    c.moa_layers = {2, 5, 8, 11};
    c.trainable_final_blocks = 4;
    c.preset = "paper";
    return c;
}

ViTConfig ViTConfig::named_preset(const std::string& name) {
    if (name == "toy") return toy_preset();
    if (name == "paper") return paper_preset();
    throw ConfigError("vit: unknown preset '" + name + "' (expected 'toy' or 'paper')");
}

namespace {

TensorPtr init_weight(Shape shape, Rng& rng, double sigma = 0.02) {
    auto t = Tensor::zeros(std::move(shape), true);
    for (auto& v : t->data) v = rng.normal(0.0, sigma);
    return t;
}

}  // namespace

BackboneParams init_backbone(const ViTConfig& config, Rng& rng) {
    config.validate();
    const std::int64_t d = config.d_model;
    const std::int64_t dh = config.head_dim();
    BackboneParams p;
    p.patch_w = init_weight({config.patch_dim(), d}, rng);
    p.patch_b = Tensor::zeros({d}, true);
    p.pos_embed = init_weight({config.n_patches() + 1, d}, rng);
    p.cls_token = init_weight({1, d}, rng);
    for (std::int64_t b = 0; b < config.depth; ++b) {
        BlockParams blk;
        blk.ln1_gamma = Tensor::ones({d}, true);
        blk.ln1_beta = Tensor::zeros({d}, true);
        for (std::int64_t h = 0; h < config.n_heads; ++h) {
            AttentionHeadParams head;
            head.wq = init_weight({d, dh}, rng);
            head.bq = Tensor::zeros({dh}, true);
            head.wk = init_weight({d, dh}, rng);
            head.wv = init_weight({d, dh}, rng);
            head.bv = Tensor::zeros({dh}, true);
            blk.heads.push_back(std::move(head));
        }
        blk.wo = init_weight({d, d}, rng);
        blk.bo = Tensor::zeros({d}, true);
        blk.ln2_gamma = Tensor::ones({d}, true);
        blk.ln2_beta = Tensor::zeros({d}, true);
        blk.mlp_w1 = init_weight({d, config.mlp_ratio * d}, rng);
        blk.mlp_b1 = Tensor::zeros({config.mlp_ratio * d}, true);
        blk.mlp_w2 = init_weight({config.mlp_ratio * d, d}, rng);
        blk.mlp_b2 = Tensor::zeros({d}, true);
        p.blocks.push_back(std::move(blk));
    }
    return p;
}

TensorPtr patchify(const TensorPtr& image, const ViTConfig& config) {
    const std::int64_t s = config.image_size;
    const std::int64_t ps = config.patch_size;
    if (image->rank() != 3 || image->shape[0] != 3 || image->shape[1] != s ||
        image->shape[2] != s) {
        throw DimensionError("patchify: expected image [3," + std::to_string(s) + "," +
                             std::to_string(s) + "], got " + shape_str(image->shape));
    }
    const std::int64_t grid = config.tokens_per_side();
    auto patches = Tensor::zeros({config.n_patches(), config.patch_dim()});
    for (std::int64_t py = 0; py < grid; ++py) {
        for (std::int64_t px = 0; px < grid; ++px) {
            double* row = patches->data.data() + (py * grid + px) * config.patch_dim();
            std::int64_t o = 0;
            for (std::int64_t c = 0; c < 3; ++c) {
                for (std::int64_t dy = 0; dy < ps; ++dy) {
                    const double* src =
                        image->data.data() + (c * s + py * ps + dy) * s + px * ps;
                    for (std::int64_t dx = 0; dx < ps; ++dx) row[o++] = src[dx];
                }
            }
        }
    }
    return patches;
}

TensorPtr patchify_and_embed(const TensorPtr& image, const BackboneParams& params,
                             const ViTConfig& config) {
    TensorPtr patches = patchify(image, config);
    TensorPtr projected = add(matmul(patches, params.patch_w), params.patch_b);
    TensorPtr seq = concat({params.cls_token, projected}, 0);
    return add(seq, params.pos_embed);
}

TensorPtr transformer_block(const TensorPtr& tokens, const BlockParams& block,
                            const ViTConfig& config, AttentionProbe* probe) {
    if (tokens->rank() != 2 || tokens->shape[1] != config.d_model) {
        throw DimensionError("transformer_block: expected tokens [T," +
                             std::to_string(config.d_model) + "], got " +
                             shape_str(tokens->shape));
    }
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(config.head_dim()));

    TensorPtr normed = add(mul(layer_norm(tokens), block.ln1_gamma), block.ln1_beta);
    std::vector<TensorPtr> head_outputs;
    for (const auto& head : block.heads) {
        TensorPtr q = add(matmul(normed, head.wq), head.bq);
        TensorPtr k = matmul(normed, head.wk);
        TensorPtr v = add(matmul(normed, head.wv), head.bv);
        TensorPtr scores = scale(matmul(q, transpose2d(k)), inv_sqrt_dh);
        TensorPtr probs = softmax(scores);
        if (probe) probe->head_probs.push_back(probs);
        head_outputs.push_back(matmul(probs, v));
    }
    TensorPtr attn = add(matmul(concat(head_outputs, 1), block.wo), block.bo);
    TensorPtr x = add(tokens, attn);

    TensorPtr normed2 = add(mul(layer_norm(x), block.ln2_gamma), block.ln2_beta);
    TensorPtr hidden = gelu(add(matmul(normed2, block.mlp_w1), block.mlp_b1));
    TensorPtr mlp = add(matmul(hidden, block.mlp_w2), block.mlp_b2);
    return add(x, mlp);
}

EncodeResult encode(const TensorPtr& image, const BackboneParams& params,
                    const ViTConfig& config,
                    const std::map<std::int64_t, const MoAModule*>& moa_modules) {
    for (std::int64_t layer : config.moa_layers) {
        if (moa_modules.find(layer) == moa_modules.end()) {
            throw ConfigError("encode: missing MoA module for configured layer " +
                              std::to_string(layer));
        }
    }
    EncodeResult result;
    TensorPtr tokens = patchify_and_embed(image, params, config);
    for (std::int64_t layer = 0; layer < config.depth; ++layer) {
        tokens = transformer_block(tokens, params.blocks[layer], config);
        if (config.has_moa_at(layer)) {
            MoAOutput out = moa_forward(tokens, *moa_modules.at(layer));
            tokens = out.tokens;
            result.gates.emplace_back(layer, out.gates);
        }
    }
    const std::int64_t grid = config.tokens_per_side();
    TensorPtr patch_tokens = slice_rows(tokens, 1, config.n_patches());
    result.feature_map.features =
        reshape(transpose2d(patch_tokens), {config.d_model, grid, grid});
    result.feature_map.class_token = slice_rows(tokens, 0, 1);
    return result;
}

std::vector<std::pair<std::string, TensorPtr>> backbone_named_params(
    const BackboneParams& params) {
    std::vector<std::pair<std::string, TensorPtr>> out;
    out.emplace_back("patch_proj.w", params.patch_w);
    out.emplace_back("patch_proj.b", params.patch_b);
    out.emplace_back("pos_embed", params.pos_embed);
    out.emplace_back("cls_token", params.cls_token);
    char tag[16];
    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        std::snprintf(tag, sizeof(tag), "block%02zu", b);
        const std::string prefix(tag);
        const auto& blk = params.blocks[b];
        out.emplace_back(prefix + ".ln1.gamma", blk.ln1_gamma);
        out.emplace_back(prefix + ".ln1.beta", blk.ln1_beta);
        for (std::size_t h = 0; h < blk.heads.size(); ++h) {
            const std::string hp = prefix + ".attn.head" + std::to_string(h);
            out.emplace_back(hp + ".wq", blk.heads[h].wq);
            out.emplace_back(hp + ".bq", blk.heads[h].bq);
            out.emplace_back(hp + ".wk", blk.heads[h].wk);
            out.emplace_back(hp + ".wv", blk.heads[h].wv);
            out.emplace_back(hp + ".bv", blk.heads[h].bv);
        }
        out.emplace_back(prefix + ".attn.wo", blk.wo);
        out.emplace_back(prefix + ".attn.bo", blk.bo);
        out.emplace_back(prefix + ".ln2.gamma", blk.ln2_gamma);
        out.emplace_back(prefix + ".ln2.beta", blk.ln2_beta);
        out.emplace_back(prefix + ".mlp.w1", blk.mlp_w1);
        out.emplace_back(prefix + ".mlp.b1", blk.mlp_b1);
        out.emplace_back(prefix + ".mlp.w2", blk.mlp_w2);
        out.emplace_back(prefix + ".mlp.b2", blk.mlp_b2);
    }
    return out;
}

}  // namespace moadepth
