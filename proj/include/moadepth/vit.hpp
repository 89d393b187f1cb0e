#pragma once

#include <map>
#include <string>
#include <vector>

#include "moadepth/moa.hpp"
#include "moadepth/rng.hpp"
#include "moadepth/tensor.hpp"

namespace moadepth {

struct ViTConfig {
    std::int64_t image_size = 64;
    std::int64_t patch_size = 8;
    std::int64_t depth = 12;  // block count L
    std::int64_t d_model = 64;
    std::int64_t n_heads = 4;
    std::int64_t mlp_ratio = 4;
    std::vector<std::int64_t> moa_layers = {2, 5, 8, 11};
    std::int64_t trainable_final_blocks = 4;
    std::string preset = "toy";

    void validate() const;
    std::int64_t tokens_per_side() const { return image_size / patch_size; }
    std::int64_t n_patches() const { return tokens_per_side() * tokens_per_side(); }
    std::int64_t head_dim() const { return d_model / n_heads; }
    std::int64_t patch_dim() const { return 3 * patch_size * patch_size; }
    bool has_moa_at(std::int64_t layer) const;
    bool block_is_trainable(std::int64_t layer) const {
        return layer >= depth - trainable_final_blocks;
    }

    // "toy": 64px / P8 / L12 / d64 / 4 heads. "paper": 224px / P32 / L12 /
    // d768 / 12 heads (parameter counting only, never trained at desk scale).
    static ViTConfig toy_preset();
    static ViTConfig paper_preset();
    static ViTConfig named_preset(const std::string& name);
};

// No key bias: a constant shift of every key moves all scores in a softmax
// row equally, so softmax cancels it exactly and its gradient is identically
// zero. Query and value biases do affect the output.
struct AttentionHeadParams {
    TensorPtr wq, bq;  // [d, dh] / [dh]
    TensorPtr wk;      // [d, dh]
    TensorPtr wv, bv;  // [d, dh] / [dh]
};

struct BlockParams {
    TensorPtr ln1_gamma, ln1_beta;
    std::vector<AttentionHeadParams> heads;
    TensorPtr wo, bo;  // [d, d] / [d]
    TensorPtr ln2_gamma, ln2_beta;
    TensorPtr mlp_w1, mlp_b1;  // [d, mlp_ratio*d] / [mlp_ratio*d]
    TensorPtr mlp_w2, mlp_b2;  // [mlp_ratio*d, d] / [d]
};

struct BackboneParams {
    TensorPtr patch_w;    // [3*P*P, d]
    TensorPtr patch_b;    // [d]
    TensorPtr pos_embed;  // [n_patches + 1, d]
    TensorPtr cls_token;  // [1, d]
    std::vector<BlockParams> blocks;
};

// Dense backbone output: per-patch features plus the class token, which is
// computed but unused downstream (the heads consume only the spatial map).
struct TokenFeatureMap {
    TensorPtr features;     // [d, h_t, w_t]
    TensorPtr class_token;  // [1, d]
};

struct EncodeResult {
    TokenFeatureMap feature_map;
    // (layer index, gate probabilities [T+1, K]) for every MoA layer hit.
    std::vector<std::pair<std::int64_t, TensorPtr>> gates;
};

// Captures per-head attention rows for tests.
struct AttentionProbe {
    std::vector<TensorPtr> head_probs;  // each [T, T]
};

BackboneParams init_backbone(const ViTConfig& config, Rng& rng);

// [3,H,W] image -> constant patch matrix [n_patches, 3*P*P], row-major over
// (c, dy, dx) within a patch; patches ordered row-major over the grid.
TensorPtr patchify(const TensorPtr& image, const ViTConfig& config);

// Patch projection + class token + positional embeddings -> [n_patches+1, d].
TensorPtr patchify_and_embed(const TensorPtr& image, const BackboneParams& params,
                             const ViTConfig& config);

// Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x)).
TensorPtr transformer_block(const TensorPtr& tokens, const BlockParams& block,
                            const ViTConfig& config, AttentionProbe* probe = nullptr);

// Runs all blocks, applying the MoA module after each block listed in
// config.moa_layers (class token included).
EncodeResult encode(const TensorPtr& image, const BackboneParams& params,
                    const ViTConfig& config,
                    const std::map<std::int64_t, const MoAModule*>& moa_modules);

// Backbone tensors with hierarchical names ("patch_proj.w", "block03.attn.head1.wq", ...).
std::vector<std::pair<std::string, TensorPtr>> backbone_named_params(
    const BackboneParams& params);

}  // namespace moadepth
