#include <cmath>
#include <numeric>

#include "doctest.h"
#include "moadepth/error.hpp"
#include "moadepth/model.hpp"
#include "moadepth/vit.hpp"

using namespace moadepth;

namespace {

ViTConfig small_config() {
    ViTConfig c;
    c.image_size = 16;
    c.patch_size = 8;
    c.depth = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.mlp_ratio = 2;
    c.moa_layers = {};
    c.trainable_final_blocks = 1;
    return c;
}

double max_abs_diff(const TensorPtr& a, const TensorPtr& b) {
    REQUIRE(a->shape == b->shape);
    double m = 0;
    for (std::int64_t i = 0; i < a->numel(); ++i) {
        m = std::max(m, std::fabs(a->data[i] - b->data[i]));
    }
    return m;
}

}  // namespace

TEST_SUITE("vit") {

TEST_CASE("patchify produces the expected token count and layout") {
    ViTConfig c = ViTConfig::toy_preset();
    auto image = seeded_fill({3, 64, 64}, 1, DistSpec::uniform(0, 1));
    auto patches = patchify(image, c);
    CHECK(patches->shape == Shape{64, 3 * 8 * 8});

    Rng rng(2);
    auto params = init_backbone(c, rng);
    auto tokens = patchify_and_embed(image, params, c);
    CHECK(tokens->shape == Shape{65, 64});

    auto wrong = seeded_fill({3, 32, 32}, 3, DistSpec::uniform(0, 1));
    CHECK_THROWS_AS(patchify(wrong, c), DimensionError);
}

TEST_CASE("zero image with zero projection bias embeds to the positional table") {
    ViTConfig c = small_config();
    Rng rng(4);
    auto params = init_backbone(c, rng);
    auto zero_image = Tensor::zeros({3, 16, 16});
    auto tokens = patchify_and_embed(zero_image, params, c);
    // patch tokens (rows 1..T) = 0 * W + 0 + pos
    for (std::int64_t t = 1; t < tokens->shape[0]; ++t) {
        for (std::int64_t j = 0; j < c.d_model; ++j) {
            CHECK(tokens->at2(t, j) == params.pos_embed->at2(t, j));
        }
    }
}

TEST_CASE("patch embedding is local: one changed patch moves one token") {
    ViTConfig c = small_config();
    Rng rng(5);
    auto params = init_backbone(c, rng);
    for (auto& v : params.pos_embed->data) v = 0.0;

    auto a = seeded_fill({3, 16, 16}, 6, DistSpec::uniform(0, 1));
    auto b = Tensor::make(a->shape, a->data);
    // perturb patch (1,1): pixels [8..16) x [8..16) in every channel
    for (std::int64_t ch = 0; ch < 3; ++ch) {
        for (std::int64_t y = 8; y < 16; ++y) {
            for (std::int64_t x = 8; x < 16; ++x) {
                b->data[(ch * 16 + y) * 16 + x] += 0.5;
            }
        }
    }
    auto ta = patchify_and_embed(a, params, c);
    auto tb = patchify_and_embed(b, params, c);
    // tokens: [cls, patch00, patch01, patch10, patch11] -> only patch11 moves
    for (std::int64_t t = 0; t < 5; ++t) {
        double diff = 0;
        for (std::int64_t j = 0; j < c.d_model; ++j) {
            diff = std::max(diff, std::fabs(ta->at2(t, j) - tb->at2(t, j)));
        }
        if (t == 4) {
            CHECK(diff > 1e-6);
        } else {
            CHECK(diff == 0.0);
        }
    }
}

TEST_CASE("block with zeroed output projections is the identity") {
    ViTConfig c = small_config();
    Rng rng(7);
    auto params = init_backbone(c, rng);
    auto& blk = params.blocks[0];
    for (auto& v : blk.wo->data) v = 0.0;
    for (auto& v : blk.bo->data) v = 0.0;
    for (auto& v : blk.mlp_w2->data) v = 0.0;
    for (auto& v : blk.mlp_b2->data) v = 0.0;
    auto x = seeded_fill({5, 8}, 8, DistSpec::normal(0, 1));
    auto y = transformer_block(x, blk, c);
    CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("attention rows are probability distributions") {
    ViTConfig c = small_config();
    Rng rng(9);
    auto params = init_backbone(c, rng);
    auto x = seeded_fill({5, 8}, 10, DistSpec::normal(0, 1));
    AttentionProbe probe;
    transformer_block(x, params.blocks[0], c, &probe);
    REQUIRE(probe.head_probs.size() == 2);
    for (const auto& probs : probe.head_probs) {
        REQUIRE(probs->shape == Shape{5, 5});
        for (std::int64_t i = 0; i < 5; ++i) {
            double s = 0;
            for (std::int64_t j = 0; j < 5; ++j) {
                CHECK(probs->at2(i, j) >= 0.0);
                s += probs->at2(i, j);
            }
            CHECK(std::fabs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("block is permutation-equivariant over tokens") {
    ViTConfig c = small_config();
    Rng rng(11);
    auto params = init_backbone(c, rng);
    auto x = seeded_fill({4, 8}, 12, DistSpec::normal(0, 1));
    const std::vector<std::int64_t> perm = {2, 0, 3, 1};

    auto permute_rows = [&](const TensorPtr& t) {
        auto out = Tensor::zeros(t->shape);
        for (std::int64_t i = 0; i < 4; ++i) {
            for (std::int64_t j = 0; j < 8; ++j) out->at2(i, j) = t->at2(perm[i], j);
        }
        return out;
    };

    auto y_then_perm = permute_rows(transformer_block(x, params.blocks[0], c));
    auto perm_then_y = transformer_block(permute_rows(x), params.blocks[0], c);
    CHECK(max_abs_diff(y_then_perm, perm_then_y) < 1e-12);
}

TEST_CASE("encode honors the configured MoA layers") {
    TrainConfig tc = TrainConfig::preset("toy");
    tc.seed = 13;
    DepthModel model = build_model(tc);
    auto image = seeded_fill({3, 64, 64}, 14, DistSpec::uniform(0, 1));

    SUBCASE("toy feature map is [64, 8, 8]") {
        EncodeResult enc = encode(image, model.backbone, tc.backbone, model.moa_pointers());
        CHECK(enc.feature_map.features->shape == Shape{64, 8, 8});
        CHECK(enc.feature_map.class_token->shape == Shape{1, 64});
        CHECK(enc.gates.size() == 4);
    }

    SUBCASE("identity-initialized MoA changes nothing") {
        EncodeResult with_moa =
            encode(image, model.backbone, tc.backbone, model.moa_pointers());
        ViTConfig no_moa_cfg = tc.backbone;
        no_moa_cfg.moa_layers = {};
        EncodeResult without =
            encode(image, model.backbone, no_moa_cfg, {});
        CHECK(max_abs_diff(with_moa.feature_map.features, without.feature_map.features) ==
              0.0);
    }

    SUBCASE("bitwise deterministic") {
        EncodeResult a = encode(image, model.backbone, tc.backbone, model.moa_pointers());
        EncodeResult b = encode(image, model.backbone, tc.backbone, model.moa_pointers());
        CHECK(a.feature_map.features->data == b.feature_map.features->data);
    }

    SUBCASE("missing MoA module is a configuration error") {
        CHECK_THROWS_AS(encode(image, model.backbone, tc.backbone, {}), ConfigError);
    }
}

TEST_CASE("freezing mask covers the final blocks, MoA, and heads") {
    TrainConfig tc = TrainConfig::preset("toy");
    tc.seed = 15;
    DepthModel model = build_model(tc);
    const auto mask = freezing_mask(model);

    CHECK(mask.count("backbone.block08.attn.wo") == 1);
    CHECK(mask.count("backbone.block11.mlp.w1") == 1);
    CHECK(mask.count("backbone.block07.mlp.w1") == 0);
    CHECK(mask.count("backbone.block00.ln1.gamma") == 0);
    CHECK(mask.count("backbone.patch_proj.w") == 0);
    CHECK(mask.count("backbone.pos_embed") == 0);
    CHECK(mask.count("backbone.cls_token") == 0);
    CHECK(mask.count("moa.layer02.expert0.w1") == 1);
    CHECK(mask.count("moa.layer11.gate.b2") == 1);
    CHECK(mask.count("heads.stem.w") == 1);

    ParamCounts counts = count_params(model);
    CHECK(counts.trainable < counts.total);
    CHECK(counts.trainable > 0);

    SUBCASE("zero trainable blocks leaves only MoA and heads") {
        TrainConfig tc2 = tc;
        tc2.backbone.trainable_final_blocks = 0;
        DepthModel m2 = build_model(tc2);
        for (const auto& name : freezing_mask(m2)) {
            CHECK((name.rfind("moa.", 0) == 0 || name.rfind("heads.", 0) == 0));
        }
    }
}

TEST_CASE("gradients reach trainable parameters only") {
    TrainConfig tc = TrainConfig::preset("toy");
    tc.seed = 16;
    DepthModel model = build_model(tc);
    auto image = seeded_fill({3, 64, 64}, 17, DistSpec::uniform(0, 1));
    EncodeResult enc = encode(image, model.backbone, tc.backbone, model.moa_pointers());
    backward(sum(enc.feature_map.features));

    std::int64_t trainable_with_grad = 0;
    for (const auto& [name, tensor] : named_params(model)) {
        if (name.rfind("heads.", 0) == 0) continue;  // heads not in this graph
        if (tensor->requires_grad) {
            if (!tensor->grad.empty()) ++trainable_with_grad;
        } else {
            // frozen: gradient absent (never allocated) or identically zero
            bool all_zero = true;
            for (double g : tensor->grad) all_zero = all_zero && g == 0.0;
            CHECK(all_zero);
        }
    }
    CHECK(trainable_with_grad > 0);
}

TEST_CASE("config validation rejects inconsistent settings") {
    ViTConfig c = small_config();
    c.image_size = 15;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config();
    c.n_heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config();
    c.moa_layers = {5};  // depth is 2
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config();
    c.trainable_final_blocks = 7;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_AS(ViTConfig::named_preset("huge"), ConfigError);
}

}  // TEST_SUITE
