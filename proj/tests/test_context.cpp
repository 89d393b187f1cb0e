#include <cmath>

#include "doctest.h"
#include "moadepth/context.hpp"
#include "moadepth/error.hpp"

using namespace moadepth;

namespace {

double norm2(const TensorPtr& v) {
    double s = 0;
    for (double x : v->data) s += x * x;
    return std::sqrt(s);
}

double cosine(const TensorPtr& a, const TensorPtr& b) {
    double dot = 0;
    for (std::int64_t i = 0; i < a->numel(); ++i) dot += a->data[i] * b->data[i];
    return dot / (norm2(a) * norm2(b));
}

}  // namespace

TEST_SUITE("context") {

TEST_CASE("pseudo text encoder emits deterministic unit vectors") {
    auto v = pseudo_text_encode("a photo of a kitchen", 64, 42);
    CHECK(std::fabs(norm2(v) - 1.0) < 1e-12);

    auto again = pseudo_text_encode("a photo of a kitchen", 64, 42);
    CHECK(v->data == again->data);

    auto other_seed = pseudo_text_encode("a photo of a kitchen", 64, 43);
    CHECK(v->data != other_seed->data);

    CHECK_THROWS_AS(pseudo_text_encode("", 64, 42), ParameterError);
    CHECK_THROWS_AS(pseudo_text_encode("x", 0, 42), ParameterError);
}

TEST_CASE("default prompt embeddings are nearly orthogonal") {
    PromptSet prompts = PromptSet::default_set(64);
    std::vector<TensorPtr> embeddings;
    for (const auto& p : prompts.prompts) {
        embeddings.push_back(pseudo_text_encode(p, 64, 42));
    }
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        for (std::size_t j = i + 1; j < embeddings.size(); ++j) {
            CHECK(std::fabs(cosine(embeddings[i], embeddings[j])) < 0.5);
        }
    }
}

TEST_CASE("build_context averages unit embeddings") {
    SUBCASE("single prompt keeps its unit embedding") {
        PromptSet one;
        one.prompts = {"a photo of a study"};
        one.dim = 32;
        ContextVector c = build_context(one, 7);
        auto direct = pseudo_text_encode("a photo of a study", 32, 7);
        CHECK(c.c->data == direct->data);
        CHECK(std::fabs(norm2(c.c) - 1.0) < 1e-12);
    }
    SUBCASE("opposite embeddings cancel") {
        auto e = pseudo_text_encode("anything", 16, 1);
        auto neg = Tensor::zeros({16});
        for (std::int64_t i = 0; i < 16; ++i) neg->data[i] = -e->data[i];
        ContextVector c = build_context_from_embeddings({e, neg});
        for (double x : c.c->data) CHECK(x == 0.0);
    }
    SUBCASE("default ten-prompt average is strictly inside the unit ball") {
        ContextVector c = build_context(PromptSet::default_set(64), 42);
        CHECK(norm2(c.c) < 1.0);
        CHECK(norm2(c.c) > 0.0);
        CHECK_FALSE(c.c->requires_grad);
    }
    SUBCASE("renormalize flag restores unit norm") {
        ContextVector c = build_context(PromptSet::default_set(64), 42, true);
        CHECK(std::fabs(norm2(c.c) - 1.0) < 1e-12);
    }
    SUBCASE("bitwise identical across runs") {
        ContextVector a = build_context(PromptSet::default_set(64), 9);
        ContextVector b = build_context(PromptSet::default_set(64), 9);
        CHECK(a.c->data == b.c->data);
    }
}

TEST_CASE("prompt set validation") {
    PromptSet empty;
    empty.dim = 8;
    CHECK_THROWS_AS(empty.validate(), ParameterError);
    PromptSet dup;
    dup.prompts = {"a", "a"};
    dup.dim = 8;
    CHECK_THROWS_AS(dup.validate(), ParameterError);
}

TEST_CASE("fuse broadcasts the context over every location") {
    auto features = seeded_fill({3, 2, 4}, 5, DistSpec::normal(0, 1));
    ContextVector ctx{Tensor::make({5}, {1, 2, 3, 4, 5})};
    auto fused = fuse(features, ctx);
    REQUIRE(fused->shape == Shape{8, 2, 4});
    for (std::int64_t ch = 0; ch < 3; ++ch) {
        for (std::int64_t i = 0; i < 8; ++i) {
            CHECK(fused->data[ch * 8 + i] == features->data[ch * 8 + i]);
        }
    }
    for (std::int64_t ch = 0; ch < 5; ++ch) {
        for (std::int64_t y = 0; y < 2; ++y) {
            for (std::int64_t x = 0; x < 4; ++x) {
                CHECK(fused->data[((3 + ch) * 2 + y) * 4 + x] == ctx.c->data[ch]);
            }
        }
    }

    SUBCASE("zero context appends zero channels") {
        ContextVector zero{Tensor::zeros({5})};
        auto f = fuse(features, zero);
        for (std::int64_t i = 3 * 8; i < f->numel(); ++i) CHECK(f->data[i] == 0.0);
    }

    SUBCASE("distinct features stay distinct after fusion") {
        for (std::uint64_t trial = 0; trial < 20; ++trial) {
            auto a = seeded_fill({3, 2, 4}, 100 + trial, DistSpec::normal(0, 1));
            auto b = seeded_fill({3, 2, 4}, 200 + trial, DistSpec::normal(0, 1));
            REQUIRE(a->data != b->data);
            CHECK(fuse(a, ctx)->data != fuse(b, ctx)->data);
        }
    }
}

}  // TEST_SUITE
