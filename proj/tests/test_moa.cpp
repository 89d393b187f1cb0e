#include <cmath>

#include "doctest.h"
#include "moadepth/error.hpp"
#include "moadepth/moa.hpp"

using namespace moadepth;

namespace {

MoAModule make_module(std::uint64_t seed, std::int64_t k = 4, std::int64_t d = 8) {
    Rng rng(seed);
    MoAConfig cfg;
    cfg.experts = k;
    cfg.bottleneck = 4;
    cfg.gate_hidden = 6;
    cfg.d_model = d;
    return init_moa_module(cfg, rng);
}

}  // namespace

TEST_SUITE("moa") {

TEST_CASE("expert with zero W2 maps everything to zero") {
    MoAModule m = make_module(1);
    auto x = seeded_fill({5, 8}, 2, DistSpec::normal(0, 1));
    auto out = expert_forward(x, m.experts[0]);
    for (double v : out->data) CHECK(v == 0.0);
}

TEST_CASE("expert of the zero token is zero") {
    MoAModule m = make_module(3);
    Rng rng(4);
    for (auto& v : m.experts[0].w2->data) v = rng.normal(0, 0.5);
    auto zero = Tensor::zeros({8});
    auto out = expert_forward(zero, m.experts[0]);
    for (double v : out->data) CHECK(v == 0.0);
}

TEST_CASE("expert two-layer arithmetic fixture") {
    // d=2, d_b=1: W1 = [1,0]^T, W2 = [1,1], x = [1,0] -> gelu(1) * [1,1].
    ExpertParams e;
    e.w1 = Tensor::make({2, 1}, {1.0, 0.0});
    e.w2 = Tensor::make({1, 2}, {1.0, 1.0});
    auto x = Tensor::make({2}, {1.0, 0.0});
    auto out = expert_forward(x, e);
    // Independent scalar route: gelu(1) = 1 * Phi(1).
    const double expected = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
    CHECK(out->data[0] == doctest::Approx(expected).epsilon(1e-14));
    CHECK(out->data[1] == doctest::Approx(expected).epsilon(1e-14));
    CHECK(out->data[0] == doctest::Approx(0.84134).epsilon(1e-4));
}

TEST_CASE("zero gate weights give uniform probabilities") {
    MoAModule m = make_module(5);
    // init already zeroes the gate output layer
    auto x = seeded_fill({7, 8}, 6, DistSpec::normal(0, 1));
    auto g = gate_forward(x, m.gate, 2.0);
    for (double v : g->data) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("gate softmax fixture via forced logits") {
    // Zero hidden weights, final-layer bias [2,0,0,0]: G(x) = [2,0,0,0].
    GateParams gate;
    gate.w1 = Tensor::zeros({8, 6});
    gate.b1 = Tensor::zeros({6});
    gate.w2 = Tensor::zeros({6, 4});
    gate.b2 = Tensor::make({4}, {2, 0, 0, 0});
    auto x = seeded_fill({3, 8}, 7, DistSpec::normal(0, 1));
    auto g = gate_forward(x, gate, 2.0);
    for (std::int64_t t = 0; t < 3; ++t) {
        CHECK(g->at2(t, 0) == doctest::Approx(0.47536).epsilon(1e-4));
        CHECK(g->at2(t, 1) == doctest::Approx(0.17488).epsilon(1e-4));
    }
}

TEST_CASE("gate rows are probability distributions") {
    MoAModule m = make_module(8);
    Rng rng(9);
    for (auto& v : m.gate.w2->data) v = rng.normal(0, 0.5);
    for (auto& v : m.gate.b2->data) v = rng.normal(0, 0.5);
    auto x = seeded_fill({11, 8}, 10, DistSpec::normal(0, 2));
    auto g = gate_forward(x, m.gate, 2.0);
    for (std::int64_t t = 0; t < 11; ++t) {
        double s = 0;
        for (std::int64_t k = 0; k < 4; ++k) {
            CHECK(g->at2(t, k) > 0.0);
            s += g->at2(t, k);
        }
        CHECK(std::fabs(s - 1.0) < 1e-12);
    }
    CHECK_THROWS_AS(gate_forward(x, m.gate, 0.0), ParameterError);
}

TEST_CASE("moa_forward is identity with zero-initialized W2") {
    MoAModule m = make_module(11);
    auto x = seeded_fill({9, 8}, 12, DistSpec::normal(0, 1));
    MoAOutput out = moa_forward(x, m);
    REQUIRE(out.tokens->shape == x->shape);
    double max_abs = 0;
    for (std::int64_t i = 0; i < x->numel(); ++i) {
        max_abs = std::max(max_abs, std::fabs(out.tokens->data[i] - x->data[i]));
    }
    CHECK(max_abs == 0.0);
}

TEST_CASE("single expert bypasses the gate") {
    MoAModule m = make_module(13, /*k=*/1);
    Rng rng(14);
    for (auto& v : m.experts[0].w2->data) v = rng.normal(0, 0.5);
    // Non-degenerate gate parameters must not matter when K = 1.
    for (auto& v : m.gate.w2->data) v = rng.normal(0, 2.0);
    for (auto& v : m.gate.b2->data) v = rng.normal(0, 2.0);
    auto x = seeded_fill({6, 8}, 15, DistSpec::normal(0, 1));
    MoAOutput out = moa_forward(x, m);
    auto expected = add(x, expert_forward(x, m.experts[0]));
    for (std::int64_t i = 0; i < x->numel(); ++i) {
        CHECK(out.tokens->data[i] == expected->data[i]);
    }
    for (double g : out.gates->data) CHECK(g == 1.0);
}

TEST_CASE("two-expert mixture matches the hand-assembled fixture") {
    // Experts built so outputs are directly controllable; gates forced to
    // [0.3, 0.7] via a fixed final-layer bias.
    MoAConfig cfg;
    cfg.experts = 2;
    cfg.bottleneck = 2;
    cfg.gate_hidden = 3;
    cfg.d_model = 4;
    Rng rng(16);
    MoAModule m = init_moa_module(cfg, rng);
    for (auto& e : m.experts) {
        for (auto& v : e.w2->data) v = rng.normal(0, 0.7);
    }
    const double w0 = 0.3, w1 = 0.7;
    m.gate.w1 = Tensor::zeros({4, 3});
    m.gate.b1 = Tensor::zeros({3});
    m.gate.w2 = Tensor::zeros({3, 2});
    // softmax(b2 / tau) = [0.3, 0.7] when b2 = tau * log of those weights
    m.gate.b2 = Tensor::make({2}, {cfg.temperature * std::log(w0),
                                   cfg.temperature * std::log(w1)});

    auto x = seeded_fill({5, 4}, 17, DistSpec::normal(0, 1));
    auto u = expert_forward(x, m.experts[0]);
    auto v = expert_forward(x, m.experts[1]);
    MoAOutput out = moa_forward(x, m);
    for (std::int64_t i = 0; i < x->numel(); ++i) {
        const double expected = x->data[i] + w0 * u->data[i] + w1 * v->data[i];
        CHECK(out.tokens->data[i] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("gate entropy fixtures") {
    SUBCASE("uniform gates reach ln K") {
        auto g = Tensor::full({6, 4}, 0.25);
        MoAStats s = gate_entropy(g);
        CHECK(s.mean_entropy == doctest::Approx(std::log(4.0)).epsilon(1e-14));
        CHECK(s.mean_entropy == doctest::Approx(1.38629).epsilon(1e-4));
        for (double u : s.usage) CHECK(u == doctest::Approx(0.25).epsilon(1e-14));
    }
    SUBCASE("one-hot gates have zero entropy") {
        auto g = Tensor::zeros({3, 4});
        g->at2(0, 1) = 1.0;
        g->at2(1, 3) = 1.0;
        g->at2(2, 1) = 1.0;
        MoAStats s = gate_entropy(g);
        CHECK(s.mean_entropy == 0.0);
    }
    SUBCASE("half-half gates give ln 2") {
        auto g = Tensor::make({1, 4}, {0.5, 0.5, 0.0, 0.0});
        MoAStats s = gate_entropy(g);
        CHECK(s.mean_entropy == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    }
    SUBCASE("rows must sum to one") {
        auto g = Tensor::make({1, 2}, {0.6, 0.5});
        CHECK_THROWS_AS(gate_entropy(g), ContractError);
    }
    SUBCASE("usage sums to one") {
        MoAModule m = make_module(18);
        Rng rng(19);
        for (auto& v : m.gate.w2->data) v = rng.normal(0, 1.0);
        auto x = seeded_fill({13, 8}, 20, DistSpec::normal(0, 1));
        MoAStats s = gate_entropy(gate_forward(x, m.gate, 2.0));
        double total = 0;
        for (double u : s.usage) total += u;
        CHECK(std::fabs(total - 1.0) < 1e-6);
        CHECK(s.mean_entropy >= 0.0);
        CHECK(s.mean_entropy <= std::log(4.0) + 1e-12);
    }
}

TEST_CASE("moa gradients pass the finite-difference check") {
    MoAModule m = make_module(21, 3);
    Rng rng(22);
    for (auto& e : m.experts) {
        for (auto& v : e.w2->data) v = rng.normal(0, 0.3);
    }
    for (auto& v : m.gate.w2->data) v = rng.normal(0, 0.3);
    for (auto& [name, p] : moa_named_params(m)) {
        (void)name;
        p->requires_grad = true;
    }
    auto x = seeded_fill({5, 8}, 23, DistSpec::normal(0, 1), true);
    auto w = seeded_fill({5, 8}, 24, DistSpec::normal(0, 1));
    auto f = [&] { return sum(mul(moa_forward(x, m).tokens, w)); };
    auto named = moa_named_params(m);
    named.emplace_back("x", x);
    GradReport report = grad_check(f, named, 1e-5, 1e-4, 1 << 30);
    CHECK(report.all_pass);
}

TEST_CASE("config validation") {
    MoAConfig bad;
    bad.experts = 0;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
    bad = MoAConfig{};
    bad.temperature = 0.0;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
    bad = MoAConfig{};
    bad.bottleneck = 0;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
}

}  // TEST_SUITE
