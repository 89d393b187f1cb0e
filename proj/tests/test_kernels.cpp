#include <array>
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "moadepth/kernels.hpp"
#include "moadepth/rng.hpp"

using namespace moadepth;

namespace {

std::vector<double> random_vec(std::int64_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal(0.0, 1.0);
    return v;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
    }
    return true;
}

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("matmul variants match the serial reference bitwise") {
    // Sizes straddle the parallel-dispatch grain on purpose.
    const std::array<std::array<int, 3>, 3> sizes = {{{3, 4, 5}, {65, 64, 16}, {128, 96, 128}}};
    for (auto [m, k, n] : sizes) {
        auto a = random_vec(m * k, 11 + m);
        auto b = random_vec(k * n, 23 + n);
        std::vector<double> c_par(m * n), c_ref(m * n);

        kern::matmul_nn(m, k, n, a.data(), b.data(), c_par.data());
        kern::ref::matmul_nn(m, k, n, a.data(), b.data(), c_ref.data());
        CHECK(bitwise_equal(c_par, c_ref));

        auto bt = random_vec(n * k, 31 + k);
        kern::matmul_nt(m, k, n, a.data(), bt.data(), c_par.data());
        kern::ref::matmul_nt(m, k, n, a.data(), bt.data(), c_ref.data());
        CHECK(bitwise_equal(c_par, c_ref));

        auto at = random_vec(k * m, 41 + m);
        kern::matmul_tn(m, k, n, at.data(), b.data(), c_par.data());
        kern::ref::matmul_tn(m, k, n, at.data(), b.data(), c_ref.data());
        CHECK(bitwise_equal(c_par, c_ref));
    }
}

TEST_CASE("matmul_nn small fixture") {
    // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
    std::vector<double> a = {1, 2, 3, 4};
    std::vector<double> b = {5, 6, 7, 8};
    std::vector<double> c(4);
    kern::matmul_nn(2, 2, 2, a.data(), b.data(), c.data());
    CHECK(c == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("row kernels match the serial reference bitwise") {
    const std::array<std::array<int, 2>, 3> sizes = {{{4, 7}, {65, 64}, {257, 128}}};
    for (auto [rows, cols] : sizes) {
        auto x = random_vec(rows * cols, 7 * rows + cols);
        std::vector<double> y_par(rows * cols), y_ref(rows * cols);

        kern::softmax_rows(rows, cols, 2.0, x.data(), y_par.data());
        kern::ref::softmax_rows(rows, cols, 2.0, x.data(), y_ref.data());
        CHECK(bitwise_equal(y_par, y_ref));

        kern::log_softmax_rows(rows, cols, 1.0, x.data(), y_par.data());
        kern::ref::log_softmax_rows(rows, cols, 1.0, x.data(), y_ref.data());
        CHECK(bitwise_equal(y_par, y_ref));

        std::vector<double> r_par(rows), r_ref(rows);
        kern::layer_norm_rows(rows, cols, 1e-12, x.data(), y_par.data(), r_par.data());
        kern::ref::layer_norm_rows(rows, cols, 1e-12, x.data(), y_ref.data(), r_ref.data());
        CHECK(bitwise_equal(y_par, y_ref));
        CHECK(bitwise_equal(r_par, r_ref));
    }
}

TEST_CASE("spatial and reduction kernels match the serial reference bitwise") {
    const std::int64_t c = 3, h = 32, w = 48;
    auto x = random_vec(c * h * w, 99);

    std::vector<double> p_par(c * (h / 4) * (w / 4)), p_ref(p_par.size());
    kern::avg_pool2d(c, h, w, 4, 4, x.data(), p_par.data());
    kern::ref::avg_pool2d(c, h, w, 4, 4, x.data(), p_ref.data());
    CHECK(bitwise_equal(p_par, p_ref));

    std::vector<double> u_par(c * 64 * 96), u_ref(u_par.size());
    kern::upsample_bilinear2d(c, h, w, 64, 96, x.data(), u_par.data());
    kern::ref::upsample_bilinear2d(c, h, w, 64, 96, x.data(), u_ref.data());
    CHECK(bitwise_equal(u_par, u_ref));

    std::vector<double> s_par(c * w), s_ref(c * w);
    kern::reduce_sum_axis(c, h, w, x.data(), s_par.data());
    kern::ref::reduce_sum_axis(c, h, w, x.data(), s_ref.data());
    CHECK(bitwise_equal(s_par, s_ref));
}

TEST_CASE("repeat runs are bitwise stable") {
    const std::int64_t m = 96, k = 96, n = 96;
    auto a = random_vec(m * k, 5);
    auto b = random_vec(k * n, 6);
    std::vector<double> c1(m * n), c2(m * n);
    kern::matmul_nn(m, k, n, a.data(), b.data(), c1.data());
    kern::matmul_nn(m, k, n, a.data(), b.data(), c2.data());
    CHECK(bitwise_equal(c1, c2));
}

}  // TEST_SUITE
