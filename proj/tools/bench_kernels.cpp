// Times the OpenMP kernels against the serial reference and verifies the two
// produce bit-identical output while it is at it.
//
//   bench_kernels [--repeats N]

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "moadepth/kernels.hpp"
#include "moadepth/rng.hpp"

using namespace moadepth;
using Clock = std::chrono::steady_clock;

namespace {

std::vector<double> random_vec(std::int64_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal(0.0, 1.0);
    return v;
}

double time_ms(const std::function<void()>& fn, int repeats) {
    fn();  // warm up
    const auto t0 = Clock::now();
    for (int i = 0; i < repeats; ++i) fn();
    const auto t1 = Clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / repeats;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

void report(const char* name, double serial_ms, double omp_ms, bool match) {
    std::printf("%-28s serial %9.3f ms   omp %9.3f ms   speedup %5.2fx   %s\n", name,
                serial_ms, omp_ms, serial_ms / omp_ms, match ? "bitwise-equal" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
    int repeats = 5;
    for (int i = 1; i < argc; ++i) {
        if (std::string(argv[i]) == "--repeats" && i + 1 < argc) repeats = std::atoi(argv[++i]);
    }
#ifdef _OPENMP
    std::printf("OpenMP enabled, max threads = %d, repeats = %d\n", omp_get_max_threads(),
                repeats);
#else
    std::printf("OpenMP disabled (serial build), repeats = %d\n", repeats);
#endif

    {
        const std::int64_t m = 512, k = 512, n = 512;
        auto a = random_vec(m * k, 1);
        auto b = random_vec(k * n, 2);
        std::vector<double> c_ref(m * n), c_omp(m * n);
        const double ts = time_ms([&] { kern::ref::matmul_nn(m, k, n, a.data(), b.data(), c_ref.data()); }, repeats);
        const double tp = time_ms([&] { kern::matmul_nn(m, k, n, a.data(), b.data(), c_omp.data()); }, repeats);
        report("matmul_nn 512^3", ts, tp, bitwise_equal(c_ref, c_omp));
    }
    {
        const std::int64_t m = 512, k = 512, n = 512;
        auto a = random_vec(m * k, 3);
        auto b = random_vec(n * k, 4);
        std::vector<double> c_ref(m * n), c_omp(m * n);
        const double ts = time_ms([&] { kern::ref::matmul_nt(m, k, n, a.data(), b.data(), c_ref.data()); }, repeats);
        const double tp = time_ms([&] { kern::matmul_nt(m, k, n, a.data(), b.data(), c_omp.data()); }, repeats);
        report("matmul_nt 512^3", ts, tp, bitwise_equal(c_ref, c_omp));
    }
    {
        const std::int64_t rows = 4096, cols = 512;
        auto x = random_vec(rows * cols, 5);
        std::vector<double> y_ref(rows * cols), y_omp(rows * cols);
        const double ts = time_ms([&] { kern::ref::softmax_rows(rows, cols, 2.0, x.data(), y_ref.data()); }, repeats);
        const double tp = time_ms([&] { kern::softmax_rows(rows, cols, 2.0, x.data(), y_omp.data()); }, repeats);
        report("softmax_rows 4096x512", ts, tp, bitwise_equal(y_ref, y_omp));
    }
    {
        const std::int64_t rows = 4096, cols = 512;
        auto x = random_vec(rows * cols, 6);
        std::vector<double> y_ref(rows * cols), y_omp(rows * cols);
        std::vector<double> r_ref(rows), r_omp(rows);
        const double ts = time_ms([&] { kern::ref::layer_norm_rows(rows, cols, 1e-12, x.data(), y_ref.data(), r_ref.data()); }, repeats);
        const double tp = time_ms([&] { kern::layer_norm_rows(rows, cols, 1e-12, x.data(), y_omp.data(), r_omp.data()); }, repeats);
        report("layer_norm_rows 4096x512", ts, tp, bitwise_equal(y_ref, y_omp));
    }
    {
        const std::int64_t c = 8, h = 512, w = 512;
        auto x = random_vec(c * h * w, 7);
        std::vector<double> y_ref(c * 1024 * 1024), y_omp(c * 1024 * 1024);
        const double ts = time_ms([&] { kern::ref::upsample_bilinear2d(c, h, w, 1024, 1024, x.data(), y_ref.data()); }, repeats);
        const double tp = time_ms([&] { kern::upsample_bilinear2d(c, h, w, 1024, 1024, x.data(), y_omp.data()); }, repeats);
        report("upsample 512->1024 x8ch", ts, tp, bitwise_equal(y_ref, y_omp));
    }
    {
        const std::int64_t outer = 512, axis = 512, inner = 64;
        auto x = random_vec(outer * axis * inner, 8);
        std::vector<double> y_ref(outer * inner), y_omp(outer * inner);
        const double ts = time_ms([&] { kern::ref::reduce_sum_axis(outer, axis, inner, x.data(), y_ref.data()); }, repeats);
        const double tp = time_ms([&] { kern::reduce_sum_axis(outer, axis, inner, x.data(), y_omp.data()); }, repeats);
        report("reduce_sum 512x512x64", ts, tp, bitwise_equal(y_ref, y_omp));
    }
    return 0;
}
