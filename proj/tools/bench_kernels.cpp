// Times the OpenMP kernels against their serial reference twins.

#include <chrono>
#include <cstdio>
#include <functional>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "steerlab/kernels.hpp"
#include "steerlab/reference.hpp"
#include "steerlab/rng.hpp"
#include "steerlab/tensor.hpp"

using namespace steerlab;

namespace {

double time_of(const std::function<void()>& fn, int reps) {
    fn(); // warm up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / reps;
}

void report(const char* name, double serial, double parallel) {
    std::printf("%-24s %10.3f us %10.3f us %8.2fx\n", name, serial * 1e6, parallel * 1e6,
                serial / parallel);
}

} // namespace

int main() {
#ifdef _OPENMP
    std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
    std::printf("OpenMP not enabled; both columns run serial code\n");
#endif
    std::printf("%-24s %13s %13s %9s\n", "kernel", "serial", "openmp", "speedup");

    Rng rng(7);
    for (const int n : {64, 128, 256, 512}) {
        const Tensor a = Tensor::randn({n, n}, rng);
        const Tensor b = Tensor::randn({n, n}, rng);
        Tensor c({n, n});
        char label[64];
        std::snprintf(label, sizeof(label), "gemm_nn %dx%dx%d", n, n, n);
        const double ts = time_of(
            [&] { ref::gemm_nn(n, n, n, a.data.data(), b.data.data(), c.data.data()); }, 5);
        const double tp = time_of(
            [&] { kernels::gemm_nn(n, n, n, a.data.data(), b.data.data(), c.data.data()); }, 5);
        report(label, ts, tp);
    }

    {
        const int rows = 4096, cols = 256;
        Tensor x = Tensor::randn({rows, cols}, rng);
        Tensor y = x;
        const double ts = time_of(
            [&] {
                y.data = x.data;
                ref::softmax_rows(rows, cols, y.data.data());
            },
            10);
        const double tp = time_of(
            [&] {
                y.data = x.data;
                kernels::softmax_rows(rows, cols, y.data.data());
            },
            10);
        report("softmax_rows 4096x256", ts, tp);
    }

    {
        const int rows = 4096, cols = 256;
        const Tensor x = Tensor::randn({rows, cols}, rng);
        const Tensor g = Tensor::full({cols}, 1.0f);
        Tensor y({rows, cols});
        const double ts = time_of(
            [&] {
                ref::rms_norm_rows(rows, cols, x.data.data(), g.data.data(), 1e-6f,
                                   y.data.data());
            },
            10);
        const double tp = time_of(
            [&] {
                kernels::rms_norm_rows(rows, cols, x.data.data(), g.data.data(), 1e-6f,
                                       y.data.data());
            },
            10);
        report("rms_norm 4096x256", ts, tp);
    }

    {
        const size_t n = 1 << 20;
        const Tensor x = Tensor::randn({static_cast<int>(n)}, rng);
        Tensor y({static_cast<int>(n)});
        const double ts = time_of([&] { ref::silu(n, x.data.data(), y.data.data()); }, 10);
        const double tp = time_of([&] { kernels::silu(n, x.data.data(), y.data.data()); }, 10);
        report("silu 1M", ts, tp);
    }
    return 0;
}
