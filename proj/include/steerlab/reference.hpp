#pragma once

#include <cmath>
#include <cstddef>

// Serial reference kernels. Deliberately naive; tests check the OpenMP
// kernels in kernels.hpp against these, and tools/bench_kernels.cpp times the
// two side by side.

namespace steerlab::ref {

template <class S>
void gemm_nn(int m, int n, int k, const S* a, const S* b, S* c, bool accumulate = false) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            S acc = accumulate ? c[static_cast<size_t>(i) * n + j] : S(0);
            for (int p = 0; p < k; ++p)
                acc += a[static_cast<size_t>(i) * k + p] * b[static_cast<size_t>(p) * n + j];
            c[static_cast<size_t>(i) * n + j] = acc;
        }
}

template <class S>
void gemm_nt(int m, int n, int k, const S* a, const S* b, S* c, bool accumulate = false) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            S acc = accumulate ? c[static_cast<size_t>(i) * n + j] : S(0);
            for (int p = 0; p < k; ++p)
                acc += a[static_cast<size_t>(i) * k + p] * b[static_cast<size_t>(j) * k + p];
            c[static_cast<size_t>(i) * n + j] = acc;
        }
}

template <class S>
void gemm_tn(int m, int n, int k, const S* a, const S* b, S* c, bool accumulate = false) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            S acc = accumulate ? c[static_cast<size_t>(i) * n + j] : S(0);
            for (int p = 0; p < k; ++p)
                acc += a[static_cast<size_t>(p) * m + i] * b[static_cast<size_t>(p) * n + j];
            c[static_cast<size_t>(i) * n + j] = acc;
        }
}

template <class S>
void softmax_rows(int rows, int cols, S* x) {
    for (int i = 0; i < rows; ++i) {
        S* r = x + static_cast<size_t>(i) * cols;
        S mx = r[0];
        for (int j = 1; j < cols; ++j)
            if (r[j] > mx) mx = r[j];
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) {
            r[j] = static_cast<S>(std::exp(static_cast<double>(r[j] - mx)));
            sum += static_cast<double>(r[j]);
        }
        const S inv = static_cast<S>(1.0 / sum);
        for (int j = 0; j < cols; ++j) r[j] *= inv;
    }
}

template <class S>
void rms_norm_rows(int rows, int cols, const S* x, const S* gain, S eps, S* y) {
    for (int i = 0; i < rows; ++i) {
        const S* xr = x + static_cast<size_t>(i) * cols;
        S* yr = y + static_cast<size_t>(i) * cols;
        double ss = 0.0;
        for (int j = 0; j < cols; ++j) ss += static_cast<double>(xr[j]) * xr[j];
        const S inv = static_cast<S>(1.0 / std::sqrt(ss / cols + static_cast<double>(eps)));
        for (int j = 0; j < cols; ++j) yr[j] = xr[j] * inv * gain[j];
    }
}

template <class S>
void silu(size_t n, const S* x, S* y) {
    for (size_t i = 0; i < n; ++i) {
        const S v = x[i];
        y[i] = v / (S(1) + std::exp(-v));
    }
}

} // namespace steerlab::ref
