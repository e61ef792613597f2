#pragma once

#include <cmath>
#include <cstddef>

// OpenMP kernels used by the tape and the model. Every kernel parallelizes
// over independent output rows only; each output element is produced by one
// thread with a fixed serial reduction order, so results are bitwise
// identical for any thread count. Serial twins live in reference.hpp and the
// bench tool compares the two.

namespace steerlab::kernels {

inline constexpr long kParallelGrain = 2 * 1024 * 1024; // flops below this stay serial

// C[m,n] = A[m,k] * B[k,n] (+ C if accumulate)
template <class S>
void gemm_nn(int m, int n, int k, const S* __restrict a, const S* __restrict b,
             S* __restrict c, bool accumulate = false) {
    const long work = static_cast<long>(m) * n * k;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
    for (int i = 0; i < m; ++i) {
        S* crow = c + static_cast<size_t>(i) * n;
        if (!accumulate)
            for (int j = 0; j < n; ++j) crow[j] = S(0);
        const S* arow = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] = A[m,k] * B[n,k]^T
template <class S>
void gemm_nt(int m, int n, int k, const S* __restrict a, const S* __restrict b,
             S* __restrict c, bool accumulate = false) {
    const long work = static_cast<long>(m) * n * k;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
    for (int i = 0; i < m; ++i) {
        S* crow = c + static_cast<size_t>(i) * n;
        const S* arow = a + static_cast<size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            const S* brow = b + static_cast<size_t>(j) * k;
            S acc = accumulate ? crow[j] : S(0);
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    }
}

// C[m,n] = A[k,m]^T * B[k,n]
template <class S>
void gemm_tn(int m, int n, int k, const S* __restrict a, const S* __restrict b,
             S* __restrict c, bool accumulate = false) {
    const long work = static_cast<long>(m) * n * k;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
    for (int i = 0; i < m; ++i) {
        S* crow = c + static_cast<size_t>(i) * n;
        if (!accumulate)
            for (int j = 0; j < n; ++j) crow[j] = S(0);
        for (int p = 0; p < k; ++p) {
            const S av = a[static_cast<size_t>(p) * m + i];
            const S* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Column-block product: C[m, c1-c0] = A[m,k] * B[:, c0:c1], B stored [k, ldb].
template <class S>
void gemm_nn_colblock(int m, int k, const S* __restrict a, const S* __restrict b, int ldb,
                      int c0, int c1, S* __restrict c) {
    const int n = c1 - c0;
    const long work = static_cast<long>(m) * n * k;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
    for (int i = 0; i < m; ++i) {
        S* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] = S(0);
        const S* arow = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b + static_cast<size_t>(p) * ldb + c0;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// In-place row softmax with max subtraction. Sums accumulate in double.
template <class S>
void softmax_rows(int rows, int cols, S* x) {
#pragma omp parallel for schedule(static) if (static_cast<long>(rows) * cols > 262144)
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

// y[i,:] = x[i,:] * gain / rms(x[i,:]), rms accumulated in double.
template <class S>
void rms_norm_rows(int rows, int cols, const S* x, const S* gain, S eps, S* y,
                   S* inv_rms_out = nullptr) {
#pragma omp parallel for schedule(static) if (static_cast<long>(rows) * cols > 262144)
    for (int i = 0; i < rows; ++i) {
        const S* xr = x + static_cast<size_t>(i) * cols;
        S* yr = y + static_cast<size_t>(i) * cols;
        double ss = 0.0;
        for (int j = 0; j < cols; ++j) ss += static_cast<double>(xr[j]) * xr[j];
        const S inv = static_cast<S>(1.0 / std::sqrt(ss / cols + static_cast<double>(eps)));
        if (inv_rms_out) inv_rms_out[i] = inv;
        for (int j = 0; j < cols; ++j) yr[j] = xr[j] * inv * gain[j];
    }
}

template <class S>
void silu(size_t n, const S* x, S* y) {
#pragma omp parallel for schedule(static) if (n > 262144)
    for (long i = 0; i < static_cast<long>(n); ++i) {
        const S v = x[i];
        y[i] = v / (S(1) + std::exp(-v));
    }
}

} // namespace steerlab::kernels
