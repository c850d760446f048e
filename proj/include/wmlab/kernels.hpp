#pragma once

#include <cstddef>

namespace wmlab {

// float32 operands, float64 accumulation. The four independent partial sums
// fix the summation order (so results do not depend on optimization level)
// while still letting the compiler vectorize each chain.
inline double dot_f32_f64(const float* a, const float* b, size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += static_cast<double>(a[i + 0]) * static_cast<double>(b[i + 0]);
        s1 += static_cast<double>(a[i + 1]) * static_cast<double>(b[i + 1]);
        s2 += static_cast<double>(a[i + 2]) * static_cast<double>(b[i + 2]);
        s3 += static_cast<double>(a[i + 3]) * static_cast<double>(b[i + 3]);
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return ((s0 + s1) + (s2 + s3)) + tail;
}

// acc[i] += scale * x[i]; independent chains, vectorizes cleanly.
inline void axpy_f32_f64(double scale, const float* x, double* acc, size_t n) {
    for (size_t i = 0; i < n; ++i) acc[i] += scale * static_cast<double>(x[i]);
}

inline double sum_f64(const double* x, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += x[i];
    return s;
}

}  // namespace wmlab
