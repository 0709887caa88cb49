#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "pivotgen/common.hpp"

namespace pivotgen {

template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until allocated

    TensorT() = default;
    explicit TensorT(std::vector<int> s) : shape(std::move(s)) {
        data.assign(count(shape), T(0));
    }

    static std::size_t count(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) n *= static_cast<std::size_t>(d);
        return n;
    }

    std::size_t size() const { return data.size(); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }
};

using Tensor = TensorT<float>;

namespace kernels {

// c[m,n] += a[m,k] * b[k,n]; plain ikj loop, inner loop vectorizes.
template <typename T>
inline void matmul_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* ar = a + static_cast<std::size_t>(i) * k;
        T* cr = c + static_cast<std::size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            T av = ar[l];
            const T* br = b + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

template <typename T>
inline std::vector<T> transpose(const T* a, int m, int n) {
    std::vector<T> out(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = a[static_cast<std::size_t>(i) * n + j];
    return out;
}

template <typename T>
inline T dot(const T* a, const T* b, int n) {
    T s = T(0);
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

// out = x*W + b for a single row x[k], W[k,n] row-major. Shares the
// accumulation order of matmul_acc so cached decoding is bitwise identical
// to the full-sequence path.
template <typename T>
inline void matvec_rowmajor(const T* x, const T* w, const T* b, T* out, int k, int n) {
    for (int j = 0; j < n; ++j) out[j] = T(0);
    for (int l = 0; l < k; ++l) {
        T xv = x[l];
        const T* wr = w + static_cast<std::size_t>(l) * n;
        for (int j = 0; j < n; ++j) out[j] += xv * wr[j];
    }
    if (b)
        for (int j = 0; j < n; ++j) out[j] += b[j];
}

template <typename T>
inline void layer_norm_row(const T* x, const T* gamma, const T* beta, T* out, int d, T eps) {
    T mean = T(0);
    for (int i = 0; i < d; ++i) mean += x[i];
    mean /= T(d);
    T var = T(0);
    for (int i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= T(d);
    T inv = T(1) / std::sqrt(var + eps);
    for (int i = 0; i < d; ++i) out[i] = gamma[i] * ((x[i] - mean) * inv) + beta[i];
}

// In-place softmax over row[0..n), max-subtracted.
template <typename T>
inline void softmax_row(T* row, int n) {
    T m = row[0];
    for (int i = 1; i < n; ++i) m = std::max(m, row[i]);
    T sum = T(0);
    for (int i = 0; i < n; ++i) {
        row[i] = std::exp(row[i] - m);
        sum += row[i];
    }
    for (int i = 0; i < n; ++i) row[i] /= sum;
}

template <typename T>
inline T gelu(T x) {
    const T c = T(0.7978845608028653558798921198687);  // sqrt(2/pi)
    T u = c * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
inline T gelu_grad(T x) {
    const T c = T(0.7978845608028653558798921198687);
    T u = c * (x + T(0.044715) * x * x * x);
    T t = std::tanh(u);
    T du = c * (T(1) + T(3) * T(0.044715) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

}  // namespace kernels

}  // namespace pivotgen
