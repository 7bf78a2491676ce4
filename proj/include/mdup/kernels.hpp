#pragma once

#include <cstddef>
#include <vector>

// Raw loops behind the differentiable ops. Every output element is reduced in
// a fixed index order, so results do not depend on alignment or on how many
// columns a matrix has (logits sliced to a prefix of columns are bit-identical
// to the corresponding columns of the full product).
namespace mdup::kernels {

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_acc(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
              std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* __restrict crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* __restrict brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[k x n] += a[m x k]^T * g[m x n]
template <typename T>
void gemm_tn_acc(const T* __restrict a, const T* __restrict g, T* __restrict c, std::size_t m,
                 std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* __restrict grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            T* __restrict crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
        }
    }
}

template <typename T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
    std::vector<T> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
    return out;
}

// c[m x k] += g[m x n] * b[k x n]^T
template <typename T>
void gemm_nt_acc(const T* g, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    const auto bt = transpose(b, k, n);
    gemm_acc(g, bt.data(), c, m, n, k);
}

}  // namespace mdup::kernels
