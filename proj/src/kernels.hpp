#pragma once

#include <cstddef>

namespace memlab::kernels {

// Forward kernels whose per-row results do not depend on how many rows are
// processed together: each output is a left-to-right sum in a fixed order.
// Prefix rows of a longer sequence therefore match a shorter run bit for bit.

// c[m x n] = a[m x k] * b[k x n], all row-major and densely packed.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);

// One head of causal attention over `seq_len` positions. q, k, v and out
// are row-major with row stride `ld`; probs is a dense seq_len x seq_len
// output, zero outside the visible keys.
void attention_head(const double* q, const double* k, const double* v, double* out, double* probs,
                    std::size_t ld, std::size_t seq_len, std::size_t head_dim, std::size_t length,
                    double scale);

}  // namespace memlab::kernels
