#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "memlab/tensor.hpp"

namespace memlab {

using TokenId = std::int32_t;

enum class Activation { sigmoid, relu, gelu };

std::string_view to_string(Activation kind);
Activation activation_from_string(std::string_view name);

// [m x k] * [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a[m x n] + row[n], the row repeated for every row of a.
Tensor add_row(const Tensor& a, const Tensor& row);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor activation(const Tensor& x, Activation kind);

// Numerically stable softmax along `axis` of an arbitrary-rank tensor.
Tensor softmax(const Tensor& x, std::size_t axis);

// Normalises every row of x (rank 1 or 2) over its last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Mean negative log-likelihood over the rows whose mask entry is non-zero.
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                     std::span<const std::uint8_t> mask);

// Gathers rows of table[V x d] by id.
Tensor embedding(const Tensor& table, std::span<const TokenId> ids);

// Rows of q, k, v are `batch` consecutive sequences of `seq_len` positions;
// columns are `heads` equal slices. Position t of sequence b attends to keys
// s <= t with s < lengths[b]. A packed layout has no padding: sequence b
// takes lengths[b] rows and seq_len only bounds them.
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t seq_len = 1;
  std::size_t heads = 1;
  std::vector<std::size_t> lengths;  // empty means every sequence is full
  bool packed = false;
};

// Multi-head causal scaled dot-product attention. When `probabilities` is
// non-null it receives batch*heads row-stochastic maps, ordered batch-major,
// each seq_len square (lengths[b] square when packed).
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionLayout& layout,
                        std::vector<RowMatrix>* probabilities = nullptr);

}  // namespace memlab
