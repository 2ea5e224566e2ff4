#include "memlab/ops.hpp"

#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace memlab {

namespace {

using detail::Node;
using detail::NodePtr;

Eigen::Index idx(std::size_t n) { return static_cast<Eigen::Index>(n); }

MatrixMap grad_map(Node& n, std::size_t rows, std::size_t cols) {
  return MatrixMap(n.grad_buffer().data(), idx(rows), idx(cols));
}

ConstMatrixMap value_map(const Node& n, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap(n.value.data(), idx(rows), idx(cols));
}

Eigen::Map<const Eigen::ArrayXd> flat(const Buffer& v) {
  return Eigen::Map<const Eigen::ArrayXd>(v.data(), idx(v.size()));
}

Eigen::Map<Eigen::ArrayXd> flat_grad(Node& n) {
  auto& g = n.grad_buffer();
  return Eigen::Map<Eigen::ArrayXd>(g.data(), idx(g.size()));
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " needs a rank 2 tensor, got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

std::string_view to_string(Activation kind) {
  switch (kind) {
    case Activation::sigmoid: return "sigmoid";
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
  }
  return "unknown";
}

Activation activation_from_string(std::string_view name) {
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  throw ValueError("unsupported activation '" + std::string(name) + "'");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Buffer out(m * n);
  kernels::gemm(a.values().data(), b.values().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), "matmul", {a.node(), b.node()},
                             [m, k, n](Node& self) {
                               const ConstMatrixMap g(self.grad.data(), idx(m), idx(n));
                               Node& lhs = *self.inputs[0];
                               Node& rhs = *self.inputs[1];
                               if (lhs.requires_grad) {
                                 grad_map(lhs, m, k).noalias() += g * value_map(rhs, k, n).transpose();
                               }
                               if (rhs.requires_grad) {
                                 grad_map(rhs, k, n).noalias() += value_map(lhs, m, k).transpose() * g;
                               }
                             });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Buffer out(m * n);
  MatrixMap(out.data(), idx(n), idx(m)) = a.matrix().transpose();
  return detail::make_result({n, m}, std::move(out), "transpose", {a.node()}, [m, n](Node& self) {
    grad_map(*self.inputs[0], m, n) += ConstMatrixMap(self.grad.data(), idx(n), idx(m)).transpose();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer out(a.numel());
  Eigen::Map<Eigen::ArrayXd>(out.data(), idx(out.size())) =
      flat(a.node()->value) + flat(b.node()->value);
  return detail::make_result(a.shape(), std::move(out), "add", {a.node(), b.node()}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (in->requires_grad) flat_grad(*in) += flat(self.grad);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Buffer out(a.numel());
  Eigen::Map<Eigen::ArrayXd>(out.data(), idx(out.size())) =
      flat(a.node()->value) - flat(b.node()->value);
  return detail::make_result(a.shape(), std::move(out), "sub", {a.node(), b.node()}, [](Node& self) {
    if (self.inputs[0]->requires_grad) flat_grad(*self.inputs[0]) += flat(self.grad);
    if (self.inputs[1]->requires_grad) flat_grad(*self.inputs[1]) -= flat(self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer out(a.numel());
  Eigen::Map<Eigen::ArrayXd>(out.data(), idx(out.size())) =
      flat(a.node()->value) * flat(b.node()->value);
  return detail::make_result(a.shape(), std::move(out), "mul", {a.node(), b.node()}, [](Node& self) {
    Node& lhs = *self.inputs[0];
    Node& rhs = *self.inputs[1];
    // Compute both contributions before touching either buffer: lhs and rhs
    // may be the same node.
    const Eigen::ArrayXd gl = flat(self.grad) * flat(rhs.value);
    const Eigen::ArrayXd gr = flat(self.grad) * flat(lhs.value);
    if (lhs.requires_grad) flat_grad(lhs) += gl;
    if (rhs.requires_grad) flat_grad(rhs) += gr;
  });
}

Tensor scale(const Tensor& a, double factor) {
  Buffer out(a.numel());
  Eigen::Map<Eigen::ArrayXd>(out.data(), idx(out.size())) = flat(a.node()->value) * factor;
  return detail::make_result(a.shape(), std::move(out), "scale", {a.node()}, [factor](Node& self) {
    flat_grad(*self.inputs[0]) += flat(self.grad) * factor;
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_rank2(a, "add_row");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (row.numel() != n || row.rank() != 1) {
    throw ShapeError("add_row: row " + shape_string(row.shape()) + " does not fit " +
                     shape_string(a.shape()));
  }
  Buffer out(m * n);
  const Eigen::Map<const Eigen::RowVectorXd> r(row.values().data(), idx(n));
  MatrixMap(out.data(), idx(m), idx(n)) = a.matrix().rowwise() + r;
  return detail::make_result(a.shape(), std::move(out), "add_row", {a.node(), row.node()},
                             [m, n](Node& self) {
                               const ConstMatrixMap g(self.grad.data(), idx(m), idx(n));
                               if (self.inputs[0]->requires_grad) grad_map(*self.inputs[0], m, n) += g;
                               if (self.inputs[1]->requires_grad) {
                                 grad_map(*self.inputs[1], 1, n) += g.colwise().sum();
                               }
                             });
}

Tensor sum(const Tensor& a) {
  const double total = flat(a.node()->value).sum();
  return detail::make_result({1}, {total}, "sum", {a.node()}, [](Node& self) {
    flat_grad(*self.inputs[0]) += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const double count = static_cast<double>(a.numel());
  const double avg = flat(a.node()->value).sum() / count;
  return detail::make_result({1}, {avg}, "mean", {a.node()}, [count](Node& self) {
    flat_grad(*self.inputs[0]) += self.grad[0] / count;
  });
}

Tensor activation(const Tensor& x, Activation kind) {
  const auto& in = x.node()->value;
  Buffer out(in.size());
  switch (kind) {
    case Activation::sigmoid:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-in[i]));
      break;
    case Activation::relu:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    case Activation::gelu:
      for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = 0.5 * in[i] * (1.0 + std::erf(in[i] * kInvSqrt2));
      }
      break;
  }
  const char* name = kind == Activation::sigmoid ? "sigmoid" : kind == Activation::relu ? "relu" : "gelu";
  return detail::make_result(x.shape(), std::move(out), name, {x.node()}, [kind](Node& self) {
    Node& src = *self.inputs[0];
    auto& g = src.grad_buffer();
    const auto& xin = src.value;
    const auto& y = self.value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      switch (kind) {
        case Activation::sigmoid: d = y[i] * (1.0 - y[i]); break;
        case Activation::relu: d = xin[i] > 0.0 ? 1.0 : 0.0; break;
        case Activation::gelu: {
          const double cdf = 0.5 * (1.0 + std::erf(xin[i] * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xin[i] * xin[i]);
          d = cdf + xin[i] * pdf;
          break;
        }
      }
      g[i] += self.grad[i] * d;
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& shape = x.shape();
  if (axis >= shape.size()) {
    throw ShapeError("softmax axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];
  const auto& in = x.node()->value;
  Buffer out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = in[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        out[base + j * inner] = std::exp(in[base + j * inner] - mx);
        z += out[base + j * inner];
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  return detail::make_result(shape, std::move(out), "softmax", {x.node()},
                             [outer, inner, n](Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               const auto& y = self.value;
                               const auto& gy = self.grad;
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t i = 0; i < inner; ++i) {
                                   const std::size_t base = o * n * inner + i;
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) {
                                     dot += gy[base + j * inner] * y[base + j * inner];
                                   }
                                   for (std::size_t j = 0; j < n; ++j) {
                                     const std::size_t p = base + j * inner;
                                     g[p] += y[p] * (gy[p] - dot);
                                   }
                                 }
                               }
                             });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n) {
    throw ShapeError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                     shape_string(bias.shape()) + " do not match " + shape_string(x.shape()));
  }
  if (!(eps > 0.0)) throw ValueError("layer_norm eps must be positive");
  const ConstMatrixMap xm = x.matrix();
  const Eigen::Map<const Eigen::RowVectorXd> gv(gain.values().data(), idx(n));
  const Eigen::Map<const Eigen::RowVectorXd> bv(bias.values().data(), idx(n));
  // normalized rows and inverse std kept for the backward pass
  auto xhat = std::make_shared<RowMatrix>(idx(m), idx(n));
  auto inv_std = std::make_shared<Eigen::VectorXd>(idx(m));
  Buffer out(m * n);
  MatrixMap om(out.data(), idx(m), idx(n));
  for (Eigen::Index r = 0; r < idx(m); ++r) {
    const double mu = xm.row(r).mean();
    const double var = (xm.row(r).array() - mu).square().mean();
    (*inv_std)(r) = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = (xm.row(r).array() - mu) * (*inv_std)(r);
    om.row(r) = xhat->row(r).cwiseProduct(gv) + bv;
  }
  return detail::make_result(x.shape(), std::move(out), "layer_norm",
                             {x.node(), gain.node(), bias.node()},
                             [m, n, xhat, inv_std](Node& self) {
                               const ConstMatrixMap g(self.grad.data(), idx(m), idx(n));
                               Node& src = *self.inputs[0];
                               Node& gn = *self.inputs[1];
                               Node& bs = *self.inputs[2];
                               if (gn.requires_grad) {
                                 grad_map(gn, 1, n) += g.cwiseProduct(*xhat).colwise().sum();
                               }
                               if (bs.requires_grad) grad_map(bs, 1, n) += g.colwise().sum();
                               if (src.requires_grad) {
                                 const Eigen::Map<const Eigen::RowVectorXd> gv(gn.value.data(), idx(n));
                                 MatrixMap gx = grad_map(src, m, n);
                                 for (Eigen::Index r = 0; r < idx(m); ++r) {
                                   const Eigen::RowVectorXd dxhat = g.row(r).cwiseProduct(gv);
                                   const double mean_d = dxhat.mean();
                                   const double mean_dx = dxhat.cwiseProduct(xhat->row(r)).mean();
                                   gx.row(r).array() +=
                                       (*inv_std)(r) *
                                       (dxhat.array() - mean_d - xhat->row(r).array() * mean_dx);
                                 }
                               }
                             });
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                     std::span<const std::uint8_t> mask) {
  require_rank2(logits, "cross_entropy");
  const std::size_t t_len = logits.shape()[0], vocab = logits.shape()[1];
  if (targets.size() != t_len || mask.size() != t_len) {
    throw ShapeError("cross_entropy: logits " + shape_string(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets / " + std::to_string(mask.size()) +
                     " mask entries");
  }
  std::size_t active = 0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (!mask[t]) continue;
    ++active;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw ValueError("cross_entropy: target " + std::to_string(targets[t]) + " at position " +
                       std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  if (active == 0) throw ValueError("cross_entropy: every position is masked");

  const ConstMatrixMap lm = logits.matrix();
  auto probs = std::make_shared<RowMatrix>(idx(t_len), idx(vocab));
  double total = 0.0;
  for (Eigen::Index t = 0; t < idx(t_len); ++t) {
    if (!mask[t]) continue;
    const double mx = lm.row(t).maxCoeff();
    probs->row(t) = (lm.row(t).array() - mx).exp();
    const double z = probs->row(t).sum();
    probs->row(t) /= z;
    total += -(lm(t, targets[t]) - mx - std::log(z));
  }
  const double count = static_cast<double>(active);
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return detail::make_result({1}, {total / count}, "cross_entropy", {logits.node()},
                             [probs, tgt = std::move(tgt), msk = std::move(msk), count, t_len,
                              vocab](Node& self) {
                               MatrixMap g = grad_map(*self.inputs[0], t_len, vocab);
                               const double s = self.grad[0] / count;
                               for (Eigen::Index t = 0; t < idx(t_len); ++t) {
                                 if (!msk[t]) continue;
                                 g.row(t) += s * probs->row(t);
                                 g(t, tgt[t]) -= s;
                               }
                             });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  require_rank2(table, "embedding");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  Buffer out(ids.size() * d);
  const auto src = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ValueError("embedding: id " + std::to_string(ids[i]) + " outside table " +
                       shape_string(table.shape()));
    }
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<TokenId> keep(ids.begin(), ids.end());
  return detail::make_result({ids.size(), d}, std::move(out), "embedding", {table.node()},
                             [keep = std::move(keep), d](Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < keep.size(); ++i) {
                                 const std::size_t row = static_cast<std::size_t>(keep[i]) * d;
                                 for (std::size_t j = 0; j < d; ++j) g[row + j] += self.grad[i * d + j];
                               }
                             });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionLayout& layout, std::vector<RowMatrix>* probabilities) {
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  require_rank2(q, "causal_attention");
  const std::size_t B = layout.batch, T = layout.seq_len, H = layout.heads;
  const std::size_t d = q.shape()[1];
  if (H == 0 || d % H != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(H) + " heads");
  }
  std::vector<std::size_t> lengths = layout.lengths;
  if (lengths.empty()) lengths.assign(B, T);
  if (lengths.size() != B) throw ShapeError("causal_attention: lengths size differs from batch");
  for (auto& len : lengths) {
    if (len == 0 || len > T) throw ShapeError("causal_attention: sequence length out of range");
  }
  // sequence b covers rows [starts[b], starts[b] + spans[b])
  std::vector<std::size_t> starts(B), spans(B);
  std::size_t rows = 0;
  for (std::size_t b = 0; b < B; ++b) {
    starts[b] = rows;
    spans[b] = layout.packed ? lengths[b] : T;
    rows += spans[b];
  }
  if (rows != q.shape()[0]) {
    throw ShapeError("causal_attention: " + std::to_string(B) + " sequences of " +
                     (layout.packed ? std::to_string(rows) + " packed rows" : std::to_string(T) + " positions") +
                     " do not tile " + shape_string(q.shape()));
  }
  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<RowMatrix>>(B * H);
  Buffer out(rows * d);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      RowMatrix& p = (*probs)[b * H + h];
      p.resize(idx(spans[b]), idx(spans[b]));
      const std::size_t offset = starts[b] * d + h * dh;
      kernels::attention_head(q.values().data() + offset, k.values().data() + offset,
                              v.values().data() + offset, out.data() + offset, p.data(), d, spans[b], dh,
                              lengths[b], inv_sqrt);
    }
  }
  if (probabilities) *probabilities = *probs;
  return detail::make_result(
      q.shape(), std::move(out), "causal_attention", {q.node(), k.node(), v.node()},
      [probs, starts, spans, rows, H, d, dh, inv_sqrt](Node& self) {
        const ConstMatrixMap g(self.grad.data(), idx(rows), idx(d));
        Node& qn = *self.inputs[0];
        Node& kn = *self.inputs[1];
        Node& vn = *self.inputs[2];
        const ConstMatrixMap qv = value_map(qn, rows, d);
        const ConstMatrixMap kv = value_map(kn, rows, d);
        const ConstMatrixMap vv = value_map(vn, rows, d);
        RowMatrix gq = RowMatrix::Zero(idx(rows), idx(d));
        RowMatrix gk = RowMatrix::Zero(idx(rows), idx(d));
        RowMatrix gv = RowMatrix::Zero(idx(rows), idx(d));
        for (std::size_t b = 0; b < starts.size(); ++b) {
          const Eigen::Index r0 = idx(starts[b]), n = idx(spans[b]);
          for (std::size_t h = 0; h < H; ++h) {
            const Eigen::Index c0 = idx(h * dh), w = idx(dh);
            // maps are lower triangular, so the products skip the upper half
            const RowMatrix& pm = (*probs)[b * H + h];
            const auto go = g.block(r0, c0, n, w);
            gv.block(r0, c0, n, w).noalias() = pm.transpose().triangularView<Eigen::Upper>() * go;
            const RowMatrix gp = go * vv.block(r0, c0, n, w).transpose();
            const Eigen::VectorXd rowdot = gp.cwiseProduct(pm).rowwise().sum();
            const RowMatrix gs = (pm.array() * (gp.array().colwise() - rowdot.array())).matrix() * inv_sqrt;
            gq.block(r0, c0, n, w).noalias() = gs.triangularView<Eigen::Lower>() * kv.block(r0, c0, n, w);
            gk.block(r0, c0, n, w).noalias() = gs.transpose().triangularView<Eigen::Upper>() * qv.block(r0, c0, n, w);
          }
        }
        if (qn.requires_grad) grad_map(qn, rows, d) += gq;
        if (kn.requires_grad) grad_map(kn, rows, d) += gk;
        if (vn.requires_grad) grad_map(vn, rows, d) += gv;
      });
}

}  // namespace memlab
