#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace memlab::kernels {

namespace {

typedef double v4d __attribute__((vector_size(32)));

inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store4(double* p, v4d v) { std::memcpy(p, &v, sizeof v); }

}  // namespace

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kRowChunk = 64;
  const std::size_t n8 = n / 8 * 8;
  for (std::size_t i0 = 0; i0 < m; i0 += kRowChunk) {
    const std::size_t i1 = std::min(m, i0 + kRowChunk);
    for (std::size_t j = 0; j < n8; j += 8) {
      std::size_t i = i0;
      for (; i + 4 <= i1; i += 4) {
        v4d c00 = {}, c01 = {}, c10 = {}, c11 = {}, c20 = {}, c21 = {}, c30 = {}, c31 = {};
        const double* ar = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double* bp = b + p * n + j;
          const v4d b0 = load4(bp), b1 = load4(bp + 4);
          const double x0 = ar[p], x1 = ar[k + p], x2 = ar[2 * k + p], x3 = ar[3 * k + p];
          c00 += x0 * b0;
          c01 += x0 * b1;
          c10 += x1 * b0;
          c11 += x1 * b1;
          c20 += x2 * b0;
          c21 += x2 * b1;
          c30 += x3 * b0;
          c31 += x3 * b1;
        }
        double* cr = c + i * n + j;
        store4(cr, c00);
        store4(cr + 4, c01);
        store4(cr + n, c10);
        store4(cr + n + 4, c11);
        store4(cr + 2 * n, c20);
        store4(cr + 2 * n + 4, c21);
        store4(cr + 3 * n, c30);
        store4(cr + 3 * n + 4, c31);
      }
      for (; i < i1; ++i) {
        v4d c0 = {}, c1 = {};
        const double* ar = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double* bp = b + p * n + j;
          c0 += ar[p] * load4(bp);
          c1 += ar[p] * load4(bp + 4);
        }
        store4(c + i * n + j, c0);
        store4(c + i * n + j + 4, c1);
      }
    }
    for (std::size_t i = i0; i < i1; ++i) {
      for (std::size_t j = n8; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
        c[i * n + j] = acc;
      }
    }
  }
}

void attention_head(const double* q, const double* k, const double* v, double* out, double* probs,
                    std::size_t ld, std::size_t seq_len, std::size_t head_dim, std::size_t length,
                    double scale) {
  const std::size_t keys = std::min(seq_len, length);
  // keys transposed so scores for one query vectorise across key positions
  std::vector<double> kt(head_dim * keys);
  for (std::size_t s = 0; s < keys; ++s) {
    for (std::size_t j = 0; j < head_dim; ++j) kt[j * keys + s] = k[s * ld + j];
  }
  std::fill(probs, probs + seq_len * seq_len, 0.0);
  for (std::size_t t = 0; t < seq_len; ++t) {
    const std::size_t visible = std::min(t + 1, keys);
    double* p = probs + t * seq_len;
    const double* qt = q + t * ld;
    for (std::size_t j = 0; j < head_dim; ++j) {
      const double x = qt[j];
      const double* kr = kt.data() + j * keys;
      for (std::size_t s = 0; s < visible; ++s) p[s] += x * kr[s];
    }
    double mx = p[0] * scale;
    for (std::size_t s = 0; s < visible; ++s) {
      p[s] *= scale;
      mx = std::max(mx, p[s]);
    }
    double total = 0.0;
    for (std::size_t s = 0; s < visible; ++s) {
      p[s] = std::exp(p[s] - mx);
      total += p[s];
    }
    for (std::size_t s = 0; s < visible; ++s) p[s] /= total;
    double* o = out + t * ld;
    std::fill(o, o + head_dim, 0.0);
    for (std::size_t s = 0; s < visible; ++s) {
      const double w = p[s];
      const double* vs = v + s * ld;
      for (std::size_t j = 0; j < head_dim; ++j) o[j] += w * vs[j];
    }
  }
}

}  // namespace memlab::kernels
