#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pal/tensor/tape.hpp"

// Differentiable primitives. Every op validates shapes, computes its value
// eagerly, and records a backward rule on the inputs' tape.
namespace pal::ops {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline ConstMapMat as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return {t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}
inline ConstMapMat as_mat(std::span<const double> d, std::size_t rows, std::size_t cols) {
  return {d.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}
inline MapMat as_mut(std::span<double> d, std::size_t rows, std::size_t cols) {
  return {d.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

inline void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(v.shape()));
  }
}

inline void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline Tape& tape_of(const Var& v) {
  if (!v.valid()) throw std::invalid_argument("operation on an unbound Var");
  return *v.tape();
}

// (outer, axis, inner) decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out({m, n});
  detail::as_mut(out.data(), m, n).noalias() =
      detail::as_mat(a.value(), m, k) * detail::as_mat(b.value(), k, n);
  return detail::tape_of(a).record("matmul", std::move(out), {a, b},
      [a, b, m, k, n](std::span<const double> g, Tape& t) {
        auto dc = detail::as_mat(g, m, n);
        if (t.needs_grad(a)) {
          detail::as_mut(t.grad_of(a), m, k).noalias() += dc * detail::as_mat(b.value(), k, n).transpose();
        }
        if (t.needs_grad(b)) {
          detail::as_mut(t.grad_of(b), k, n).noalias() += detail::as_mat(a.value(), m, k).transpose() * dc;
        }
      });
}

inline Var transpose(const Var& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({n, m});
  detail::as_mut(out.data(), n, m) = detail::as_mat(a.value(), m, n).transpose();
  return detail::tape_of(a).record("transpose", std::move(out), {a},
      [a, m, n](std::span<const double> g, Tape& t) {
        detail::as_mut(t.grad_of(a), m, n) += detail::as_mat(g, n, m).transpose();
      });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same(a, b, "add");
  Tensor out = a.value().values_only();
  const auto& bv = b.value().storage();
  auto& o = out.storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return detail::tape_of(a).record("add", std::move(out), {a, b},
      [a, b](std::span<const double> g, Tape& t) {
        for (const Var& v : {a, b}) {
          if (!t.needs_grad(v)) continue;
          auto d = t.grad_of(v);
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        }
      });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same(a, b, "mul");
  Tensor out = a.value().values_only();
  const auto& bv = b.value().storage();
  auto& o = out.storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return detail::tape_of(a).record("mul", std::move(out), {a, b},
      [a, b](std::span<const double> g, Tape& t) {
        const auto& av = a.value().storage();
        const auto& bv = b.value().storage();
        if (t.needs_grad(a)) {
          auto d = t.grad_of(a);
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
        }
        if (t.needs_grad(b)) {
          auto d = t.grad_of(b);
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
        }
      });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a.value().values_only();
  for (double& v : out.storage()) v *= c;
  return detail::tape_of(a).record("scale", std::move(out), {a},
      [a, c](std::span<const double> g, Tape& t) {
        auto d = t.grad_of(a);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += c * g[i];
      });
}

// x[m x n] + b[n] broadcast over rows.
inline Var add_bias(const Var& x, const Var& b) {
  const std::size_t n = x.cols(), m = x.rows();
  if (b.size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
  }
  Tensor out = x.value().values_only();
  const auto& bv = b.value().storage();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  return detail::tape_of(x).record("add_bias", std::move(out), {x, b},
      [x, b, m, n](std::span<const double> g, Tape& t) {
        if (t.needs_grad(x)) {
          auto d = t.grad_of(x);
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        }
        if (t.needs_grad(b)) {
          auto d = t.grad_of(b);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) d[c] += g[r * n + c];
        }
      });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().storage()) s += v;
  return detail::tape_of(x).record("sum", Tensor::scalar(s), {x},
      [x](std::span<const double> g, Tape& t) {
        auto d = t.grad_of(x);
        for (double& v : d) v += g[0];
      });
}

inline Var silu(const Var& x) {
  Tensor out = x.value().values_only();
  for (double& v : out.storage()) v = v / (1.0 + std::exp(-v));
  return detail::tape_of(x).record("silu", std::move(out), {x},
      [x](std::span<const double> g, Tape& t) {
        const auto& xv = x.value().storage();
        auto d = t.grad_of(x);
        for (std::size_t i = 0; i < d.size(); ++i) {
          const double s = 1.0 / (1.0 + std::exp(-xv[i]));
          d[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
        }
      });
}

inline constexpr double kRmsEps = 1e-6;

// Scales each trailing d-vector to unit RMS, then multiplies by gain[d].
// kRmsEps floors the RMS instead of being added under the root, so vectors
// with RMS above the floor are normalized exactly and scale-invariantly.
inline Var rmsnorm(const Var& x, const Var& gain) {
  const std::size_t d = x.cols(), m = x.rows();
  if (gain.size() != d) {
    throw DimensionError("rmsnorm: gain " + shape_str(gain.shape()) + " does not match " + shape_str(x.shape()));
  }
  const auto& xv = x.value().storage();
  const auto& gv = gain.value().storage();
  Tensor out(x.shape());
  std::vector<double> inv_rms(m);
  for (std::size_t r = 0; r < m; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += xv[r * d + c] * xv[r * d + c];
    inv_rms[r] = 1.0 / std::max(std::sqrt(ss / static_cast<double>(d)), kRmsEps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] * inv_rms[r] * gv[c];
  }
  return detail::tape_of(x).record("rmsnorm", std::move(out), {x, gain},
      [x, gain, m, d, inv_rms = std::move(inv_rms)](std::span<const double> g, Tape& t) {
        const auto& xv = x.value().storage();
        const auto& gv = gain.value().storage();
        const bool want_x = t.needs_grad(x), want_g = t.needs_grad(gain);
        std::span<double> dx = want_x ? t.grad_of(x) : std::span<double>{};
        std::span<double> dg = want_g ? t.grad_of(gain) : std::span<double>{};
        for (std::size_t r = 0; r < m; ++r) {
          const double ir = inv_rms[r];
          double dot = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double n = xv[r * d + c] * ir;
            if (want_g) dg[c] += g[r * d + c] * n;
            dot += g[r * d + c] * gv[c] * n;
          }
          if (!want_x) continue;
          dot /= static_cast<double>(d);
          if (ir == 1.0 / kRmsEps) dot = 0.0;  // floored: constant normalizer
          for (std::size_t c = 0; c < d; ++c) {
            const double n = xv[r * d + c] * ir;
            dx[r * d + c] += (g[r * d + c] * gv[c] - n * dot) * ir;
          }
        }
      });
}

inline Var softmax(const Var& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis, "softmax");
  const auto& xv = x.value().storage();
  Tensor out(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < sp.extent; ++a) mx = std::max(mx, xv[base + a * sp.inner]);
      double z = 0.0;
      for (std::size_t a = 0; a < sp.extent; ++a) {
        const double e = std::exp(xv[base + a * sp.inner] - mx);
        out[base + a * sp.inner] = e;
        z += e;
      }
      for (std::size_t a = 0; a < sp.extent; ++a) out[base + a * sp.inner] /= z;
    }
  }
  std::vector<double> y = out.storage();
  return detail::tape_of(x).record("softmax", std::move(out), {x},
      [x, sp, y = std::move(y)](std::span<const double> g, Tape& t) {
        auto d = t.grad_of(x);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.extent * sp.inner + i;
            double dot = 0.0;
            for (std::size_t a = 0; a < sp.extent; ++a) dot += g[base + a * sp.inner] * y[base + a * sp.inner];
            for (std::size_t a = 0; a < sp.extent; ++a) {
              const std::size_t k = base + a * sp.inner;
              d[k] += y[k] * (g[k] - dot);
            }
          }
        }
      });
}

// Row lookup table[ids[i]]; backward scatter-adds into the table.
inline Var embedding(const Var& table, std::span<const int> ids) {
  detail::require_rank(table, 2, "embedding");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  const auto& tv = table.value().storage();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.storage().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return detail::tape_of(table).record("embedding", std::move(out), {table},
      [table, d, idv = std::vector<int>(ids.begin(), ids.end())](std::span<const double> g, Tape& t) {
        auto dt = t.grad_of(table);
        for (std::size_t i = 0; i < idv.size(); ++i)
          for (std::size_t c = 0; c < d; ++c) dt[static_cast<std::size_t>(idv[i]) * d + c] += g[i * d + c];
      });
}

// Mean cross-entropy of logits[N x V] against targets over rows with mask set.
// Unmasked rows receive exactly zero gradient.
inline Var cross_entropy(const Var& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != n || mask.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(n) + " rows but " + std::to_string(targets.size()) +
                         " targets and " + std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) throw std::invalid_argument("cross_entropy: mask selects no positions");
  const auto& lv = logits.value().storage();
  std::vector<double> probs(n * v, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary");
    }
    const double* row = &lv[r * v];
    double mx = row[0];
    for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[targets[r]];
    for (std::size_t c = 0; c < v; ++c) probs[r * v + c] = std::exp(row[c] - lse);
  }
  const double inv = 1.0 / static_cast<double>(count);
  return detail::tape_of(logits).record("cross_entropy", Tensor::scalar(total * inv), {logits},
      [logits, n, v, inv, probs = std::move(probs),
       tg = std::vector<int>(targets.begin(), targets.end()),
       mk = std::vector<std::uint8_t>(mask.begin(), mask.end())](std::span<const double> g, Tape& t) {
        auto d = t.grad_of(logits);
        for (std::size_t r = 0; r < n; ++r) {
          if (!mk[r]) continue;
          for (std::size_t c = 0; c < v; ++c) {
            const double onehot = static_cast<int>(c) == tg[r] ? 1.0 : 0.0;
            d[r * v + c] += g[0] * inv * (probs[r * v + c] - onehot);
          }
        }
      });
}

inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  detail::split_axis(s0, axis, "concat");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) throw DimensionError("concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  const auto osp = detail::split_axis(out_shape, axis, "concat");
  Tensor out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    const std::size_t ext = p.shape()[axis];
    const auto& pv = p.value().storage();
    for (std::size_t o = 0; o < osp.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * ext * osp.inner), ext * osp.inner,
                  out.storage().begin() + static_cast<std::ptrdiff_t>((o * osp.extent + off) * osp.inner));
    }
    off += ext;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return detail::tape_of(parts[0]).record("concat", std::move(out), parts,
      [inputs, offsets, osp, axis](std::span<const double> g, Tape& t) {
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          if (!t.needs_grad(inputs[k])) continue;
          const std::size_t ext = inputs[k].shape()[axis];
          auto d = t.grad_of(inputs[k]);
          for (std::size_t o = 0; o < osp.outer; ++o) {
            const double* src = &g[(o * osp.extent + offsets[k]) * osp.inner];
            double* dst = &d[o * ext * osp.inner];
            for (std::size_t i = 0; i < ext * osp.inner; ++i) dst[i] += src[i];
          }
        }
      });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

inline Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto sp = detail::split_axis(x.shape(), axis, "slice");
  if (start + length > sp.extent) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") exceeds axis of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor out(out_shape);
  const auto& xv = x.value().storage();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + start) * sp.inner), length * sp.inner,
                out.storage().begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  }
  return detail::tape_of(x).record("slice", std::move(out), {x},
      [x, sp, start, length](std::span<const double> g, Tape& t) {
        auto d = t.grad_of(x);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const double* src = &g[o * length * sp.inner];
          double* dst = &d[(o * sp.extent + start) * sp.inner];
          for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
        }
      });
}

// out[i] = x[rows[i]] for a matrix x; rows may repeat.
inline Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
  const std::size_t n = x.cols(), m = x.rows();
  Tensor out({rows.size(), n});
  const auto& xv = x.value().storage();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[i] * n), n,
                out.storage().begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return detail::tape_of(x).record("gather_rows", std::move(out), {x},
      [x, n, idx = std::vector<std::size_t>(rows.begin(), rows.end())](std::span<const double> g, Tape& t) {
        auto d = t.grad_of(x);
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t c = 0; c < n; ++c) d[idx[i] * n + c] += g[i * n + c];
      });
}

// Tiles a single-row x[1 x n] (or [n]) into [count x n].
inline Var repeat_rows(const Var& x, std::size_t count) {
  const std::size_t n = x.size();
  Tensor out({count, n});
  const auto& xv = x.value().storage();
  for (std::size_t i = 0; i < count; ++i)
    std::copy(xv.begin(), xv.end(), out.storage().begin() + static_cast<std::ptrdiff_t>(i * n));
  return detail::tape_of(x).record("repeat_rows", std::move(out), {x},
      [x, n, count](std::span<const double> g, Tape& t) {
        auto d = t.grad_of(x);
        for (std::size_t i = 0; i < count; ++i)
          for (std::size_t c = 0; c < n; ++c) d[c] += g[i * n + c];
      });
}

// Rotary position embedding over consecutive dimension pairs inside each head.
inline Var rope(const Var& x, std::span<const int> positions, std::size_t n_heads, double base = 10000.0) {
  detail::require_rank(x, 2, "rope");
  const std::size_t m = x.rows(), d = x.cols();
  if (positions.size() != m) throw DimensionError("rope: one position per row required");
  if (n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0) {
    throw DimensionError("rope: width " + std::to_string(d) + " not splittable into even heads");
  }
  const std::size_t hd = d / n_heads;
  std::vector<double> cs(m * hd / 2), sn(m * hd / 2);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t p = 0; p < hd / 2; ++p) {
      const double theta = positions[r] * std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(hd));
      cs[r * hd / 2 + p] = std::cos(theta);
      sn[r * hd / 2 + p] = std::sin(theta);
    }
  }
  const auto& xv = x.value().storage();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t p = 0; p < hd / 2; ++p) {
        const std::size_t i0 = r * d + h * hd + 2 * p;
        const double c = cs[r * hd / 2 + p], s = sn[r * hd / 2 + p];
        out[i0] = xv[i0] * c - xv[i0 + 1] * s;
        out[i0 + 1] = xv[i0] * s + xv[i0 + 1] * c;
      }
  return detail::tape_of(x).record("rope", std::move(out), {x},
      [x, m, d, hd, n_heads, cs = std::move(cs), sn = std::move(sn)](std::span<const double> g, Tape& t) {
        auto dx = t.grad_of(x);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t h = 0; h < n_heads; ++h)
            for (std::size_t p = 0; p < hd / 2; ++p) {
              const std::size_t i0 = r * d + h * hd + 2 * p;
              const double c = cs[r * hd / 2 + p], s = sn[r * hd / 2 + p];
              dx[i0] += g[i0] * c + g[i0 + 1] * s;
              dx[i0 + 1] += -g[i0] * s + g[i0 + 1] * c;
            }
      });
}

// Row-major boolean matrix of permitted (query, key) pairs.
struct AllowMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> allowed;

  AllowMatrix() = default;
  AllowMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), allowed(r * c, 0) {}
  std::uint8_t& operator()(std::size_t r, std::size_t c) { return allowed[r * cols + c]; }
  std::uint8_t operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c]; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto a : allowed) n += a ? 1 : 0;
    return n;
  }
};

// Multi-head scaled dot-product attention restricted to `mask`. Queries with no
// permitted key produce a zero row.
inline Var attention(const Var& q, const Var& k, const Var& v, const AllowMatrix& mask, std::size_t n_heads) {
  detail::require_rank(q, 2, "attention");
  detail::require_rank(k, 2, "attention");
  detail::require_rank(v, 2, "attention");
  const std::size_t nq = q.rows(), nk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != nk) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()) + " incompatible");
  }
  if (mask.rows != nq || mask.cols != nk) {
    throw DimensionError("attention: mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                         " does not match " + std::to_string(nq) + "x" + std::to_string(nk));
  }
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("attention: width not divisible by heads");
  const std::size_t hd = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

  // CSR view of the mask.
  std::vector<std::size_t> row_ptr(nq + 1, 0);
  std::vector<std::uint32_t> col_idx;
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < nk; ++j)
      if (mask(i, j)) col_idx.push_back(static_cast<std::uint32_t>(j));
    row_ptr[i + 1] = col_idx.size();
  }
  const std::size_t nnz = col_idx.size();
  std::vector<double> probs(n_heads * nnz);
  const auto& qv = q.value().storage();
  const auto& kv = k.value().storage();
  const auto& vv = v.value().storage();
  Tensor out({nq, d});
  for (std::size_t h = 0; h < n_heads; ++h) {
    double* p = &probs[h * nnz];
    for (std::size_t i = 0; i < nq; ++i) {
      const std::size_t b = row_ptr[i], e = row_ptr[i + 1];
      if (b == e) continue;
      const double* qi = &qv[i * d + h * hd];
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t z = b; z < e; ++z) {
        const double* kj = &kv[col_idx[z] * d + h * hd];
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
        p[z] = s * sc;
        mx = std::max(mx, p[z]);
      }
      double total = 0.0;
      for (std::size_t z = b; z < e; ++z) {
        p[z] = std::exp(p[z] - mx);
        total += p[z];
      }
      double* oi = &out[i * d + h * hd];
      for (std::size_t z = b; z < e; ++z) {
        p[z] /= total;
        const double* vj = &vv[col_idx[z] * d + h * hd];
        for (std::size_t c = 0; c < hd; ++c) oi[c] += p[z] * vj[c];
      }
    }
  }
  return detail::tape_of(q).record("attention", std::move(out), {q, k, v},
      [q, k, v, nq, d, hd, n_heads, sc, row_ptr = std::move(row_ptr), col_idx = std::move(col_idx),
       probs = std::move(probs)](std::span<const double> g, Tape& t) {
        const std::size_t nnz = col_idx.size();
        const auto& qv = q.value().storage();
        const auto& kv = k.value().storage();
        const auto& vv = v.value().storage();
        const bool wq = t.needs_grad(q), wk = t.needs_grad(k), wv = t.needs_grad(v);
        std::span<double> dq = wq ? t.grad_of(q) : std::span<double>{};
        std::span<double> dk = wk ? t.grad_of(k) : std::span<double>{};
        std::span<double> dv = wv ? t.grad_of(v) : std::span<double>{};
        std::vector<double> dp;
        for (std::size_t h = 0; h < n_heads; ++h) {
          const double* p = &probs[h * nnz];
          for (std::size_t i = 0; i < nq; ++i) {
            const std::size_t b = row_ptr[i], e = row_ptr[i + 1];
            if (b == e) continue;
            const double* gi = &g[i * d + h * hd];
            dp.assign(e - b, 0.0);
            double dot = 0.0;
            for (std::size_t z = b; z < e; ++z) {
              const std::size_t j = col_idx[z];
              const double* vj = &vv[j * d + h * hd];
              double s = 0.0;
              for (std::size_t c = 0; c < hd; ++c) s += gi[c] * vj[c];
              dp[z - b] = s;
              dot += p[z] * s;
              if (wv) {
                double* dvj = &dv[j * d + h * hd];
                for (std::size_t c = 0; c < hd; ++c) dvj[c] += p[z] * gi[c];
              }
            }
            if (!wq && !wk) continue;
            const double* qi = &qv[i * d + h * hd];
            for (std::size_t z = b; z < e; ++z) {
              const std::size_t j = col_idx[z];
              const double ds = p[z] * (dp[z - b] - dot) * sc;
              if (ds == 0.0) continue;
              const double* kj = &kv[j * d + h * hd];
              if (wq) {
                double* dqi = &dq[i * d + h * hd];
                for (std::size_t c = 0; c < hd; ++c) dqi[c] += ds * kj[c];
              }
              if (wk) {
                double* dkj = &dk[j * d + h * hd];
                for (std::size_t c = 0; c < hd; ++c) dkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

}  // namespace pal::ops
