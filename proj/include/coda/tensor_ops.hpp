#pragma once

#include <cmath>
#include <cstring>

#include "coda/tensor.hpp"

namespace coda {
namespace detail {

// ---------------------------------------------------------------------------
// Broadcasting: operands must have equal rank; an axis of extent 1 stretches
// to the other operand's extent. visit(o, ia, ib) is called for every output
// element in increasing linear order.
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    throw DimensionError("broadcast: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || a[i] == 1 || b[i] == 1) {
      out[i] = std::max(a[i], b[i]);
    } else {
      throw DimensionError("broadcast: incompatible shapes " + shape_str(a) + " vs " +
                           shape_str(b));
    }
  }
  return out;
}

template <typename F>
void broadcast_walk(const Shape& os, const Shape& as, const Shape& bs, F&& visit) {
  const std::size_t r = os.size();
  const std::size_t total = shape_numel(os);
  if (total == 0) return;
  if (r == 0) {
    visit(std::size_t(0), std::size_t(0), std::size_t(0));
    return;
  }
  std::vector<std::size_t> ast(r), bst(r);
  {
    std::size_t sa = 1, sb = 1;
    for (std::size_t i = r; i-- > 0;) {
      ast[i] = (as[i] == 1 && os[i] > 1) ? 0 : sa;
      bst[i] = (bs[i] == 1 && os[i] > 1) ? 0 : sb;
      sa *= as[i];
      sb *= bs[i];
    }
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0, o = 0;
  const std::size_t nlast = os[r - 1], sal = ast[r - 1], sbl = bst[r - 1];
  while (o < total) {
    std::size_t ca = ia, cb = ib;
    for (std::size_t j = 0; j < nlast; ++j) {
      visit(o++, ca, cb);
      ca += sal;
      cb += sbl;
    }
    bool done = true;
    std::size_t d = r - 1;
    while (d-- > 0) {
      ++idx[d];
      ia += ast[d];
      ib += bst[d];
      if (idx[d] < os[d]) {
        done = false;
        break;
      }
      idx[d] = 0;
      ia -= ast[d] * os[d];
      ib -= bst[d] * os[d];
    }
    if (done) break;
  }
}

// ---------------------------------------------------------------------------
// Dense matrix kernel: C (m×n) = op(A)·op(B), optionally accumulating.
// ---------------------------------------------------------------------------

template <typename S>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const S* a, const S* b,
          S* c, bool accumulate) {
  if (!accumulate) std::memset(c, 0, m * n * sizeof(S));
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      S* crow = c + i * n;
      const S* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const S av = arow[p];
        if (av == S(0)) continue;
        const S* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (ta && !tb) {
    // a stored k×m
    for (std::size_t i = 0; i < m; ++i) {
      S* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const S av = a[p * m + i];
        if (av == S(0)) continue;
        const S* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    // b stored n×k
    for (std::size_t i = 0; i < m; ++i) {
      const S* arow = a + i * k;
      S* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const S* brow = b + j * k;
        S acc = S(0);
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        S acc = S(0);
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
    }
  }
}

struct ConvGeom {
  std::size_t channels, in_h, in_w, kh, kw, stride, pad, out_h, out_w;
  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

inline ConvGeom conv_geometry(std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
                              std::size_t kw, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ConfigError("unfold: stride must be positive");
  if (kh == 0 || kw == 0) throw ConfigError("unfold: kernel extents must be positive");
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw DimensionError("unfold: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceeds padded input " + std::to_string(h + 2 * pad) + "x" +
                         std::to_string(w + 2 * pad));
  }
  ConvGeom g{c, h, w, kh, kw, stride, pad, 0, 0};
  g.out_h = (h + 2 * pad - kh) / stride + 1;
  g.out_w = (w + 2 * pad - kw) / stride + 1;
  return g;
}

/// Column t of the output holds the flattened (c, ky, kx)-ordered receptive
/// field of output position t; out-of-bounds taps read zero.
template <typename S>
void unfold_raw(const ConvGeom& g, const S* in, S* out) {
  const std::size_t cols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const std::size_t row = (c * g.kh + ky) * g.kw + kx;
        S* orow = out + row * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ky) - std::ptrdiff_t(g.pad);
          const bool row_ok = iy >= 0 && iy < std::ptrdiff_t(g.in_h);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kx) - std::ptrdiff_t(g.pad);
            const bool ok = row_ok && ix >= 0 && ix < std::ptrdiff_t(g.in_w);
            orow[oy * g.out_w + ox] =
                ok ? in[(c * g.in_h + std::size_t(iy)) * g.in_w + std::size_t(ix)] : S(0);
          }
        }
      }
    }
  }
}

/// Adjoint of unfold_raw: scatter-adds patch columns back into image layout.
template <typename S>
void fold_raw(const ConvGeom& g, const S* in, S* out_accum) {
  const std::size_t cols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const std::size_t row = (c * g.kh + ky) * g.kw + kx;
        const S* irow = in + row * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ky) - std::ptrdiff_t(g.pad);
          if (iy < 0 || iy >= std::ptrdiff_t(g.in_h)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kx) - std::ptrdiff_t(g.pad);
            if (ix < 0 || ix >= std::ptrdiff_t(g.in_w)) continue;
            out_accum[(c * g.in_h + std::size_t(iy)) * g.in_w + std::size_t(ix)] +=
                irow[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

template <typename S>
using Parents = std::vector<std::shared_ptr<TensorNode<S>>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (broadcasting over singleton axes of equal-rank
// operands).
// ---------------------------------------------------------------------------

namespace detail {

template <typename S, typename Fwd, typename BwdA, typename BwdB>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
  const Shape os = broadcast_shape(a.shape(), b.shape());
  Buffer<S> out(shape_numel(os));
  const S* pa = a.values().data();
  const S* pb = b.values().data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    S* po = out.data();
    broadcast_walk(os, a.shape(), b.shape(),
                   [&](std::size_t o, std::size_t ia, std::size_t ib) {
                     po[o] = fwd(pa[ia], pb[ib]);
                   });
  }
  Shape as = a.shape(), bs = b.shape();
  return detail::make_result<S>(
      os, std::move(out), {a.node(), b.node()},
      [as, bs, os, bwd_a, bwd_b](TensorNode<S>& self) {
        auto& pa_n = self.parents[0];
        auto& pb_n = self.parents[1];
        const S* av = pa_n->data->data();
        const S* bv = pb_n->data->data();
        const S* g = self.grad.data();
        const bool need_a = pa_n->requires_grad;
        const bool need_b = pb_n->requires_grad;
        if (need_a) pa_n->ensure_grad();
        if (need_b) pb_n->ensure_grad();
        S* ga = need_a ? pa_n->grad.data() : nullptr;
        S* gb = need_b ? pb_n->grad.data() : nullptr;
        broadcast_walk(os, as, bs, [&](std::size_t o, std::size_t ia, std::size_t ib) {
          if (need_a) ga[ia] += bwd_a(g[o], av[ia], bv[ib]);
          if (need_b) gb[ib] += bwd_b(g[o], av[ia], bv[ib]);
        });
      });
}

template <typename S, typename Fwd, typename Bwd>
Tensor<S> unary_op(const Tensor<S>& x, Fwd fwd, Bwd bwd) {
  Buffer<S> out(x.numel());
  const S* px = x.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(px[i]);
  return detail::make_result<S>(
      x.shape(), std::move(out), {x.node()}, [bwd](TensorNode<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const S* xv = p->data->data();
        const S* yv = self.data->data();
        const S* g = self.grad.data();
        S* gx = p->grad.data();
        for (std::size_t i = 0; i < self.numel(); ++i) gx[i] += bwd(g[i], xv[i], yv[i]);
      });
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, [](S x, S y) { return x + y; }, [](S g, S, S) { return g; },
      [](S g, S, S) { return g; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, [](S x, S y) { return x - y; }, [](S g, S, S) { return g; },
      [](S g, S, S) { return -g; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, [](S x, S y) { return x * y; },
      [](S g, S, S y) { return g * y; }, [](S g, S x, S) { return g * x; });
}

/// Guarded division: where |denominator| < eps the quotient (and its
/// gradient) is defined as zero, making every normalisation a total function.
template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b, S eps = norm_epsilon<S>()) {
  return detail::binary_op(
      a, b,
      [eps](S x, S y) { return std::abs(y) < eps ? S(0) : x / y; },
      [eps](S g, S, S y) { return std::abs(y) < eps ? S(0) : g / y; },
      [eps](S g, S x, S y) { return std::abs(y) < eps ? S(0) : -g * x / (y * y); });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  return detail::unary_op(
      x, [c](S v) { return c * v; }, [c](S g, S, S) { return c * g; });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
  return detail::unary_op(
      x, [c](S v) { return v + c; }, [](S g, S, S) { return g; });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& x) {
  return scale(x, S(-1));
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](S v) { return v > S(0) ? v : S(0); },
      [](S g, S v, S) { return v > S(0) ? g : S(0); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::unary_op(
      x,
      [](S v) {
        return v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                         : std::exp(v) / (S(1) + std::exp(v));
      },
      [](S g, S, S y) { return g * y * (S(1) - y); });
}

/// log(1 + e^x), evaluated stably; the building block of the BCE loss.
template <typename S>
Tensor<S> softplus(const Tensor<S>& x) {
  return detail::unary_op(
      x,
      [](S v) { return std::max(v, S(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](S g, S v, S) {
        const S s = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                              : std::exp(v) / (S(1) + std::exp(v));
        return g * s;
      });
}

template <typename S>
Tensor<S> square(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](S v) { return v * v; }, [](S g, S v, S) { return S(2) * v * g; });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& x, S eps = norm_epsilon<S>()) {
  return detail::unary_op(
      x, [](S v) { return std::sqrt(v); },
      [eps](S g, S, S y) { return y < eps ? S(0) : g / (S(2) * y); });
}

// ---------------------------------------------------------------------------
// Structure ops.
// ---------------------------------------------------------------------------

/// Shares storage with the input; only the shape changes.
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  auto node = std::make_shared<TensorNode<S>>();
  node->shape = std::move(shape);
  node->data = x.node()->data;
  if (grad_enabled() && x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    node->backward_fn = [](TensorNode<S>& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t i = 0; i < self.numel(); ++i) p->grad[i] += self.grad[i];
    };
  }
  return Tensor<S>::wrap(std::move(node));
}

/// Same values, cut loose from the graph.
template <typename S>
Tensor<S> detach(const Tensor<S>& x) {
  auto node = std::make_shared<TensorNode<S>>();
  node->shape = x.shape();
  node->data = x.node()->data;
  return Tensor<S>::wrap(std::move(node));
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected rank-2, got " + shape_str(x.shape()));
  const std::size_t m = x.extent(0), n = x.extent(1);
  Buffer<S> out(m * n);
  const S* px = x.values().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = px[i * n + j];
  return detail::make_result<S>(
      {n, m}, std::move(out), {x.node()}, [m, n](TensorNode<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const S* g = self.grad.data();
        S* gx = p->grad.data();
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t i = 0; i < m; ++i) gx[i * n + j] += g[j * m + i];
      });
}

/// Concatenate along axis 0; all parts must agree on the trailing extents.
template <typename S>
Tensor<S> concat0(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ContractError("concat0: no parts");
  Shape tail = parts[0].shape();
  std::size_t lead = 0;
  for (const auto& p : parts) {
    if (p.rank() != tail.size()) throw DimensionError("concat0: rank mismatch");
    for (std::size_t i = 1; i < tail.size(); ++i) {
      if (p.shape()[i] != tail[i]) {
        throw DimensionError("concat0: trailing extent mismatch " + shape_str(p.shape()) +
                             " vs " + shape_str(tail));
      }
    }
    lead += p.extent(0);
  }
  Shape os = tail;
  os[0] = lead;
  Buffer<S> out(shape_numel(os));
  std::size_t off = 0;
  detail::Parents<S> parents;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    std::memcpy(out.data() + off, p.values().data(), p.numel() * sizeof(S));
    off += p.numel();
    parents.push_back(p.node());
    sizes.push_back(p.numel());
  }
  return detail::make_result<S>(
      os, std::move(out), std::move(parents), [sizes](TensorNode<S>& self) {
        std::size_t off2 = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          auto& p = self.parents[k];
          if (p->requires_grad) {
            p->ensure_grad();
            for (std::size_t i = 0; i < sizes[k]; ++i) p->grad[i] += self.grad[off2 + i];
          }
          off2 += sizes[k];
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = S(0);
  for (S v : x.values()) acc += v;
  Buffer<S> out{acc};
  return detail::make_result<S>({1}, std::move(out), {x.node()}, [](TensorNode<S>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const S g = self.grad[0];
    for (auto& gv : p->grad) gv += g;
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  const S inv = S(1) / S(x.numel());
  return scale(sum(x), inv);
}

namespace detail {
struct AxisSplit {
  std::size_t outer, mid, inner;
};
inline AxisSplit axis_split(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("reduction axis out of range");
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}
}  // namespace detail

/// Sum along one axis, keeping it as extent 1.
template <typename S>
Tensor<S> sum_axis(const Tensor<S>& x, std::size_t axis) {
  const auto sp = detail::axis_split(x.shape(), axis);
  Shape os = x.shape();
  os[axis] = 1;
  Buffer<S> out(sp.outer * sp.inner, S(0));
  const S* px = x.values().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t m = 0; m < sp.mid; ++m) {
      const S* src = px + (o * sp.mid + m) * sp.inner;
      S* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  return detail::make_result<S>(
      os, std::move(out), {x.node()}, [sp](TensorNode<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const S* g = self.grad.data();
        S* gx = p->grad.data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t m = 0; m < sp.mid; ++m) {
            S* dst = gx + (o * sp.mid + m) * sp.inner;
            const S* src = g + o * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
          }
        }
      });
}

/// L2 norm along one axis (kept as extent 1). Gradient is zero wherever the
/// norm falls below eps, matching the guarded-division convention.
template <typename S>
Tensor<S> l2norm_axis(const Tensor<S>& x, std::size_t axis, S eps = norm_epsilon<S>()) {
  const auto sp = detail::axis_split(x.shape(), axis);
  Shape os = x.shape();
  os[axis] = 1;
  Buffer<S> out(sp.outer * sp.inner, S(0));
  const S* px = x.values().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t m = 0; m < sp.mid; ++m) {
      const S* src = px + (o * sp.mid + m) * sp.inner;
      S* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i] * src[i];
    }
  }
  for (auto& v : out) v = std::sqrt(v);
  return detail::make_result<S>(
      os, std::move(out), {x.node()}, [sp, eps](TensorNode<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const S* g = self.grad.data();
        const S* n = self.data->data();
        const S* xv = p->data->data();
        S* gx = p->grad.data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const S nv = n[o * sp.inner + i];
            if (nv < eps) continue;
            const S gn = g[o * sp.inner + i] / nv;
            for (std::size_t m = 0; m < sp.mid; ++m) {
              const std::size_t idx = (o * sp.mid + m) * sp.inner + i;
              gx[idx] += gn * xv[idx];
            }
          }
        }
      });
}

/// L2 norm of all entries, as a scalar tensor.
template <typename S>
Tensor<S> l2norm(const Tensor<S>& x, S eps = norm_epsilon<S>()) {
  return reshape(l2norm_axis(reshape(x, {x.numel()}), 0, eps), {1});
}

/// Frobenius norm of a matrix (identical to the flat L2 norm).
template <typename S>
Tensor<S> frobenius_norm(const Tensor<S>& x, S eps = norm_epsilon<S>()) {
  return l2norm(x, eps);
}

// ---------------------------------------------------------------------------
// Matrix products.
// ---------------------------------------------------------------------------

/// 2-D × 2-D matrix product; a 1-D right operand is treated as a column.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() < 1 || b.rank() > 2) {
    throw DimensionError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const bool vec = b.rank() == 1;
  const std::size_t m = a.extent(0), k = a.extent(1);
  const std::size_t kb = b.extent(0), n = vec ? 1 : b.extent(1);
  if (k != kb) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Buffer<S> out(m * n);
  detail::gemm(false, false, m, n, k, a.values().data(), b.values().data(), out.data(), false);
  Shape os = vec ? Shape{m} : Shape{m, n};
  return detail::make_result<S>(
      os, std::move(out), {a.node(), b.node()}, [m, n, k](TensorNode<S>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const S* g = self.grad.data();
        if (pa->requires_grad) {
          pa->ensure_grad();
          // dA = G · Bᵀ
          detail::gemm(false, true, m, k, n, g, pb->data->data(), pa->grad.data(), true);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          // dB = Aᵀ · G
          detail::gemm(true, false, k, n, m, pa->data->data(), g, pb->grad.data(), true);
        }
      });
}

/// Batched matrix product over the leading axis: (B,m,k)×(B,k,n) → (B,m,n).
/// With transpose_a the left operand is stored (B,k,m).
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool transpose_a = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.extent(0) != b.extent(0)) {
    throw DimensionError("bmm: expected matching 3-D batches, got " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  const std::size_t nb = a.extent(0);
  const std::size_t m = transpose_a ? a.extent(2) : a.extent(1);
  const std::size_t k = transpose_a ? a.extent(1) : a.extent(2);
  if (k != b.extent(1)) {
    throw DimensionError("bmm: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t n = b.extent(2);
  Buffer<S> out(nb * m * n);
  for (std::size_t i = 0; i < nb; ++i) {
    detail::gemm(transpose_a, false, m, n, k, a.values().data() + i * m * k,
                 b.values().data() + i * k * n, out.data() + i * m * n, false);
  }
  return detail::make_result<S>(
      {nb, m, n}, std::move(out), {a.node(), b.node()},
      [nb, m, n, k, transpose_a](TensorNode<S>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const S* g = self.grad.data();
        for (std::size_t i = 0; i < nb; ++i) {
          const S* gi = g + i * m * n;
          const S* ai = pa->data->data() + i * m * k;
          const S* bi = pb->data->data() + i * k * n;
          if (pa->requires_grad) {
            pa->ensure_grad();
            S* gai = pa->grad.data() + i * m * k;
            if (!transpose_a) {
              detail::gemm(false, true, m, k, n, gi, bi, gai, true);  // G·Bᵀ
            } else {
              detail::gemm(false, true, k, m, n, bi, gi, gai, true);  // B·Gᵀ
            }
          }
          if (pb->requires_grad) {
            pb->ensure_grad();
            S* gbi = pb->grad.data() + i * k * n;
            // dB = op(A)ᵀ·G; with transpose_a, A is already stored (k,m).
            detail::gemm(!transpose_a, false, k, n, m, ai, gi, gbi, true);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Patch extraction.
// ---------------------------------------------------------------------------

/// im2col: C×H×W → (C·kh·kw) × P with P = out_h·out_w.
template <typename S>
Tensor<S> unfold(const Tensor<S>& x, std::size_t kh, std::size_t kw, std::size_t stride,
                 std::size_t pad) {
  if (x.rank() != 3) {
    throw DimensionError("unfold: expected C×H×W input, got " + shape_str(x.shape()));
  }
  const auto g =
      detail::conv_geometry(x.extent(0), x.extent(1), x.extent(2), kh, kw, stride, pad);
  Buffer<S> out(g.rows() * g.cols());
  detail::unfold_raw(g, x.values().data(), out.data());
  return detail::make_result<S>(
      {g.rows(), g.cols()}, std::move(out), {x.node()}, [g](TensorNode<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        detail::fold_raw(g, self.grad.data(), p->grad.data());
      });
}

/// col2im (adjoint of unfold): overlapping taps are summed.
template <typename S>
Tensor<S> fold(const Tensor<S>& cols, std::size_t channels, std::size_t h, std::size_t w,
               std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad) {
  const auto g = detail::conv_geometry(channels, h, w, kh, kw, stride, pad);
  if (cols.rank() != 2 || cols.extent(0) != g.rows() || cols.extent(1) != g.cols()) {
    throw DimensionError("fold: expected " + std::to_string(g.rows()) + "x" +
                         std::to_string(g.cols()) + " columns, got " + shape_str(cols.shape()));
  }
  Buffer<S> out(channels * h * w, S(0));
  detail::fold_raw(g, cols.values().data(), out.data());
  return detail::make_result<S>(
      {channels, h, w}, std::move(out), {cols.node()}, [g](TensorNode<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        Buffer<S> tmp(p->numel());
        detail::unfold_raw(g, self.grad.data(), tmp.data());
        for (std::size_t i = 0; i < tmp.size(); ++i) p->grad[i] += tmp[i];
      });
}

}  // namespace coda
