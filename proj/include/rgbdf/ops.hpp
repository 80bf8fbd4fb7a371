#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <vector>

#include "rgbdf/autograd.hpp"
#include "rgbdf/random.hpp"

namespace rgbdf::ops {

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw InvalidArgument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

/// Patch matrix for output rows [y0, y1): row r lives at col + r * ld,
/// column (y - y0) * w + x.
template <class T>
void im2col(const T* src, Index channels, Index h, Index w, Index k, Index pad, Index y0, Index y1, T* col, Index ld) {
  for (Index c = 0; c < channels; ++c) {
    for (Index kh = 0; kh < k; ++kh) {
      for (Index kw = 0; kw < k; ++kw) {
        T* dst = col + ((c * k + kh) * k + kw) * ld;
        const Index dy = kh - pad;
        const Index dx = kw - pad;
        const Index x0 = std::max<Index>(0, -dx);
        const Index x1 = std::max(x0, std::min<Index>(w, w - dx));
        for (Index y = y0; y < y1; ++y) {
          T* drow = dst + (y - y0) * w;
          const Index sy = y + dy;
          if (sy < 0 || sy >= h) {
            std::fill(drow, drow + w, T{});
            continue;
          }
          const T* srow = src + (c * h + sy) * w + dx;
          std::fill(drow, drow + x0, T{});
          std::copy(srow + x0, srow + x1, drow + x0);
          std::fill(drow + x1, drow + w, T{});
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, Index channels, Index h, Index w, Index k, Index pad, Index y0, Index y1, T* dst,
                Index ld) {
  for (Index c = 0; c < channels; ++c) {
    for (Index kh = 0; kh < k; ++kh) {
      for (Index kw = 0; kw < k; ++kw) {
        const T* src = col + ((c * k + kh) * k + kw) * ld;
        const Index dy = kh - pad;
        const Index dx = kw - pad;
        const Index x0 = std::max<Index>(0, -dx);
        const Index x1 = std::min<Index>(w, w - dx);
        for (Index y = y0; y < y1; ++y) {
          const Index sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const T* srow = src + (y - y0) * w;
          T* drow = dst + (c * h + sy) * w + dx;
          for (Index x = x0; x < x1; ++x) drow[x] += srow[x];
        }
      }
    }
  }
}

/// Output rows per band so a band of the patch matrix stays cache resident.
inline Index conv_band_rows(Index kk, Index h, Index w) {
  constexpr Index budget = 256 * 1024;  // elements
  return std::clamp<Index>(budget / std::max<Index>(1, kk * w), 1, h);
}

}  // namespace detail

/// Stride-1 "same" convolution without bias. x:[N,Ci,H,W], w:[Co,Ci,k,k], k odd.
/// Processed per sample in bands of output rows; patches are rebuilt in the
/// backward pass rather than kept alive.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  detail::require_rank(xs, 4, "conv2d");
  detail::require_rank(ws, 4, "conv2d weight");
  if (ws[1] != xs[1])
    throw InvalidArgument("conv2d: weight expects " + std::to_string(ws[1]) + " input channels, got " +
                          std::to_string(xs[1]));
  if (ws[2] != ws[3] || ws[2] % 2 == 0) throw InvalidArgument("conv2d: kernel must be square and odd");
  const Index n = xs[0], ci = xs[1], h = xs[2], wd = xs[3], co = ws[0], k = ws[2], pad = k / 2;
  const Index hw = h * wd, kk = ci * k * k;
  const Index band = detail::conv_band_rows(kk, h, wd);
  Tensor<T> out({n, co, h, wd});
  {
    const T* xv = x.value().data();
    const T* wv = w.value().data();
    std::vector<T> col(k == 1 ? 0 : static_cast<std::size_t>(kk * band * wd));
    for (Index b = 0; b < n; ++b) {
      const T* xb = xv + b * ci * hw;
      T* ob = out.data() + b * co * hw;
      if (k == 1) {
        gemm<T>(false, false, co, hw, ci, wv, xb, ob, false);
        continue;
      }
      for (Index y0 = 0; y0 < h; y0 += band) {
        const Index y1 = std::min(h, y0 + band), m = (y1 - y0) * wd;
        detail::im2col(xb, ci, h, wd, k, pad, y0, y1, col.data(), m);
        gemm<T>(false, false, co, m, kk, wv, kk, col.data(), m, ob + y0 * wd, hw, false);
      }
    }
  }
  return make_result<T>(std::move(out), {x, w}, [=](Node<T>& self) {
    auto& xn = *self.inputs[0];
    auto& wn = *self.inputs[1];
    const T* xv = xn.value.data();
    const T* wv = wn.value.data();
    T* gw = wn.requires_grad ? wn.grad_buffer().data() : nullptr;
    T* gx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
    std::vector<T> col(k == 1 ? 0 : static_cast<std::size_t>(kk * band * wd));
    for (Index b = 0; b < n; ++b) {
      const T* xb = xv + b * ci * hw;
      const T* gyb = self.grad.data() + b * co * hw;
      if (k == 1) {
        if (gw) gemm<T>(false, true, co, ci, hw, gyb, xb, gw, true);
        if (gx) gemm<T>(true, false, ci, hw, co, wv, gyb, gx + b * ci * hw, true);
        continue;
      }
      for (Index y0 = 0; y0 < h; y0 += band) {
        const Index y1 = std::min(h, y0 + band), m = (y1 - y0) * wd;
        if (gw) {
          detail::im2col(xb, ci, h, wd, k, pad, y0, y1, col.data(), m);
          gemm<T>(false, true, co, kk, m, gyb + y0 * wd, hw, col.data(), m, gw, kk, true);
        }
        if (gx) {
          gemm<T>(true, false, kk, m, co, wv, kk, gyb + y0 * wd, hw, col.data(), m, false);
          detail::col2im_add(col.data(), ci, h, wd, k, pad, y0, y1, gx + b * ci * hw, m);
        }
      }
    }
  });
}

template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Index groups, double eps) {
  const auto& s = x.shape();
  detail::require_rank(s, 4, "group_norm");
  const Index n = s[0], c = s[1], hw = s[2] * s[3];
  if (groups <= 0 || c % groups != 0)
    throw InvalidArgument("group_norm: " + std::to_string(c) + " channels not divisible into " +
                          std::to_string(groups) + " groups");
  const Index cg = c / groups, m = cg * hw;
  std::vector<T> means(static_cast<std::size_t>(n * groups)), rstds(means.size());
  Tensor<T> out(s);
  const T* xv = x.value().data();
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  for (Index b = 0; b < n; ++b) {
    for (Index g = 0; g < groups; ++g) {
      const Index off = (b * c + g * cg) * hw;
      double mu = 0.0;
      for (Index i = 0; i < m; ++i) mu += xv[off + i];
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (Index i = 0; i < m; ++i) {
        const double d = xv[off + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double rstd = 1.0 / std::sqrt(var + eps);
      means[b * groups + g] = static_cast<T>(mu);
      rstds[b * groups + g] = static_cast<T>(rstd);
      for (Index cc = 0; cc < cg; ++cc) {
        const Index ch = g * cg + cc;
        const T a = static_cast<T>(rstd) * gv[ch];
        const T sh = bv[ch] - static_cast<T>(mu) * a;
        const T* src = xv + off + cc * hw;
        T* dst = out.data() + off + cc * hw;
        for (Index i = 0; i < hw; ++i) dst[i] = src[i] * a + sh;
      }
    }
  }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [=, means = std::move(means), rstds = std::move(rstds)](Node<T>& self) {
    auto& xn = *self.inputs[0];
    auto& gn = *self.inputs[1];
    auto& bn = *self.inputs[2];
    const T* xv = xn.value.data();
    const T* gv = gn.value.data();
    const T* dy = self.grad.data();
    T* dgam = gn.requires_grad ? gn.grad_buffer().data() : nullptr;
    T* dbet = bn.requires_grad ? bn.grad_buffer().data() : nullptr;
    T* dx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
    for (Index b = 0; b < n; ++b) {
      for (Index g = 0; g < groups; ++g) {
        const Index off = (b * c + g * cg) * hw;
        const T mu = means[b * groups + g];
        const T rstd = rstds[b * groups + g];
        double s1 = 0.0, s2 = 0.0;
        for (Index cc = 0; cc < cg; ++cc) {
          const Index ch = g * cg + cc;
          double sg = 0.0, sb = 0.0;
          for (Index i = 0; i < hw; ++i) {
            const Index j = off + cc * hw + i;
            const T xhat = (xv[j] - mu) * rstd;
            sg += static_cast<double>(dy[j]) * xhat;
            sb += dy[j];
          }
          if (dgam) dgam[ch] += static_cast<T>(sg);
          if (dbet) dbet[ch] += static_cast<T>(sb);
          s1 += sb * gv[ch];
          s2 += sg * gv[ch];
        }
        if (!dx) continue;
        const T m1 = static_cast<T>(s1 / static_cast<double>(m));
        const T m2 = static_cast<T>(s2 / static_cast<double>(m));
        for (Index cc = 0; cc < cg; ++cc) {
          const T gch = gv[g * cg + cc];
          for (Index i = 0; i < hw; ++i) {
            const Index j = off + cc * hw + i;
            const T xhat = (xv[j] - mu) * rstd;
            dx[j] += rstd * (dy[j] * gch - m1 - xhat * m2);
          }
        }
      }
    }
  });
}

/// Layer normalization over the channel axis at every spatial position.
template <class T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
  const auto& s = x.shape();
  detail::require_rank(s, 4, "layer_norm");
  const Index n = s[0], c = s[1], hw = s[2] * s[3];
  std::vector<T> means(static_cast<std::size_t>(n * hw)), rstds(means.size());
  Tensor<T> out(s);
  const T* xv = x.value().data();
  for (Index b = 0; b < n; ++b) {
    const T* xb = xv + b * c * hw;
    for (Index p = 0; p < hw; ++p) {
      double mu = 0.0;
      for (Index ch = 0; ch < c; ++ch) mu += xb[ch * hw + p];
      mu /= static_cast<double>(c);
      double var = 0.0;
      for (Index ch = 0; ch < c; ++ch) {
        const double d = xb[ch * hw + p] - mu;
        var += d * d;
      }
      var /= static_cast<double>(c);
      means[b * hw + p] = static_cast<T>(mu);
      rstds[b * hw + p] = static_cast<T>(1.0 / std::sqrt(var + eps));
    }
    for (Index ch = 0; ch < c; ++ch) {
      const T gch = gamma.value()[ch], bch = beta.value()[ch];
      for (Index p = 0; p < hw; ++p) {
        const Index j = b * c * hw + ch * hw + p;
        out[j] = (xv[j] - means[b * hw + p]) * rstds[b * hw + p] * gch + bch;
      }
    }
  }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [=, means = std::move(means), rstds = std::move(rstds)](Node<T>& self) {
    auto& xn = *self.inputs[0];
    auto& gn = *self.inputs[1];
    auto& bn = *self.inputs[2];
    const T* xv = xn.value.data();
    const T* dy = self.grad.data();
    T* dgam = gn.requires_grad ? gn.grad_buffer().data() : nullptr;
    T* dbet = bn.requires_grad ? bn.grad_buffer().data() : nullptr;
    T* dx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
    std::vector<T> s1(static_cast<std::size_t>(hw)), s2(static_cast<std::size_t>(hw));
    for (Index b = 0; b < n; ++b) {
      std::fill(s1.begin(), s1.end(), T{});
      std::fill(s2.begin(), s2.end(), T{});
      for (Index ch = 0; ch < c; ++ch) {
        const T gch = gn.value[ch];
        T sg{}, sb{};
        for (Index p = 0; p < hw; ++p) {
          const Index j = b * c * hw + ch * hw + p;
          const T xhat = (xv[j] - means[b * hw + p]) * rstds[b * hw + p];
          sg += dy[j] * xhat;
          sb += dy[j];
          s1[p] += dy[j] * gch;
          s2[p] += dy[j] * gch * xhat;
        }
        if (dgam) dgam[ch] += sg;
        if (dbet) dbet[ch] += sb;
      }
      if (!dx) continue;
      const T inv_c = T{1} / static_cast<T>(c);
      for (Index ch = 0; ch < c; ++ch) {
        const T gch = gn.value[ch];
        for (Index p = 0; p < hw; ++p) {
          const Index j = b * c * hw + ch * hw + p;
          const T xhat = (xv[j] - means[b * hw + p]) * rstds[b * hw + p];
          dx[j] += rstds[b * hw + p] * (dy[j] * gch - s1[p] * inv_c - xhat * s2[p] * inv_c);
        }
      }
    }
  });
}

/// AdaGN modulation: h * (1 + scale) + shift, with [scale, shift] = ss[N, 2C].
template <class T>
Var<T> scale_shift(const Var<T>& h, const Var<T>& ss) {
  const auto& s = h.shape();
  detail::require_rank(s, 4, "scale_shift");
  const Index n = s[0], c = s[1], hw = s[2] * s[3];
  if (ss.shape() != Shape{n, 2 * c})
    throw InvalidArgument("scale_shift: modulation shape " + shape_str(ss.shape()) + " does not match " + shape_str(s));
  Tensor<T> out(s);
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch) {
      const T a = T{1} + ss.value()[b * 2 * c + ch];
      const T sh = ss.value()[b * 2 * c + c + ch];
      const T* src = h.value().data() + (b * c + ch) * hw;
      T* dst = out.data() + (b * c + ch) * hw;
      for (Index i = 0; i < hw; ++i) dst[i] = src[i] * a + sh;
    }
  return make_result<T>(std::move(out), {h, ss}, [=](Node<T>& self) {
    auto& hn = *self.inputs[0];
    auto& sn = *self.inputs[1];
    for (Index b = 0; b < n; ++b)
      for (Index ch = 0; ch < c; ++ch) {
        const T* dy = self.grad.data() + (b * c + ch) * hw;
        const T* hv = hn.value.data() + (b * c + ch) * hw;
        if (hn.requires_grad) {
          const T a = T{1} + sn.value[b * 2 * c + ch];
          T* dh = hn.grad_buffer().data() + (b * c + ch) * hw;
          for (Index i = 0; i < hw; ++i) dh[i] += dy[i] * a;
        }
        if (sn.requires_grad) {
          T ds{}, db{};
          for (Index i = 0; i < hw; ++i) {
            ds += dy[i] * hv[i];
            db += dy[i];
          }
          auto& g = sn.grad_buffer();
          g[b * 2 * c + ch] += ds;
          g[b * 2 * c + c + ch] += db;
        }
      }
  });
}

/// GeLU, tanh approximation.
template <class T>
Var<T> gelu(const Var<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  constexpr T a = static_cast<T>(0.7978845608028654);
  constexpr T b = static_cast<T>(0.044715);
  Tensor<T> out(x.shape());
  Eigen::Map<const Arr> xv(x.value().data(), x.value().size());
  Eigen::Map<Arr>(out.data(), out.size()) = T(0.5) * xv * (T{1} + (a * (xv + b * xv.cube())).tanh());
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& xn = *self.inputs[0];
    const Index n = self.grad.size();
    Eigen::Map<const Arr> xv(xn.value.data(), n);
    Eigen::Map<const Arr> gy(self.grad.data(), n);
    const Arr th = (a * (xv + b * xv.cube())).tanh();
    Eigen::Map<Arr>(xn.grad_buffer().data(), n) +=
        gy * (T(0.5) * (T{1} + th) + T(0.5) * xv * (T{1} - th.square()) * a * (T{1} + T(3) * b * xv.square()));
  });
}

/// (tanh(x) + 1) / 2, maps an unconstrained head into [0, 1].
template <class T>
Var<T> unit_squash(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (Index i = 0; i < out.size(); ++i) out[i] = T(0.5) * (std::tanh(x.value()[i]) + T{1});
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& xn = *self.inputs[0];
    T* dx = xn.grad_buffer().data();
    for (Index i = 0; i < self.grad.size(); ++i) {
      const T th = std::tanh(xn.value[i]);
      dx[i] += self.grad[i] * T(0.5) * (T{1} - th * th);
    }
  });
}

/// x:[N,F] * w:[O,F]^T + b:[O]. `b` may be undefined.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::require_rank(x.shape(), 2, "linear");
  const Index n = x.dim(0), f = x.dim(1), o = w.dim(0);
  if (w.dim(1) != f) throw InvalidArgument("linear: weight expects " + std::to_string(w.dim(1)) + " features");
  Tensor<T> out({n, o});
  gemm<T>(false, true, n, o, f, x.value().data(), w.value().data(), out.data(), false);
  const bool has_bias = b.defined();
  if (has_bias)
    for (Index r = 0; r < n; ++r)
      for (Index j = 0; j < o; ++j) out[r * o + j] += b.value()[j];
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_result<T>(std::move(out), inputs, [=](Node<T>& self) {
    auto& xn = *self.inputs[0];
    auto& wn = *self.inputs[1];
    if (xn.requires_grad) gemm<T>(false, false, n, f, o, self.grad.data(), wn.value.data(), xn.grad_buffer().data(), true);
    if (wn.requires_grad) gemm<T>(true, false, o, f, n, self.grad.data(), xn.value.data(), wn.grad_buffer().data(), true);
    if (has_bias && self.inputs[2]->requires_grad) {
      auto& gb = self.inputs[2]->grad_buffer();
      for (Index r = 0; r < n; ++r)
        for (Index j = 0; j < o; ++j) gb[j] += self.grad[r * o + j];
    }
  });
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw InvalidArgument("concat_channels: no inputs");
  const auto& s0 = xs.front().shape();
  detail::require_rank(s0, 4, "concat_channels");
  Index total = 0;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw InvalidArgument("concat_channels: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    total += s[1];
  }
  const Index n = s0[0], hw = s0[2] * s0[3];
  Tensor<T> out({n, total, s0[2], s0[3]});
  std::vector<Index> widths;
  for (Index b = 0; b < n; ++b) {
    Index off = 0;
    for (const auto& x : xs) {
      const Index c = x.dim(1);
      std::memcpy(out.data() + (b * total + off) * hw, x.value().data() + b * c * hw, sizeof(T) * c * hw);
      off += c;
    }
  }
  for (const auto& x : xs) widths.push_back(x.dim(1));
  return make_result<T>(std::move(out), xs, [=](Node<T>& self) {
    for (Index b = 0; b < n; ++b) {
      Index off = 0;
      for (std::size_t i = 0; i < widths.size(); ++i) {
        auto& in = *self.inputs[i];
        const Index c = widths[i];
        if (in.requires_grad) {
          T* dst = in.grad_buffer().data() + b * c * hw;
          const T* src = self.grad.data() + (b * total + off) * hw;
          for (Index j = 0; j < c * hw; ++j) dst[j] += src[j];
        }
        off += c;
      }
    }
  });
}

/// Channels [c0, c1).
template <class T>
Var<T> slice_channels(const Var<T>& x, Index c0, Index c1) {
  const auto& s = x.shape();
  detail::require_rank(s, 4, "slice_channels");
  if (c0 < 0 || c1 > s[1] || c0 >= c1) throw InvalidArgument("slice_channels: bad range");
  const Index n = s[0], c = s[1], hw = s[2] * s[3], w = c1 - c0;
  Tensor<T> out({n, w, s[2], s[3]});
  for (Index b = 0; b < n; ++b)
    std::memcpy(out.data() + b * w * hw, x.value().data() + (b * c + c0) * hw, sizeof(T) * w * hw);
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    T* dx = self.inputs[0]->grad_buffer().data();
    for (Index b = 0; b < n; ++b)
      for (Index j = 0; j < w * hw; ++j) dx[(b * c + c0) * hw + j] += self.grad[b * w * hw + j];
  });
}

template <class T>
Var<T> avg_pool2(const Var<T>& x) {
  const auto& s = x.shape();
  detail::require_rank(s, 4, "avg_pool2");
  if (s[2] % 2 || s[3] % 2) throw InvalidArgument("avg_pool2: odd spatial size " + shape_str(s));
  const Index nc = s[0] * s[1], h = s[2], w = s[3], ho = h / 2, wo = w / 2;
  Tensor<T> out({s[0], s[1], ho, wo});
  const T* xv = x.value().data();
  for (Index p = 0; p < nc; ++p)
    for (Index y = 0; y < ho; ++y)
      for (Index xx = 0; xx < wo; ++xx) {
        const T* r0 = xv + (p * h + 2 * y) * w + 2 * xx;
        out[(p * ho + y) * wo + xx] = T(0.25) * (r0[0] + r0[1] + r0[w] + r0[w + 1]);
      }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    T* dx = self.inputs[0]->grad_buffer().data();
    for (Index p = 0; p < nc; ++p)
      for (Index y = 0; y < ho; ++y)
        for (Index xx = 0; xx < wo; ++xx) {
          const T g = T(0.25) * self.grad[(p * ho + y) * wo + xx];
          T* r0 = dx + (p * h + 2 * y) * w + 2 * xx;
          r0[0] += g;
          r0[1] += g;
          r0[w] += g;
          r0[w + 1] += g;
        }
  });
}

enum class Interp { nearest, bilinear };

namespace detail {

struct Tap {
  Index i0, i1;
  double w0, w1;
};

/// Half-pixel-centre sampling taps for one axis.
inline std::vector<Tap> resample_taps(Index in, Index out, Interp mode) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    if (mode == Interp::nearest) {
      const Index i = std::min<Index>(in - 1, static_cast<Index>(std::floor((o + 0.5) * ratio)));
      taps[o] = {i, i, 1.0, 0.0};
    } else {
      double src = (o + 0.5) * ratio - 0.5;
      if (src < 0) src = 0;
      Index i0 = static_cast<Index>(std::floor(src));
      if (i0 > in - 1) i0 = in - 1;
      const Index i1 = std::min<Index>(i0 + 1, in - 1);
      const double w1 = src - static_cast<double>(i0);
      taps[o] = {i0, i1, 1.0 - w1, w1};
    }
  }
  return taps;
}

}  // namespace detail

/// Plain tensor resampling (no graph). x: [..., H, W].
template <class T>
Tensor<T> resize_tensor(const Tensor<T>& x, Index ho, Index wo, Interp mode) {
  const auto& s = x.shape();
  if (s.size() < 2) throw InvalidArgument("resize: rank must be >= 2");
  if (ho <= 0 || wo <= 0) throw InvalidArgument("resize: target dimensions must be positive");
  const Index h = s[s.size() - 2], w = s[s.size() - 1];
  const Index planes = x.size() / (h * w);
  Shape os = s;
  os[os.size() - 2] = ho;
  os[os.size() - 1] = wo;
  Tensor<T> out(os);
  if (ho == h && wo == w) return x;
  const auto ty = detail::resample_taps(h, ho, mode);
  const auto tx = detail::resample_taps(w, wo, mode);
  for (Index p = 0; p < planes; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = out.data() + p * ho * wo;
    for (Index y = 0; y < ho; ++y) {
      const auto& a = ty[y];
      for (Index xx = 0; xx < wo; ++xx) {
        const auto& b = tx[xx];
        if (mode == Interp::nearest) {
          dst[y * wo + xx] = src[a.i0 * w + b.i0];
        } else {
          const double v = a.w0 * (b.w0 * src[a.i0 * w + b.i0] + b.w1 * src[a.i0 * w + b.i1]) +
                           a.w1 * (b.w0 * src[a.i1 * w + b.i0] + b.w1 * src[a.i1 * w + b.i1]);
          dst[y * wo + xx] = static_cast<T>(v);
        }
      }
    }
  }
  return out;
}

/// Differentiable resampling of [N,C,H,W] to [N,C,ho,wo].
template <class T>
Var<T> resize(const Var<T>& x, Index ho, Index wo, Interp mode) {
  const auto& s = x.shape();
  detail::require_rank(s, 4, "resize");
  if (s[2] == ho && s[3] == wo) return x;
  const Index h = s[2], w = s[3], planes = s[0] * s[1];
  return make_result<T>(resize_tensor(x.value(), ho, wo, mode), {x}, [=](Node<T>& self) {
    const auto ty = detail::resample_taps(h, ho, mode);
    const auto tx = detail::resample_taps(w, wo, mode);
    T* dx = self.inputs[0]->grad_buffer().data();
    for (Index p = 0; p < planes; ++p) {
      T* dst = dx + p * h * w;
      const T* g = self.grad.data() + p * ho * wo;
      for (Index y = 0; y < ho; ++y) {
        const auto& a = ty[y];
        for (Index xx = 0; xx < wo; ++xx) {
          const auto& b = tx[xx];
          const T gv = g[y * wo + xx];
          dst[a.i0 * w + b.i0] += static_cast<T>(a.w0 * b.w0) * gv;
          if (mode == Interp::bilinear) {
            dst[a.i0 * w + b.i1] += static_cast<T>(a.w0 * b.w1) * gv;
            dst[a.i1 * w + b.i0] += static_cast<T>(a.w1 * b.w0) * gv;
            dst[a.i1 * w + b.i1] += static_cast<T>(a.w1 * b.w1) * gv;
          }
        }
      }
    }
  });
}

enum class AttentionKind { standard, linear };

/// Multi-head attention over spatial positions. qkv:[N, 3*heads*dim, H, W]
/// laid out as [q | k | v], each head occupying `dim` consecutive channels.
/// Returns [N, heads*dim, H, W].
///
/// standard: softmax(q^T k / sqrt(dim)) over keys.
/// linear:   q softmax-normalized over features, k softmax-normalized over
///           positions (the key axis), out = (k v^T)^T q / sqrt(dim). O(HW).
template <class T>
Var<T> attention(const Var<T>& qkv, Index heads, Index dim, AttentionKind kind) {
  const auto& s = qkv.shape();
  detail::require_rank(s, 4, "attention");
  const Index hd = heads * dim;
  if (s[1] != 3 * hd) throw InvalidArgument("attention: qkv has " + std::to_string(s[1]) + " channels, expected " + std::to_string(3 * hd));
  const Index n = s[0], l = s[2] * s[3];
  const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dim)));
  Tensor<T> out({n, hd, s[2], s[3]});
  // Saved per (batch, head): standard -> P [l,l]; linear -> qhat [dim,l], khat [dim,l].
  const Index saved_per = kind == AttentionKind::standard ? l * l : 2 * dim * l;
  std::vector<T> saved(static_cast<std::size_t>(n * heads * saved_per));
  std::vector<T> ctx(static_cast<std::size_t>(dim * dim));
  for (Index b = 0; b < n; ++b) {
    for (Index h = 0; h < heads; ++h) {
      const T* q = qkv.value().data() + (b * 3 * hd + h * dim) * l;
      const T* k = q + hd * l;
      const T* v = k + hd * l;
      T* o = out.data() + (b * hd + h * dim) * l;
      T* sv = saved.data() + (b * heads + h) * saved_per;
      if (kind == AttentionKind::standard) {
        gemm<T>(true, false, l, l, dim, q, k, sv, false);
        for (Index i = 0; i < l; ++i) {
          T* row = sv + i * l;
          T mx = row[0] * sc;
          for (Index j = 0; j < l; ++j) mx = std::max(mx, row[j] * sc);
          T z{};
          for (Index j = 0; j < l; ++j) z += (row[j] = std::exp(row[j] * sc - mx));
          for (Index j = 0; j < l; ++j) row[j] /= z;
        }
        gemm<T>(false, true, dim, l, l, v, sv, o, false);
      } else {
        T* qh = sv;
        T* kh = sv + dim * l;
        for (Index i = 0; i < l; ++i) {
          T mx = q[i];
          for (Index c = 0; c < dim; ++c) mx = std::max(mx, q[c * l + i]);
          T z{};
          for (Index c = 0; c < dim; ++c) z += (qh[c * l + i] = std::exp(q[c * l + i] - mx));
          for (Index c = 0; c < dim; ++c) qh[c * l + i] = qh[c * l + i] / z * sc;
        }
        for (Index c = 0; c < dim; ++c) {
          const T* kr = k + c * l;
          T* kr_out = kh + c * l;
          T mx = kr[0];
          for (Index j = 0; j < l; ++j) mx = std::max(mx, kr[j]);
          T z{};
          for (Index j = 0; j < l; ++j) z += (kr_out[j] = std::exp(kr[j] - mx));
          for (Index j = 0; j < l; ++j) kr_out[j] /= z;
        }
        gemm<T>(false, true, dim, dim, l, kh, v, ctx.data(), false);
        gemm<T>(true, false, dim, l, dim, ctx.data(), qh, o, false);
      }
    }
  }
  return make_result<T>(std::move(out), {qkv}, [=, saved = std::move(saved)](Node<T>& self) {
    auto& in = *self.inputs[0];
    T* gin = in.grad_buffer().data();
    std::vector<T> buf(static_cast<std::size_t>(kind == AttentionKind::standard ? l * l : 3 * dim * l + 2 * dim * dim));
    for (Index b = 0; b < n; ++b) {
      for (Index h = 0; h < heads; ++h) {
        const Index qoff = (b * 3 * hd + h * dim) * l;
        const T* q = in.value.data() + qoff;
        const T* k = q + hd * l;
        const T* v = k + hd * l;
        T* dq = gin + qoff;
        T* dk = dq + hd * l;
        T* dv = dk + hd * l;
        const T* go = self.grad.data() + (b * hd + h * dim) * l;
        const T* sv = saved.data() + (b * heads + h) * saved_per;
        if (kind == AttentionKind::standard) {
          const T* p = sv;
          T* dp = buf.data();
          gemm<T>(false, false, dim, l, l, go, p, dv, true);
          gemm<T>(true, false, l, l, dim, go, v, dp, false);
          for (Index i = 0; i < l; ++i) {
            const T* pr = p + i * l;
            T* dr = dp + i * l;
            T dot{};
            for (Index j = 0; j < l; ++j) dot += pr[j] * dr[j];
            for (Index j = 0; j < l; ++j) dr[j] = pr[j] * (dr[j] - dot) * sc;
          }
          gemm<T>(false, true, dim, l, l, k, dp, dq, true);
          gemm<T>(false, false, dim, l, l, q, dp, dk, true);
        } else {
          const T* qh = sv;
          const T* kh = sv + dim * l;
          T* ctx = buf.data();
          T* dctx = ctx + dim * dim;
          T* dqh = dctx + dim * dim;
          T* dkh = dqh + dim * l;
          gemm<T>(false, true, dim, dim, l, kh, v, ctx, false);
          gemm<T>(false, false, dim, l, dim, ctx, go, dqh, false);
          gemm<T>(false, true, dim, dim, l, qh, go, dctx, false);
          gemm<T>(false, false, dim, l, dim, dctx, v, dkh, false);
          gemm<T>(true, false, dim, l, dim, dctx, kh, dv, true);
          // qh already carries the 1/sqrt(dim) factor: d(softmax)/dq uses qh/sc.
          for (Index i = 0; i < l; ++i) {
            T dot{};
            for (Index c = 0; c < dim; ++c) dot += qh[c * l + i] * dqh[c * l + i];
            for (Index c = 0; c < dim; ++c) dq[c * l + i] += qh[c * l + i] * (dqh[c * l + i] - dot / sc);
          }
          for (Index c = 0; c < dim; ++c) {
            const T* kr = kh + c * l;
            const T* dr = dkh + c * l;
            T dot{};
            for (Index j = 0; j < l; ++j) dot += kr[j] * dr[j];
            for (Index j = 0; j < l; ++j) dk[c * l + j] += kr[j] * (dr[j] - dot);
          }
        }
      }
    }
  });
}

/// Inverted dropout; identity when p == 0.
template <class T>
Var<T> dropout(const Var<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw InvalidArgument("dropout probability must be < 1");
  std::vector<T> mask(static_cast<std::size_t>(x.value().size()));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> out(x.shape());
  for (Index i = 0; i < out.size(); ++i) {
    mask[i] = rng.bernoulli(p) ? T{} : keep_scale;
    out[i] = x.value()[i] * mask[i];
  }
  return make_result<T>(std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
    T* dx = self.inputs[0]->grad_buffer().data();
    for (Index i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i] * mask[i];
  });
}

/// Multiplies sample b of x:[N,...] by factors[b].
template <class T>
Var<T> scale_per_sample(const Var<T>& x, std::vector<T> factors) {
  const Index n = x.dim(0);
  if (static_cast<Index>(factors.size()) != n) throw InvalidArgument("scale_per_sample: factor count mismatch");
  const Index per = x.value().size() / n;
  Tensor<T> out = x.value();
  for (Index b = 0; b < n; ++b)
    for (Index i = 0; i < per; ++i) out[b * per + i] *= factors[b];
  return make_result<T>(std::move(out), {x}, [=, factors = std::move(factors)](Node<T>& self) {
    T* dx = self.inputs[0]->grad_buffer().data();
    for (Index b = 0; b < n; ++b)
      for (Index i = 0; i < per; ++i) dx[b * per + i] += self.grad[b * per + i] * factors[b];
  });
}

}  // namespace rgbdf::ops
