#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "docalign/correlation.hpp"
#include "docalign/nn/graph.hpp"
#include "docalign/sampling.hpp"

// Differentiable operations on rank-3 (C, H, W) tensors.
namespace docalign::nn {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.same_shape(b), std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

template <class T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* cols) {
  const std::size_t n = std::size_t(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = cols + (std::size_t(c * k + ky) * k + kx) * n;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* row = dst + std::size_t(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(row, row + Wo, T(0));
            continue;
          }
          const T* src = x + (std::size_t(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* dx) {
  const std::size_t n = std::size_t(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = cols + (std::size_t(c * k + ky) * k + kx) * n;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = dx + (std::size_t(c) * H + iy) * W;
          const T* s = src + std::size_t(oy) * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += s[ox];
          }
        }
      }
    }
  }
}

// Elementwise op given y = f(x) and dy/dx, both computed in the forward pass.
template <class T, class F>
Var pointwise(Graph<T>& g, Var x, F fn) {
  const Tensor<T>& in = g.value(x);
  Tensor<T> out(in.shape());
  Tensor<T> deriv(in.shape());
  for (std::size_t k = 0; k < in.size(); ++k) fn(in[k], out[k], deriv[k]);
  return g.record(std::move(out), {x}, [x, deriv = std::move(deriv)](Graph<T>& gr, const Tensor<T>& gy) {
    Tensor<T>& gx = gr.grad(x);
    for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += gy[k] * deriv[k];
  });
}

// Bilinear gather of every channel of src at per-pixel coordinates, border
// clamped. Returns the sampled tensor.
template <class T>
Tensor<T> gather(const Tensor<T>& src, const T* cx, const T* cy, int h, int w) {
  const int C = src.channels(), H = src.height(), W = src.width();
  Tensor<T> out = Tensor<T>::chw(C, h, w);
  const std::size_t n = std::size_t(h) * w;
  for (std::size_t p = 0; p < n; ++p) {
    docalign::detail::require_finite_coord(cx[p], cy[p]);
    const auto taps = docalign::detail::make_taps(cx[p], cy[p], H, W, Padding::kBorder);
    for (int c = 0; c < C; ++c) {
      out.plane(c)[p] = docalign::detail::interpolate(std::span<const T>(src.plane(c), src.plane_size()), W, taps);
    }
  }
  return out;
}

// Backward of gather: scatters gy into gsrc (may be null) and accumulates the
// coordinate gradients into gcx/gcy (may be null).
template <class T>
void gather_backward(const Tensor<T>& src, const T* cx, const T* cy, int h, int w, const Tensor<T>& gy,
                     Tensor<T>* gsrc, T* gcx, T* gcy) {
  const int C = src.channels(), H = src.height(), W = src.width();
  const std::size_t n = std::size_t(h) * w;
  for (std::size_t p = 0; p < n; ++p) {
    const auto taps = docalign::detail::make_taps(cx[p], cy[p], H, W, Padding::kBorder);
    T sx = 0, sy = 0;
    for (int c = 0; c < C; ++c) {
      T dvdx, dvdy;
      std::span<T> gplane = gsrc ? std::span<T>(gsrc->plane(c), src.plane_size()) : std::span<T>();
      const T gv = gy.plane(c)[p];
      docalign::detail::interpolate_backward(std::span<const T>(src.plane(c), src.plane_size()), gplane, W, taps, gv,
                                             dvdx, dvdy);
      sx += gv * dvdx;
      sy += gv * dvdy;
    }
    if (gcx) gcx[p] += sx;
    if (gcy) gcy[p] += sy;
  }
}

template <class T>
void resize_coords(int in_h, int in_w, int h, int w, std::vector<T>& cx, std::vector<T>& cy) {
  cx.resize(std::size_t(h) * w);
  cy.resize(std::size_t(h) * w);
  const double sy = double(in_h) / h;
  const double sx = double(in_w) / w;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      cx[std::size_t(i) * w + j] = static_cast<T>((j + 0.5) * sx - 0.5);
      cy[std::size_t(i) * w + j] = static_cast<T>((i + 0.5) * sy - 0.5);
    }
  }
}

}  // namespace detail

// x: [C, H, W]; weight: [O, C, k, k]; bias: [O] or an invalid Var.
// pad < 0 means "same" padding k / 2.
template <class T>
Var conv2d(Graph<T>& g, Var x, Var weight, Var bias, int stride = 1, int pad = -1) {
  const Tensor<T>& in = g.value(x);
  const Tensor<T>& w = g.value(weight);
  in.require_rank(3);
  w.require_rank(4);
  const int C = in.channels(), H = in.height(), W = in.width();
  const int O = w.dim(0), k = w.dim(2);
  detail::require(w.dim(1) == C && w.dim(3) == k,
                  "conv2d: weight " + w.shape_string() + " does not fit input " + in.shape_string());
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  if (pad < 0) pad = k / 2;
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  detail::require(Ho >= 1 && Wo >= 1, "conv2d: empty output for input " + in.shape_string());
  const int rows = C * k * k;
  const int n = Ho * Wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);
  if (bias.valid()) {
    detail::require(g.value(bias).size() == std::size_t(O), "conv2d: bias size mismatch");
  }

  using Mat = detail::RowMat<T>;
  Tensor<T> out = Tensor<T>::chw(O, Ho, Wo);
  {
    std::vector<T> cols;
    const T* colp = in.data().data();
    if (!direct) {
      cols.resize(std::size_t(rows) * n);
      detail::im2col(in.data().data(), C, H, W, k, stride, pad, Ho, Wo, cols.data());
      colp = cols.data();
    }
    Eigen::Map<const Mat> wm(w.data().data(), O, rows);
    Eigen::Map<const Mat> cm(colp, rows, n);
    Eigen::Map<Mat> om(out.data().data(), O, n);
    om.noalias() = wm * cm;
    if (bias.valid()) {
      const Tensor<T>& b = g.value(bias);
      for (int o = 0; o < O; ++o) om.row(o).array() += b[o];
    }
  }

  return g.record(std::move(out), {x, weight, bias},
                  [=](Graph<T>& gr, const Tensor<T>& gy) {
                    const Tensor<T>& xin = gr.value(x);
                    const Tensor<T>& wv = gr.value(weight);
                    Eigen::Map<const Mat> gym(gy.data().data(), O, n);
                    if (Tensor<T>* gb = gr.grad_if(bias)) {
                      // Plain loop: Eigen's vectorised sum depends on buffer alignment.
                      for (int o = 0; o < O; ++o) {
                        T acc = T(0);
                        const T* row = gy.data().data() + std::size_t(o) * n;
                        for (int k = 0; k < n; ++k) acc += row[k];
                        (*gb)[o] += acc;
                      }
                    }
                    Tensor<T>* gw = gr.grad_if(weight);
                    Tensor<T>* gx = gr.grad_if(x);
                    if (gw) {
                      std::vector<T> cols;
                      const T* colp = xin.data().data();
                      if (!direct) {
                        cols.resize(std::size_t(rows) * n);
                        detail::im2col(xin.data().data(), C, H, W, k, stride, pad, Ho, Wo, cols.data());
                        colp = cols.data();
                      }
                      Eigen::Map<const Mat> cm(colp, rows, n);
                      Eigen::Map<Mat> gwm(gw->data().data(), O, rows);
                      gwm.noalias() += gym * cm.transpose();
                    }
                    if (gx) {
                      Eigen::Map<const Mat> wm(wv.data().data(), O, rows);
                      if (direct) {
                        Eigen::Map<Mat> gxm(gx->data().data(), rows, n);
                        gxm.noalias() += wm.transpose() * gym;
                      } else {
                        Mat gcols = wm.transpose() * gym;
                        detail::col2im(gcols.data(), C, H, W, k, stride, pad, Ho, Wo, gx->data().data());
                      }
                    }
                  });
}

template <class T>
Var relu(Graph<T>& g, Var x) {
  return detail::pointwise(g, x, [](T v, T& y, T& d) {
    y = v > T(0) ? v : T(0);
    d = v > T(0) ? T(1) : T(0);
  });
}

template <class T>
Var sigmoid(Graph<T>& g, Var x) {
  return detail::pointwise(g, x, [](T v, T& y, T& d) {
    y = T(1) / (T(1) + std::exp(-v));
    d = y * (T(1) - y);
  });
}

template <class T>
Var tanh(Graph<T>& g, Var x) {
  return detail::pointwise(g, x, [](T v, T& y, T& d) {
    y = std::tanh(v);
    d = T(1) - y * y;
  });
}

// s * x + b.
template <class T>
Var affine(Graph<T>& g, Var x, T s, T b) {
  return detail::pointwise(g, x, [s, b](T v, T& y, T& d) {
    y = s * v + b;
    d = s;
  });
}

template <class T>
Var scale(Graph<T>& g, Var x, T s) {
  return affine(g, x, s, T(0));
}

template <class T>
Var one_minus(Graph<T>& g, Var x) {
  return affine(g, x, T(-1), T(1));
}

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  detail::require_same(g.value(a), g.value(b), "add");
  Tensor<T> out = g.value(a);
  const Tensor<T>& vb = g.value(b);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += vb[k];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& gy) {
    for (Var v : {a, b}) {
      if (Tensor<T>* gv = gr.grad_if(v)) {
        for (std::size_t k = 0; k < gy.size(); ++k) (*gv)[k] += gy[k];
      }
    }
  });
}

template <class T>
Var sub(Graph<T>& g, Var a, Var b) {
  detail::require_same(g.value(a), g.value(b), "sub");
  Tensor<T> out = g.value(a);
  const Tensor<T>& vb = g.value(b);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] -= vb[k];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& gy) {
    if (Tensor<T>* ga = gr.grad_if(a)) {
      for (std::size_t k = 0; k < gy.size(); ++k) (*ga)[k] += gy[k];
    }
    if (Tensor<T>* gb = gr.grad_if(b)) {
      for (std::size_t k = 0; k < gy.size(); ++k) (*gb)[k] -= gy[k];
    }
  });
}

template <class T>
Var mul(Graph<T>& g, Var a, Var b) {
  detail::require_same(g.value(a), g.value(b), "mul");
  Tensor<T> out = g.value(a);
  const Tensor<T>& vb = g.value(b);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= vb[k];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& gy) {
    const Tensor<T>& va = gr.value(a);
    const Tensor<T>& vb = gr.value(b);
    if (Tensor<T>* ga = gr.grad_if(a)) {
      for (std::size_t k = 0; k < gy.size(); ++k) (*ga)[k] += gy[k] * vb[k];
    }
    if (Tensor<T>* gb = gr.grad_if(b)) {
      for (std::size_t k = 0; k < gy.size(); ++k) (*gb)[k] += gy[k] * va[k];
    }
  });
}

// Concatenation along channels.
template <class T>
Var concat(Graph<T>& g, const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat: no inputs");
  const Tensor<T>& first = g.value(parts[0]);
  first.require_rank(3);
  int channels = 0;
  for (Var v : parts) {
    const Tensor<T>& t = g.value(v);
    t.require_rank(3);
    detail::require(t.height() == first.height() && t.width() == first.width(),
                    "concat: spatial mismatch " + t.shape_string() + " vs " + first.shape_string());
    channels += t.channels();
  }
  Tensor<T> out = Tensor<T>::chw(channels, first.height(), first.width());
  std::size_t offset = 0;
  for (Var v : parts) {
    const Tensor<T>& t = g.value(v);
    std::copy(t.data().begin(), t.data().end(), out.data().begin() + offset);
    offset += t.size();
  }
  return g.record(std::move(out), parts, [parts](Graph<T>& gr, const Tensor<T>& gy) {
    std::size_t off = 0;
    for (Var v : parts) {
      const std::size_t n = gr.value(v).size();
      if (Tensor<T>* gv = gr.grad_if(v)) {
        for (std::size_t k = 0; k < n; ++k) (*gv)[k] += gy[off + k];
      }
      off += n;
    }
  });
}

// Channels [first, first + count).
template <class T>
Var slice_channels(Graph<T>& g, Var x, int first, int count) {
  const Tensor<T>& in = g.value(x);
  in.require_rank(3);
  detail::require(first >= 0 && count >= 1 && first + count <= in.channels(), "slice_channels: range out of bounds");
  Tensor<T> out = Tensor<T>::chw(count, in.height(), in.width());
  const std::size_t off = first * in.plane_size();
  std::copy(in.data().begin() + off, in.data().begin() + off + out.size(), out.data().begin());
  return g.record(std::move(out), {x}, [x, off](Graph<T>& gr, const Tensor<T>& gy) {
    Tensor<T>& gx = gr.grad(x);
    for (std::size_t k = 0; k < gy.size(); ++k) gx[off + k] += gy[k];
  });
}

// out(p) = src(p + flow(p)), border clamped. flow: [2, H, W] matching src.
template <class T>
Var warp(Graph<T>& g, Var src, Var flow) {
  const Tensor<T>& s = g.value(src);
  const Tensor<T>& f = g.value(flow);
  s.require_rank(3);
  f.require_rank(3);
  detail::require(f.channels() == 2 && f.height() == s.height() && f.width() == s.width(),
                  "warp: flow " + f.shape_string() + " does not match " + s.shape_string());
  const int h = s.height(), w = s.width();
  auto coords = std::make_shared<std::vector<T>>(2 * std::size_t(h) * w);
  T* cx = coords->data();
  T* cy = cx + std::size_t(h) * w;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const std::size_t p = std::size_t(i) * w + j;
      cx[p] = static_cast<T>(j) + f.plane(0)[p];
      cy[p] = static_cast<T>(i) + f.plane(1)[p];
    }
  }
  Tensor<T> out = detail::gather(s, cx, cy, h, w);
  return g.record(std::move(out), {src, flow}, [=](Graph<T>& gr, const Tensor<T>& gy) {
    const T* x = coords->data();
    const T* y = x + std::size_t(h) * w;
    Tensor<T>* gf = gr.grad_if(flow);
    detail::gather_backward(gr.value(src), x, y, h, w, gy, gr.grad_if(src), gf ? gf->plane(0) : nullptr,
                            gf ? gf->plane(1) : nullptr);
  });
}

// Bilinear resize with half-pixel centres, border clamped.
template <class T>
Var resize(Graph<T>& g, Var x, int h, int w) {
  const Tensor<T>& s = g.value(x);
  s.require_rank(3);
  if (h < 1 || w < 1) throw InvalidArgument("resize target must be at least 1x1");
  auto cx = std::make_shared<std::vector<T>>();
  auto cy = std::make_shared<std::vector<T>>();
  detail::resize_coords(s.height(), s.width(), h, w, *cx, *cy);
  Tensor<T> out = detail::gather(s, cx->data(), cy->data(), h, w);
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, const Tensor<T>& gy) {
    detail::gather_backward(gr.value(x), cx->data(), cy->data(), h, w, gy, gr.grad_if(x), (T*)nullptr, (T*)nullptr);
  });
}

// Multiplies channel c by scales[c].
template <class T>
Var scale_channels(Graph<T>& g, Var x, std::vector<T> scales) {
  const Tensor<T>& in = g.value(x);
  in.require_rank(3);
  detail::require(int(scales.size()) == in.channels(), "scale_channels: one scale per channel required");
  Tensor<T> out = in;
  for (int c = 0; c < in.channels(); ++c) {
    for (std::size_t k = 0; k < in.plane_size(); ++k) out.plane(c)[k] *= scales[c];
  }
  return g.record(std::move(out), {x}, [x, scales](Graph<T>& gr, const Tensor<T>& gy) {
    Tensor<T>& gx = gr.grad(x);
    for (int c = 0; c < gx.channels(); ++c) {
      for (std::size_t k = 0; k < gx.plane_size(); ++k) gx.plane(c)[k] += gy.plane(c)[k] * scales[c];
    }
  });
}

// Resamples a [2, H, W] flow and rescales its displacements to the new grid.
template <class T>
Var resize_flow(Graph<T>& g, Var flow, int h, int w) {
  const Tensor<T>& f = g.value(flow);
  detail::require(f.rank() == 3 && f.channels() == 2, "resize_flow: expected a 2-channel flow");
  if (f.height() == h && f.width() == w) return flow;
  const T sx = static_cast<T>(double(w) / f.width());
  const T sy = static_cast<T>(double(h) / f.height());
  return scale_channels(g, resize(g, flow, h, w), {sx, sy});
}

// Per-pixel unit-length feature vectors (norm floored at 1e-8).
template <class T>
Var l2_normalize(Graph<T>& g, Var x) {
  const Tensor<T>& in = g.value(x);
  in.require_rank(3);
  const int C = in.channels();
  const std::size_t n = in.plane_size();
  Tensor<T> out(in.shape());
  auto norms = std::make_shared<std::vector<T>>(n);
  for (std::size_t p = 0; p < n; ++p) {
    T sq = 0;
    for (int c = 0; c < C; ++c) sq += in.plane(c)[p] * in.plane(c)[p];
    const T norm = std::max(std::sqrt(sq), l2_guard<T>());
    (*norms)[p] = norm;
    for (int c = 0; c < C; ++c) out.plane(c)[p] = in.plane(c)[p] / norm;
  }
  auto unit = std::make_shared<Tensor<T>>(out);
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, const Tensor<T>& gy) {
    const Tensor<T>& yv = *unit;
    Tensor<T>& gx = gr.grad(x);
    for (std::size_t p = 0; p < n; ++p) {
      const T norm = (*norms)[p];
      if (norm > l2_guard<T>()) {
        T dot = 0;
        for (int c = 0; c < C; ++c) dot += yv.plane(c)[p] * gy.plane(c)[p];
        for (int c = 0; c < C; ++c) gx.plane(c)[p] += (gy.plane(c)[p] - yv.plane(c)[p] * dot) / norm;
      } else {
        for (int c = 0; c < C; ++c) gx.plane(c)[p] += gy.plane(c)[p] / norm;
      }
    }
  });
}

// Output channel j at reference pixel i holds <reference_i, query_j>.
template <class T>
Var global_correlation(Graph<T>& g, Var reference, Var query) {
  const Tensor<T>& r = g.value(reference);
  const Tensor<T>& q = g.value(query);
  const auto vol = docalign::global_correlation(r.to_planar(), q.to_planar());
  Tensor<T> out = Tensor<T>::from_planar(vol.values);
  return g.record(std::move(out), {reference, query}, [=](Graph<T>& gr, const Tensor<T>& gy) {
    using Mat = detail::RowMat<T>;
    const Tensor<T>& rv = gr.value(reference);
    const Tensor<T>& qv = gr.value(query);
    const int C = rv.channels();
    const int nr = int(rv.plane_size()), nq = int(qv.plane_size());
    Eigen::Map<const Mat> rm(rv.data().data(), C, nr);
    Eigen::Map<const Mat> qm(qv.data().data(), C, nq);
    Eigen::Map<const Mat> gm(gy.data().data(), nq, nr);
    if (Tensor<T>* gr_ = gr.grad_if(reference)) {
      Eigen::Map<Mat>(gr_->data().data(), C, nr).noalias() += qm * gm;
    }
    if (Tensor<T>* gq = gr.grad_if(query)) {
      Eigen::Map<Mat>(gq->data().data(), C, nq).noalias() += rm * gm.transpose();
    }
  });
}

// Local correlation over a (2R+1)^2 window; see docalign::local_correlation.
template <class T>
Var local_correlation(Graph<T>& g, Var reference, Var query, int radius) {
  const Tensor<T>& r = g.value(reference);
  const Tensor<T>& q = g.value(query);
  const auto vol = docalign::local_correlation(r.to_planar(), q.to_planar(), radius);
  Tensor<T> out = Tensor<T>::from_planar(vol.values);
  return g.record(std::move(out), {reference, query}, [=](Graph<T>& gr, const Tensor<T>& gy) {
    const Tensor<T>& rv = gr.value(reference);
    const Tensor<T>& qv = gr.value(query);
    Tensor<T>* grr = gr.grad_if(reference);
    Tensor<T>* gq = gr.grad_if(query);
    const int C = rv.channels(), h = rv.height(), w = rv.width();
    const std::size_t ps = rv.plane_size();
    const int side = 2 * radius + 1;
    for (int dy = -radius; dy <= radius; ++dy) {
      for (int dx = -radius; dx <= radius; ++dx) {
        const T* gch = gy.plane((dy + radius) * side + (dx + radius));
        for (int y = std::max(0, -dy); y < std::min(h, h - dy); ++y) {
          for (int x = std::max(0, -dx); x < std::min(w, w - dx); ++x) {
            const std::size_t p = std::size_t(y) * w + x;
            const T gv = gch[p];
            if (gv == T(0)) continue;
            const std::size_t pq = std::size_t(y + dy) * w + (x + dx);
            for (int c = 0; c < C; ++c) {
              if (grr) grr->data()[c * ps + p] += gv * qv.data()[c * ps + pq];
              if (gq) gq->data()[c * ps + pq] += gv * rv.data()[c * ps + p];
            }
          }
        }
      }
    }
  });
}

// Softmax over consecutive groups of `group` channels at every pixel.
template <class T>
Var softmax_groups(Graph<T>& g, Var x, int group) {
  const Tensor<T>& in = g.value(x);
  in.require_rank(3);
  detail::require(group >= 1 && in.channels() % group == 0, "softmax_groups: channels not divisible by group");
  const std::size_t n = in.plane_size();
  const int groups = in.channels() / group;
  Tensor<T> out(in.shape());
  for (int gi = 0; gi < groups; ++gi) {
    for (std::size_t p = 0; p < n; ++p) {
      T mx = in.plane(gi * group)[p];
      for (int t = 1; t < group; ++t) mx = std::max(mx, in.plane(gi * group + t)[p]);
      T sum = 0;
      for (int t = 0; t < group; ++t) {
        const T e = std::exp(in.plane(gi * group + t)[p] - mx);
        out.plane(gi * group + t)[p] = e;
        sum += e;
      }
      for (int t = 0; t < group; ++t) out.plane(gi * group + t)[p] /= sum;
    }
  }
  auto probs = std::make_shared<Tensor<T>>(out);
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, const Tensor<T>& gy) {
    Tensor<T>& gx = gr.grad(x);
    for (int gi = 0; gi < groups; ++gi) {
      for (std::size_t p = 0; p < n; ++p) {
        T dot = 0;
        for (int t = 0; t < group; ++t) dot += probs->plane(gi * group + t)[p] * gy.plane(gi * group + t)[p];
        for (int t = 0; t < group; ++t) {
          const int c = gi * group + t;
          gx.plane(c)[p] += probs->plane(c)[p] * (gy.plane(c)[p] - dot);
        }
      }
    }
  });
}

// Learned convex upsampling of a [2, h, w] flow by `factor`. weights has
// factor^2 * 9 channels; channel (a * factor + b) * 9 + t weighs neighbour
// t = (ty * 3 + tx) of coarse pixel (i, j) for fine pixel
// (factor * i + a, factor * j + b). Neighbours outside the grid replicate the
// border. Displacements are multiplied by factor.
template <class T>
Var convex_upsample(Graph<T>& g, Var flow, Var weights, int factor) {
  const Tensor<T>& f = g.value(flow);
  const Tensor<T>& wt = g.value(weights);
  detail::require(f.rank() == 3 && f.channels() == 2, "convex_upsample: expected a 2-channel flow");
  wt.require_rank(3);
  detail::require(factor >= 1, "convex_upsample: factor must be >= 1");
  detail::require(wt.channels() == factor * factor * 9 && wt.height() == f.height() && wt.width() == f.width(),
                  "convex_upsample: weights " + wt.shape_string() + " do not fit flow " + f.shape_string() +
                      " at factor " + std::to_string(factor));
  const int h = f.height(), w = f.width();
  const int H = h * factor, W = w * factor;
  const T fs = static_cast<T>(factor);
  const auto nb = [h, w](int i, int j, int t, int& ni, int& nj) {
    ni = std::clamp(i + t / 3 - 1, 0, h - 1);
    nj = std::clamp(j + t % 3 - 1, 0, w - 1);
  };
  Tensor<T> out = Tensor<T>::chw(2, H, W);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      for (int a = 0; a < factor; ++a) {
        for (int b = 0; b < factor; ++b) {
          const int base = (a * factor + b) * 9;
          for (int ch = 0; ch < 2; ++ch) {
            T acc = 0;
            for (int t = 0; t < 9; ++t) {
              int ni, nj;
              nb(i, j, t, ni, nj);
              acc += wt.at(base + t, i, j) * (fs * f.at(ch, ni, nj));
            }
            out.at(ch, i * factor + a, j * factor + b) = acc;
          }
        }
      }
    }
  }
  return g.record(std::move(out), {flow, weights}, [=](Graph<T>& gr, const Tensor<T>& gy) {
    const Tensor<T>& fv = gr.value(flow);
    const Tensor<T>& wv = gr.value(weights);
    Tensor<T>* gf = gr.grad_if(flow);
    Tensor<T>* gw = gr.grad_if(weights);
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        for (int a = 0; a < factor; ++a) {
          for (int b = 0; b < factor; ++b) {
            const int base = (a * factor + b) * 9;
            for (int ch = 0; ch < 2; ++ch) {
              const T gv = gy.at(ch, i * factor + a, j * factor + b);
              for (int t = 0; t < 9; ++t) {
                int ni, nj;
                nb(i, j, t, ni, nj);
                if (gw) gw->at(base + t, i, j) += gv * fs * fv.at(ch, ni, nj);
                if (gf) gf->at(ch, ni, nj) += gv * fs * wv.at(base + t, i, j);
              }
            }
          }
        }
      }
    }
  });
}

// Mean absolute difference against a constant target (same shape).
template <class T>
Var l1_loss(Graph<T>& g, Var x, const Tensor<T>& target) {
  const Tensor<T>& v = g.value(x);
  detail::require_same(v, target, "l1_loss");
  double acc = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) acc += std::abs(double(v[k]) - double(target[k]));
  const T inv = T(1) / static_cast<T>(v.size());
  Tensor<T> out({1}, static_cast<T>(acc / double(v.size())));
  auto sign = std::make_shared<Tensor<T>>(v.shape());
  for (std::size_t k = 0; k < v.size(); ++k) {
    const T d = v[k] - target[k];
    (*sign)[k] = d > T(0) ? inv : (d < T(0) ? -inv : T(0));
  }
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, const Tensor<T>& gy) {
    Tensor<T>& gx = gr.grad(x);
    for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += gy[0] * (*sign)[k];
  });
}

// sum_k w_k x_k against constant weights.
template <class T>
Var weighted_sum(Graph<T>& g, Var x, const Tensor<T>& weights) {
  const Tensor<T>& v = g.value(x);
  detail::require(v.size() == weights.size(), "weighted_sum: size mismatch");
  double acc = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) acc += double(v[k]) * double(weights[k]);
  auto wcopy = std::make_shared<Tensor<T>>(weights);
  return g.record(Tensor<T>({1}, static_cast<T>(acc)), {x}, [=](Graph<T>& gr, const Tensor<T>& gy) {
    Tensor<T>& gx = gr.grad(x);
    for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += gy[0] * (*wcopy)[k];
  });
}

// Sum of scalar nodes.
template <class T>
Var sum_scalars(Graph<T>& g, const std::vector<Var>& terms) {
  detail::require(!terms.empty(), "sum_scalars: no terms");
  T acc = 0;
  for (Var v : terms) {
    detail::require(g.value(v).size() == 1, "sum_scalars: term is not a scalar");
    acc += g.value(v)[0];
  }
  return g.record(Tensor<T>({1}, acc), terms, [terms](Graph<T>& gr, const Tensor<T>& gy) {
    for (Var v : terms) {
      if (Tensor<T>* gv = gr.grad_if(v)) (*gv)[0] += gy[0];
    }
  });
}

}  // namespace docalign::nn
