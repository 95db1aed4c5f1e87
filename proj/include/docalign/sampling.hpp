#pragma once

#include <cmath>
#include <string>

#include "docalign/grid.hpp"

namespace docalign {

// Out-of-bounds policy for bilinear reads.
enum class Padding { kBorder, kZero };

namespace detail {

// The four lattice taps around a continuous position, plus the fractional
// offsets. Index -1 marks a tap that reads as zero (zero padding only).
template <class T>
struct BilinearTaps {
  int x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  T tx = 0, ty = 0;
  bool dx_active = false;  // whether d(value)/dx is nonzero (false while clamped)
  bool dy_active = false;
};

template <class T>
void axis_taps_border(T pos, int size, int& i0, int& i1, T& t) {
  const T hi = static_cast<T>(size - 1);
  const T clamped = pos < T(0) ? T(0) : (pos > hi ? hi : pos);
  i0 = static_cast<int>(std::floor(clamped));
  i1 = i0 + 1 < size ? i0 + 1 : size - 1;
  t = clamped - static_cast<T>(i0);
}

template <class T>
BilinearTaps<T> make_taps(T x, T y, int height, int width, Padding padding) {
  BilinearTaps<T> taps;
  if (padding == Padding::kBorder) {
    axis_taps_border(x, width, taps.x0, taps.x1, taps.tx);
    axis_taps_border(y, height, taps.y0, taps.y1, taps.ty);
    taps.dx_active = width > 1 && x >= T(0) && x <= static_cast<T>(width - 1);
    taps.dy_active = height > 1 && y >= T(0) && y <= static_cast<T>(height - 1);
  } else {
    const T fx = std::floor(x);
    const T fy = std::floor(y);
    taps.tx = x - fx;
    taps.ty = y - fy;
    // Positions far outside the raster only need "invalid" markers.
    const auto to_index = [](T f, int offset, int size) {
      if (f + offset < T(0) || f + offset > static_cast<T>(size - 1)) return -1;
      return static_cast<int>(f) + offset;
    };
    taps.x0 = to_index(fx, 0, width);
    taps.x1 = to_index(fx, 1, width);
    taps.y0 = to_index(fy, 0, height);
    taps.y1 = to_index(fy, 1, height);
    taps.dx_active = true;
    taps.dy_active = true;
  }
  return taps;
}

template <class T>
inline T tap_value(std::span<const T> plane, int width, int y, int x) {
  return (x < 0 || y < 0) ? T(0) : plane[static_cast<std::size_t>(y) * width + x];
}

// Nested-lerp form: exact at lattice points and for constant neighbourhoods.
template <class T>
inline T interpolate(std::span<const T> plane, int width, const BilinearTaps<T>& k) {
  const T v00 = tap_value(plane, width, k.y0, k.x0);
  const T v01 = tap_value(plane, width, k.y0, k.x1);
  const T v10 = tap_value(plane, width, k.y1, k.x0);
  const T v11 = tap_value(plane, width, k.y1, k.x1);
  const T top = v00 + k.tx * (v01 - v00);
  const T bottom = v10 + k.tx * (v11 - v10);
  return top + k.ty * (bottom - top);
}

// Accumulates upstream gradient g into the plane's gradient and returns
// (d value / dx, d value / dy) for the sample position.
template <class T>
inline void interpolate_backward(std::span<const T> plane, std::span<T> grad_plane, int width,
                                 const BilinearTaps<T>& k, T g, T& dvdx, T& dvdy) {
  const T v00 = tap_value(plane, width, k.y0, k.x0);
  const T v01 = tap_value(plane, width, k.y0, k.x1);
  const T v10 = tap_value(plane, width, k.y1, k.x0);
  const T v11 = tap_value(plane, width, k.y1, k.x1);
  const T top = v00 + k.tx * (v01 - v00);
  const T bottom = v10 + k.tx * (v11 - v10);
  dvdx = k.dx_active ? (T(1) - k.ty) * (v01 - v00) + k.ty * (v11 - v10) : T(0);
  dvdy = k.dy_active ? bottom - top : T(0);
  if (grad_plane.empty()) return;
  const auto add = [&](int y, int x, T w) {
    if (x >= 0 && y >= 0) grad_plane[static_cast<std::size_t>(y) * width + x] += w * g;
  };
  add(k.y0, k.x0, (T(1) - k.tx) * (T(1) - k.ty));
  add(k.y0, k.x1, k.tx * (T(1) - k.ty));
  add(k.y1, k.x0, (T(1) - k.tx) * k.ty);
  add(k.y1, k.x1, k.tx * k.ty);
}

template <class T>
inline void require_finite_coord(T x, T y) {
  if (!std::isfinite(static_cast<double>(x)) || !std::isfinite(static_cast<double>(y))) {
    throw InvalidArgument("non-finite sampling coordinate (" + std::to_string(double(x)) + ", " +
                          std::to_string(double(y)) + ")");
  }
}

}  // namespace detail

// Samples channel c of src at continuous position (x, y), x = column.
template <class T>
T sample_bilinear(const Planar<T>& src, int c, T x, T y, Padding padding = Padding::kBorder) {
  if (src.empty()) throw InvalidArgument("cannot sample an empty raster");
  detail::require_finite_coord(x, y);
  const auto taps = detail::make_taps(x, y, src.height(), src.width(), padding);
  return detail::interpolate(src.plane(c), src.width(), taps);
}

// Samples every channel of src at each position in coords. The result has
// src's channel count and coords' spatial size.
template <class T>
Planar<T> bilinear_sample(const Planar<T>& src, const VectorField<T>& coords, Padding padding = Padding::kBorder) {
  if (src.empty()) throw InvalidArgument("cannot sample an empty raster");
  Planar<T> out(src.channels(), coords.height(), coords.width());
  for (int i = 0; i < coords.height(); ++i) {
    for (int j = 0; j < coords.width(); ++j) {
      const T x = coords.x(i, j);
      const T y = coords.y(i, j);
      detail::require_finite_coord(x, y);
      const auto taps = detail::make_taps(x, y, src.height(), src.width(), padding);
      for (int c = 0; c < src.channels(); ++c) out(c, i, j) = detail::interpolate(src.plane(c), src.width(), taps);
    }
  }
  return out;
}

// Backward warp: out(x) = src(x + flow(x)).
template <class T>
Planar<T> warp(const Planar<T>& src, const FlowField<T>& flow, Padding padding = Padding::kBorder) {
  require_same_extent(src, flow, "warp");
  return bilinear_sample(src, CoordGrid<T>::displaced(flow), padding);
}

template <class T>
Image<T> warp(const Image<T>& src, const FlowField<T>& flow, Padding padding = Padding::kBorder) {
  return Image<T>(warp(static_cast<const Planar<T>&>(src), flow, padding));
}

// g(x) = outer(x) + inner(x + outer(x)), so warp(I, g) ~ warp(warp(I, inner), outer).
template <class T>
FlowField<T> compose_flows(const FlowField<T>& outer, const FlowField<T>& inner) {
  require_same_extent(outer, inner, "compose_flows");
  FlowField<T> inner_at(bilinear_sample<T>(inner, CoordGrid<T>::displaced(outer)));
  FlowField<T> out(outer.height(), outer.width());
  for (std::size_t k = 0; k < out.size(); ++k) out.data()[k] = outer.data()[k] + inner_at.data()[k];
  return out;
}

// Bilinear resampling with half-pixel centres (output pixel j reads input
// position (j + 0.5) * in / out - 0.5), border clamped. Values are not rescaled.
template <class T>
Planar<T> resize_bilinear(const Planar<T>& src, int new_h, int new_w) {
  if (new_h < 1 || new_w < 1) throw InvalidArgument("resize target must be at least 1x1");
  if (src.empty()) throw InvalidArgument("cannot resize an empty raster");
  CoordGrid<T> coords(new_h, new_w);
  const double sy = double(src.height()) / new_h;
  const double sx = double(src.width()) / new_w;
  for (int i = 0; i < new_h; ++i) {
    for (int j = 0; j < new_w; ++j) {
      coords.x(i, j) = static_cast<T>((j + 0.5) * sx - 0.5);
      coords.y(i, j) = static_cast<T>((i + 0.5) * sy - 0.5);
    }
  }
  return bilinear_sample(src, coords);
}

// Resamples a flow and rescales its displacements into output-pixel units.
template <class T>
FlowField<T> resize_flow(const FlowField<T>& flow, int new_h, int new_w) {
  FlowField<T> out(resize_bilinear<T>(flow, new_h, new_w));
  const T scale_x = static_cast<T>(double(new_w) / flow.width());
  const T scale_y = static_cast<T>(double(new_h) / flow.height());
  for (auto& v : out.plane(0)) v *= scale_x;
  for (auto& v : out.plane(1)) v *= scale_y;
  return out;
}

namespace detail {

// Solves q + f(q) = y for one target pixel by damped Newton steps on the
// bilinear interpolant, starting from `q`. Returns the final residual norm.
template <class T>
double newton_invert(const FlowField<T>& flow, double yx, double yy, double& qx, double& qy, int max_iters) {
  const auto residual = [&](double x, double y, double& rx, double& ry) {
    rx = x + double(sample_bilinear<T>(flow, 0, T(x), T(y))) - yx;
    ry = y + double(sample_bilinear<T>(flow, 1, T(x), T(y))) - yy;
    return std::hypot(rx, ry);
  };
  double rx, ry;
  double r = residual(qx, qy, rx, ry);
  constexpr double h = 1e-4;
  for (int it = 0; it < max_iters && r > 1e-9; ++it) {
    double ax, ay, bx, by;
    residual(qx + h, qy, ax, ay);
    residual(qx - h, qy, bx, by);
    const double j00 = (ax - bx) / (2 * h), j10 = (ay - by) / (2 * h);
    residual(qx, qy + h, ax, ay);
    residual(qx, qy - h, bx, by);
    const double j01 = (ax - bx) / (2 * h), j11 = (ay - by) / (2 * h);
    const double det = j00 * j11 - j01 * j10;
    if (std::abs(det) < 1e-12) break;
    const double dx = (j11 * rx - j01 * ry) / det, dy = (j00 * ry - j10 * rx) / det;
    double step = 1.0;
    bool moved = false;
    for (int k = 0; k < 20; ++k, step *= 0.5) {
      double nx, ny;
      const double nr = residual(qx - step * dx, qy - step * dy, nx, ny);
      if (nr < r) {
        qx -= step * dx;
        qy -= step * dy;
        r = nr;
        rx = nx;
        ry = ny;
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }
  return r;
}

}  // namespace detail

// Numerical inverse g with x + g(x) the preimage of x under p -> p + f(p).
// Fixed-point iteration g(x) = -f(x + g(x)) converges where f is a
// contraction; pixels it leaves unresolved are polished by Newton steps from
// several starting points, keeping the smallest residual.
template <class T>
FlowField<T> invert_flow(const FlowField<T>& flow, int max_iters = 200, double tol = 1e-7) {
  FlowField<T> g = flow;
  for (auto& v : g.data()) v = -v;
  for (int it = 0; it < max_iters; ++it) {
    FlowField<T> sampled(bilinear_sample<T>(flow, CoordGrid<T>::displaced(g)));
    double change = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) {
      const T next = -sampled.data()[k];
      change = std::max(change, std::abs(double(next) - double(g.data()[k])));
      g.data()[k] = next;
    }
    if (change < tol) break;
  }
  const double accept = std::max(tol, 1e-5);
  for (int i = 0; i < g.height(); ++i) {
    for (int j = 0; j < g.width(); ++j) {
      if (!std::isfinite(double(g.x(i, j))) || !std::isfinite(double(g.y(i, j)))) {
        g.x(i, j) = T(0);
        g.y(i, j) = T(0);
      }
      double best_x = j + double(g.x(i, j)), best_y = i + double(g.y(i, j));
      double rx0 = best_x + double(sample_bilinear<T>(flow, 0, T(best_x), T(best_y))) - j;
      double ry0 = best_y + double(sample_bilinear<T>(flow, 1, T(best_x), T(best_y))) - i;
      double best = std::hypot(rx0, ry0);
      if (best <= accept) continue;
      const double starts[3][2] = {{best_x, best_y},
                                   {j - double(flow.x(i, j)), i - double(flow.y(i, j))},
                                   {double(j), double(i)}};
      for (const auto& s : starts) {
        double qx = s[0], qy = s[1];
        const double r = detail::newton_invert(flow, j, i, qx, qy, 50);
        if (r < best) {
          best = r;
          best_x = qx;
          best_y = qy;
        }
        if (best <= accept) break;
      }
      g.x(i, j) = static_cast<T>(best_x - j);
      g.y(i, j) = static_cast<T>(best_y - i);
    }
  }
  if (!g.all_finite()) throw NumericError("flow inversion diverged");
  return g;
}

// Bilinear lookup of a flow vector at a continuous location.
template <class T>
Point flow_at(const FlowField<T>& flow, Point p) {
  return {double(sample_bilinear<T>(flow, 0, static_cast<T>(p.x), static_cast<T>(p.y))),
          double(sample_bilinear<T>(flow, 1, static_cast<T>(p.x), static_cast<T>(p.y)))};
}

}  // namespace docalign
