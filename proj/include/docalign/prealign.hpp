#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "docalign/error.hpp"
#include "docalign/filter.hpp"
#include "docalign/grid.hpp"
#include "docalign/sampling.hpp"
#include "json.hpp"

namespace docalign {

// Binary document/background mask, row-major.
struct DocumentMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  DocumentMask() = default;
  DocumentMask(int h, int w, std::uint8_t fill = 0) : height(h), width(w), data(std::size_t(h) * w, fill) {
    if (h < 1 || w < 1) throw ShapeError("mask dimensions must be positive");
  }

  std::uint8_t& at(int y, int x) { return data[std::size_t(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[std::size_t(y) * width + x]; }
  bool inside(int y, int x) const { return y >= 0 && x >= 0 && y < height && x < width; }
  std::size_t count() const { return std::size_t(std::count(data.begin(), data.end(), std::uint8_t{1})); }
  friend bool operator==(const DocumentMask&, const DocumentMask&) = default;
};

inline double mask_iou(const DocumentMask& a, const DocumentMask& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("mask_iou: mask sizes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    inter += a.data[i] && b.data[i];
    uni += a.data[i] || b.data[i];
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

// Foreground where the single channel is > 0.5.
inline DocumentMask mask_from_image(const Image<float>& img) {
  const Image<float> g = to_luma(img);
  DocumentMask m(g.height(), g.width());
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = g.data()[i] > 0.5f;
  return m;
}

inline Image<float> mask_to_image(const DocumentMask& m) {
  Image<float> img(1, m.height, m.width);
  for (std::size_t i = 0; i < m.data.size(); ++i) img.data()[i] = m.data[i] ? 1.0f : 0.0f;
  return img;
}

struct ControlPoints {
  std::vector<Point> source;
  std::vector<Point> target;

  ControlPoints swapped() const { return {target, source}; }
};

namespace detail {

// Otsu threshold on 256 bins; returns the bin index t, foreground is bin > t.
inline int otsu_bin(const std::vector<int>& bins) {
  double total = 0.0, sum = 0.0;
  for (int i = 0; i < 256; ++i) {
    total += bins[i];
    sum += double(i) * bins[i];
  }
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_t = 0;
  for (int t = 0; t < 255; ++t) {
    w0 += bins[t];
    sum0 += double(t) * bins[t];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_t = t;
    }
  }
  return best_t;
}

// Square structuring element; pixels outside the raster count as background.
inline DocumentMask morph(const DocumentMask& m, int radius, bool dilate) {
  DocumentMask rows(m.height, m.width), out(m.height, m.width);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      bool v = !dilate;
      for (int d = -radius; d <= radius; ++d) {
        const bool s = m.inside(y, x + d) && m.at(y, x + d);
        v = dilate ? (v || s) : (v && s);
      }
      rows.at(y, x) = v;
    }
  }
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      bool v = !dilate;
      for (int d = -radius; d <= radius; ++d) {
        const bool s = rows.inside(y + d, x) && rows.at(y + d, x);
        v = dilate ? (v || s) : (v && s);
      }
      out.at(y, x) = v;
    }
  }
  return out;
}

// Keeps the largest 8-connected foreground component.
inline DocumentMask largest_component(const DocumentMask& m) {
  std::vector<int> label(m.data.size(), -1);
  int best = -1;
  std::size_t best_size = 0;
  int next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < m.data.size(); ++start) {
    if (!m.data[start] || label[start] >= 0) continue;
    std::size_t size = 0;
    label[start] = next;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t k = stack.back();
      stack.pop_back();
      ++size;
      const int y = int(k / m.width), x = int(k % m.width);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (!m.inside(y + dy, x + dx)) continue;
          const std::size_t n = std::size_t(y + dy) * m.width + (x + dx);
          if (m.data[n] && label[n] < 0) {
            label[n] = next;
            stack.push_back(n);
          }
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best = next;
    }
    ++next;
  }
  DocumentMask out(m.height, m.width);
  for (std::size_t k = 0; k < m.data.size(); ++k) out.data[k] = label[k] == best && best >= 0;
  return out;
}

// Sets every background pixel not 4-connected to the raster border.
inline DocumentMask fill_holes(const DocumentMask& m) {
  std::vector<std::uint8_t> outside(m.data.size(), 0);
  std::deque<std::size_t> queue;
  auto seed = [&](int y, int x) {
    const std::size_t k = std::size_t(y) * m.width + x;
    if (!m.data[k] && !outside[k]) {
      outside[k] = 1;
      queue.push_back(k);
    }
  };
  for (int x = 0; x < m.width; ++x) {
    seed(0, x);
    seed(m.height - 1, x);
  }
  for (int y = 0; y < m.height; ++y) {
    seed(y, 0);
    seed(y, m.width - 1);
  }
  constexpr int dy4[4] = {-1, 1, 0, 0}, dx4[4] = {0, 0, -1, 1};
  while (!queue.empty()) {
    const std::size_t k = queue.front();
    queue.pop_front();
    const int y = int(k / m.width), x = int(k % m.width);
    for (int i = 0; i < 4; ++i) {
      if (m.inside(y + dy4[i], x + dx4[i])) seed(y + dy4[i], x + dx4[i]);
    }
  }
  DocumentMask out(m.height, m.width);
  for (std::size_t k = 0; k < m.data.size(); ++k) out.data[k] = !outside[k];
  return out;
}

}  // namespace detail

struct MaskOptions {
  int closing_radius = 2;
  double min_fraction = 0.01;
};

// Otsu on luma, morphological closing, largest component, hole filling.
inline DocumentMask extract_mask(const Image<float>& image, const MaskOptions& o = {}) {
  const Image<float> g = to_luma(image);
  std::vector<int> bins(256, 0);
  std::vector<int> q(g.data().size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    q[i] = std::clamp(int(std::lround(double(g.data()[i]) * 255.0)), 0, 255);
    ++bins[q[i]];
  }
  const int t = detail::otsu_bin(bins);
  DocumentMask m(g.height(), g.width());
  for (std::size_t i = 0; i < q.size(); ++i) m.data[i] = q[i] > t;
  if (o.closing_radius > 0) {
    m = detail::morph(detail::morph(m, o.closing_radius, true), o.closing_radius, false);
  }
  m = detail::fill_holes(detail::largest_component(m));
  if (double(m.count()) < o.min_fraction * double(m.data.size())) throw InvalidArgument("no document found");
  return m;
}

// Outer boundary of the foreground by Moore-neighbour tracing, clockwise on
// screen (x right, y down), starting at the first foreground pixel in raster
// order. Coordinates are pixel centres.
inline std::vector<Point> trace_boundary(const DocumentMask& m) {
  constexpr int dx[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
  constexpr int dy[8] = {0, -1, -1, -1, 0, 1, 1, 1};
  auto fg = [&](int y, int x) { return m.inside(y, x) && m.at(y, x); };
  auto dir_of = [&](int ddx, int ddy) {
    for (int i = 0; i < 8; ++i) {
      if (dx[i] == ddx && dy[i] == ddy) return i;
    }
    return 0;
  };
  int sy = -1, sx = -1;
  for (int y = 0; y < m.height && sy < 0; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (m.at(y, x)) {
        sy = y;
        sx = x;
        break;
      }
    }
  }
  if (sy < 0) throw InvalidArgument("trace_boundary: empty mask");
  std::vector<Point> out{{double(sx), double(sy)}};
  int py = sy, px = sx, back = 0;
  int second_y = -1, second_x = -1;
  const std::size_t limit = 4 * m.data.size() + 8;
  for (std::size_t step = 0; step < limit; ++step) {
    int d = -1;
    for (int i = 1; i <= 8; ++i) {
      const int k = (back + i) % 8;
      if (fg(py + dy[k], px + dx[k])) {
        d = k;
        break;
      }
    }
    if (d < 0) break;  // isolated pixel
    const int qy = py + dy[d], qx = px + dx[d];
    if (py == sy && px == sx && second_y >= 0 && qy == second_y && qx == second_x) {
      out.pop_back();  // the start pixel was appended again on return
      break;
    }
    if (second_y < 0) {
      second_y = qy;
      second_x = qx;
    }
    const int k = (d + 7) % 8;
    back = dir_of(px + dx[k] - qx, py + dy[k] - qy);
    py = qy;
    px = qx;
    out.push_back({double(px), double(py)});
  }
  if (out.empty()) out.push_back({double(sx), double(sy)});
  return out;
}

namespace detail {

// Total least-squares line through pts: returns centroid and unit direction.
inline std::pair<Point, Point> fit_line(const std::vector<Point>& pts) {
  Point c{0, 0};
  for (const Point& p : pts) c = c + p;
  c = (1.0 / double(pts.size())) * c;
  double sxx = 0, sxy = 0, syy = 0;
  for (const Point& p : pts) {
    sxx += (p.x - c.x) * (p.x - c.x);
    sxy += (p.x - c.x) * (p.y - c.y);
    syy += (p.y - c.y) * (p.y - c.y);
  }
  const double theta = 0.5 * std::atan2(2 * sxy, sxx - syy);
  return {c, Point{std::cos(theta), std::sin(theta)}};
}

// Sub-pixel corner as the intersection of lines fitted to the contour just
// before and just after it; falls back to the pixel corner when the fit is
// ill-conditioned or lands far away.
inline Point refine_corner(const std::vector<Point>& b, std::size_t ci, std::size_t reach) {
  const std::size_t n = b.size();
  if (reach < 4) return b[ci];
  std::vector<Point> before, after;
  for (std::size_t k = 2; k <= reach; ++k) {
    before.push_back(b[(ci + n - k) % n]);
    after.push_back(b[(ci + k) % n]);
  }
  const auto [p0, d0] = fit_line(before);
  const auto [p1, d1] = fit_line(after);
  const double den = d0.x * d1.y - d0.y * d1.x;
  if (std::abs(den) < 0.2) return b[ci];
  const Point w = p1 - p0;
  const double t = (w.x * d1.y - w.y * d1.x) / den;
  const Point q = p0 + t * d0;
  return distance(q, b[ci]) <= 3.0 ? q : b[ci];
}

// Circular moving average over 2 * radius + 1 contour points.
inline std::vector<Point> smooth_contour(const std::vector<Point>& b, int radius) {
  const std::size_t n = b.size();
  if (radius <= 0 || n < std::size_t(4 * radius + 4)) return b;
  std::vector<Point> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Point s{0, 0};
    for (int k = -radius; k <= radius; ++k) s = s + b[(i + n + k) % n];
    out[i] = (1.0 / double(2 * radius + 1)) * s;
  }
  return out;
}

}  // namespace detail

struct BoundaryOptions {
  int points_per_edge = 3;
  int out_height = 0;  // reference canvas; 0 = mask size
  int out_width = 0;
  double min_corner_distance = 4.0;
  bool subpixel = true;  // refine corners and smooth the contour for edge points
};

// Corners by extremal x+y / x-y scores on the traced boundary, equidistant
// arc-length points between them, paired with the same layout on the
// reference rectangle spanning the output canvas. Order: top-left corner,
// its edge points, top-right corner, and so on clockwise. With subpixel set,
// corners are intersections of lines fitted to the adjacent boundary and
// edge points come from a lightly smoothed boundary.
inline ControlPoints boundary_control_points(const DocumentMask& m, const BoundaryOptions& o = {}) {
  if (o.points_per_edge < 0) throw InvalidArgument("points_per_edge must be >= 0");
  const int oh = o.out_height > 0 ? o.out_height : m.height;
  const int ow = o.out_width > 0 ? o.out_width : m.width;
  const std::vector<Point> b = trace_boundary(m);
  const std::size_t n = b.size();
  std::array<std::size_t, 4> c{0, 0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    const double s = b[i].x + b[i].y, d = b[i].x - b[i].y;
    if (s < b[c[0]].x + b[c[0]].y) c[0] = i;
    if (d > b[c[1]].x - b[c[1]].y) c[1] = i;
    if (s > b[c[2]].x + b[c[2]].y) c[2] = i;
    if (d < b[c[3]].x - b[c[3]].y) c[3] = i;
  }
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      if (distance(b[c[i]], b[c[j]]) < o.min_corner_distance) {
        throw InvalidArgument("degenerate document mask: corner detection collapsed");
      }
    }
  }
  // Offsets along the clockwise contour from the top-left corner must increase.
  std::array<std::size_t, 5> off{};
  for (int i = 0; i < 4; ++i) off[i] = (c[i] + n - c[0]) % n;
  off[4] = n;
  if (!(off[0] < off[1] && off[1] < off[2] && off[2] < off[3])) {
    throw InvalidArgument("degenerate document mask: corners out of order along the boundary");
  }
  const std::array<Point, 4> ref{Point{0, 0}, Point{double(ow - 1), 0}, Point{double(ow - 1), double(oh - 1)},
                                 Point{0, double(oh - 1)}};
  std::array<Point, 4> corner;
  for (int e = 0; e < 4; ++e) corner[e] = b[c[e]];
  const std::vector<Point> sm = o.subpixel ? detail::smooth_contour(b, 2) : b;
  if (o.subpixel) {
    for (int e = 0; e < 4; ++e) {
      const std::size_t prev = e == 0 ? n - off[3] : off[e] - off[e - 1];
      const std::size_t shortest = std::min(off[e + 1] - off[e], prev);
      corner[e] = detail::refine_corner(b, c[e], std::min<std::size_t>(20, shortest / 4));
    }
  }
  ControlPoints cp;
  const int k = o.points_per_edge;
  for (int e = 0; e < 4; ++e) {
    // Polyline from corner e to corner e+1 (wrapping to the start). Arc
    // length is measured on the raw boundary; positions come from the
    // smoothed one.
    std::vector<Point> raw, path;
    for (std::size_t t = off[e]; t <= off[e + 1]; ++t) {
      raw.push_back(b[(c[0] + t) % n]);
      path.push_back(sm[(c[0] + t) % n]);
    }
    path.front() = corner[e];
    path.back() = corner[(e + 1) % 4];
    std::vector<double> cum(raw.size(), 0.0);
    for (std::size_t i = 1; i < raw.size(); ++i) cum[i] = cum[i - 1] + distance(raw[i - 1], raw[i]);
    cp.source.push_back(path.front());
    cp.target.push_back(ref[e]);
    std::size_t seg = 0;
    for (int j = 1; j <= k; ++j) {
      const double f = double(j) / double(k + 1);
      const double s = f * cum.back();
      while (seg + 2 < cum.size() && cum[seg + 1] < s) ++seg;
      const double len = cum[seg + 1] - cum[seg];
      const double u = len > 0 ? (s - cum[seg]) / len : 0.0;
      cp.source.push_back(path[seg] + u * (path[seg + 1] - path[seg]));
      cp.target.push_back(ref[e] + f * (ref[(e + 1) % 4] - ref[e]));
    }
  }
  return cp;
}

inline double tps_kernel(double r2) { return r2 > 0.0 ? r2 * std::log(r2) : 0.0; }

// Thin-plate spline f(p) = a0 + a1 x + a2 y + sum_i w_i U(|p - c_i|) per
// output dimension, with U(r) = r^2 log r^2. Centres and queries are mapped
// to roughly [-1, 1] by (p - origin) / scale before evaluation.
struct TpsTransform {
  std::vector<Point> centers;          // normalised control points
  std::vector<std::array<double, 2>> weights;
  std::array<std::array<double, 2>, 3> affine{};  // rows: constant, x, y
  double lambda = 0.0;
  Point origin{};
  double scale = 1.0;

  Point normalise(Point p) const { return {(p.x - origin.x) / scale, (p.y - origin.y) / scale}; }

  Point operator()(Point p) const {
    const Point q = normalise(p);
    double out[2];
    for (int d = 0; d < 2; ++d) out[d] = affine[0][d] + affine[1][d] * q.x + affine[2][d] * q.y;
    for (std::size_t i = 0; i < centers.size(); ++i) {
      const double dx = q.x - centers[i].x, dy = q.y - centers[i].y;
      const double u = tps_kernel(dx * dx + dy * dy);
      out[0] += weights[i][0] * u;
      out[1] += weights[i][1] * u;
    }
    return {out[0], out[1]};
  }

  // Sum over output dimensions of w^T K w in normalised coordinates.
  double bending_energy() const {
    double e = 0.0;
    for (std::size_t i = 0; i < centers.size(); ++i) {
      for (std::size_t j = 0; j < centers.size(); ++j) {
        const double dx = centers[i].x - centers[j].x, dy = centers[i].y - centers[j].y;
        const double k = tps_kernel(dx * dx + dy * dy);
        e += k * (weights[i][0] * weights[j][0] + weights[i][1] * weights[j][1]);
      }
    }
    return e;
  }
};

// Solves the TPS system [K + lambda I, P; P^T, 0] [w; a] = [v; 0] mapping
// cp.source onto cp.target.
inline TpsTransform tps_fit(const ControlPoints& cp, double lambda = 1e-3) {
  const std::size_t n = cp.source.size();
  if (n != cp.target.size()) throw InvalidArgument("tps_fit: source and target counts differ");
  if (n < 3) throw InvalidArgument("tps_fit: need at least 3 control points");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidArgument("tps_fit: lambda must be >= 0");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(cp.source[i].x) || !std::isfinite(cp.source[i].y) || !std::isfinite(cp.target[i].x) ||
        !std::isfinite(cp.target[i].y)) {
      throw InvalidArgument("tps_fit: non-finite control point");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (cp.source[i] == cp.source[j]) throw InvalidArgument("tps_fit: duplicate source control points");
    }
  }
  TpsTransform t;
  t.lambda = lambda;
  double x0 = cp.source[0].x, x1 = x0, y0 = cp.source[0].y, y1 = y0;
  for (const Point& p : cp.source) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  t.origin = {0.5 * (x0 + x1), 0.5 * (y0 + y1)};
  t.scale = std::max(0.5 * std::max(x1 - x0, y1 - y0), 1e-12);
  for (const Point& p : cp.source) t.centers.push_back(t.normalise(p));

  Eigen::MatrixXd P(n, 3);
  for (std::size_t i = 0; i < n; ++i) P.row(i) << 1.0, t.centers[i].x, t.centers[i].y;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(P);
  qr.setThreshold(1e-10);
  if (qr.rank() < 3) throw InvalidArgument("tps_fit: control points are collinear");

  const Eigen::Index m = Eigen::Index(n) + 3;
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(m, m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = t.centers[i].x - t.centers[j].x, dy = t.centers[i].y - t.centers[j].y;
      L(i, j) = tps_kernel(dx * dx + dy * dy);
    }
    L(i, i) += lambda;
  }
  L.block(0, n, n, 3) = P;
  L.block(n, 0, 3, n) = P.transpose();
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(m, 2);
  for (std::size_t i = 0; i < n; ++i) rhs.row(i) << cp.target[i].x, cp.target[i].y;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(L);
  if (!lu.isInvertible()) throw InvalidArgument("tps_fit: singular system");
  const Eigen::MatrixXd sol = lu.solve(rhs);
  if (!sol.allFinite()) throw NumericError("tps_fit: non-finite solution");
  t.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) t.weights[i] = {sol(i, 0), sol(i, 1)};
  for (int r = 0; r < 3; ++r) t.affine[r] = {sol(n + r, 0), sol(n + r, 1)};
  return t;
}

// Flow on an out_h x out_w grid with f(x) = T(x) - x, so that warping an
// image by it samples that image at T(x).
template <class T = float>
FlowField<T> tps_to_flow(const TpsTransform& t, int out_h, int out_w) {
  FlowField<T> f(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const Point p = t(Point{double(x), double(y)});
      f.x(y, x) = static_cast<T>(p.x - x);
      f.y(y, x) = static_cast<T>(p.y - y);
    }
  }
  return f;
}

inline void to_json(nlohmann::json& j, const TpsTransform& t) {
  nlohmann::json centers = nlohmann::json::array(), weights = nlohmann::json::array();
  for (const Point& p : t.centers) centers.push_back({p.x, p.y});
  for (const auto& w : t.weights) weights.push_back({w[0], w[1]});
  j = {{"type", "tps"},
       {"lambda", t.lambda},
       {"origin", {t.origin.x, t.origin.y}},
       {"scale", t.scale},
       {"centers", centers},
       {"weights", weights},
       {"affine", {{t.affine[0][0], t.affine[0][1]}, {t.affine[1][0], t.affine[1][1]}, {t.affine[2][0], t.affine[2][1]}}}};
}

inline TpsTransform tps_from_json(const nlohmann::json& j) {
  try {
    TpsTransform t;
    t.lambda = j.at("lambda").get<double>();
    const auto o = j.at("origin");
    t.origin = {o.at(0).get<double>(), o.at(1).get<double>()};
    t.scale = j.at("scale").get<double>();
    for (const auto& c : j.at("centers")) t.centers.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
    for (const auto& w : j.at("weights")) t.weights.push_back({w.at(0).get<double>(), w.at(1).get<double>()});
    const auto& a = j.at("affine");
    for (int r = 0; r < 3; ++r) t.affine[r] = {a.at(r).at(0).get<double>(), a.at(r).at(1).get<double>()};
    if (t.centers.size() != t.weights.size()) throw ParseError("tps transform: centers and weights differ in count");
    if (!(t.scale > 0)) throw ParseError("tps transform: scale must be positive");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("tps transform: ") + e.what());
  }
}

inline nlohmann::json control_points_json(const ControlPoints& cp) {
  nlohmann::json s = nlohmann::json::array(), t = nlohmann::json::array();
  for (const Point& p : cp.source) s.push_back({p.x, p.y});
  for (const Point& p : cp.target) t.push_back({p.x, p.y});
  return {{"source", s}, {"target", t}};
}

struct PrealignOptions {
  int points_per_edge = 3;
  double lambda = 1e-3;
  int out_height = 0;  // 0 = input size
  int out_width = 0;
  MaskOptions mask;
};

struct PrealignResult {
  Image<float> image;           // pre-aligned photo on the reference canvas
  DocumentMask mask;            // document mask on the input photo
  ControlPoints control_points; // photo -> reference
  TpsTransform transform;       // reference -> photo; also the inverse for annotations
  FlowField<float> flow;
};

// Pre-aligns a photo onto the reference rectangle. The TPS is fitted from
// reference points to photo points, so its flow needs no inversion and it
// maps pre-aligned coordinates back to the raw photo.
inline PrealignResult prealign(const Image<float>& photo, const PrealignOptions& o = {},
                               const DocumentMask* mask = nullptr) {
  PrealignResult r;
  if (mask) {
    if (mask->height != photo.height() || mask->width != photo.width()) {
      throw ShapeError("prealign: mask " + std::to_string(mask->height) + "x" + std::to_string(mask->width) +
                       " vs photo " + photo.shape_string());
    }
    r.mask = detail::fill_holes(detail::largest_component(*mask));
    if (r.mask.count() == 0) throw InvalidArgument("no document found");
  } else {
    r.mask = extract_mask(photo, o.mask);
  }
  const int oh = o.out_height > 0 ? o.out_height : photo.height();
  const int ow = o.out_width > 0 ? o.out_width : photo.width();
  r.control_points = boundary_control_points(r.mask, {o.points_per_edge, oh, ow});
  r.transform = tps_fit(r.control_points.swapped(), o.lambda);
  r.flow = tps_to_flow<float>(r.transform, oh, ow);
  r.image = Image<float>(bilinear_sample<float>(photo, CoordGrid<float>::displaced(r.flow)));
  return r;
}

}  // namespace docalign
