#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "docalign/filter.hpp"
#include "docalign/grid.hpp"
#include "docalign/sampling.hpp"
#include "json.hpp"

namespace docalign {

using Mask = std::vector<std::uint8_t>;

namespace detail {

template <class T>
void require_comparable(const FlowField<T>& pred, const FlowField<T>& gt, const Mask* mask, const char* what) {
  if (!pred.same_shape(gt)) {
    throw ShapeError(std::string(what) + ": prediction " + pred.shape_string() + " vs ground truth " + gt.shape_string());
  }
  if (mask && mask->size() != pred.plane_size()) {
    throw ShapeError(std::string(what) + ": mask has " + std::to_string(mask->size()) + " entries, expected " +
                     std::to_string(pred.plane_size()));
  }
}

// Per-pixel endpoint errors over the selected pixels.
template <class T>
std::vector<double> endpoint_errors(const FlowField<T>& pred, const FlowField<T>& gt, const Mask* mask,
                                    const char* what) {
  require_comparable(pred, gt, mask, what);
  std::vector<double> out;
  out.reserve(pred.plane_size());
  const auto px = pred.plane(0), py = pred.plane(1), gx = gt.plane(0), gy = gt.plane(1);
  for (std::size_t k = 0; k < pred.plane_size(); ++k) {
    if (mask && !(*mask)[k]) continue;
    out.push_back(std::hypot(double(px[k]) - double(gx[k]), double(py[k]) - double(gy[k])));
  }
  if (out.empty()) throw InvalidArgument(std::string(what) + ": mask selects no pixels");
  return out;
}

}  // namespace detail

// Mean endpoint error in pixels over the (masked) pixels.
template <class T>
double aepe(const FlowField<T>& pred, const FlowField<T>& gt, const Mask* mask = nullptr) {
  const auto e = detail::endpoint_errors(pred, gt, mask, "aepe");
  double s = 0.0;
  for (double v : e) s += v;
  return s / double(e.size());
}

// Fraction of (masked) pixels with endpoint error <= threshold.
template <class T>
double pck(const FlowField<T>& pred, const FlowField<T>& gt, double threshold, const Mask* mask = nullptr) {
  if (!(threshold > 0)) throw InvalidArgument("pck threshold must be positive");
  const auto e = detail::endpoint_errors(pred, gt, mask, "pck");
  std::size_t hit = 0;
  for (double v : e) hit += v <= threshold;
  return double(hit) / double(e.size());
}

struct FlowEvalReport {
  double aepe = 0.0;
  std::map<double, double> pck;  // threshold -> fraction
  std::size_t n_pixels = 0;
};

inline const std::vector<double>& default_pck_thresholds() {
  static const std::vector<double> t{1.0, 3.0, 5.0};
  return t;
}

template <class T>
FlowEvalReport evaluate_flow(const FlowField<T>& pred, const FlowField<T>& gt,
                             const std::vector<double>& thresholds = default_pck_thresholds(),
                             const Mask* mask = nullptr) {
  const auto e = detail::endpoint_errors(pred, gt, mask, "evaluate_flow");
  FlowEvalReport r;
  r.n_pixels = e.size();
  double s = 0.0;
  for (double v : e) s += v;
  r.aepe = s / double(e.size());
  for (double t : thresholds) {
    if (!(t > 0)) throw InvalidArgument("pck threshold must be positive");
    std::size_t hit = 0;
    for (double v : e) hit += v <= t;
    r.pck[t] = double(hit) / double(e.size());
  }
  return r;
}

// Pixel-weighted average of several reports.
inline FlowEvalReport merge_reports(const std::vector<FlowEvalReport>& reports) {
  FlowEvalReport out;
  for (const auto& r : reports) {
    out.aepe += r.aepe * double(r.n_pixels);
    for (const auto& [t, v] : r.pck) out.pck[t] += v * double(r.n_pixels);
    out.n_pixels += r.n_pixels;
  }
  if (out.n_pixels == 0) return out;
  out.aepe /= double(out.n_pixels);
  for (auto& [t, v] : out.pck) v /= double(out.n_pixels);
  return out;
}

inline std::string pck_key(double threshold) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%gpx", threshold);
  return buf;
}

inline void to_json(nlohmann::json& j, const FlowEvalReport& r) {
  nlohmann::json pck = nlohmann::json::object();
  for (const auto& [t, v] : r.pck) pck[pck_key(t)] = v;
  j = {{"aepe", r.aepe}, {"pck", pck}, {"n_pixels", r.n_pixels}};
}

// ---------------------------------------------------------------------------
// MS-SSIM

struct MsSsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;
  double data_range = 1.0;
  int max_scales = 5;
};

inline constexpr std::array<double, 5> kMsSsimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

namespace detail {

// Separable Gaussian filtering without padding ("valid" output).
inline Planar<double> gaussian_valid(const Planar<double>& src, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int h = src.height(), w = src.width();
  Planar<double> tmp(1, h, w - n + 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x + n <= w; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * src(0, y, x + i);
      tmp(0, y, x) = s;
    }
  }
  Planar<double> out(1, h - n + 1, w - n + 1);
  for (int y = 0; y + n <= h; ++y) {
    for (int x = 0; x < tmp.width(); ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * tmp(0, y + i, x);
      out(0, y, x) = s;
    }
  }
  return out;
}

// Mean luminance term and mean contrast-structure term at one scale.
inline std::pair<double, double> ssim_terms(const Planar<double>& a, const Planar<double>& b,
                                            const std::vector<double>& k, const MsSsimOptions& o) {
  const double c1 = std::pow(o.k1 * o.data_range, 2), c2 = std::pow(o.k2 * o.data_range, 2);
  Planar<double> aa = a, bb = b, ab = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa.data()[i] = a.data()[i] * a.data()[i];
    bb.data()[i] = b.data()[i] * b.data()[i];
    ab.data()[i] = a.data()[i] * b.data()[i];
  }
  const auto mu_a = gaussian_valid(a, k), mu_b = gaussian_valid(b, k);
  const auto s_aa = gaussian_valid(aa, k), s_bb = gaussian_valid(bb, k), s_ab = gaussian_valid(ab, k);
  double l_sum = 0.0, cs_sum = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a.data()[i], mb = mu_b.data()[i];
    const double va = s_aa.data()[i] - ma * ma, vb = s_bb.data()[i] - mb * mb, cov = s_ab.data()[i] - ma * mb;
    l_sum += (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    cs_sum += (2 * cov + c2) / (va + vb + c2);
  }
  return {l_sum / double(mu_a.size()), cs_sum / double(mu_a.size())};
}

inline Planar<double> downsample2(const Planar<double>& p) {
  Planar<double> out(1, p.height() / 2, p.width() / 2);
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      out(0, y, x) = 0.25 * (p(0, 2 * y, 2 * x) + p(0, 2 * y, 2 * x + 1) + p(0, 2 * y + 1, 2 * x) +
                             p(0, 2 * y + 1, 2 * x + 1));
    }
  }
  return out;
}

}  // namespace detail

inline constexpr int kMsSsimMinSize = 16;

// Number of dyadic scales whose coarsest level still fits the window.
inline int ms_ssim_scales(int height, int width, const MsSsimOptions& o = {}) {
  int scales = 1;
  int m = std::min(height, width);
  while (scales < o.max_scales && m / 2 >= o.window) {
    m /= 2;
    ++scales;
  }
  return scales;
}

// Multi-scale SSIM on luma with the standard Gaussian window and exponents.
// Fewer than five scales are used on small images, with the exponents of the
// retained scales renormalised to sum to one. Negative contrast-structure
// terms are clamped to zero before exponentiation.
template <class T>
double ms_ssim(const Image<T>& a, const Image<T>& b, const MsSsimOptions& o = {}) {
  if (!a.same_shape(b)) throw ShapeError("ms_ssim: " + a.shape_string() + " vs " + b.shape_string());
  if (std::min(a.height(), a.width()) < std::max(kMsSsimMinSize, o.window)) {
    throw InvalidArgument("ms_ssim: images must be at least " + std::to_string(std::max(kMsSsimMinSize, o.window)) +
                          " pixels on each side, got " + std::to_string(a.height()) + "x" + std::to_string(a.width()));
  }
  std::vector<double> k(o.window);
  double ks = 0.0;
  for (int i = 0; i < o.window; ++i) {
    const double d = i - (o.window - 1) / 2.0;
    k[i] = std::exp(-d * d / (2 * o.sigma * o.sigma));
    ks += k[i];
  }
  for (auto& v : k) v /= ks;
  const int scales = ms_ssim_scales(a.height(), a.width(), o);
  double wsum = 0.0;
  for (int s = 0; s < scales; ++s) wsum += kMsSsimWeights[s];
  Planar<double> pa = to_luma(a).template cast<double>();
  Planar<double> pb = to_luma(b).template cast<double>();
  double score = 1.0;
  for (int s = 0; s < scales; ++s) {
    const auto [l, cs] = detail::ssim_terms(pa, pb, k, o);
    const double w = kMsSsimWeights[s] / wsum;
    score *= std::pow(std::max(cs, 0.0), w);
    if (s == scales - 1) score *= std::pow(std::max(l, 0.0), w);
    if (s + 1 < scales) {
      pa = detail::downsample2(pa);
      pb = detail::downsample2(pb);
    }
  }
  return score;
}

// Mean L1 between the source Sobel map warped by flow and the target Sobel
// map, over (masked) pixels and both gradient channels.
template <class T>
double gradient_alignment(const Image<T>& source, const Image<T>& target, const FlowField<T>& flow,
                          const Mask* mask = nullptr) {
  require_same_extent(source, target, "gradient_alignment");
  require_same_extent(source, flow, "gradient_alignment");
  if (mask && mask->size() != flow.plane_size()) throw ShapeError("gradient_alignment: mask size mismatch");
  const Planar<T> warped = warp(Planar<T>(sobel_gradients(source)), flow);
  const GradientMap<T> gt = sobel_gradients(target);
  double s = 0.0;
  std::size_t n = 0;
  for (int c = 0; c < 2; ++c) {
    for (std::size_t k = 0; k < gt.plane_size(); ++k) {
      if (mask && !(*mask)[k]) continue;
      s += std::abs(double(warped.plane(c)[k]) - double(gt.plane(c)[k]));
      ++n;
    }
  }
  if (n == 0) throw InvalidArgument("gradient_alignment: mask selects no pixels");
  return s / double(n);
}

struct ImageEvalReport {
  double ms_ssim = 0.0;
  double gradient_l1 = 0.0;
};

inline void to_json(nlohmann::json& j, const ImageEvalReport& r) {
  j = {{"ms_ssim", r.ms_ssim}, {"gradient_l1", r.gradient_l1}};
}

// Scores the source warped by flow against the target.
template <class T>
ImageEvalReport evaluate_image(const Image<T>& source, const Image<T>& target, const FlowField<T>& flow) {
  ImageEvalReport r;
  r.ms_ssim = ms_ssim(warp(source, flow), target);
  r.gradient_l1 = gradient_alignment(source, target, flow);
  return r;
}

}  // namespace docalign
