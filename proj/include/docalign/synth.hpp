#pragma once

#include <Eigen/Dense>
#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "docalign/filter.hpp"
#include "docalign/io.hpp"
#include "docalign/rng.hpp"
#include "docalign/sampling.hpp"
#include "json.hpp"

namespace docalign {

using Range = std::array<double, 2>;

struct ShadingParams {
  double noise_amplitude = 0.6;  // base field spans [1 - amplitude, 1]
  int noise_lattice = 4;         // coarse lattice size of the low-frequency field
  int max_shadows = 2;           // 0..max_shadows soft linear ramps
  Range shadow_darkness{0.1, 0.4};
  Range shadow_width{0.25, 0.5};  // ramp width as a fraction of the canvas
  double color_shift = 0.1;       // per-channel gain in [1 - shift, 1 + shift]
};

struct DegradeParams {
  double blur_prob = 0.5;
  std::vector<int> blur_kernels{3, 5};
  double noise_prob = 0.5;
  Range noise_sigma{0.0, 0.02};
  double jpeg_prob = 0.5;
  std::array<int, 2> jpeg_quality{50, 95};
};

struct SynthParams {
  int canvas = 1024;
  Range raw_range{-4096, 4096};
  int kernel = 91;  // mean filter size, applied twice
  Range translation{-50, 50};
  Range scaling{-0.05, 0.2};
  double center = 512;
  ShadingParams shading;
  DegradeParams degrade;
  std::uint64_t seed = 0;

  // Defaults rescaled to an n x n canvas: lengths scale with s = n / 1024,
  // the raw displacement range with s^2 (the double box filter divides the
  // raw amplitude by a factor proportional to the kernel length), the
  // kernel to the nearest odd integer. Scaling factors are dimensionless.
  static SynthParams scaled(int n) {
    SynthParams p;
    const double s = n / 1024.0;
    p.canvas = n;
    p.raw_range = {-4096 * s * s, 4096 * s * s};
    p.kernel = std::max(1, 2 * static_cast<int>(std::floor(91 * s / 2.0)) + 1);
    if (std::abs(p.kernel + 2 - 91 * s) < std::abs(p.kernel - 91 * s)) p.kernel += 2;
    p.translation = {-50 * s, 50 * s};
    p.center = n / 2.0;
    return p;
  }

  void validate() const {
    const auto ordered = [](const Range& r, const char* what) {
      if (!(r[0] <= r[1]) || !std::isfinite(r[0]) || !std::isfinite(r[1])) {
        throw InvalidArgument(std::string("synth params: ") + what + " range must be finite and ordered");
      }
    };
    if (canvas < 8) throw InvalidArgument("synth params: canvas must be at least 8");
    if (kernel < 1 || kernel % 2 == 0) throw InvalidArgument("synth params: kernel must be odd and >= 1");
    if (center != canvas / 2.0) throw InvalidArgument("synth params: center must equal canvas / 2");
    ordered(raw_range, "raw displacement");
    ordered(translation, "translation");
    ordered(scaling, "scaling");
    ordered(shading.shadow_darkness, "shadow darkness");
    ordered(shading.shadow_width, "shadow width");
    ordered(degrade.noise_sigma, "noise sigma");
    if (degrade.jpeg_quality[0] > degrade.jpeg_quality[1] || degrade.jpeg_quality[0] < 1 || degrade.jpeg_quality[1] > 100) {
      throw InvalidArgument("synth params: JPEG quality range must be ordered within [1, 100]");
    }
    for (double p : {degrade.blur_prob, degrade.noise_prob, degrade.jpeg_prob}) {
      if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("synth params: probabilities must lie in [0, 1]");
    }
    for (int k : degrade.blur_kernels) {
      if (k < 1 || k % 2 == 0) throw InvalidArgument("synth params: blur kernels must be odd");
    }
    if (degrade.blur_prob > 0 && degrade.blur_kernels.empty()) throw InvalidArgument("synth params: no blur kernels");
    if (shading.noise_amplitude < 0 || shading.noise_amplitude >= 1) {
      throw InvalidArgument("synth params: shading noise amplitude must lie in [0, 1)");
    }
    if (shading.noise_lattice < 2 || shading.max_shadows < 0 || shading.color_shift < 0 || shading.color_shift >= 1) {
      throw InvalidArgument("synth params: invalid shading parameters");
    }
  }
};

inline void to_json(nlohmann::json& j, const ShadingParams& p) {
  j = {{"noise_amplitude", p.noise_amplitude}, {"noise_lattice", p.noise_lattice},
       {"max_shadows", p.max_shadows},         {"shadow_darkness", p.shadow_darkness},
       {"shadow_width", p.shadow_width},       {"color_shift", p.color_shift}};
}
inline void from_json(const nlohmann::json& j, ShadingParams& p) {
  ShadingParams d;
  p.noise_amplitude = j.value("noise_amplitude", d.noise_amplitude);
  p.noise_lattice = j.value("noise_lattice", d.noise_lattice);
  p.max_shadows = j.value("max_shadows", d.max_shadows);
  p.shadow_darkness = j.value("shadow_darkness", d.shadow_darkness);
  p.shadow_width = j.value("shadow_width", d.shadow_width);
  p.color_shift = j.value("color_shift", d.color_shift);
}
inline void to_json(nlohmann::json& j, const DegradeParams& p) {
  j = {{"blur_prob", p.blur_prob},   {"blur_kernels", p.blur_kernels}, {"noise_prob", p.noise_prob},
       {"noise_sigma", p.noise_sigma}, {"jpeg_prob", p.jpeg_prob},     {"jpeg_quality", p.jpeg_quality}};
}
inline void from_json(const nlohmann::json& j, DegradeParams& p) {
  DegradeParams d;
  p.blur_prob = j.value("blur_prob", d.blur_prob);
  p.blur_kernels = j.value("blur_kernels", d.blur_kernels);
  p.noise_prob = j.value("noise_prob", d.noise_prob);
  p.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  p.jpeg_prob = j.value("jpeg_prob", d.jpeg_prob);
  p.jpeg_quality = j.value("jpeg_quality", d.jpeg_quality);
}
inline void to_json(nlohmann::json& j, const SynthParams& p) {
  j = {{"canvas", p.canvas},       {"raw_range", p.raw_range}, {"kernel", p.kernel},
       {"translation", p.translation}, {"scaling", p.scaling},   {"center", p.center},
       {"shading", p.shading},     {"degrade", p.degrade},     {"seed", p.seed}};
}
// Missing keys fall back to the defaults scaled to the given canvas.
inline void from_json(const nlohmann::json& j, SynthParams& p) {
  const SynthParams d = SynthParams::scaled(j.value("canvas", 1024));
  p.canvas = d.canvas;
  p.raw_range = j.value("raw_range", d.raw_range);
  p.kernel = j.value("kernel", d.kernel);
  p.translation = j.value("translation", d.translation);
  p.scaling = j.value("scaling", d.scaling);
  p.center = j.value("center", d.center);
  p.shading = j.value("shading", d.shading);
  p.degrade = j.value("degrade", d.degrade);
  p.seed = j.value("seed", d.seed);
}

inline std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

// Hash of the canonical (key-sorted, compact) JSON form.
inline std::string params_sha256(const SynthParams& p) { return sha256_hex(nlohmann::json(p).dump()); }

// ---------------------------------------------------------------------------
// Geometry

struct FlowComponents {
  FlowField<double> local;  // doubly mean-filtered i.i.d. displacements
  double tx = 0, ty = 0;    // translation
  double sx = 0, sy = 0;    // scaling about the centre
  FlowField<double> total;  // local + translation + (p - centre) * scaling
};

inline FlowComponents random_flow_components(const SynthParams& p, std::uint64_t seed) {
  p.validate();
  const int n = p.canvas;
  Rng rng(seed);
  FlowComponents fc;
  // The noise extends past the canvas by the support of both filter passes
  // so the crop never sees replicated border samples, which would otherwise
  // dominate the average near the edges and steepen the field there.
  const int pad = 2 * (p.kernel / 2);
  const int m = n + 2 * pad;
  FlowField<double> raw(m, m);
  for (int y = 0; y < m; ++y) {
    for (int x = 0; x < m; ++x) {
      raw.x(y, x) = rng.uniform(p.raw_range[0], p.raw_range[1]);
      raw.y(y, x) = rng.uniform(p.raw_range[0], p.raw_range[1]);
    }
  }
  const Planar<double> smooth = mean_filter<double>(mean_filter<double>(raw, p.kernel), p.kernel);
  fc.local = FlowField<double>(n, n);
  for (int c = 0; c < 2; ++c) {
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) fc.local(c, y, x) = smooth(c, y + pad, x + pad);
    }
  }
  fc.tx = rng.uniform(p.translation[0], p.translation[1]);
  fc.ty = rng.uniform(p.translation[0], p.translation[1]);
  fc.sx = rng.uniform(p.scaling[0], p.scaling[1]);
  fc.sy = rng.uniform(p.scaling[0], p.scaling[1]);
  fc.total = fc.local;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      fc.total.x(y, x) += fc.tx + (x - p.center) * fc.sx;
      fc.total.y(y, x) += fc.ty + (y - p.center) * fc.sy;
    }
  }
  return fc;
}

// Sampling field used to distort a clean page: photo = warp_clean(clean, f).
inline FlowField<float> random_flow(const SynthParams& p, std::uint64_t seed) {
  return random_flow_components(p, seed).total.cast<float>();
}

// Backward warp with white outside the source. Computed in double so that
// shifting by -1 and back is exact for float pixels.
template <class T>
Image<T> warp_clean(const Image<T>& clean, const FlowField<T>& flow) {
  Planar<double> shifted = clean.template cast<double>();
  for (auto& v : shifted.data()) v -= 1.0;
  Planar<double> out = warp(shifted, flow.template cast<double>(), Padding::kZero);
  for (auto& v : out.data()) v += 1.0;
  return Image<T>(out.template cast<T>());
}

// ---------------------------------------------------------------------------
// Photometry

// Multiplicative illumination map with three channels, values in (0, 1.2].
inline Image<float> random_shading(const SynthParams& p, std::uint64_t seed) {
  p.validate();
  const ShadingParams& s = p.shading;
  const int n = p.canvas;
  Rng rng(seed);
  Planar<double> base(1, n, n, 1.0);
  if (s.noise_amplitude > 0) {
    const int m = s.noise_lattice;
    Planar<double> lattice(1, m, m);
    for (auto& v : lattice.data()) v = rng.uniform();
    const auto [lo, hi] = std::minmax_element(lattice.data().begin(), lattice.data().end());
    const double l = *lo, range = std::max(*hi - *lo, 1e-12);
    for (auto& v : lattice.data()) v = (v - l) / range;
    const Planar<double> u = resize_bilinear(lattice, n, n);
    for (std::size_t k = 0; k < base.size(); ++k) base.data()[k] = 1.0 - s.noise_amplitude * u.data()[k];
  }
  const int shadows = s.max_shadows > 0 ? rng.uniform_int(0, s.max_shadows) : 0;
  for (int i = 0; i < shadows; ++i) {
    const double theta = rng.uniform(0, 2 * 3.14159265358979323846);
    const double nx = std::cos(theta), ny = std::sin(theta);
    const double offset = rng.uniform(-0.3, 0.3) * n;
    const double width = rng.uniform(s.shadow_width[0], s.shadow_width[1]) * n;
    const double dark = rng.uniform(s.shadow_darkness[0], s.shadow_darkness[1]);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const double d = (x - n / 2.0) * nx + (y - n / 2.0) * ny - offset;
        const double t = std::clamp(d / width + 0.5, 0.0, 1.0);
        base(0, y, x) *= 1.0 - dark * t * t * (3 - 2 * t);
      }
    }
  }
  Image<float> out(3, n, n);
  for (int c = 0; c < 3; ++c) {
    const double gain = s.color_shift > 0 ? rng.uniform(1 - s.color_shift, 1 + s.color_shift) : 1.0;
    for (std::size_t k = 0; k < out.plane_size(); ++k) {
      out.plane(c)[k] = static_cast<float>(std::clamp(base.data()[k] * gain, 1e-3, 1.2));
    }
  }
  return out;
}

// I = R (Hadamard) S, clipped to [0, 1]. A 1-channel shading is broadcast.
inline Image<float> compose_shading(const Image<float>& reflectance, const Image<float>& shading) {
  require_same_extent(reflectance, shading, "compose_shading");
  if (shading.channels() != 1 && shading.channels() != reflectance.channels()) {
    throw ShapeError("compose_shading: shading has " + std::to_string(shading.channels()) +
                     " channels, reflectance " + std::to_string(reflectance.channels()));
  }
  const int channels = std::max(reflectance.channels(), shading.channels());
  Image<float> out(channels, reflectance.height(), reflectance.width());
  for (int c = 0; c < channels; ++c) {
    const auto r = reflectance.plane(reflectance.channels() == 1 ? 0 : c);
    const auto s = shading.plane(shading.channels() == 1 ? 0 : c);
    auto o = out.plane(c);
    for (std::size_t k = 0; k < o.size(); ++k) o[k] = std::clamp(r[k] * s[k], 0.0f, 1.0f);
  }
  return out;
}

struct Degraded {
  Image<float> image;
  std::optional<Bytes> jpeg;  // encoded bytes when the JPEG stage ran
};

// Optional blur, additive noise and JPEG round trip, in that order.
inline Degraded degrade(const Image<float>& image, const DegradeParams& p, std::uint64_t seed) {
  Rng rng(seed);
  Degraded out{image, std::nullopt};
  if (rng.bernoulli(p.blur_prob)) {
    const int k = p.blur_kernels[rng.uniform_int(0, static_cast<int>(p.blur_kernels.size()) - 1)];
    out.image = gaussian_blur(out.image, k);
  }
  if (rng.bernoulli(p.noise_prob)) {
    const double sigma = rng.uniform(p.noise_sigma[0], p.noise_sigma[1]);
    for (auto& v : out.image.data()) v = std::clamp(static_cast<float>(v + sigma * rng.normal()), 0.0f, 1.0f);
  }
  if (rng.bernoulli(p.jpeg_prob)) {
    const int q = rng.uniform_int(p.jpeg_quality[0], p.jpeg_quality[1]);
    out.jpeg = encode_jpeg(out.image, q);
    out.image = decode_jpeg(*out.jpeg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Procedural pages

namespace detail {

// Box-filtered rectangle fill: each pixel is blended by its exact area
// coverage of [x0, x1) x [y0, y1).
inline void fill_rect(Image<float>& img, double x0, double y0, double x1, double y1, const std::array<float, 3>& color,
                      float alpha = 1.0f) {
  const int w = img.width(), h = img.height();
  const int jx0 = std::max(0, int(std::floor(x0))), jx1 = std::min(w - 1, int(std::ceil(x1)) - 1);
  const int iy0 = std::max(0, int(std::floor(y0))), iy1 = std::min(h - 1, int(std::ceil(y1)) - 1);
  for (int i = iy0; i <= iy1; ++i) {
    const double cy = std::min(y1, i + 1.0) - std::max(y0, double(i));
    if (cy <= 0) continue;
    for (int j = jx0; j <= jx1; ++j) {
      const double cx = std::min(x1, j + 1.0) - std::max(x0, double(j));
      if (cx <= 0) continue;
      const float a = static_cast<float>(cx * cy) * alpha;
      for (int c = 0; c < img.channels(); ++c) img(c, i, j) = img(c, i, j) * (1 - a) + color[c] * a;
    }
  }
}

inline std::array<float, 3> ink(Rng& rng) {
  const float v = static_cast<float>(rng.uniform(0.02, 0.2));
  return {v, v, v};
}

inline std::array<float, 3> accent(Rng& rng) {
  return {static_cast<float>(rng.uniform(0.1, 0.9)), static_cast<float>(rng.uniform(0.1, 0.9)),
          static_cast<float>(rng.uniform(0.1, 0.9))};
}

// One line of pseudo-text: glyph-sized bars of two heights grouped in words.
inline void text_line(Image<float>& img, Rng& rng, double x0, double x1, double y, double size,
                      const std::array<float, 3>& color) {
  double x = x0;
  const double end = x0 + (x1 - x0) * (rng.bernoulli(0.2) ? rng.uniform(0.4, 0.9) : 1.0);
  while (x < end) {
    const int glyphs = rng.uniform_int(2, 9);
    for (int g = 0; g < glyphs && x < end; ++g) {
      const double gw = size * rng.uniform(0.35, 0.6);
      const double gh = size * (rng.bernoulli(0.3) ? 0.75 : 0.5);
      fill_rect(img, x, y + size * 0.75 - gh, std::min(x + gw, end), y + size * 0.75, color);
      x += gw + size * 0.12;
    }
    x += size * 0.45;
  }
}

}  // namespace detail

// Synthetic page: title, paragraphs in one or two columns, figures and
// ruled tables on white. Feature sizes scale with the canvas, with a floor
// so small canvases keep legible structure.
inline Image<float> render_document(int n, std::uint64_t seed) {
  if (n < 8) throw InvalidArgument("render_document: canvas must be at least 8");
  Rng rng(seed);
  Image<float> img(3, n, n, 1.0f);
  const double margin = n * rng.uniform(0.05, 0.1);
  const double size = std::max(2.0, n * rng.uniform(0.012, 0.02));
  const double left = margin, right = n - margin;
  double y = margin;
  // Title.
  {
    const double ts = size * rng.uniform(1.6, 2.4);
    const auto color = rng.bernoulli(0.5) ? detail::accent(rng) : detail::ink(rng);
    const double w = (right - left) * rng.uniform(0.4, 0.8);
    const double x0 = rng.bernoulli(0.5) ? left : (n - w) / 2;
    detail::text_line(img, rng, x0, x0 + w, y, ts, color);
    y += ts * 1.8;
  }
  const int columns = rng.bernoulli(0.4) ? 2 : 1;
  const double gutter = size * 2;
  const double col_w = (right - left - (columns - 1) * gutter) / columns;
  const double top = y;
  for (int col = 0; col < columns; ++col) {
    const double cx0 = left + col * (col_w + gutter), cx1 = cx0 + col_w;
    y = top;
    while (y < n - margin - size * 2) {
      const double u = rng.uniform();
      if (u < 0.6) {
        // Paragraph.
        const int lines = rng.uniform_int(2, 7);
        const auto color = detail::ink(rng);
        for (int l = 0; l < lines && y < n - margin - size; ++l) {
          detail::text_line(img, rng, cx0 + (l == 0 ? size * 1.5 : 0), cx1, y, size, color);
          y += size * rng.uniform(1.4, 1.8);
        }
        y += size;
      } else if (u < 0.8) {
        // Figure: tinted box with a darker frame and inner marks.
        const double fh = std::min(n - margin - y, col_w * rng.uniform(0.3, 0.6));
        if (fh < size * 3) break;
        const double fw = col_w * rng.uniform(0.5, 1.0);
        const double fx = cx0 + (col_w - fw) / 2;
        auto color = detail::accent(rng);
        for (auto& v : color) v = 0.5f + 0.5f * v;
        detail::fill_rect(img, fx, y, fx + fw, y + fh, color);
        const double t = std::max(1.0, size * 0.15);
        const auto frame = detail::ink(rng);
        detail::fill_rect(img, fx, y, fx + fw, y + t, frame);
        detail::fill_rect(img, fx, y + fh - t, fx + fw, y + fh, frame);
        detail::fill_rect(img, fx, y, fx + t, y + fh, frame);
        detail::fill_rect(img, fx + fw - t, y, fx + fw, y + fh, frame);
        const int marks = rng.uniform_int(2, 6);
        for (int m = 0; m < marks; ++m) {
          const double mw = fw * rng.uniform(0.1, 0.3), mh = fh * rng.uniform(0.1, 0.4);
          const double mx = fx + rng.uniform(0, fw - mw), my = y + rng.uniform(0, fh - mh);
          detail::fill_rect(img, mx, my, mx + mw, my + mh, detail::accent(rng), 0.8f);
        }
        y += fh + size * 1.5;
      } else {
        // Table with ruled cells and short entries.
        const int rows = rng.uniform_int(2, 6), cols = rng.uniform_int(2, 5);
        const double rh = size * 1.8;
        if (y + rows * rh > n - margin) break;
        const double t = std::max(0.6, size * 0.1);
        const auto color = detail::ink(rng);
        for (int r = 0; r <= rows; ++r) detail::fill_rect(img, cx0, y + r * rh, cx1, y + r * rh + t, color);
        for (int c = 0; c <= cols; ++c) {
          const double x = cx0 + (col_w - t) * c / cols;
          detail::fill_rect(img, x, y, x + t, y + rows * rh + t, color);
        }
        for (int r = 0; r < rows; ++r) {
          for (int c = 0; c < cols; ++c) {
            const double x = cx0 + (col_w - t) * c / cols + size * 0.4;
            detail::text_line(img, rng, x, x + (col_w / cols - size) * rng.uniform(0.3, 0.9), y + r * rh + size * 0.4,
                              size * 0.8, color);
          }
        }
        y += rows * rh + size * 1.5;
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Triplets and datasets

struct Triplet {
  Image<float> clean;      // target
  Image<float> distorted;  // geometrically distorted clean page, before shading
  Image<float> photo;      // source: distorted, shaded, degraded
  std::optional<Bytes> photo_jpeg;
  FlowField<float> flow;   // on the clean grid: warp(photo, flow) ~ clean
  FlowField<float> sampling;  // the generator's distortion field
  std::uint64_t seed = 0;
  SynthParams params;
};

// Stage seeds derived from one triplet seed.
enum class SynthStage : std::uint64_t { kDocument = 0, kFlow = 1, kShading = 2, kDegrade = 3, kSource = 4 };

inline std::uint64_t stage_seed(std::uint64_t seed, SynthStage s) {
  return derive_seed(seed, static_cast<std::uint64_t>(s));
}

// Resizes an arbitrary page to the canvas and converts it to RGB.
inline Image<float> fit_page(const Image<float>& page, int n) {
  Planar<float> r = resize_bilinear<float>(page, n, n);
  if (r.channels() == 3) return Image<float>(std::move(r));
  Image<float> rgb(3, n, n);
  for (int c = 0; c < 3; ++c) std::copy(r.plane(0).begin(), r.plane(0).end(), rgb.plane(c).begin());
  return rgb;
}

inline Triplet make_triplet(const SynthParams& p, std::uint64_t seed, const Image<float>* source = nullptr) {
  p.validate();
  Triplet t;
  t.seed = seed;
  t.params = p;
  t.clean = source ? fit_page(*source, p.canvas) : render_document(p.canvas, stage_seed(seed, SynthStage::kDocument));
  const auto fc = random_flow_components(p, stage_seed(seed, SynthStage::kFlow));
  t.sampling = fc.total.cast<float>();
  t.distorted = warp_clean(t.clean, t.sampling);
  t.flow = invert_flow(fc.total).cast<float>();
  const Image<float> shaded = compose_shading(t.distorted, random_shading(p, stage_seed(seed, SynthStage::kShading)));
  Degraded d = degrade(shaded, p.degrade, stage_seed(seed, SynthStage::kDegrade));
  t.photo = std::move(d.image);
  t.photo_jpeg = std::move(d.jpeg);
  return t;
}

// Pixels whose correspondence x + flow(x) falls inside the photo.
inline std::vector<std::uint8_t> valid_mask(const FlowField<float>& flow) {
  std::vector<std::uint8_t> mask(flow.plane_size());
  const int h = flow.height(), w = flow.width();
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double x = j + flow.x(i, j), y = i + flow.y(i, j);
      mask[std::size_t(i) * w + j] = x >= 0 && y >= 0 && x <= w - 1 && y <= h - 1;
    }
  }
  return mask;
}

// Pixels whose clean neighbourhood of the given radius is flat in every
// channel (range below 1/255): background and solid fills, no glyph edges.
inline std::vector<std::uint8_t> flat_mask(const Image<float>& clean, int radius = 1) {
  const int h = clean.height(), w = clean.width();
  std::vector<std::uint8_t> mask(clean.plane_size(), 1);
  for (int c = 0; c < clean.channels(); ++c) {
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        float lo = clean(c, i, j), hi = lo;
        for (int dy = -radius; dy <= radius; ++dy) {
          for (int dx = -radius; dx <= radius; ++dx) {
            const float v = clean(c, std::clamp(i + dy, 0, h - 1), std::clamp(j + dx, 0, w - 1));
            lo = std::min(lo, v);
            hi = std::max(hi, v);
          }
        }
        if (hi - lo >= 1.0f / 255.0f) mask[std::size_t(i) * w + j] = 0;
      }
    }
  }
  return mask;
}

// Mean |warp(distorted, flow) - clean| over pixels that map inside the photo
// and lie in text-free regions of the clean page. Two bilinear resamplings
// blur glyph edges by design, so those are excluded.
inline double reconstruction_error(const Triplet& t) {
  const Image<float> back = warp(t.distorted, t.flow);
  auto mask = valid_mask(t.flow);
  const auto flat = flat_mask(t.clean);
  for (std::size_t k = 0; k < mask.size(); ++k) mask[k] = mask[k] && flat[k];
  double acc = 0.0;
  std::size_t n = 0;
  for (int c = 0; c < back.channels(); ++c) {
    for (std::size_t k = 0; k < back.plane_size(); ++k) {
      if (!mask[k]) continue;
      acc += std::abs(double(back.plane(c)[k]) - double(t.clean.plane(c)[k]));
      ++n;
    }
  }
  return n ? acc / double(n) : 0.0;
}

struct ManifestRecord {
  std::string id;
  std::string clean, photo, flow;  // paths relative to the dataset root
  std::uint64_t seed = 0;
  std::string params_sha256;
};

inline void to_json(nlohmann::json& j, const ManifestRecord& r) {
  j = {{"id", r.id}, {"clean", r.clean}, {"photo", r.photo}, {"flow", r.flow}, {"seed", r.seed},
       {"params_sha256", r.params_sha256}};
}

inline ManifestRecord manifest_record_from_json(const nlohmann::json& j, const std::string& where) {
  ManifestRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.clean = j.at("clean").get<std::string>();
    r.photo = j.at("photo").get<std::string>();
    r.flow = j.at("flow").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.params_sha256 = j.value("params_sha256", "");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where + ": " + e.what());
  }
  return r;
}

inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + ": " + e.what());
    }
    out.push_back(manifest_record_from_json(j, where));
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::string text;
  for (const auto& r : records) text += nlohmann::json(r).dump() + "\n";
  write_bytes(path, Bytes(text.begin(), text.end()));
}

inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("source directory not found: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no PNG or JPEG pages in " + dir.string());
  return out;
}

struct DatasetOptions {
  int count = 0;
  std::string split = "train";
  std::optional<std::filesystem::path> sources;  // pre-rendered clean pages
  bool resume = true;
};

// Writes clean/, photo/, flow/ and manifest.jsonl under out_dir. Triplet i
// uses seed derive_seed(params.seed, i), so any subset can be regenerated
// independently; with resume, records whose files exist and whose params
// hash matches are kept as they are.
inline std::vector<ManifestRecord> generate_dataset(const SynthParams& params, const std::filesystem::path& out_dir,
                                                    const DatasetOptions& opt) {
  params.validate();
  if (opt.count < 0) throw InvalidArgument("count must be non-negative");
  std::vector<std::filesystem::path> sources;
  if (opt.sources) sources = list_images(*opt.sources);
  const std::string hash = params_sha256(params);
  const auto manifest_path = out_dir / "manifest.jsonl";
  std::map<std::string, ManifestRecord> existing;
  if (opt.resume && std::filesystem::exists(manifest_path)) {
    for (auto& r : read_manifest(manifest_path)) existing[r.id] = r;
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<ManifestRecord> records;
  for (int i = 0; i < opt.count; ++i) {
    char id[64];
    std::snprintf(id, sizeof id, "%s_%06d", opt.split.c_str(), i);
    const std::uint64_t seed = derive_seed(params.seed, static_cast<std::uint64_t>(i));
    const auto it = existing.find(id);
    if (it != existing.end() && it->second.seed == seed && it->second.params_sha256 == hash &&
        std::filesystem::exists(out_dir / it->second.clean) && std::filesystem::exists(out_dir / it->second.photo) &&
        std::filesystem::exists(out_dir / it->second.flow)) {
      records.push_back(it->second);
      continue;
    }
    std::optional<Image<float>> page;
    if (!sources.empty()) {
      Rng pick(stage_seed(seed, SynthStage::kSource));
      const auto& path = sources[pick.uniform_int(0, static_cast<int>(sources.size()) - 1)];
      page = read_image(path);
    }
    const Triplet t = make_triplet(params, seed, page ? &*page : nullptr);
    ManifestRecord r;
    r.id = id;
    r.seed = seed;
    r.params_sha256 = hash;
    r.clean = "clean/" + r.id + ".png";
    r.flow = "flow/" + r.id + ".dafl";
    write_png(t.clean, out_dir / r.clean);
    if (t.photo_jpeg) {
      r.photo = "photo/" + r.id + ".jpg";
      write_bytes(out_dir / r.photo, *t.photo_jpeg);
    } else {
      r.photo = "photo/" + r.id + ".png";
      write_png(t.photo, out_dir / r.photo);
    }
    write_flow(t.flow, out_dir / r.flow);
    records.push_back(r);
  }
  write_manifest(manifest_path, records);
  return records;
}

// 3x3 projective map sending from[i] to to[i] for four point pairs.
inline std::array<double, 9> homography(const std::array<Point, 4>& from, const std::array<Point, 4>& to) {
  Eigen::Matrix<double, 8, 8> A;
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    const double x = from[i].x, y = from[i].y, u = to[i].x, v = to[i].y;
    A.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
    A.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
    b(2 * i) = u;
    b(2 * i + 1) = v;
  }
  Eigen::FullPivLU<Eigen::Matrix<double, 8, 8>> lu(A);
  if (!lu.isInvertible()) throw InvalidArgument("homography: degenerate quadrilateral");
  const Eigen::Matrix<double, 8, 1> h = lu.solve(b);
  return {h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0};
}

inline Point apply_homography(const std::array<double, 9>& h, Point p) {
  const double w = h[6] * p.x + h[7] * p.y + h[8];
  return {(h[0] * p.x + h[1] * p.y + h[2]) / w, (h[3] * p.x + h[4] * p.y + h[5]) / w};
}

struct Composite {
  Image<float> photo;
  std::vector<std::uint8_t> mask;  // pixels whose centre falls on the page
  std::array<double, 9> canvas_to_page{};
};

// Projects page onto the quadrilateral quad (top-left, top-right,
// bottom-right, bottom-left corners in canvas pixels) over a dark noisy
// background.
inline Composite composite_document(const Image<float>& page, const std::array<Point, 4>& quad, int height, int width,
                                    double background, std::uint64_t seed) {
  const double pw = page.width(), ph = page.height();
  const std::array<Point, 4> corners{Point{-0.5, -0.5}, Point{pw - 0.5, -0.5}, Point{pw - 0.5, ph - 0.5},
                                     Point{-0.5, ph - 0.5}};
  Composite c;
  c.canvas_to_page = homography(quad, corners);
  c.photo = Image<float>(page.channels(), height, width);
  c.mask.assign(std::size_t(height) * width, 0);
  Rng rng(seed);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Point q = apply_homography(c.canvas_to_page, {double(x), double(y)});
      const bool in = q.x >= -0.5 && q.x < pw - 0.5 && q.y >= -0.5 && q.y < ph - 0.5;
      const double noise = 0.02 * rng.normal();
      c.mask[std::size_t(y) * width + x] = in;
      for (int ch = 0; ch < page.channels(); ++ch) {
        const double v = in ? double(sample_bilinear<float>(page, ch, float(q.x), float(q.y))) : background + noise;
        c.photo(ch, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return c;
}

}  // namespace docalign
