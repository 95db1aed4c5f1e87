#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "docalign/grid.hpp"

namespace docalign {

namespace detail {

inline int clamp_index(int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

// One-dimensional box average with replicate padding over a strided line.
// Running sums are kept in double.
template <class T>
void box_line(const T* in, T* out, int n, std::ptrdiff_t stride, int radius, std::vector<double>& scratch) {
  scratch.resize(n);
  for (int i = 0; i < n; ++i) scratch[i] = double(in[i * stride]);
  double sum = 0.0;
  for (int k = -radius; k <= radius; ++k) sum += scratch[clamp_index(k, n)];
  const double norm = 1.0 / (2 * radius + 1);
  for (int i = 0; i < n; ++i) {
    out[i * stride] = static_cast<T>(sum * norm);
    sum += scratch[clamp_index(i + radius + 1, n)] - scratch[clamp_index(i - radius, n)];
  }
}

}  // namespace detail

// Box average of odd size `kernel`, per channel, replicate padding.
template <class T>
Planar<T> mean_filter(const Planar<T>& field, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) {
    throw InvalidArgument("mean_filter kernel must be odd and >= 1, got " + std::to_string(kernel));
  }
  if (kernel == 1) return field;
  const int r = kernel / 2;
  const int h = field.height();
  const int w = field.width();
  Planar<T> tmp(field.channels(), h, w);
  Planar<T> out(field.channels(), h, w);
  std::vector<double> scratch;
  for (int c = 0; c < field.channels(); ++c) {
    const T* src = field.plane(c).data();
    T* mid = tmp.plane(c).data();
    T* dst = out.plane(c).data();
    for (int y = 0; y < h; ++y) detail::box_line(src + y * w, mid + y * w, w, 1, r, scratch);
    for (int x = 0; x < w; ++x) detail::box_line(mid + x, dst + x, h, w, r, scratch);
  }
  return out;
}

template <class T>
Image<T> to_luma(const Image<T>& image) {
  if (image.channels() == 1) return image;
  Image<T> out(1, image.height(), image.width());
  const auto r = image.plane(0);
  const auto g = image.plane(1);
  const auto b = image.plane(2);
  auto dst = out.plane(0);
  for (std::size_t k = 0; k < dst.size(); ++k) {
    dst[k] = static_cast<T>(0.299) * r[k] + static_cast<T>(0.587) * g[k] + static_cast<T>(0.114) * b[k];
  }
  return out;
}

// 3x3 Sobel on the luma plane, replicate padding. Kernels are unnormalised:
// Gx = [-1 0 1; -2 0 2; -1 0 1], Gy its transpose.
template <class T>
GradientMap<T> sobel_gradients(const Image<T>& image) {
  const Image<T> gray = to_luma(image);
  const int h = gray.height();
  const int w = gray.width();
  GradientMap<T> out(h, w);
  const auto at = [&](int y, int x) { return gray(0, detail::clamp_index(y, h), detail::clamp_index(x, w)); };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const T gx = (at(y - 1, x + 1) - at(y - 1, x - 1)) + T(2) * (at(y, x + 1) - at(y, x - 1)) +
                   (at(y + 1, x + 1) - at(y + 1, x - 1));
      const T gy = (at(y + 1, x - 1) - at(y - 1, x - 1)) + T(2) * (at(y + 1, x) - at(y - 1, x)) +
                   (at(y + 1, x + 1) - at(y - 1, x + 1));
      out.x(y, x) = gx;
      out.y(y, x) = gy;
    }
  }
  return out;
}

// Separable Gaussian with kernel size `ksize` (odd) and replicate padding.
// sigma <= 0 picks the usual 0.3 * ((k - 1) / 2 - 1) + 0.8.
template <class T>
Planar<T> gaussian_blur(const Planar<T>& field, int ksize, double sigma = 0.0) {
  if (ksize < 1 || ksize % 2 == 0) throw InvalidArgument("gaussian_blur kernel must be odd");
  if (sigma <= 0.0) sigma = 0.3 * ((ksize - 1) * 0.5 - 1.0) + 0.8;
  const int r = ksize / 2;
  std::vector<double> k(ksize);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;

  const int h = field.height();
  const int w = field.width();
  Planar<T> tmp(field.channels(), h, w);
  Planar<T> out(field.channels(), h, w);
  for (int c = 0; c < field.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * field(c, y, detail::clamp_index(x + i, w));
        tmp(c, y, x) = static_cast<T>(acc);
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp(c, detail::clamp_index(y + i, h), x);
        out(c, y, x) = static_cast<T>(acc);
      }
    }
  }
  return out;
}

template <class T>
Image<T> gaussian_blur(const Image<T>& image, int ksize, double sigma = 0.0) {
  return Image<T>(gaussian_blur(static_cast<const Planar<T>&>(image), ksize, sigma));
}

}  // namespace docalign
