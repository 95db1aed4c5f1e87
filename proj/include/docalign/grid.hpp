#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "docalign/error.hpp"

namespace docalign {

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
  friend Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
  friend Point operator*(double s, Point a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Point a, Point b) = default;
};

inline double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

// Channel-planar raster: element (c, y, x) lives at data[(c * H + y) * W + x].
// Every pixel-valued type in the library (images, flows, feature maps) is a
// Planar with a fixed channel meaning.
template <class T>
class Planar {
 public:
  using value_type = T;

  Planar() = default;
  Planar(int channels, int height, int width, T fill = T{0})
      : c_(channels), h_(height), w_(width) {
    if (channels < 1 || height < 1 || width < 1) {
      throw ShapeError("raster dimensions must be positive, got " + shape_string(channels, height, width));
    }
    data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
  }

  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t plane_size() const { return static_cast<std::size_t>(h_) * w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int c, int y, int x) { return data_[index(c, y, x)]; }
  const T& operator()(int c, int y, int x) const { return data_[index(c, y, x)]; }

  std::span<T> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
  std::span<const T> plane(int c) const { return {data_.data() + c * plane_size(), plane_size()}; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool same_shape(const Planar& other) const {
    return c_ == other.c_ && h_ == other.h_ && w_ == other.w_;
  }
  bool same_extent(int height, int width) const { return h_ == height && w_ == width; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
  }

  std::string shape_string() const { return shape_string(c_, h_, w_); }

  template <class U>
  Planar<U> cast() const {
    Planar<U> out(c_, h_, w_);
    std::transform(data_.begin(), data_.end(), out.data().begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Planar& a, const Planar& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 protected:
  static std::string shape_string(int c, int h, int w) {
    return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
  }

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * h_ + y) * w_ + x;
  }

  int c_ = 0;
  int h_ = 0;
  int w_ = 0;
  std::vector<T> data_;
};

// Intensities in [0, 1], one (gray) or three (RGB) channels.
template <class T = float>
class Image : public Planar<T> {
 public:
  Image() = default;
  Image(int channels, int height, int width, T fill = T{0}) : Planar<T>(channels, height, width, fill) {
    check_channels(channels);
  }
  explicit Image(Planar<T> raster) : Planar<T>(std::move(raster)) { check_channels(this->channels()); }

  template <class U>
  Image<U> cast() const {
    return Image<U>(Planar<T>::template cast<U>());
  }

 private:
  static void check_channels(int c) {
    if (c != 1 && c != 3) throw ShapeError("image must have 1 or 3 channels, got " + std::to_string(c));
  }
};

// Two-channel raster of absolute or relative 2-D vectors: channel 0 is x
// (column direction), channel 1 is y (row direction).
template <class T>
class VectorField : public Planar<T> {
 public:
  VectorField() = default;
  VectorField(int height, int width, T fill = T{0}) : Planar<T>(2, height, width, fill) {}
  explicit VectorField(Planar<T> raster) : Planar<T>(std::move(raster)) {
    if (this->channels() != 2) {
      throw ShapeError("vector field needs 2 channels, got " + std::to_string(this->channels()));
    }
  }

  T& x(int y, int x) { return (*this)(0, y, x); }
  T& y(int y, int x) { return (*this)(1, y, x); }
  T x(int y, int x) const { return (*this)(0, y, x); }
  T y(int y, int x) const { return (*this)(1, y, x); }
  Point at(int y, int x) const { return {double(this->x(y, x)), double(this->y(y, x))}; }
};

// Per-pixel displacement (dx, dy) on the target grid: target pixel p
// corresponds to source location p + f(p).
template <class T = float>
class FlowField : public VectorField<T> {
 public:
  using VectorField<T>::VectorField;
  explicit FlowField(VectorField<T> field) : VectorField<T>(std::move(field)) {}

  static FlowField constant(int height, int width, T dx, T dy) {
    FlowField f(height, width);
    std::fill(f.plane(0).begin(), f.plane(0).end(), dx);
    std::fill(f.plane(1).begin(), f.plane(1).end(), dy);
    return f;
  }

  template <class U>
  FlowField<U> cast() const {
    return FlowField<U>(Planar<T>::template cast<U>());
  }
};

// Absolute sampling positions; grid(i, j) = (j, i).
template <class T = float>
class CoordGrid : public VectorField<T> {
 public:
  using VectorField<T>::VectorField;

  static CoordGrid identity(int height, int width) {
    CoordGrid g(height, width);
    for (int i = 0; i < height; ++i) {
      for (int j = 0; j < width; ++j) {
        g.x(i, j) = static_cast<T>(j);
        g.y(i, j) = static_cast<T>(i);
      }
    }
    return g;
  }

  // x + f(x) for every grid location.
  static CoordGrid displaced(const FlowField<T>& flow) {
    CoordGrid g(flow.height(), flow.width());
    for (int i = 0; i < flow.height(); ++i) {
      for (int j = 0; j < flow.width(); ++j) {
        g.x(i, j) = static_cast<T>(j) + flow.x(i, j);
        g.y(i, j) = static_cast<T>(i) + flow.y(i, j);
      }
    }
    return g;
  }
};

// Sobel responses: channel 0 = Gx, channel 1 = Gy.
template <class T = float>
class GradientMap : public VectorField<T> {
 public:
  using VectorField<T>::VectorField;
};

inline void require_same_extent(const auto& a, const auto& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError(std::string(what) + ": spatial size mismatch " + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                     std::to_string(b.width()));
  }
}

}  // namespace docalign
