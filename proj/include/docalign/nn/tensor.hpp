#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "docalign/grid.hpp"

namespace docalign::nn {

// Dense row-major tensor. Activations are rank 3 (channels, height, width);
// convolution weights are rank 4 (out, in, k, k).
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T fill = T{0}) : shape_(std::move(shape)) {
    for (int d : shape_) {
      if (d < 0) throw ShapeError("negative tensor dimension");
    }
    data_.assign(count(shape_), fill);
  }

  static Tensor chw(int c, int h, int w, T fill = T{0}) { return Tensor({c, h, w}, fill); }

  static Tensor from_planar(const Planar<T>& p) {
    Tensor t({p.channels(), p.height(), p.width()});
    std::copy(p.data().begin(), p.data().end(), t.data_.begin());
    return t;
  }

  Planar<T> to_planar() const {
    require_rank(3);
    Planar<T> p(shape_[0], shape_[1], shape_[2]);
    std::copy(data_.begin(), data_.end(), p.data().begin());
    return p;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-3 accessors.
  int channels() const { return shape_[0]; }
  int height() const { return shape_[1]; }
  int width() const { return shape_[2]; }
  std::size_t plane_size() const { return std::size_t(shape_[1]) * shape_[2]; }
  T& at(int c, int y, int x) { return data_[(std::size_t(c) * shape_[1] + y) * shape_[2] + x]; }
  T at(int c, int y, int x) const { return data_[(std::size_t(c) * shape_[1] + y) * shape_[2] + x]; }
  T* plane(int c) { return data_.data() + c * plane_size(); }
  const T* plane(int c) const { return data_.data() + c * plane_size(); }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data().begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  std::string shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) s += (i ? "," : "") + std::to_string(shape_[i]);
    return s + "]";
  }

  void require_rank(int r) const {
    if (rank() != r) throw ShapeError("expected rank " + std::to_string(r) + " tensor, got " + shape_string());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

  static std::size_t count(const std::vector<int>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
  }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

}  // namespace docalign::nn
