#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "docalign/filter.hpp"
#include "docalign/grid.hpp"
#include "docalign/rng.hpp"

namespace docalign::testing {

inline Planar<double> random_planar(int c, int h, int w, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Planar<double> p(c, h, w);
  for (auto& v : p.data()) v = rng.uniform(lo, hi);
  return p;
}

template <class T = float>
Image<T> random_image(int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Image<T> img(c, h, w);
  for (auto& v : img.data()) v = static_cast<T>(rng.uniform());
  return img;
}

// Smooth low-amplitude flow built by box-filtering white noise.
template <class T = float>
FlowField<T> smooth_flow(int h, int w, std::uint64_t seed, double amplitude, int kernel) {
  Rng rng(seed);
  Planar<T> noise(2, h, w);
  for (auto& v : noise.data()) v = static_cast<T>(rng.uniform(-amplitude, amplitude));
  return FlowField<T>(mean_filter(mean_filter(noise, kernel), kernel));
}

// Bandlimited test card: a sum of low-frequency sinusoids in [0, 1].
template <class T = float>
Image<T> test_card(int h, int w, int channels = 1) {
  Image<T> img(channels, h, w);
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double v = 0.5 + 0.2 * std::sin(0.11 * x + 0.3 * c) + 0.2 * std::cos(0.07 * y - 0.05 * x) +
                         0.08 * std::sin(0.19 * (x + y));
        img(c, y, x) = static_cast<T>(v);
      }
    }
  }
  return img;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("docalign_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <class A, class B>
double mean_abs_diff(const A& a, const B& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(double(a.data()[k]) - double(b.data()[k]));
  return s / double(a.size());
}

}  // namespace docalign::testing
