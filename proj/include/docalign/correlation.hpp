#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "docalign/grid.hpp"

namespace docalign {

// A D-channel activation map; every pixel holds one feature vector.
template <class T>
using FeatureMap = Planar<T>;

enum class CorrelationKind { kGlobal, kLocal };

// Similarities laid out over the reference grid. For a global volume the
// channel index is the flattened query position (y * W_q + x); for a local
// volume it is (dy + R) * (2R + 1) + (dx + R). Local entries whose displaced
// position falls outside the query grid are 0.
template <class T>
struct CorrelationVolume {
  CorrelationKind kind = CorrelationKind::kGlobal;
  int radius = 0;
  int query_height = 0;
  int query_width = 0;
  Planar<T> values;

  // Global entry (i, j): reference index i, query index j, both row-major.
  T global_entry(int i, int j) const {
    const int w = values.width();
    return values(j, i / w, i % w);
  }

  T local_entry(int y, int x, int dy, int dx) const {
    const int side = 2 * radius + 1;
    return values((dy + radius) * side + (dx + radius), y, x);
  }
};

inline int local_channel_count(int radius) { return (2 * radius + 1) * (2 * radius + 1); }

template <class T>
T l2_guard() {
  return static_cast<T>(1e-8);
}

// Scales each pixel's feature vector to unit length; vectors with norm below
// 1e-8 are divided by 1e-8 instead, so zero stays zero.
template <class T>
FeatureMap<T> l2_normalize(const FeatureMap<T>& features) {
  FeatureMap<T> out = features;
  const std::size_t n = features.plane_size();
  for (std::size_t k = 0; k < n; ++k) {
    T sq = 0;
    for (int c = 0; c < features.channels(); ++c) sq += features.plane(c)[k] * features.plane(c)[k];
    const T norm = std::max(std::sqrt(sq), l2_guard<T>());
    for (int c = 0; c < features.channels(); ++c) out.plane(c)[k] = features.plane(c)[k] / norm;
  }
  return out;
}

namespace detail {

// Dot product accumulated in channel order starting from zero.
template <class T>
inline T feature_dot(const FeatureMap<T>& a, std::size_t ia, const FeatureMap<T>& b, std::size_t ib) {
  T acc = 0;
  const std::size_t pa = a.plane_size();
  const std::size_t pb = b.plane_size();
  const T* da = a.data().data();
  const T* db = b.data().data();
  for (int c = 0; c < a.channels(); ++c) acc += da[c * pa + ia] * db[c * pb + ib];
  return acc;
}

template <class T>
void require_same_depth(const FeatureMap<T>& a, const FeatureMap<T>& b, const char* what) {
  if (a.channels() != b.channels()) {
    throw ShapeError(std::string(what) + ": feature depth mismatch " + std::to_string(a.channels()) + " vs " +
                     std::to_string(b.channels()));
  }
}

}  // namespace detail

// Entry (i, j) = <reference_i, query_j> for every pair of positions.
template <class T>
CorrelationVolume<T> global_correlation(const FeatureMap<T>& reference, const FeatureMap<T>& query) {
  detail::require_same_depth(reference, query, "global_correlation");
  CorrelationVolume<T> vol;
  vol.kind = CorrelationKind::kGlobal;
  vol.query_height = query.height();
  vol.query_width = query.width();
  vol.values = Planar<T>(static_cast<int>(query.plane_size()), reference.height(), reference.width());
  const std::size_t nr = reference.plane_size();
  const std::size_t nq = query.plane_size();
  for (std::size_t j = 0; j < nq; ++j) {
    T* out = vol.values.plane(static_cast<int>(j)).data();
    for (std::size_t i = 0; i < nr; ++i) out[i] = detail::feature_dot(reference, i, query, j);
  }
  return vol;
}

// Entry (p, d) = <reference_p, query_{p+d}> for every displacement with
// max(|dx|, |dy|) <= radius.
template <class T>
CorrelationVolume<T> local_correlation(const FeatureMap<T>& reference, const FeatureMap<T>& query, int radius) {
  detail::require_same_depth(reference, query, "local_correlation");
  require_same_extent(reference, query, "local_correlation");
  if (radius < 0) throw InvalidArgument("local_correlation radius must be >= 0");
  const int h = reference.height();
  const int w = reference.width();
  const int side = 2 * radius + 1;
  CorrelationVolume<T> vol;
  vol.kind = CorrelationKind::kLocal;
  vol.radius = radius;
  vol.query_height = h;
  vol.query_width = w;
  vol.values = Planar<T>(side * side, h, w);
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      const int ch = (dy + radius) * side + (dx + radius);
      for (int y = 0; y < h; ++y) {
        const int qy = y + dy;
        if (qy < 0 || qy >= h) continue;
        for (int x = 0; x < w; ++x) {
          const int qx = x + dx;
          if (qx < 0 || qx >= w) continue;
          vol.values(ch, y, x) = detail::feature_dot(reference, std::size_t(y) * w + x, query, std::size_t(qy) * w + qx);
        }
      }
    }
  }
  return vol;
}

}  // namespace docalign
