#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "docalign/error.hpp"
#include "docalign/grid.hpp"
#include "docalign/io.hpp"
#include "docalign/prealign.hpp"
#include "docalign/sampling.hpp"
#include "json.hpp"

namespace docalign {

using Polygon = std::vector<Point>;

// Axis-aligned box in COCO order: x, y, width, height.
struct Box {
  double x = 0, y = 0, w = 0, h = 0;
  friend bool operator==(const Box&, const Box&) = default;
};

struct CocoImage {
  std::int64_t id = 0;
  int width = 0;
  int height = 0;
  std::string file_name;
  nlohmann::json extra = nlohmann::json::object();
};

struct Category {
  std::int64_t id = 0;
  std::string name;
  nlohmann::json extra = nlohmann::json::object();
};

struct Instance {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  std::int64_t category_id = 0;
  Box bbox;
  std::vector<Polygon> polygons;  // empty when the record has no polygon segmentation
  bool degenerate = false;        // set by transfer when the mapped box has zero area
  nlohmann::json extra = nlohmann::json::object();
};

// COCO-style annotation file. Keys this struct does not model are kept in
// the extra objects and written back unchanged.
struct AnnotationSet {
  std::vector<CocoImage> images;
  std::vector<Category> categories;
  std::vector<Instance> instances;
  nlohmann::json extra = nlohmann::json::object();
};

namespace detail {

inline nlohmann::json leftovers(const nlohmann::json& j, std::initializer_list<const char*> known) {
  nlohmann::json out = nlohmann::json::object();
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; })) out[it.key()] = *it;
  }
  return out;
}

[[noreturn]] inline void schema_error(const std::string& pointer, const std::string& msg) {
  throw ParseError("annotations " + (pointer.empty() ? std::string("/") : pointer) + ": " + msg);
}

inline const nlohmann::json& require(const nlohmann::json& j, const std::string& key, const std::string& ptr) {
  if (!j.is_object()) schema_error(ptr, "expected an object");
  const auto it = j.find(key);
  if (it == j.end()) schema_error(ptr + "/" + key, "missing required key");
  return *it;
}

inline const nlohmann::json& require_array(const nlohmann::json& j, const std::string& key, const std::string& ptr) {
  const auto& v = require(j, key, ptr);
  if (!v.is_array()) schema_error(ptr + "/" + key, "expected an array");
  return v;
}

inline std::int64_t get_id(const nlohmann::json& j, const std::string& key, const std::string& ptr) {
  const auto& v = require(j, key, ptr);
  if (!v.is_number_integer()) schema_error(ptr + "/" + key, "expected an integer");
  return v.get<std::int64_t>();
}

inline double get_number(const nlohmann::json& v, const std::string& ptr) {
  if (!v.is_number()) schema_error(ptr, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) schema_error(ptr, "expected a finite number");
  return d;
}

inline bool is_integral(double v) { return std::floor(v) == v && std::abs(v) < 9e15; }

// Writes integral coordinates as integers so untouched files round-trip.
inline nlohmann::json number(double v) {
  if (is_integral(v)) return static_cast<std::int64_t>(v);
  return v;
}

}  // namespace detail

inline AnnotationSet parse_annotations(const nlohmann::json& j) {
  using namespace detail;
  if (!j.is_object()) schema_error("", "expected an object");
  AnnotationSet set;
  set.extra = leftovers(j, {"images", "categories", "annotations"});
  const auto& images = require_array(j, "images", "");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string ptr = "/images/" + std::to_string(i);
    const auto& r = images[i];
    CocoImage im;
    im.id = get_id(r, "id", ptr);
    im.width = static_cast<int>(get_id(r, "width", ptr));
    im.height = static_cast<int>(get_id(r, "height", ptr));
    if (im.width < 1 || im.height < 1) schema_error(ptr, "image dimensions must be positive");
    if (r.contains("file_name")) {
      if (!r["file_name"].is_string()) schema_error(ptr + "/file_name", "expected a string");
      im.file_name = r["file_name"].get<std::string>();
    }
    im.extra = leftovers(r, {"id", "width", "height", "file_name"});
    set.images.push_back(std::move(im));
  }
  const auto& cats = require_array(j, "categories", "");
  for (std::size_t i = 0; i < cats.size(); ++i) {
    const std::string ptr = "/categories/" + std::to_string(i);
    Category c;
    c.id = get_id(cats[i], "id", ptr);
    const auto& name = require(cats[i], "name", ptr);
    if (!name.is_string()) schema_error(ptr + "/name", "expected a string");
    c.name = name.get<std::string>();
    c.extra = leftovers(cats[i], {"id", "name"});
    set.categories.push_back(std::move(c));
  }
  const auto& anns = require_array(j, "annotations", "");
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const std::string ptr = "/annotations/" + std::to_string(i);
    const auto& r = anns[i];
    Instance in;
    in.id = get_id(r, "id", ptr);
    in.image_id = get_id(r, "image_id", ptr);
    in.category_id = get_id(r, "category_id", ptr);
    if (std::none_of(set.categories.begin(), set.categories.end(), [&](const Category& c) { return c.id == in.category_id; })) {
      schema_error(ptr + "/category_id", "unknown category " + std::to_string(in.category_id));
    }
    if (std::none_of(set.images.begin(), set.images.end(), [&](const CocoImage& m) { return m.id == in.image_id; })) {
      schema_error(ptr + "/image_id", "unknown image " + std::to_string(in.image_id));
    }
    const auto& bb = require_array(r, "bbox", ptr);
    if (bb.size() != 4) schema_error(ptr + "/bbox", "expected 4 numbers");
    std::array<double, 4> b{};
    for (int k = 0; k < 4; ++k) b[k] = get_number(bb[k], ptr + "/bbox/" + std::to_string(k));
    if (b[2] < 0 || b[3] < 0) schema_error(ptr + "/bbox", "negative width or height");
    in.bbox = {b[0], b[1], b[2], b[3]};
    bool seg_modelled = false;
    if (r.contains("segmentation") && r["segmentation"].is_array()) {
      seg_modelled = true;
      const auto& seg = r["segmentation"];
      for (std::size_t s = 0; s < seg.size(); ++s) {
        const std::string sp = ptr + "/segmentation/" + std::to_string(s);
        if (!seg[s].is_array()) schema_error(sp, "expected a flat coordinate array");
        if (seg[s].size() % 2 != 0 || seg[s].size() < 6) schema_error(sp, "polygon needs an even count of at least 6");
        Polygon poly;
        for (std::size_t k = 0; k < seg[s].size(); k += 2) {
          poly.push_back({get_number(seg[s][k], sp + "/" + std::to_string(k)),
                          get_number(seg[s][k + 1], sp + "/" + std::to_string(k + 1))});
        }
        in.polygons.push_back(std::move(poly));
      }
    }
    in.degenerate = r.value("degenerate", false) == true;
    if (seg_modelled) {
      in.extra = leftovers(r, {"id", "image_id", "category_id", "bbox", "segmentation", "degenerate"});
    } else {
      in.extra = leftovers(r, {"id", "image_id", "category_id", "bbox", "degenerate"});
    }
    set.instances.push_back(std::move(in));
  }
  return set;
}

inline nlohmann::json annotations_json(const AnnotationSet& set) {
  using detail::number;
  nlohmann::json j = set.extra;
  nlohmann::json images = nlohmann::json::array(), cats = nlohmann::json::array(), anns = nlohmann::json::array();
  for (const auto& im : set.images) {
    nlohmann::json r = im.extra;
    r["id"] = im.id;
    r["width"] = im.width;
    r["height"] = im.height;
    if (!im.file_name.empty()) r["file_name"] = im.file_name;
    images.push_back(std::move(r));
  }
  for (const auto& c : set.categories) {
    nlohmann::json r = c.extra;
    r["id"] = c.id;
    r["name"] = c.name;
    cats.push_back(std::move(r));
  }
  for (const auto& in : set.instances) {
    nlohmann::json r = in.extra;
    r["id"] = in.id;
    r["image_id"] = in.image_id;
    r["category_id"] = in.category_id;
    r["bbox"] = {number(in.bbox.x), number(in.bbox.y), number(in.bbox.w), number(in.bbox.h)};
    if (!in.polygons.empty()) {
      nlohmann::json seg = nlohmann::json::array();
      for (const auto& poly : in.polygons) {
        nlohmann::json flat = nlohmann::json::array();
        for (const Point& p : poly) {
          flat.push_back(number(p.x));
          flat.push_back(number(p.y));
        }
        seg.push_back(std::move(flat));
      }
      r["segmentation"] = std::move(seg);
    }
    if (in.degenerate) r["degenerate"] = true;
    anns.push_back(std::move(r));
  }
  j["images"] = std::move(images);
  j["categories"] = std::move(cats);
  j["annotations"] = std::move(anns);
  return j;
}

inline AnnotationSet read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotations " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  try {
    return parse_annotations(j);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline void write_annotations(const AnnotationSet& set, const std::filesystem::path& path) {
  const std::string text = annotations_json(set).dump(2) + "\n";
  write_bytes(path, Bytes(text.begin(), text.end()));
}

// ---------------------------------------------------------------------------
// Geometry

inline double polygon_area(const Polygon& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Point p = poly[i], q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(a);
}

// Even-odd rule.
inline bool point_in_polygon(const Polygon& poly, Point p) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point a = poly[i], b = poly[j];
    if ((a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

// Inserts `per_edge` evenly spaced points inside every edge of the closed polygon.
inline Polygon densify(const Polygon& poly, int per_edge) {
  if (per_edge < 0) throw InvalidArgument("densify: points per edge must be >= 0");
  Polygon out;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Point a = poly[i], b = poly[(i + 1) % poly.size()];
    out.push_back(a);
    for (int k = 1; k <= per_edge; ++k) out.push_back(a + (double(k) / (per_edge + 1)) * (b - a));
  }
  return out;
}

// Repeatedly drops vertices within tol of the segment joining their
// neighbours, so collinear runs collapse to their end points.
inline Polygon simplify(const Polygon& poly, double tol = 1e-6) {
  Polygon out = poly;
  bool changed = true;
  while (changed && out.size() > 3) {
    changed = false;
    for (std::size_t i = 0; i < out.size() && out.size() > 3; ++i) {
      const Point a = out[(i + out.size() - 1) % out.size()], p = out[i], b = out[(i + 1) % out.size()];
      const Point d = b - a;
      const double len = std::hypot(d.x, d.y);
      const double dist = len > 0 ? std::abs(d.x * (p.y - a.y) - d.y * (p.x - a.x)) / len : distance(p, a);
      // Only drop points that lie between their neighbours.
      const double t = len > 0 ? ((p.x - a.x) * d.x + (p.y - a.y) * d.y) / (len * len) : 0.0;
      if (dist <= tol && t >= -tol && t <= 1 + tol) {
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(i));
        changed = true;
        --i;
      }
    }
  }
  return out;
}

inline Polygon box_polygon(const Box& b) {
  return {{b.x, b.y}, {b.x + b.w, b.y}, {b.x + b.w, b.y + b.h}, {b.x, b.y + b.h}};
}

inline Box bounding_box(const Polygon& pts) {
  if (pts.empty()) return {};
  double x0 = pts[0].x, x1 = x0, y0 = pts[0].y, y1 = y0;
  for (const Point& p : pts) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  return {x0, y0, x1 - x0, y1 - y0};
}

inline Box clip_box(const Box& b, int width, int height) {
  const double x0 = std::clamp(b.x, 0.0, double(width)), x1 = std::clamp(b.x + b.w, 0.0, double(width));
  const double y0 = std::clamp(b.y, 0.0, double(height)), y1 = std::clamp(b.y + b.h, 0.0, double(height));
  return {x0, y0, std::max(0.0, x1 - x0), std::max(0.0, y1 - y0)};
}

// ---------------------------------------------------------------------------
// Transfer from the clean target frame to the photo frame

// p + f(p), with f looked up bilinearly (border-clamped), then optionally
// mapped from pre-aligned to raw photo coordinates. p must lie within the
// image extent [0, W] x [0, H].
template <class T>
Point transfer_point(Point p, const FlowField<T>& flow, const TpsTransform* inverse_prealign = nullptr) {
  if (!std::isfinite(p.x) || !std::isfinite(p.y) || p.x < 0 || p.y < 0 || p.x > flow.width() ||
      p.y > flow.height()) {
    throw InvalidArgument("transfer_point: (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                          ") is outside the " + std::to_string(flow.width()) + "x" + std::to_string(flow.height()) +
                          " flow grid");
  }
  const Point q = p + flow_at(flow, p);
  return inverse_prealign ? (*inverse_prealign)(q) : q;
}

inline constexpr int kDefaultDensify = 8;

template <class T>
Polygon transfer_polygon(const Polygon& poly, const FlowField<T>& flow, const TpsTransform* inverse_prealign = nullptr,
                         int per_edge = kDefaultDensify) {
  if (poly.size() < 3) throw InvalidArgument("transfer_polygon: polygon needs at least 3 vertices");
  Polygon out;
  for (const Point& p : densify(poly, per_edge)) out.push_back(transfer_point(p, flow, inverse_prealign));
  return out;
}

struct BoxTransfer {
  Box box;
  bool degenerate = false;
};

// Hull of the densified, mapped box boundary, clipped to the photo extent.
template <class T>
BoxTransfer transfer_box(const Box& box, const FlowField<T>& flow, const TpsTransform* inverse_prealign, int out_width,
                         int out_height, int per_edge = kDefaultDensify) {
  const Polygon mapped = transfer_polygon(box_polygon(box), flow, inverse_prealign, per_edge);
  BoxTransfer r;
  r.box = clip_box(bounding_box(mapped), out_width, out_height);
  r.degenerate = r.box.w <= 0 || r.box.h <= 0;
  return r;
}

struct TransferOptions {
  int densify = kDefaultDensify;
  int out_width = 0;  // photo size; 0 = flow size
  int out_height = 0;
  bool simplify = true;
};

// Maps every instance of set (drawn on clean images of the flow's size) onto
// the photo. Polygons are transferred densified and then simplified; boxes
// come from the densified box outline.
template <class T>
AnnotationSet transfer_annotations(const AnnotationSet& set, const FlowField<T>& flow,
                                   const TpsTransform* inverse_prealign = nullptr, const TransferOptions& o = {}) {
  const int ow = o.out_width > 0 ? o.out_width : flow.width();
  const int oh = o.out_height > 0 ? o.out_height : flow.height();
  AnnotationSet out = set;
  for (auto& im : out.images) {
    if (im.width != flow.width() || im.height != flow.height()) {
      throw ShapeError("transfer: image " + std::to_string(im.id) + " is " + std::to_string(im.width) + "x" +
                       std::to_string(im.height) + " but the flow is " + std::to_string(flow.width()) + "x" +
                       std::to_string(flow.height()));
    }
    im.width = ow;
    im.height = oh;
  }
  for (auto& in : out.instances) {
    const BoxTransfer b = transfer_box(in.bbox, flow, inverse_prealign, ow, oh, o.densify);
    in.bbox = b.box;
    in.degenerate = b.degenerate;
    for (auto& poly : in.polygons) {
      poly = transfer_polygon(poly, flow, inverse_prealign, o.densify);
      if (o.simplify) poly = simplify(poly);
    }
    if (in.extra.contains("area")) {
      double area = 0.0;
      for (const auto& poly : in.polygons) area += polygon_area(poly);
      in.extra["area"] = in.polygons.empty() ? in.bbox.w * in.bbox.h : area;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Overlay

namespace detail {

inline std::array<float, 3> category_color(std::int64_t id) {
  static constexpr std::array<std::array<float, 3>, 6> palette{{{0.90f, 0.10f, 0.10f},
                                                                 {0.10f, 0.60f, 0.10f},
                                                                 {0.10f, 0.30f, 0.90f},
                                                                 {0.90f, 0.60f, 0.00f},
                                                                 {0.60f, 0.10f, 0.80f},
                                                                 {0.00f, 0.70f, 0.70f}}};
  return palette[static_cast<std::size_t>(((id % 6) + 6) % 6)];
}

inline void draw_segment(Image<float>& img, Point a, Point b, const std::array<float, 3>& color) {
  const int steps = std::max(1, static_cast<int>(std::ceil(2 * distance(a, b))));
  for (int s = 0; s <= steps; ++s) {
    const Point p = a + (double(s) / steps) * (b - a);
    const int x = static_cast<int>(std::lround(p.x)), y = static_cast<int>(std::lround(p.y));
    if (x < 0 || y < 0 || x >= img.width() || y >= img.height()) continue;
    for (int c = 0; c < img.channels(); ++c) img(c, y, x) = img.channels() == 3 ? color[c] : color[0];
  }
}

inline void draw_closed(Image<float>& img, const Polygon& poly, const std::array<float, 3>& color) {
  for (std::size_t i = 0; i < poly.size(); ++i) draw_segment(img, poly[i], poly[(i + 1) % poly.size()], color);
}

}  // namespace detail

// Burns boxes and polygons of the given image into a copy of img.
inline Image<float> render_overlay(const Image<float>& img, const AnnotationSet& set, std::int64_t image_id) {
  Image<float> out = img;
  for (const auto& in : set.instances) {
    if (in.image_id != image_id) continue;
    const auto color = detail::category_color(in.category_id);
    detail::draw_closed(out, box_polygon(in.bbox), color);
    for (const auto& poly : in.polygons) detail::draw_closed(out, poly, color);
  }
  return out;
}

}  // namespace docalign
