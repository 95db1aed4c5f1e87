#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "docalign/filter.hpp"
#include "docalign/nn/ops.hpp"
#include "docalign/nn/params.hpp"

namespace docalign::nn {

// Architecture hyperparameters. Levels are numbered 1 (coarsest, stride 32)
// to 4 (stride 4).
struct ModelConfig {
  std::array<int, 4> pyramid_channels{64, 48, 32, 16};
  int stem_channels = 16;
  // The level-1 features are resampled to a fixed global_grid x global_grid
  // lattice so the global volume has a size-independent channel count.
  int global_grid = 4;
  int local_radius = 9;
  int refine_radius = 4;
  std::array<int, 5> decoder_channels{128, 128, 96, 64, 32};
  int hidden = 96;
  int context = 64;
  int motion = 64;
  int fdec_hidden = 128;
  int wdec_hidden = 128;
  int iterations = 7;
  bool normalize_features = true;

  int decoder_input(int level) const {
    return (level == 1 ? global_grid * global_grid : local_channel_count(local_radius)) + 2;
  }
  int gru_input() const { return hidden + context + motion; }

  // Recovers every shape-determined field from a parameter set. Iteration
  // count and feature normalisation are not stored in the weights and keep
  // their defaults.
  static ModelConfig infer(const ParamSet<float>& p);
};

inline constexpr int kUpsampleFactor = 4;
inline constexpr int kUpsampleWeights = kUpsampleFactor * kUpsampleFactor * 9;

enum class InitKind { kRelu, kLinear, kHead };

// Every learnable tensor: name, shape, fan-in, initialisation scheme.
struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  int fan_in = 1;
  InitKind kind = InitKind::kLinear;
};

inline std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  std::vector<ParamSpec> specs;
  const auto conv = [&](const std::string& name, int in, int out, int k, InitKind kind) {
    specs.push_back({name + ".w", {out, in, k, k}, in * k * k, kind});
    specs.push_back({name + ".b", {out}, in * k * k, kind});
  };
  conv("pyr.stem", 3, c.stem_channels, 3, InitKind::kRelu);
  int prev = c.stem_channels;
  for (int level = 4; level >= 1; --level) {
    const int ch = c.pyramid_channels[level - 1];
    const std::string base = "pyr.l" + std::to_string(level);
    conv(base + ".down", prev, ch, 3, InitKind::kRelu);
    conv(base + ".out", ch, ch, 3, InitKind::kRelu);
    prev = ch;
  }
  for (int level = 1; level <= 3; ++level) {
    const std::string base = "dec" + std::to_string(level) + ".c";
    int in = c.decoder_input(level);
    int dense_in = in;
    for (int k = 0; k < 6; ++k) {
      const int out = k < 5 ? c.decoder_channels[k] : 2;
      const int conv_in = level == 1 ? in : dense_in;
      conv(base + std::to_string(k), conv_in, out, 3, k < 5 ? InitKind::kRelu : InitKind::kHead);
      in = out;
      dense_in += out;
    }
  }
  const int x4 = c.pyramid_channels[3];
  conv("ref.ctx", x4, c.context, 3, InitKind::kRelu);
  conv("ref.h0", x4, c.hidden, 1, InitKind::kLinear);
  conv("ref.motion", local_channel_count(c.refine_radius) + 2, c.motion, 3, InitKind::kRelu);
  for (const char* gate : {"z", "r", "q"}) {
    conv(std::string("ref.gru.") + gate, c.gru_input(), c.hidden, 3, InitKind::kLinear);
  }
  conv("ref.fdec.0", c.hidden, c.fdec_hidden, 3, InitKind::kRelu);
  conv("ref.fdec.1", c.fdec_hidden, 2, 3, InitKind::kHead);
  conv("ref.wdec.0", c.hidden + 2, c.wdec_hidden, 3, InitKind::kRelu);
  conv("ref.wdec.1", c.wdec_hidden, kUpsampleWeights, 1, InitKind::kLinear);
  return specs;
}

// Seeded initialisation: zero biases, Gaussian weights with std sqrt(2/fan_in)
// before ReLUs, sqrt(1/fan_in) elsewhere and a tenth of that on flow heads.
template <class T = float>
ParamSet<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  ParamSet<T> params;
  std::uint64_t index = 0;
  for (const auto& spec : param_specs(config)) {
    Tensor<T>& t = params.add(spec.name, spec.shape);
    const bool bias = spec.shape.size() == 1;
    Rng rng(derive_seed(seed, index++));
    if (bias) continue;
    double std = std::sqrt(1.0 / spec.fan_in);
    if (spec.kind == InitKind::kRelu) std = std::sqrt(2.0 / spec.fan_in);
    if (spec.kind == InitKind::kHead) std *= 0.1;
    for (auto& v : t.data()) v = static_cast<T>(rng.normal() * std);
  }
  return params;
}

inline ModelConfig ModelConfig::infer(const ParamSet<float>& p) {
  ModelConfig c;
  const auto dim = [&](const std::string& name, int i) { return p.at(name).dim(i); };
  c.stem_channels = dim("pyr.stem.w", 0);
  for (int level = 1; level <= 4; ++level) c.pyramid_channels[level - 1] = dim("pyr.l" + std::to_string(level) + ".out.w", 0);
  for (int k = 0; k < 5; ++k) c.decoder_channels[k] = dim("dec1.c" + std::to_string(k) + ".w", 0);
  const int g2 = dim("dec1.c0.w", 1) - 2;
  c.global_grid = static_cast<int>(std::lround(std::sqrt(double(g2))));
  c.local_radius = (static_cast<int>(std::lround(std::sqrt(double(dim("dec2.c0.w", 1) - 2)))) - 1) / 2;
  c.refine_radius = (static_cast<int>(std::lround(std::sqrt(double(dim("ref.motion.w", 1) - 2)))) - 1) / 2;
  c.hidden = dim("ref.h0.w", 0);
  c.context = dim("ref.ctx.w", 0);
  c.motion = dim("ref.motion.w", 0);
  c.fdec_hidden = dim("ref.fdec.0.w", 0);
  c.wdec_hidden = dim("ref.wdec.0.w", 0);
  // Reject anything the inferred config would not reproduce exactly.
  const auto specs = param_specs(c);
  bool ok = specs.size() == p.size();
  for (std::size_t i = 0; ok && i < specs.size(); ++i) {
    ok = p.names()[i] == specs[i].name && p.at(i).shape() == specs[i].shape;
  }
  if (!ok) throw InvalidArgument("parameter set does not describe a supported model layout");
  return c;
}

// ---------------------------------------------------------------------------
// Blocks. All take a ParamBinder so the same code serves f32 training and f64
// gradient checks.

template <class T>
Var conv_layer(ParamBinder<T>& p, const std::string& name, Var x, int stride = 1) {
  return conv2d(p.graph(), x, p(name + ".w"), p(name + ".b"), stride);
}

template <class T>
Tensor<T> image_tensor(const Image<T>& image) {
  if (image.channels() == 3) return Tensor<T>::from_planar(image);
  Tensor<T> t = Tensor<T>::chw(3, image.height(), image.width());
  for (int c = 0; c < 3; ++c) std::copy(image.plane(0).begin(), image.plane(0).end(), t.plane(c));
  return t;
}

inline void require_model_size(int height, int width) {
  if (height < 32 || width < 32 || height % 32 != 0 || width % 32 != 0) {
    throw InvalidArgument("image dimensions must be positive multiples of 32, got " + std::to_string(height) + "x" +
                          std::to_string(width));
  }
}

// levels[0] = X_1 (stride 32) ... levels[3] = X_4 (stride 4).
struct Pyramid {
  std::array<Var, 4> levels;
};

// rgb: [3, H, W] in [0, 1].
template <class T>
Pyramid extract_pyramid(ParamBinder<T>& p, Var rgb) {
  Graph<T>& g = p.graph();
  const Tensor<T>& in = g.value(rgb);
  if (in.rank() != 3 || in.channels() != 3) throw ShapeError("pyramid input must be [3, H, W], got " + in.shape_string());
  require_model_size(in.height(), in.width());
  Var a = relu(g, conv_layer(p, "pyr.stem", affine(g, rgb, T(1), T(-0.5)), 2));
  Pyramid pyr;
  for (int level = 4; level >= 1; --level) {
    const std::string base = "pyr.l" + std::to_string(level);
    const Var down = relu(g, conv_layer(p, base + ".down", a, 2));
    const Var x = conv_layer(p, base + ".out", down);
    pyr.levels[level - 1] = x;
    a = relu(g, x);
  }
  return pyr;
}

// Six 3x3 convs, ReLU on all but the last. At levels 2 and 3 each conv sees
// the block input concatenated with all earlier conv outputs; level 1 is a
// plain chain.
template <class T>
Var flow_decoder(ParamBinder<T>& p, int level, Var corr, Var up_flow, const ModelConfig& c) {
  Graph<T>& g = p.graph();
  const Tensor<T>& cv = g.value(corr);
  const Tensor<T>& fv = g.value(up_flow);
  if (cv.rank() != 3 || fv.rank() != 3 || fv.channels() != 2 || cv.height() != fv.height() || cv.width() != fv.width()) {
    throw ShapeError("flow_decoder: correlation " + cv.shape_string() + " and flow " + fv.shape_string() +
                     " must share the level grid");
  }
  if (cv.channels() + 2 != c.decoder_input(level)) {
    throw ShapeError("flow_decoder: level " + std::to_string(level) + " expects " +
                     std::to_string(c.decoder_input(level) - 2) + " correlation channels, got " +
                     std::to_string(cv.channels()));
  }
  const std::string base = "dec" + std::to_string(level) + ".c";
  std::vector<Var> dense{corr, up_flow};
  Var x = concat(g, dense);
  for (int k = 0; k < 6; ++k) {
    Var y = conv_layer(p, base + std::to_string(k), x);
    if (k == 5) return y;
    y = relu(g, y);
    if (level == 1) {
      x = y;
    } else {
      dense.push_back(y);
      x = concat(g, dense);
    }
  }
  return x;
}

template <class T>
Var maybe_normalize(Graph<T>& g, Var x, const ModelConfig& c) {
  return c.normalize_features ? l2_normalize(g, x) : x;
}

// Flows at levels 1..3: index 0 on the global_grid lattice, 1 at stride 16,
// 2 at stride 8.
struct LevelFlows {
  std::array<Var, 3> flows;
};

template <class T>
LevelFlows hierarchical_align(ParamBinder<T>& p, const Pyramid& src, const Pyramid& tgt, const ModelConfig& c) {
  Graph<T>& g = p.graph();
  for (int l = 0; l < 4; ++l) {
    if (!g.value(src.levels[l]).same_shape(g.value(tgt.levels[l]))) {
      throw ShapeError("hierarchical_align: pyramids differ at level " + std::to_string(l + 1));
    }
  }
  LevelFlows out;
  // Level 1: global correlation on the fixed lattice, starting from f_0 = 0.
  const int gg = c.global_grid;
  const Var s1 = resize(g, src.levels[0], gg, gg);
  const Var t1 = resize(g, tgt.levels[0], gg, gg);
  const Var f0 = g.constant(Tensor<T>::chw(2, gg, gg));
  const Var w1 = warp(g, s1, f0);
  const Var c1 = global_correlation(g, maybe_normalize(g, t1, c), maybe_normalize(g, w1, c));
  out.flows[0] = add(g, f0, flow_decoder(p, 1, c1, f0, c));
  // Levels 2 and 3: local correlation against the warped source.
  Var prev = out.flows[0];
  for (int level = 2; level <= 3; ++level) {
    const Tensor<T>& xs = g.value(src.levels[level - 1]);
    const Var up = resize_flow(g, prev, xs.height(), xs.width());
    const Var ws = warp(g, src.levels[level - 1], up);
    const Var corr =
        local_correlation(g, maybe_normalize(g, tgt.levels[level - 1], c), maybe_normalize(g, ws, c), c.local_radius);
    prev = add(g, up, flow_decoder(p, level, corr, up, c));
    out.flows[level - 1] = prev;
  }
  return out;
}

// Convolutional GRU with 3x3 gates over [h, x].
template <class T>
Var convgru_cell(ParamBinder<T>& p, const std::string& prefix, Var x, Var h) {
  Graph<T>& g = p.graph();
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& hv = g.value(h);
  if (xv.rank() != 3 || hv.rank() != 3 || xv.height() != hv.height() || xv.width() != hv.width()) {
    throw ShapeError("convgru_cell: input " + xv.shape_string() + " and hidden " + hv.shape_string() +
                     " must share spatial size");
  }
  const Var hx = concat(g, {h, x});
  const Var z = sigmoid(g, conv_layer(p, prefix + ".z", hx));
  const Var r = sigmoid(g, conv_layer(p, prefix + ".r", hx));
  const Var q = tanh(g, conv_layer(p, prefix + ".q", concat(g, {mul(g, r, h), x})));
  return add(g, mul(g, one_minus(g, z), h), mul(g, z, q));
}

// Residual flow upsampling with normalised 3x3 kernels; validates that every
// kernel is non-negative and sums to one.
template <class T>
FlowField<T> convex_upsample(const FlowField<T>& residual, const Planar<T>& weights, double tol = 1e-4) {
  if (weights.channels() != kUpsampleWeights || weights.height() != residual.height() ||
      weights.width() != residual.width()) {
    throw ShapeError("convex_upsample: weights " + weights.shape_string() + " do not fit residual " +
                     residual.shape_string());
  }
  for (int k = 0; k < kUpsampleWeights / 9; ++k) {
    for (std::size_t pix = 0; pix < weights.plane_size(); ++pix) {
      double sum = 0.0;
      for (int t = 0; t < 9; ++t) {
        const double w = weights.plane(k * 9 + t)[pix];
        if (!(w >= 0.0)) throw InvalidArgument("convex_upsample: negative or non-finite weight");
        sum += w;
      }
      if (std::abs(sum - 1.0) > tol) {
        throw InvalidArgument("convex_upsample: kernel " + std::to_string(k) + " sums to " + std::to_string(sum));
      }
    }
  }
  Graph<T> g;
  const Var out = convex_upsample(g, g.constant(Tensor<T>::from_planar(residual)),
                                  g.constant(Tensor<T>::from_planar(weights)), kUpsampleFactor);
  return FlowField<T>(g.value(out).to_planar());
}

// Recurrent refinement at stride 4. Returns the full-resolution iterates
// f^1..f^n (just f_init when iters == 0).
template <class T>
std::vector<Var> refine_recurrent(ParamBinder<T>& p, Var f_init, Var x4s, Var x4t, const ModelConfig& c, int iters) {
  Graph<T>& g = p.graph();
  const Tensor<T>& fv = g.value(f_init);
  const Tensor<T>& sv = g.value(x4s);
  if (fv.rank() != 3 || fv.channels() != 2) throw ShapeError("refine_recurrent: f_init must be a flow");
  if (!sv.same_shape(g.value(x4t))) throw ShapeError("refine_recurrent: feature maps differ");
  if (fv.height() != sv.height() * kUpsampleFactor || fv.width() != sv.width() * kUpsampleFactor) {
    throw ShapeError("refine_recurrent: flow " + fv.shape_string() + " is not 4x the feature grid " + sv.shape_string());
  }
  if (iters < 0) throw InvalidArgument("refine_recurrent: negative iteration count");
  const int h4 = sv.height(), w4 = sv.width();
  const Var ctx = relu(g, conv_layer(p, "ref.ctx", x4s));
  Var h = tanh(g, conv_layer(p, "ref.h0", x4s));
  const Var tn = maybe_normalize(g, x4t, c);
  std::vector<Var> iterates;
  Var f = f_init;
  for (int n = 0; n < iters; ++n) {
    const Var fd = resize_flow(g, f, h4, w4);
    const Var ws = maybe_normalize(g, warp(g, x4s, fd), c);
    const Var corr = local_correlation(g, tn, ws, c.refine_radius);
    const Var motion = relu(g, conv_layer(p, "ref.motion", concat(g, {fd, corr})));
    h = convgru_cell(p, "ref.gru", concat(g, {ctx, motion}), h);
    const Var dfd = conv_layer(p, "ref.fdec.1", relu(g, conv_layer(p, "ref.fdec.0", h)));
    const Var logits = conv_layer(p, "ref.wdec.1", relu(g, conv_layer(p, "ref.wdec.0", concat(g, {dfd, h}))));
    const Var df = convex_upsample(g, dfd, softmax_groups(g, logits, 9), kUpsampleFactor);
    f = add(g, f, df);
    iterates.push_back(f);
  }
  if (iterates.empty()) iterates.push_back(f);
  return iterates;
}

struct ForwardResult {
  LevelFlows levels;
  std::vector<Var> iterates;
  Var flow;
};

// Full aligner: source (photo) and target (clean) tensors [3, H, W] in [0, 1].
template <class T>
ForwardResult forward(ParamBinder<T>& p, Var source, Var target, const ModelConfig& c) {
  Graph<T>& g = p.graph();
  const Tensor<T>& sv = g.value(source);
  if (!sv.same_shape(g.value(target))) {
    throw ShapeError("forward: source " + sv.shape_string() + " and target " + g.value(target).shape_string() +
                     " differ");
  }
  const Pyramid ps = extract_pyramid(p, source);
  const Pyramid pt = extract_pyramid(p, target);
  ForwardResult r;
  r.levels = hierarchical_align(p, ps, pt, c);
  const Var f_init = resize_flow(g, r.levels.flows[2], sv.height(), sv.width());
  r.iterates = refine_recurrent(p, f_init, ps.levels[3], pt.levels[3], c, c.iterations);
  r.flow = r.iterates.back();
  return r;
}

// Inference convenience: flow on the target grid such that
// warp(source, flow) ~ target.
template <class T>
FlowField<T> predict(const ParamSet<T>& params, const ModelConfig& c, const Image<T>& source, const Image<T>& target) {
  require_same_extent(source, target, "predict");
  Graph<T> g;
  ParamBinder<T> p(g, params);
  const auto r = forward(p, g.constant(image_tensor(source)), g.constant(image_tensor(target)), c);
  return FlowField<T>(g.value(r.flow).to_planar());
}

// ---------------------------------------------------------------------------
// Losses

// Sum over levels of mean |f_l - down(gt)| plus sum over iterates of
// mean |f^n - gt|, all weights 1. Level errors are measured in input pixels
// so that coarse levels are not down-weighted by their stride.
template <class T>
Var supervised_loss(Graph<T>& g, const ForwardResult& r, const FlowField<T>& gt) {
  std::vector<Var> terms;
  for (Var f : r.levels.flows) {
    const Tensor<T>& fv = g.value(f);
    const int h = fv.height(), w = fv.width();
    Tensor<T> scale = Tensor<T>::chw(2, h, w);
    std::fill(scale.plane(0), scale.plane(0) + std::size_t(h) * w, static_cast<T>(double(gt.width()) / w));
    std::fill(scale.plane(1), scale.plane(1) + std::size_t(h) * w, static_cast<T>(double(gt.height()) / h));
    Tensor<T> target = Tensor<T>::from_planar(resize_flow(gt, h, w));
    for (std::size_t k = 0; k < target.size(); ++k) target[k] *= scale[k];
    terms.push_back(l1_loss(g, mul(g, f, g.constant(scale)), target));
  }
  const Tensor<T> full = Tensor<T>::from_planar(gt);
  for (Var f : r.iterates) terms.push_back(l1_loss(g, f, full));
  return sum_scalars(g, terms);
}

// Mean |warp(Sobel(source), flow) - Sobel(target)| over both gradient
// channels, on luma.
template <class T>
Var gradient_alignment_loss(Graph<T>& g, Var flow, const Image<T>& source, const Image<T>& target) {
  require_same_extent(source, target, "gradient_alignment_loss");
  const Var gs = g.constant(Tensor<T>::from_planar(sobel_gradients(source)));
  const Tensor<T> gt = Tensor<T>::from_planar(sobel_gradients(target));
  return l1_loss(g, warp(g, gs, flow), gt);
}

}  // namespace docalign::nn
