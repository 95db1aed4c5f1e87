#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "docalign/nn/aligner.hpp"

namespace docalign::nn {

struct GradCheckOptions {
  double step = 1e-5;
  int coords_per_tensor = 8;  // sampled coordinates per input/parameter tensor
  int directions = 4;         // random-direction (JVP) probes
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  std::string block;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  int checks = 0;
  int kinks_skipped = 0;  // probes redrawn because they straddled a kink
  bool passed() const { return max_rel_error < tolerance; }
};

// Narrow architecture used for checks: every block keeps its topology while
// the finite-difference sweep stays cheap.
inline ModelConfig gradcheck_config() {
  ModelConfig c;
  c.pyramid_channels = {8, 8, 6, 6};
  c.stem_channels = 4;
  c.global_grid = 2;
  c.local_radius = 2;
  c.refine_radius = 2;
  c.decoder_channels = {8, 8, 6, 4, 4};
  c.hidden = 8;
  c.context = 6;
  c.motion = 6;
  c.fdec_hidden = 8;
  c.wdec_hidden = 8;
  return c;
}

// One differentiable problem: float64 inputs plus a parameter set, and a
// builder producing the block output.
struct GradProblem {
  std::vector<Tensor<double>> inputs;
  ParamSet<double> params;
  std::function<Var(ParamBinder<double>&, const std::vector<Var>&)> build;
  double tolerance = 1e-4;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

namespace detail {

inline Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Loss = <probe, output> with a fixed Gaussian probe scaled to O(1) total.
struct Evaluator {
  GradProblem& problem;
  Tensor<double> probe;

  double loss(std::vector<std::string>* bound = nullptr, std::vector<Tensor<double>>* input_grads = nullptr,
              ParamSet<double>* param_grads = nullptr) {
    Graph<double> g;
    ParamBinder<double> p(g, problem.params, param_grads);
    std::vector<Var> vars;
    for (const auto& t : problem.inputs) vars.push_back(param_grads ? g.variable(t) : g.constant(t));
    const Var out = problem.build(p, vars);
    if (probe.empty()) {
      probe = Tensor<double>(g.value(out).shape());
      Rng rng(0x9e3779b9u);
      const double s = 1.0 / std::sqrt(double(probe.size()));
      for (auto& v : probe.data()) v = rng.normal() * s;
    }
    const Var l = weighted_sum(g, out, probe);
    if (param_grads) {
      g.backward(l);
      for (Var v : vars) input_grads->push_back(g.grad(v));
    }
    if (bound) *bound = p.bound_names();
    return g.value(l)[0];
  }
};

}  // namespace detail

// Compares reverse-mode gradients with central differences: sampled single
// coordinates of every input and bound parameter tensor, plus random
// directions through all of them at once.
inline GradCheckResult check_problem(const std::string& name, GradProblem problem, const GradCheckOptions& opt) {
  GradCheckResult res;
  res.block = name;
  res.tolerance = problem.tolerance;
  detail::Evaluator ev{problem, {}};
  ParamSet<double> pgrads = problem.params.zeros_like();
  std::vector<Tensor<double>> igrads;
  std::vector<std::string> bound;
  ev.loss(&bound, &igrads, &pgrads);

  // (tensor, analytic gradient) pairs under test.
  std::vector<std::pair<Tensor<double>*, const Tensor<double>*>> targets;
  for (std::size_t i = 0; i < problem.inputs.size(); ++i) targets.emplace_back(&problem.inputs[i], &igrads[i]);
  for (const auto& n : bound) targets.emplace_back(&problem.params.at(n), &pgrads.at(n));

  Rng rng(derive_seed(opt.seed, 0xC0FFEE));
  const double h = opt.step;
  const double base = ev.loss();
  constexpr int kRetries = 8;
  // Runs a probe; returns false without recording when the one-sided slopes
  // disagree by more than the tolerance, i.e. the stencil straddles a ReLU or
  // bilinear kink where no derivative exists. Such probes are redrawn.
  const auto probe = [&](double analytic, const std::function<void(double)>& shift, double step) {
    shift(step);
    const double up = ev.loss();
    shift(-2 * step);
    const double down = ev.loss();
    shift(step);
    const double sp = (up - base) / step;
    const double sm = (base - down) / step;
    if (std::abs(sp - sm) > problem.tolerance * std::max({std::abs(sp), std::abs(sm), 1e-6})) {
      ++res.kinks_skipped;
      return false;
    }
    res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic, (up - down) / (2 * step)));
    ++res.checks;
    return true;
  };
  for (auto& [tensor, grad] : targets) {
    const int n = static_cast<int>(tensor->size());
    const bool exhaustive = n <= opt.coords_per_tensor;
    const int probes = exhaustive ? n : opt.coords_per_tensor;
    for (int i = 0; i < probes; ++i) {
      for (int attempt = 0; attempt < kRetries; ++attempt) {
        const int k = exhaustive ? i : rng.uniform_int(0, n - 1);
        Tensor<double>* t = tensor;
        const auto shift = [t, k](double s) { (*t)[k] += s; };
        if (probe((*grad)[k], shift, h) || exhaustive) break;
      }
    }
  }
  for (int d = 0; d < opt.directions; ++d) {
    for (int attempt = 0; attempt < kRetries; ++attempt) {
      std::vector<Tensor<double>> dirs;
      double analytic = 0.0;
      double norm = 0.0;
      for (auto& [tensor, grad] : targets) {
        Tensor<double> v(tensor->shape());
        for (std::size_t k = 0; k < v.size(); ++k) {
          v[k] = rng.normal();
          analytic += v[k] * (*grad)[k];
          norm += v[k] * v[k];
        }
        dirs.push_back(std::move(v));
      }
      const auto shift = [&](double s) {
        for (std::size_t t = 0; t < targets.size(); ++t) {
          Tensor<double>& x = *targets[t].first;
          for (std::size_t k = 0; k < x.size(); ++k) x[k] += s * dirs[t][k];
        }
      };
      // Perturbation norm of 10 steps in total, shared by all coordinates.
      const double hd = h / std::sqrt(std::max(norm, 1.0)) * 10.0;
      if (probe(analytic, shift, hd)) break;
    }
  }
  return res;
}

namespace detail {

inline ParamSet<double> gradcheck_params(std::uint64_t seed) {
  ParamSet<double> p = init_params<double>(gradcheck_config(), seed);
  Rng rng(derive_seed(seed, 77));
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.at(i).rank() == 1) {
      for (auto& v : p.at(i).data()) v = rng.uniform(-0.1, 0.1);
    }
  }
  return p;
}

// Flow values kept away from the integer lattice so a central difference does
// not straddle a bilinear kink.
inline Tensor<double> offlattice_flow(int h, int w, Rng& rng, double amplitude) {
  Tensor<double> f = Tensor<double>::chw(2, h, w);
  for (auto& v : f.data()) {
    const double whole = std::floor(rng.uniform(-amplitude, amplitude));
    v = whole + rng.uniform(0.1, 0.9);
  }
  return f;
}

inline GradProblem make_problem(const std::string& block, std::uint64_t seed) {
  Rng rng(derive_seed(seed, std::hash<std::string>{}(block)));
  const ModelConfig c = gradcheck_config();
  GradProblem pr;
  pr.params = gradcheck_params(seed);
  if (block == "warp") {
    pr.inputs = {random_tensor({3, 10, 12}, rng, -1, 1), offlattice_flow(10, 12, rng, 3.0)};
    pr.build = [](ParamBinder<double>& p, const std::vector<Var>& v) { return warp(p.graph(), v[0], v[1]); };
  } else if (block == "global_correlation") {
    pr.inputs = {random_tensor({4, 6, 6}, rng, -1, 1), random_tensor({4, 5, 7}, rng, -1, 1)};
    pr.build = [](ParamBinder<double>& p, const std::vector<Var>& v) {
      return global_correlation(p.graph(), v[0], v[1]);
    };
  } else if (block == "local_correlation") {
    pr.inputs = {random_tensor({4, 9, 9}, rng, -1, 1), random_tensor({4, 9, 9}, rng, -1, 1)};
    pr.build = [](ParamBinder<double>& p, const std::vector<Var>& v) {
      return local_correlation(p.graph(), v[0], v[1], 3);
    };
  } else if (block == "l2_normalize") {
    pr.inputs = {random_tensor({5, 8, 8}, rng, -1, 1)};
    pr.build = [](ParamBinder<double>& p, const std::vector<Var>& v) { return l2_normalize(p.graph(), v[0]); };
  } else if (block == "resize_flow") {
    pr.inputs = {random_tensor({2, 8, 8}, rng, -2, 2)};
    pr.build = [](ParamBinder<double>& p, const std::vector<Var>& v) { return resize_flow(p.graph(), v[0], 16, 12); };
  } else if (block == "convex_upsample") {
    pr.inputs = {random_tensor({2, 8, 8}, rng, -2, 2), random_tensor({kUpsampleWeights, 8, 8}, rng, -2, 2)};
    pr.build = [](ParamBinder<double>& p, const std::vector<Var>& v) {
      Graph<double>& g = p.graph();
      return convex_upsample(g, v[0], softmax_groups(g, v[1], 9), kUpsampleFactor);
    };
  } else if (block == "pyramid") {
    pr.inputs = {random_tensor({3, 32, 32}, rng, 0, 1)};
    pr.build = [](ParamBinder<double>& p, const std::vector<Var>& v) { return extract_pyramid(p, v[0]).levels[3]; };
  } else if (block == "decoder_l1") {
    const int gg = c.global_grid;
    pr.inputs = {random_tensor({gg * gg, 8, 8}, rng, -1, 1), random_tensor({2, 8, 8}, rng, -2, 2)};
    pr.build = [c](ParamBinder<double>& p, const std::vector<Var>& v) { return flow_decoder(p, 1, v[0], v[1], c); };
  } else if (block == "decoder") {
    pr.inputs = {random_tensor({local_channel_count(c.local_radius), 8, 8}, rng, -1, 1),
                 random_tensor({2, 8, 8}, rng, -2, 2)};
    pr.build = [c](ParamBinder<double>& p, const std::vector<Var>& v) { return flow_decoder(p, 2, v[0], v[1], c); };
  } else if (block == "convgru_cell") {
    pr.inputs = {random_tensor({c.context + c.motion, 8, 8}, rng, -1, 1), random_tensor({c.hidden, 8, 8}, rng, -0.9, 0.9)};
    pr.build = [](ParamBinder<double>& p, const std::vector<Var>& v) { return convgru_cell(p, "ref.gru", v[0], v[1]); };
  } else if (block == "hierarchical_align") {
    pr.inputs = {random_tensor({3, 64, 64}, rng, 0, 1), random_tensor({3, 64, 64}, rng, 0, 1)};
    pr.build = [c](ParamBinder<double>& p, const std::vector<Var>& v) {
      return hierarchical_align(p, extract_pyramid(p, v[0]), extract_pyramid(p, v[1]), c).flows[2];
    };
    pr.tolerance = 1e-3;
  } else if (block == "refine_recurrent") {
    // 32x32 input: full-resolution flow plus stride-4 feature maps.
    const int x4 = c.pyramid_channels[3];
    pr.inputs = {offlattice_flow(32, 32, rng, 1.0), random_tensor({x4, 8, 8}, rng, -1, 1),
                 random_tensor({x4, 8, 8}, rng, -1, 1)};
    pr.build = [c](ParamBinder<double>& p, const std::vector<Var>& v) {
      return refine_recurrent(p, v[0], v[1], v[2], c, c.iterations).back();
    };
    pr.tolerance = 1e-3;
  } else {
    throw InvalidArgument("unknown gradient-check block '" + block + "'");
  }
  return pr;
}

}  // namespace detail

inline std::vector<std::string> gradcheck_blocks() {
  return {"warp",    "global_correlation", "local_correlation", "l2_normalize",       "resize_flow",     "convex_upsample",
          "pyramid", "decoder_l1",         "decoder",           "convgru_cell",       "hierarchical_align", "refine_recurrent"};
}

inline GradCheckResult gradient_check(const std::string& block, std::uint64_t seed = 0,
                                      const GradCheckOptions& options = {}) {
  GradCheckOptions opt = options;
  opt.seed = seed;
  return check_problem(block, detail::make_problem(block, seed), opt);
}

}  // namespace docalign::nn
