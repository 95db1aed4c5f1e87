#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "docalign/metrics.hpp"
#include "docalign/nn/aligner.hpp"
#include "docalign/synth.hpp"

namespace docalign {

// Worker cap from DOCALIGN_THREADS; 0 or unset means serial.
inline int thread_cap() {
  const char* s = std::getenv("DOCALIGN_THREADS");
  if (!s || !*s) return 0;
  char* end = nullptr;
  const long v = std::strtol(s, &end, 10);
  if (*end != '\0' || v < 0) throw InvalidArgument(std::string("DOCALIGN_THREADS must be a non-negative integer, got ") + s);
  return static_cast<int>(std::min<long>(v, 256));
}

// Runs fn(i) for i in [0, n) on up to `threads` workers (0 = inline).
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int workers = std::min(threads, n);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// Optimiser

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const nn::ParamSet<float>& params, AdamConfig c = {})
      : c_(c), m_(params.zeros_like()), v_(params.zeros_like()) {}

  void step(nn::ParamSet<float>& params, const nn::ParamSet<float>& grads, double lr) {
    ++t_;
    const double b1t = 1.0 - std::pow(c_.beta1, double(t_)), b2t = 1.0 - std::pow(c_.beta2, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params.at(i).data();
      const auto& g = grads.at(i).data();
      auto& m = m_.at(i).data();
      auto& v = v_.at(i).data();
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k];
        const double mk = c_.beta1 * m[k] + (1 - c_.beta1) * gk;
        const double vk = c_.beta2 * v[k] + (1 - c_.beta2) * gk * gk;
        m[k] = static_cast<float>(mk);
        v[k] = static_cast<float>(vk);
        p[k] = static_cast<float>(p[k] - lr * (mk / b1t) / (std::sqrt(vk / b2t) + c_.eps));
      }
    }
  }

  long steps() const { return t_; }

 private:
  AdamConfig c_;
  nn::ParamSet<float> m_, v_;
  long t_ = 0;
};

inline double global_norm(const nn::ParamSet<float>& grads) {
  double s = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    for (float v : grads.at(i).data()) s += double(v) * v;
  }
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Data

struct FlowSample {
  std::string id;
  Image<float> photo;  // source
  Image<float> clean;  // target
  FlowField<float> flow;
};

inline Image<float> as_rgb(const Image<float>& img) {
  if (img.channels() == 3) return img;
  Image<float> rgb(3, img.height(), img.width());
  for (int c = 0; c < 3; ++c) std::copy(img.plane(0).begin(), img.plane(0).end(), rgb.plane(c).begin());
  return rgb;
}

// Loads every record of <dir>/manifest.jsonl.
inline std::vector<FlowSample> load_samples(const std::filesystem::path& dir) {
  std::vector<FlowSample> out;
  for (const auto& r : read_manifest(dir / "manifest.jsonl")) {
    FlowSample s;
    s.id = r.id;
    s.photo = as_rgb(read_image(dir / r.photo));
    s.clean = as_rgb(read_image(dir / r.clean));
    s.flow = read_flow(dir / r.flow);
    require_same_extent(s.photo, s.clean, ("sample " + r.id).c_str());
    require_same_extent(s.photo, s.flow, ("sample " + r.id).c_str());
    out.push_back(std::move(s));
  }
  return out;
}

inline FlowSample sample_from_triplet(const Triplet& t, std::string id) {
  return {std::move(id), t.photo, t.clean, t.flow};
}

// Label-preserving augmentation: one of the 8 dihedral symmetries of the
// pixel grid (4 on non-square inputs) plus a channel permutation shared by
// both images. With out(p) = in(M p) about the image centre, the flow
// becomes M^T f(M p), which keeps warp(photo, flow) ~ clean exact.
inline FlowSample augment_sample(const FlowSample& s, Rng& rng) {
  const int h = s.photo.height(), w = s.photo.width();
  const int ops = h == w ? 8 : 4;
  const int op = rng.uniform_int(0, ops - 1);
  const bool transpose = op >= 4;
  const int fx = (op & 1) ? -1 : 1, fy = (op & 2) ? -1 : 1;
  // M = diag(fx, fy) * (transpose ? swap : I)
  const int a = transpose ? 0 : fx, b = transpose ? fx : 0, c = transpose ? fy : 0, d = transpose ? 0 : fy;
  std::array<int, 3> perm{0, 1, 2};
  for (int i = 2; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);

  const auto src_x = [&](int x, int y) { return (a * (2 * x - (w - 1)) + b * (2 * y - (h - 1)) + (w - 1)) / 2; };
  const auto src_y = [&](int x, int y) { return (c * (2 * x - (w - 1)) + d * (2 * y - (h - 1)) + (h - 1)) / 2; };
  FlowSample out{s.id, Image<float>(3, h, w), Image<float>(3, h, w), FlowField<float>(h, w)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int sx = src_x(x, y), sy = src_y(x, y);
      for (int ch = 0; ch < 3; ++ch) {
        out.photo(ch, y, x) = s.photo(perm[ch], sy, sx);
        out.clean(ch, y, x) = s.clean(perm[ch], sy, sx);
      }
      const float u = s.flow(0, sy, sx), v = s.flow(1, sy, sx);
      out.flow(0, y, x) = static_cast<float>(a * u + c * v);
      out.flow(1, y, x) = static_cast<float>(b * u + d * v);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Supervised training

struct TrainConfig {
  double lr = 1e-4;
  double lr_decay = 0.3;
  int decay_every = 30;  // epochs
  int batch_size = 1;
  int epochs = 1;
  long max_steps = 0;    // 0 = no cap
  int iterations = 7;
  double clip_norm = 0.0;  // 0 = no clipping
  bool augment = false;    // random symmetry + channel permutation per sample
  std::uint64_t seed = 0;
  int threads = 0;
  AdamConfig adam;

  void validate() const {
    if (!(lr > 0) || !(lr_decay > 0) || decay_every < 1 || batch_size < 1 || epochs < 1 || max_steps < 0 ||
        iterations < 0 || clip_norm < 0 || threads < 0) {
      throw InvalidArgument("train config: hyperparameters must be positive");
    }
  }
  double lr_at(int epoch) const { return lr * std::pow(lr_decay, double(epoch / decay_every)); }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},       {"lr_decay", c.lr_decay},   {"decay_every", c.decay_every}, {"batch_size", c.batch_size},
       {"epochs", c.epochs}, {"max_steps", c.max_steps}, {"iterations", c.iterations},   {"clip_norm", c.clip_norm},
       {"augment", c.augment}, {"seed", c.seed},   {"threads", c.threads}};
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* what) {
  if (!j.is_object()) throw InvalidArgument(std::string(what) + ": expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* n) { return k == n; }) == known.end()) {
      throw InvalidArgument(std::string(what) + ": unknown key \"" + k + "\"");
    }
  }
}

}  // namespace detail

// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  detail::reject_unknown(j, {"lr", "lr_decay", "decay_every", "batch_size", "epochs", "max_steps", "iterations",
                             "clip_norm", "augment", "seed", "threads"},
                         "train config");
  const TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.lr_decay = j.value("lr_decay", d.lr_decay);
  c.decay_every = j.value("decay_every", d.decay_every);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.iterations = j.value("iterations", d.iterations);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.augment = j.value("augment", d.augment);
  c.seed = j.value("seed", d.seed);
  c.threads = j.value("threads", d.threads);
}

struct LogEntry {
  int epoch = 0;
  long step = 0;
  double loss = 0.0;
};

inline void write_loss_log(const std::filesystem::path& path, const std::vector<LogEntry>& log) {
  std::ostringstream s;
  s << "epoch,step,loss\n";
  s.precision(9);
  for (const auto& e : log) s << e.epoch << ',' << e.step << ',' << e.loss << '\n';
  const std::string text = s.str();
  write_bytes(path, Bytes(text.begin(), text.end()));
}

struct TrainResult {
  nn::ParamSet<float> params;
  std::vector<LogEntry> log;  // one entry per optimiser step
};

// Loss and parameter gradients of one sample.
inline double sample_gradients(const nn::ParamSet<float>& params, const nn::ModelConfig& c, const FlowSample& s,
                               nn::ParamSet<float>& grads) {
  nn::Graph<float> g;
  nn::ParamBinder<float> p(g, params, &grads);
  const auto r = nn::forward(p, g.constant(nn::image_tensor(s.photo)), g.constant(nn::image_tensor(s.clean)), c);
  const nn::Var loss = nn::supervised_loss(g, r, s.flow);
  const double value = g.value(loss).data()[0];
  if (!std::isfinite(value)) throw NumericError("non-finite training loss on sample " + s.id);
  g.backward(loss);
  return value;
}

// Mean gradient over a batch. Samples are processed independently (in
// parallel when threads > 1) and summed in batch order, so the result does
// not depend on the thread count.
template <class F>
double batch_gradients(const nn::ParamSet<float>& params, int n, int threads, nn::ParamSet<float>& out, F&& per_sample) {
  std::vector<nn::ParamSet<float>> grads(n);
  std::vector<double> losses(n, 0.0);
  parallel_for(n, threads, [&](int i) {
    grads[i] = params.zeros_like();
    losses[i] = per_sample(i, grads[i]);
  });
  out.zero();
  for (int i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < out.size(); ++k) {
      auto& o = out.at(k).data();
      const auto& gi = grads[i].at(k).data();
      for (std::size_t e = 0; e < o.size(); ++e) o[e] += gi[e];
    }
  }
  const float inv = 1.0f / float(n);
  for (std::size_t k = 0; k < out.size(); ++k) {
    for (auto& v : out.at(k).data()) v *= inv;
  }
  return std::accumulate(losses.begin(), losses.end(), 0.0) / double(n);
}

inline void clip_gradients(nn::ParamSet<float>& grads, double max_norm) {
  if (max_norm <= 0) return;
  const double n = global_norm(grads);
  if (n <= max_norm) return;
  const float s = static_cast<float>(max_norm / n);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    for (auto& v : grads.at(k).data()) v *= s;
  }
}

using StepCallback = std::function<void(const LogEntry&, const nn::ParamSet<float>&)>;

// Adam on the summed multi-level L1 loss. The epoch order is a seeded
// shuffle; lr decays by lr_decay every decay_every epochs. Throws
// NumericError on a non-finite loss or parameter.
inline TrainResult train_supervised(const std::vector<FlowSample>& data, nn::ParamSet<float> params,
                                    const nn::ModelConfig& model, const TrainConfig& config,
                                    const StepCallback& on_step = {}) {
  config.validate();
  if (data.empty()) throw InvalidArgument("train_supervised: empty dataset");
  nn::ModelConfig c = model;
  c.iterations = config.iterations;
  TrainResult r;
  Adam adam(params, config.adam);
  nn::ParamSet<float> grads = params.zeros_like();
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<int> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(config.seed, std::uint64_t(epoch)));
    for (int i = int(order.size()) - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      if (config.max_steps > 0 && step >= config.max_steps) break;
      const int n = static_cast<int>(std::min<std::size_t>(config.batch_size, order.size() - b));
      const double loss = batch_gradients(params, n, config.threads, grads, [&](int i, nn::ParamSet<float>& g) {
        const FlowSample& s = data[order[b + i]];
        if (!config.augment) return sample_gradients(params, c, s, g);
        Rng arng(derive_seed(derive_seed(config.seed ^ 0xa5a5a5a5ull, std::uint64_t(step)), std::uint64_t(i)));
        return sample_gradients(params, c, augment_sample(s, arng), g);
      });
      if (!grads.all_finite()) throw NumericError("non-finite gradient at step " + std::to_string(step));
      clip_gradients(grads, config.clip_norm);
      adam.step(params, grads, config.lr_at(epoch));
      if (!params.all_finite()) throw NumericError("non-finite parameters after step " + std::to_string(step));
      r.log.push_back({epoch, step, loss});
      if (on_step) on_step(r.log.back(), params);
      ++step;
    }
    if (config.max_steps > 0 && step >= config.max_steps) break;
  }
  r.params = std::move(params);
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

inline std::vector<FlowField<float>> predict_all(const nn::ParamSet<float>& params, const nn::ModelConfig& c,
                                                 const std::vector<FlowSample>& data, int threads = 0) {
  std::vector<FlowField<float>> out(data.size());
  parallel_for(int(data.size()), threads,
               [&](int i) { out[i] = nn::predict(params, c, data[i].photo, data[i].clean); });
  return out;
}

inline FlowEvalReport evaluate_samples(const std::vector<FlowField<float>>& preds, const std::vector<FlowSample>& data) {
  if (preds.size() != data.size()) throw InvalidArgument("evaluate_samples: prediction count mismatch");
  std::vector<FlowEvalReport> reports;
  for (std::size_t i = 0; i < data.size(); ++i) reports.push_back(evaluate_flow(preds[i], data[i].flow));
  return merge_reports(reports);
}

inline FlowEvalReport zero_flow_report(const std::vector<FlowSample>& data) {
  std::vector<FlowField<float>> zeros;
  for (const auto& s : data) zeros.emplace_back(s.flow.height(), s.flow.width());
  return evaluate_samples(zeros, data);
}

// ---------------------------------------------------------------------------
// Self-supervised fine-tuning

struct AlignPair {
  std::string id;
  Image<float> source;  // pre-aligned photo
  Image<float> target;  // clean image
};

struct SelfsupConfig {
  double lr = 1e-4;
  int epochs = 10;
  int augmentations = 3;  // flow-augmented copies per pair
  double augment_scale = 0.5;  // fraction of the default synthetic distortion
  int iterations = 7;
  std::uint64_t seed = 0;
  int threads = 0;
  AdamConfig adam;

  void validate() const {
    if (!(lr > 0) || epochs < 1 || augmentations < 0 || !(augment_scale >= 0) || iterations < 0 || threads < 0) {
      throw InvalidArgument("selfsup config: hyperparameters must be positive");
    }
  }
};

inline void to_json(nlohmann::json& j, const SelfsupConfig& c) {
  j = {{"lr", c.lr},       {"epochs", c.epochs},   {"augmentations", c.augmentations}, {"augment_scale", c.augment_scale},
       {"iterations", c.iterations}, {"seed", c.seed}, {"threads", c.threads}};
}

// Source re-sampled through a random smooth flow, white outside the page.
inline Image<float> augment_source(const Image<float>& source, double scale, std::uint64_t seed) {
  SynthParams p = SynthParams::scaled(source.height());
  p.raw_range = {p.raw_range[0] * scale, p.raw_range[1] * scale};
  p.translation = {p.translation[0] * scale, p.translation[1] * scale};
  p.scaling = {p.scaling[0] * scale, p.scaling[1] * scale};
  p.canvas = source.height();
  if (source.width() != source.height()) throw ShapeError("augment_source: square images only");
  return warp_clean(source, random_flow(p, seed));
}

inline double selfsup_sample(const nn::ParamSet<float>& params, const nn::ModelConfig& c, const Image<float>& source,
                             const Image<float>& target, nn::ParamSet<float>* grads) {
  nn::Graph<float> g;
  nn::ParamBinder<float> p(g, params, grads);
  const auto r = nn::forward(p, g.constant(nn::image_tensor(source)), g.constant(nn::image_tensor(target)), c);
  const nn::Var loss = nn::gradient_alignment_loss(g, r.flow, source, target);
  const double value = g.value(loss).data()[0];
  if (!std::isfinite(value)) throw NumericError("non-finite self-supervised loss");
  if (grads) g.backward(loss);
  return value;
}

// Mean gradient-alignment loss of the model's own flows over the pairs.
inline double selfsup_loss(const nn::ParamSet<float>& params, const nn::ModelConfig& c,
                           const std::vector<AlignPair>& pairs, int threads = 0) {
  if (pairs.empty()) throw InvalidArgument("selfsup_loss: no pairs");
  std::vector<double> l(pairs.size());
  parallel_for(int(pairs.size()), threads,
               [&](int i) { l[i] = selfsup_sample(params, c, pairs[i].source, pairs[i].target, nullptr); });
  return std::accumulate(l.begin(), l.end(), 0.0) / double(l.size());
}

inline void from_json(const nlohmann::json& j, SelfsupConfig& c) {
  detail::reject_unknown(j, {"lr", "epochs", "augmentations", "augment_scale", "iterations", "seed", "threads"},
                         "selfsup config");
  const SelfsupConfig d;
  c.lr = j.value("lr", d.lr);
  c.epochs = j.value("epochs", d.epochs);
  c.augmentations = j.value("augmentations", d.augmentations);
  c.augment_scale = j.value("augment_scale", d.augment_scale);
  c.iterations = j.value("iterations", d.iterations);
  c.seed = j.value("seed", d.seed);
  c.threads = j.value("threads", d.threads);
}

struct SelfsupResult {
  nn::ParamSet<float> params;
  std::vector<LogEntry> log;  // one entry per mini-batch
};

// Fine-tunes on unlabeled pairs: each mini-batch is one pair plus
// `augmentations` copies whose source went through a fresh random flow.
// No ground-truth flow is consumed.
inline SelfsupResult selfsup_finetune(const std::vector<AlignPair>& pairs, nn::ParamSet<float> params,
                                      const nn::ModelConfig& model, const SelfsupConfig& config,
                                      const StepCallback& on_step = {}) {
  config.validate();
  if (pairs.empty()) throw InvalidArgument("selfsup_finetune: no pairs");
  nn::ModelConfig c = model;
  c.iterations = config.iterations;
  SelfsupResult r;
  Adam adam(params, config.adam);
  nn::ParamSet<float> grads = params.zeros_like();
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<int> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(config.seed, std::uint64_t(epoch)));
    for (int i = int(order.size()) - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
    for (int idx : order) {
      const AlignPair& pair = pairs[idx];
      std::vector<Image<float>> sources{pair.source};
      for (int a = 0; a < config.augmentations; ++a) {
        const std::uint64_t s = derive_seed(derive_seed(config.seed, 1000003ull * (epoch + 1) + idx), a);
        sources.push_back(augment_source(pair.source, config.augment_scale, s));
      }
      const double loss = batch_gradients(params, int(sources.size()), config.threads, grads,
                                          [&](int i, nn::ParamSet<float>& g) {
                                            return selfsup_sample(params, c, sources[i], pair.target, &g);
                                          });
      if (!grads.all_finite()) throw NumericError("non-finite gradient at step " + std::to_string(step));
      adam.step(params, grads, config.lr);
      if (!params.all_finite()) throw NumericError("non-finite parameters after step " + std::to_string(step));
      r.log.push_back({epoch, step, loss});
      if (on_step) on_step(r.log.back(), params);
      ++step;
    }
  }
  r.params = std::move(params);
  return r;
}

}  // namespace docalign
