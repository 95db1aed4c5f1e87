// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any selected criterion fails.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <set>

#include "docalign/annotate.hpp"
#include "docalign/correlation.hpp"
#include "docalign/metrics.hpp"
#include "docalign/nn/gradcheck.hpp"
#include "docalign/prealign.hpp"
#include "docalign/synth.hpp"
#include "docalign/train.hpp"

namespace da = docalign;
namespace nn = docalign::nn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

da::Planar<double> random_planar(int c, int h, int w, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  da::Rng rng(seed);
  da::Planar<double> p(c, h, w);
  for (auto& v : p.data()) v = rng.uniform(lo, hi);
  return p;
}

da::FlowField<double> random_field(int h, int w, std::uint64_t seed) {
  return da::FlowField<double>(random_planar(2, h, w, seed, -4.0, 4.0));
}

std::vector<da::Point> random_points(int n, std::uint64_t seed, double lo, double hi) {
  da::Rng rng(seed);
  std::vector<da::Point> pts(n);
  for (auto& p : pts) p = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
  return pts;
}

// ---------------------------------------------------------------------------

Outcome oracles() {
  Outcome o;
  int mismatches = 0;
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    const auto r = random_planar(4, 6, 6, 1000 + trial);
    const auto q = random_planar(4, 6, 6, 2000 + trial);
    const auto glob = da::global_correlation(r, q);
    for (int ry = 0; ry < 6; ++ry)
      for (int rx = 0; rx < 6; ++rx)
        for (int qy = 0; qy < 6; ++qy)
          for (int qx = 0; qx < 6; ++qx) {
            double acc = 0.0;
            for (int c = 0; c < 4; ++c) acc += r(c, ry, rx) * q(c, qy, qx);
            mismatches += glob.global_entry(ry * 6 + rx, qy * 6 + qx) != acc;
          }
    for (int radius : {1, 2, 4}) {
      const auto loc = da::local_correlation(r, q, radius);
      for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x)
          for (int dy = -radius; dy <= radius; ++dy)
            for (int dx = -radius; dx <= radius; ++dx) {
              const int qy = y + dy, qx = x + dx;
              double acc = 0.0;
              if (qy >= 0 && qx >= 0 && qy < 6 && qx < 6) {
                for (int c = 0; c < 4; ++c) acc += r(c, y, x) * q(c, qy, qx);
              }
              mismatches += loc.local_entry(y, x, dy, dx) != acc;
            }
    }
  }
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto a = random_field(16, 16, 300 + s), b = random_field(16, 16, 400 + s);
    double acc = 0.0;
    std::vector<double> err;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        const double dx = a.x(y, x) - b.x(y, x), dy = a.y(y, x) - b.y(y, x);
        err.push_back(std::sqrt(dx * dx + dy * dy));
        acc += err.back();
      }
    worst = std::max(worst, std::abs(da::aepe(a, b) - acc / 256.0));
    for (double t : {0.5, 1.0, 3.0, 5.0}) {
      int hit = 0;
      for (double e : err) hit += e <= t;
      worst = std::max(worst, std::abs(da::pck(a, b, t) - hit / 256.0));
    }
  }
  o.pass = mismatches == 0 && worst <= 1e-9;
  o.detail = "correlation mismatches " + std::to_string(mismatches) + ", metric max diff " + fmt("%.3g", worst);
  return o;
}

Outcome gradients() {
  Outcome o;
  for (const char* block : {"warp", "global_correlation", "local_correlation", "decoder", "convgru_cell",
                            "convex_upsample", "refine_recurrent"}) {
    const auto r = nn::gradient_check(block, 1);
    const double limit = std::string(block) == "refine_recurrent" ? 1e-3 : 1e-4;
    const bool ok = r.max_rel_error < limit;
    o.pass = o.pass && ok;
    if (!o.detail.empty()) o.detail += ", ";
    o.detail += std::string(block) + " " + fmt("%.2g", r.max_rel_error);
  }
  return o;
}

Outcome convexity_and_shapes() {
  Outcome o;
  int violations = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    da::Rng rng(500 + trial);
    const int h = 3 + int(trial % 4), w = 4 + int(trial % 3);
    da::FlowField<double> f(h, w);
    for (auto& v : f.data()) v = rng.uniform(-5.0, 5.0);
    nn::Graph<double> g;
    const auto logits = g.constant(nn::detail::random_tensor({nn::kUpsampleWeights, h, w}, rng, -3, 3));
    const auto weights = g.value(nn::softmax_groups(g, logits, 9)).to_planar();
    const auto up = nn::convex_upsample(f, weights);
    for (int ch = 0; ch < 2; ++ch)
      for (int i = 0; i < 4 * h; ++i)
        for (int j = 0; j < 4 * w; ++j) {
          double lo = 1e300, hi = -1e300;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const double v = f(ch, std::clamp(i / 4 + dy, 0, h - 1), std::clamp(j / 4 + dx, 0, w - 1));
              lo = std::min(lo, v);
              hi = std::max(hi, v);
            }
          violations += up(ch, i, j) < 4 * lo - 1e-9 || up(ch, i, j) > 4 * hi + 1e-9;
        }
  }
  std::string shapes;
  bool shapes_ok = true;
  const auto params = nn::init_params<float>(nn::ModelConfig{}, 19);
  for (int n : {64, 96, 128}) {
    da::Rng rng(n);
    da::Image<float> a(3, n, n), b(3, n, n);
    for (auto& v : a.data()) v = float(rng.uniform());
    for (auto& v : b.data()) v = float(rng.uniform());
    const auto f = nn::predict(params, nn::ModelConfig{}, a, b);
    const bool ok = f.channels() == 2 && f.height() == n && f.width() == n && f.all_finite();
    shapes_ok = shapes_ok && ok;
    shapes += " " + std::to_string(f.channels()) + "x" + std::to_string(f.height()) + "x" + std::to_string(f.width());
  }
  o.pass = violations == 0 && shapes_ok;
  o.detail = "bound violations " + std::to_string(violations) + ", output shapes" + shapes;
  return o;
}

Outcome tps() {
  double interp = 0.0, affine = 0.0, energy = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    da::ControlPoints cp;
    cp.source = random_points(16, 600 + s, 0, 256);
    cp.target = random_points(16, 700 + s, 0, 256);
    const auto t = da::tps_fit(cp, 0.0);
    for (std::size_t i = 0; i < cp.source.size(); ++i) {
      const auto p = t(cp.source[i]);
      interp = std::max({interp, std::abs(p.x - cp.target[i].x), std::abs(p.y - cp.target[i].y)});
    }

    // Affine correspondences, and the least-squares affine fit to them.
    da::Rng rng(800 + s);
    double m[6];
    for (auto& v : m) v = rng.uniform(-0.3, 0.3);
    m[0] += 1.0;
    m[4] += 1.0;
    m[2] *= 100.0;
    m[5] *= 100.0;
    da::ControlPoints aff;
    aff.source = random_points(16, 900 + s, 0, 200);
    for (const auto& p : aff.source) {
      aff.target.push_back({m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5]});
    }
    Eigen::MatrixXd a(16, 3), b(16, 2);
    for (int i = 0; i < 16; ++i) {
      a.row(i) << aff.source[i].x, aff.source[i].y, 1.0;
      b.row(i) << aff.target[i].x, aff.target[i].y;
    }
    const Eigen::MatrixXd ls = a.colPivHouseholderQr().solve(b);
    const auto ta = da::tps_fit(aff, 0.0);
    for (const auto& q : random_points(100, 1000 + s, -50, 250)) {
      const auto p = ta(q);
      const double ox = ls(0, 0) * q.x + ls(1, 0) * q.y + ls(2, 0);
      const double oy = ls(0, 1) * q.x + ls(1, 1) * q.y + ls(2, 1);
      affine = std::max({affine, std::abs(p.x - ox), std::abs(p.y - oy)});
    }
    energy = std::max(energy, ta.bending_energy());
  }
  Outcome o;
  o.pass = interp <= 1e-6 && affine <= 1e-6 && energy < 1e-9;
  o.detail = "interpolation " + fmt("%.2g", interp) + ", affine " + fmt("%.2g", affine) + ", bending energy " +
             fmt("%.2g", energy);
  return o;
}

Outcome synthesis(const fs::path& work) {
  Outcome o;
  const auto params = da::SynthParams::scaled(256);
  da::DatasetOptions opt;
  opt.count = 50;
  opt.resume = false;
  fs::remove_all(work / "synth");
  const auto recs = da::generate_dataset(params, work / "synth" / "a", opt);
  da::generate_dataset(params, work / "synth" / "b", opt);
  double worst = 0.0;
  int differing = 0;
  for (const auto& r : recs) {
    worst = std::max(worst, da::reconstruction_error(da::make_triplet(params, r.seed)));
    for (const auto& f : {r.clean, r.photo, r.flow}) {
      differing += da::read_bytes(work / "synth" / "a" / f) != da::read_bytes(work / "synth" / "b" / f);
    }
  }
  differing += da::read_bytes(work / "synth" / "a" / "manifest.jsonl") !=
               da::read_bytes(work / "synth" / "b" / "manifest.jsonl");
  o.pass = recs.size() == 50 && worst < 2.0 / 255.0 && differing == 0;
  o.detail = std::to_string(recs.size()) + " triplets, worst reconstruction error " + fmt("%.3g", worst * 255.0) +
             "/255, differing files " + std::to_string(differing);
  return o;
}

// ---------------------------------------------------------------------------
// Toy training, shared by the last criteria.

struct ToyRun {
  std::vector<da::FlowSample> train, heldout;
  nn::ModelConfig model;
  nn::ParamSet<float> untrained, trained;
  bool trained_ok = false;
};

da::TrainConfig pinned_train_config() {
  da::TrainConfig tc;
  tc.lr = 4e-4;
  tc.batch_size = 2;
  tc.clip_norm = 1.0;
  tc.augment = true;
  tc.decay_every = 7;
  tc.epochs = 1000;
  tc.max_steps = 2000;
  tc.iterations = 7;
  tc.seed = 11;
  return tc;
}

void prepare_data(ToyRun& run, const fs::path& work) {
  if (!run.train.empty()) return;
  auto params = da::SynthParams::scaled(64);
  da::DatasetOptions opt;
  opt.count = 200;
  params.seed = 1;
  da::generate_dataset(params, work / "toy" / "train", opt);
  opt.count = 20;
  opt.split = "heldout";
  params.seed = 2;
  da::generate_dataset(params, work / "toy" / "heldout", opt);
  run.train = da::load_samples(work / "toy" / "train");
  run.heldout = da::load_samples(work / "toy" / "heldout");
  run.model.iterations = 7;
  run.untrained = nn::init_params<float>(run.model, 1);
}

void train_toy(ToyRun& run, const fs::path& work, bool reuse) {
  prepare_data(run, work);
  if (run.trained_ok) return;
  const fs::path ckpt = work / "toy" / "model.dapm";
  if (reuse && fs::exists(ckpt)) {
    run.trained = nn::load_checkpoint(ckpt);
  } else {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = da::train_supervised(run.train, run.untrained, run.model, pinned_train_config(),
                                        [&](const da::LogEntry& e, const nn::ParamSet<float>&) {
                                          if ((e.step + 1) % 100 == 0) {
                                            const double s = std::chrono::duration<double>(
                                                                 std::chrono::steady_clock::now() - t0)
                                                                 .count();
                                            std::fprintf(stderr, "  step %ld loss %.3f (%.0f s)\n", e.step + 1, e.loss,
                                                         s);
                                          }
                                        });
    run.trained = r.params;
    nn::save_checkpoint(ckpt, run.trained);
    da::write_loss_log(work / "toy" / "loss.csv", r.log);
  }
  run.trained_ok = true;
}

Outcome toy_training(ToyRun& run, const fs::path& work, bool reuse) {
  train_toy(run, work, reuse);
  const auto zero = da::zero_flow_report(run.heldout);
  const auto before = da::evaluate_samples(da::predict_all(run.untrained, run.model, run.heldout), run.heldout);
  const auto after = da::evaluate_samples(da::predict_all(run.trained, run.model, run.heldout), run.heldout);
  Outcome o;
  o.pass = after.aepe <= 0.5 * zero.aepe && after.pck.at(1.0) > before.pck.at(1.0);
  o.detail = "held-out AEPE " + fmt("%.3f", after.aepe) + " (zero flow " + fmt("%.3f", zero.aepe) + ", limit " +
             fmt("%.3f", 0.5 * zero.aepe) + "), PCK-1px " + fmt("%.3f", after.pck.at(1.0)) + " vs untrained " +
             fmt("%.3f", before.pck.at(1.0));
  return o;
}

Outcome self_supervision(ToyRun& run, const fs::path& work, bool reuse) {
  train_toy(run, work, reuse);
  // Pairs are read without their flow files.
  std::vector<da::AlignPair> pairs;
  const auto recs = da::read_manifest(work / "toy" / "heldout" / "manifest.jsonl");
  for (int i = 0; i < 8; ++i) {
    const fs::path dir = work / "toy" / "heldout";
    pairs.push_back({recs[i].id, da::as_rgb(da::read_image(dir / recs[i].photo)),
                     da::as_rgb(da::read_image(dir / recs[i].clean))});
  }
  const da::SelfsupConfig sc;
  const double loss0 = da::selfsup_loss(run.trained, run.model, pairs);
  const auto r = da::selfsup_finetune(pairs, run.trained, run.model, sc);
  const double loss1 = da::selfsup_loss(r.params, run.model, pairs);

  const std::vector<da::FlowSample> eval(run.heldout.begin(), run.heldout.begin() + 8);
  const double aepe0 = da::evaluate_samples(da::predict_all(run.trained, run.model, eval), eval).aepe;
  const double aepe1 = da::evaluate_samples(da::predict_all(r.params, run.model, eval), eval).aepe;
  Outcome o;
  o.pass = loss1 <= 0.8 * loss0 && aepe1 <= 1.05 * aepe0;
  o.detail = "alignment loss " + fmt("%.4f", loss0) + " -> " + fmt("%.4f", loss1) + " (ratio " +
             fmt("%.3f", loss1 / loss0) + "), AEPE " + fmt("%.3f", aepe0) + " -> " + fmt("%.3f", aepe1);
  return o;
}

Outcome annotation_transfer(ToyRun& run, const fs::path& work, bool reuse) {
  train_toy(run, work, reuse);
  const auto preds = da::predict_all(run.trained, run.model, run.heldout);
  int over = 0, inexact = 0;
  double worst_margin = -1e300;
  for (std::size_t k = 0; k < run.heldout.size(); ++k) {
    const auto& gt = run.heldout[k].flow;
    const int h = gt.height(), w = gt.width();
    const da::FlowField<float> zero(h, w);
    double dist = 0.0;
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) {
        const da::Point p{(j + 0.5) * w / 5.0, (i + 0.5) * h / 5.0};
        const auto a = da::transfer_point(p, preds[k], nullptr);
        const auto b = da::transfer_point(p, gt, nullptr);
        dist += std::hypot(a.x - b.x, a.y - b.y);
        const auto z = da::transfer_point(p, zero, nullptr);
        inexact += z.x != p.x || z.y != p.y;
      }
    const double margin = dist / 25.0 - (da::aepe(preds[k], gt) + 0.5);
    worst_margin = std::max(worst_margin, margin);
    over += margin > 0;
  }
  Outcome o;
  o.pass = over == 0 && inexact == 0;
  o.detail = "triplets over bound " + std::to_string(over) + "/" + std::to_string(run.heldout.size()) +
             " (worst margin " + fmt("%+.3f", worst_margin) + " px), inexact zero-flow points " + std::to_string(inexact);
  return o;
}

Outcome metric_fixed_points() {
  const auto pred = da::FlowField<double>::constant(16, 16, 3.0, 4.0);
  const double a = da::aepe(pred, da::FlowField<double>(16, 16));
  const auto unit = da::FlowField<double>::constant(8, 8, 0.6, 0.8);
  const double p = da::pck(unit, da::FlowField<double>(8, 8), 1.0);
  da::Rng rng(3);
  da::Image<float> img(3, 256, 256);
  for (auto& v : img.data()) v = float(rng.uniform());
  const double s = da::ms_ssim(img, img);
  Outcome o;
  o.pass = a == 5.0 && p == 1.0 && std::abs(s - 1.0) <= 1e-6;
  o.detail = "AEPE " + fmt("%.17g", a) + ", PCK " + fmt("%.17g", p) + ", MS-SSIM " + fmt("%.9f", s);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("docalign acceptance checks");
  std::string work = (fs::temp_directory_path() / "docalign_acceptance").string();
  std::vector<int> only;
  bool reuse = false;
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  app.add_flag("--reuse-model", reuse, "Reuse a previously trained toy model from the scratch directory");
  CLI11_PARSE(app, argc, argv);

  const fs::path dir(work);
  fs::create_directories(dir);
  ToyRun toy;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"correlation and metric oracles", [] { return oracles(); }},
      {"gradient checks", [] { return gradients(); }},
      {"convex upsampling bound and output shapes", [] { return convexity_and_shapes(); }},
      {"thin-plate spline properties", [] { return tps(); }},
      {"synthesis invariant and regeneration", [&] { return synthesis(dir); }},
      {"toy supervised training", [&] { return toy_training(toy, dir, reuse); }},
      {"self-supervised fine-tuning", [&] { return self_supervision(toy, dir, reuse); }},
      {"annotation transfer", [&] { return annotation_transfer(toy, dir, reuse); }},
      {"metric fixed points", [] { return metric_fixed_points(); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d %s: %s (%s; %.1f s)\n", id, criteria[i].first, o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
