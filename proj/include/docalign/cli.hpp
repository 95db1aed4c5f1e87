#pragma once

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "docalign/annotate.hpp"
#include "docalign/metrics.hpp"
#include "docalign/nn/gradcheck.hpp"
#include "docalign/prealign.hpp"
#include "docalign/train.hpp"

namespace docalign::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kIo = 3, kNumeric = 4 };

inline constexpr const char* kVersion = "0.1.0";

inline json read_json_file(const fs::path& path) {
  const Bytes b = read_bytes(path);
  try {
    return json::parse(b.begin(), b.end());
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) { write_bytes(path, Bytes(text.begin(), text.end())); }

inline void write_json_file(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// Snapshot of a run: the resolved configuration plus the command line.
inline void write_run_json(const fs::path& dir, const std::string& command, const std::vector<std::string>& argv,
                           const json& config) {
  write_json_file(dir / "run.json",
                  {{"tool", "docalign"}, {"version", kVersion}, {"command", command}, {"argv", argv}, {"config", config}});
}

// Loads an optional JSON file and overlays explicitly given flags on it.
template <class Config>
Config resolve_config(const std::optional<std::string>& file, const json& overrides) {
  json j = file ? read_json_file(*file) : json::object();
  if (!j.is_object()) throw InvalidArgument("config file must hold a JSON object");
  j.update(overrides);
  try {
    Config c = j.get<Config>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
}

template <class T>
void put(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

inline Image<float> checkerboard(const Image<float>& a, const Image<float>& b, int tile) {
  require_same_extent(a, b, "checkerboard");
  Image<float> out = a;
  for (int c = 0; c < a.channels(); ++c) {
    for (int y = 0; y < a.height(); ++y) {
      for (int x = 0; x < a.width(); ++x) {
        if (((x / tile) + (y / tile)) % 2) out(c, y, x) = b(c, y, x);
      }
    }
  }
  return out;
}

inline void log_line(bool verbose, const std::string& s) {
  if (verbose) std::cerr << s << '\n';
}

// ---------------------------------------------------------------------------
// Subcommands. Each registers its flags and returns the action to run after
// a successful parse.

struct Context {
  std::vector<std::string> argv;
  bool verbose = false;
};

using Action = std::function<int(const Context&)>;

inline Action add_synth(CLI::App& app) {
  auto* cmd = app.add_subcommand("synth", "Generate synthetic (clean, photo, flow) triplets");
  struct Opts {
    std::string out;
    int count = 0;
    std::uint64_t seed = 0;
    int size = 1024;
    std::optional<std::string> params, sources;
    std::string split = "train";
    bool no_resume = false;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--out", o->out, "Output directory")->required();
  cmd->add_option("--count", o->count, "Number of triplets")->required()->check(CLI::NonNegativeNumber);
  auto* seed = cmd->add_option("--seed", o->seed, "Master seed");
  cmd->add_option("--size", o->size, "Canvas side in pixels")->check(CLI::PositiveNumber);
  cmd->add_option("--params", o->params, "JSON generator parameters");
  cmd->add_option("--sources", o->sources, "Directory of clean page images");
  cmd->add_option("--split", o->split, "Record id prefix");
  cmd->add_flag("--no-resume", o->no_resume, "Regenerate existing records");
  return [=](const Context& ctx) {
    json pj = o->params ? read_json_file(*o->params) : json::object();
    if (!pj.is_object()) throw InvalidArgument("--params must hold a JSON object");
    if (!pj.contains("canvas")) pj["canvas"] = o->size;
    if (seed->count() || !pj.contains("seed")) pj["seed"] = o->seed;
    SynthParams p;
    try {
      p = pj.get<SynthParams>();
    } catch (const json::exception& e) {
      throw InvalidArgument(std::string("--params: ") + e.what());
    }
    p.validate();
    DatasetOptions d;
    d.count = o->count;
    d.split = o->split;
    if (o->sources) d.sources = *o->sources;
    d.resume = !o->no_resume;
    const fs::path out(o->out);
    const auto records = generate_dataset(p, out, d);
    json cfg = {{"params", p}, {"count", d.count}, {"split", d.split}, {"resume", d.resume}};
    if (d.sources) cfg["sources"] = d.sources->string();
    write_run_json(out, "synth", ctx.argv, cfg);
    log_line(ctx.verbose, "wrote " + std::to_string(records.size()) + " triplets to " + out.string());
    return kOk;
  };
}

inline Action add_prealign(CLI::App& app) {
  auto* cmd = app.add_subcommand("prealign", "Warp a document photo onto the reference rectangle");
  struct Opts {
    std::string photo, out;
    std::optional<std::string> mask;
    PrealignOptions p;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--photo", o->photo, "Input photo")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", o->out, "Output directory")->required();
  cmd->add_option("--mask", o->mask, "Document mask image (white = document)")->check(CLI::ExistingFile);
  cmd->add_option("--points-per-edge", o->p.points_per_edge, "Control points between corners")->check(CLI::NonNegativeNumber);
  cmd->add_option("--lambda", o->p.lambda, "TPS regularisation")->check(CLI::NonNegativeNumber);
  cmd->add_option("--height", o->p.out_height, "Output height (0 = photo height)")->check(CLI::NonNegativeNumber);
  cmd->add_option("--width", o->p.out_width, "Output width (0 = photo width)")->check(CLI::NonNegativeNumber);
  return [=](const Context& ctx) {
    const Image<float> photo = read_image(o->photo);
    std::optional<DocumentMask> mask;
    if (o->mask) mask = mask_from_image(read_image(*o->mask));
    const PrealignResult r = prealign(photo, o->p, mask ? &*mask : nullptr);
    const fs::path out(o->out);
    make_dirs(out);
    write_png(r.image, out / "prealigned.png");
    write_png(mask_to_image(r.mask), out / "mask.png");
    write_flow(r.flow, out / "flow.dafl");
    write_json_file(out / "transform.json", r.transform);
    write_json_file(out / "control_points.json", control_points_json(r.control_points));
    json cfg = {{"photo", o->photo},           {"points_per_edge", o->p.points_per_edge}, {"lambda", o->p.lambda},
                {"out_height", o->p.out_height}, {"out_width", o->p.out_width}};
    if (o->mask) cfg["mask"] = *o->mask;
    write_run_json(out, "prealign", ctx.argv, cfg);
    log_line(ctx.verbose, "pre-aligned " + o->photo + " -> " + (out / "prealigned.png").string());
    return kOk;
  };
}

inline nn::ModelConfig model_for(const nn::ParamSet<float>& params, int iterations) {
  nn::ModelConfig c = nn::ModelConfig::infer(params);
  c.iterations = iterations;
  return c;
}

inline Action add_train(CLI::App& app) {
  auto* cmd = app.add_subcommand("train", "Supervised training on a synthetic dataset");
  struct Opts {
    std::string data, out;
    std::optional<std::string> config, init;
    std::optional<double> lr, lr_decay, clip;
    std::optional<int> decay_every, batch, epochs, iterations;
    std::optional<long> max_steps;
    std::optional<std::uint64_t> seed, init_seed;
    bool augment = false;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--data", o->data, "Dataset directory holding manifest.jsonl")->required();
  cmd->add_option("--out", o->out, "Output directory")->required();
  cmd->add_option("--config", o->config, "JSON training configuration");
  cmd->add_option("--init", o->init, "Checkpoint to start from");
  cmd->add_option("--init-seed", o->init_seed, "Seed of the random initialisation");
  cmd->add_option("--lr", o->lr, "Initial learning rate");
  cmd->add_option("--lr-decay", o->lr_decay, "Learning-rate decay factor");
  cmd->add_option("--decay-every", o->decay_every, "Epochs between decays");
  cmd->add_option("--batch", o->batch, "Mini-batch size");
  cmd->add_option("--epochs", o->epochs, "Epochs");
  cmd->add_option("--max-steps", o->max_steps, "Stop after this many steps (0 = no cap)");
  cmd->add_option("--iterations", o->iterations, "Refinement iterations");
  cmd->add_option("--clip", o->clip, "Gradient-norm clip (0 = off)");
  cmd->add_option("--seed", o->seed, "Shuffle and augmentation seed");
  auto* aug = cmd->add_flag("--augment", o->augment, "Random symmetries and channel permutations");
  return [=](const Context& ctx) {
    json ov = json::object();
    put(ov, "lr", o->lr);
    put(ov, "lr_decay", o->lr_decay);
    put(ov, "clip_norm", o->clip);
    put(ov, "decay_every", o->decay_every);
    put(ov, "batch_size", o->batch);
    put(ov, "epochs", o->epochs);
    put(ov, "iterations", o->iterations);
    put(ov, "max_steps", o->max_steps);
    put(ov, "seed", o->seed);
    if (aug->count()) ov["augment"] = true;
    TrainConfig tc = resolve_config<TrainConfig>(o->config, ov);
    tc.threads = thread_cap();
    const auto data = load_samples(o->data);
    const std::uint64_t init_seed = o->init_seed.value_or(tc.seed);
    nn::ParamSet<float> params = o->init ? nn::load_checkpoint(*o->init) : nn::init_params<float>(nn::ModelConfig{}, init_seed);
    const nn::ModelConfig model = model_for(params, tc.iterations);
    const fs::path out(o->out);
    make_dirs(out);
    json cfg = {{"data", o->data}, {"train", tc}};
    if (o->init) cfg["init"] = *o->init;
    else cfg["init_seed"] = init_seed;
    write_run_json(out, "train", ctx.argv, cfg);
    const long per_epoch = long((data.size() + tc.batch_size - 1) / tc.batch_size);
    const auto r = train_supervised(data, std::move(params), model, tc, [&](const LogEntry& e, const nn::ParamSet<float>& p) {
      if ((e.step + 1) % per_epoch == 0) nn::save_checkpoint(out / "model.dapm", p);
      if (ctx.verbose) std::fprintf(stderr, "epoch %d step %ld loss %.6f\n", e.epoch, e.step, e.loss);
    });
    nn::save_checkpoint(out / "model.dapm", r.params);
    write_loss_log(out / "loss.csv", r.log);
    return kOk;
  };
}

// Source/target pairs from a manifest; flow files are never opened.
inline std::vector<AlignPair> load_pairs(const fs::path& dir) {
  std::vector<AlignPair> out;
  for (const auto& r : read_manifest(dir / "manifest.jsonl")) {
    out.push_back({r.id, as_rgb(read_image(dir / r.photo)), as_rgb(read_image(dir / r.clean))});
  }
  return out;
}

inline Action add_selfsup(CLI::App& app) {
  auto* cmd = app.add_subcommand("selfsup", "Self-supervised fine-tuning on unlabeled pairs");
  struct Opts {
    std::string pairs, model, out;
    std::optional<std::string> config;
    std::optional<double> lr, augment_scale;
    std::optional<int> epochs, augmentations, iterations;
    std::optional<std::uint64_t> seed;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--pairs", o->pairs, "Directory with manifest.jsonl (photo = source, clean = target)")->required();
  cmd->add_option("--model", o->model, "Checkpoint to fine-tune")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", o->out, "Output directory")->required();
  cmd->add_option("--config", o->config, "JSON fine-tuning configuration");
  cmd->add_option("--lr", o->lr, "Learning rate");
  cmd->add_option("--epochs", o->epochs, "Epochs");
  cmd->add_option("--augmentations", o->augmentations, "Flow-augmented copies per pair");
  cmd->add_option("--augment-scale", o->augment_scale, "Strength of augmentation flows");
  cmd->add_option("--iterations", o->iterations, "Refinement iterations");
  cmd->add_option("--seed", o->seed, "Seed");
  return [=](const Context& ctx) {
    json ov = json::object();
    put(ov, "lr", o->lr);
    put(ov, "epochs", o->epochs);
    put(ov, "augmentations", o->augmentations);
    put(ov, "augment_scale", o->augment_scale);
    put(ov, "iterations", o->iterations);
    put(ov, "seed", o->seed);
    SelfsupConfig sc = resolve_config<SelfsupConfig>(o->config, ov);
    sc.threads = thread_cap();
    const auto pairs = load_pairs(o->pairs);
    nn::ParamSet<float> params = nn::load_checkpoint(o->model);
    const nn::ModelConfig model = model_for(params, sc.iterations);
    const fs::path out(o->out);
    make_dirs(out);
    write_run_json(out, "selfsup", ctx.argv, {{"pairs", o->pairs}, {"model", o->model}, {"selfsup", sc}});
    const double before = selfsup_loss(params, model, pairs, sc.threads);
    const auto r = selfsup_finetune(pairs, std::move(params), model, sc, [&](const LogEntry& e, const nn::ParamSet<float>&) {
      if (ctx.verbose) std::fprintf(stderr, "epoch %d step %ld loss %.6f\n", e.epoch, e.step, e.loss);
    });
    const double after = selfsup_loss(r.params, model, pairs, sc.threads);
    nn::save_checkpoint(out / "model.dapm", r.params);
    write_loss_log(out / "loss.csv", r.log);
    write_json_file(out / "summary.json", {{"loss_before", before}, {"loss_after", after}});
    std::printf("%s\n", json({{"loss_before", before}, {"loss_after", after}}).dump().c_str());
    return kOk;
  };
}

inline Action add_align(CLI::App& app) {
  auto* cmd = app.add_subcommand("align", "Predict the flow aligning a source image to a target");
  struct Opts {
    std::string model, source, target, out;
    int iterations = 7;
    int tile = 0;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--model", o->model, "Checkpoint")->required()->check(CLI::ExistingFile);
  cmd->add_option("--source", o->source, "Source (pre-aligned photo)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--target", o->target, "Target (clean image)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", o->out, "Output directory")->required();
  cmd->add_option("--iterations", o->iterations, "Refinement iterations")->check(CLI::NonNegativeNumber);
  cmd->add_option("--tile", o->tile, "Checkerboard tile size (0 = auto)")->check(CLI::NonNegativeNumber);
  return [=](const Context& ctx) {
    const auto params = nn::load_checkpoint(o->model);
    const nn::ModelConfig c = model_for(params, o->iterations);
    const Image<float> source = as_rgb(read_image(o->source));
    const Image<float> target = as_rgb(read_image(o->target));
    const FlowField<float> flow = nn::predict(params, c, source, target);
    const Image<float> warped = warp(source, flow);
    const int tile = o->tile > 0 ? o->tile : std::max(4, std::min(source.height(), source.width()) / 8);
    const fs::path out(o->out);
    make_dirs(out);
    write_flow(flow, out / "flow.dafl");
    write_png(warped, out / "warped.png");
    write_png(checkerboard(warped, target, tile), out / "overlay.png");
    write_run_json(out, "align", ctx.argv,
                   {{"model", o->model}, {"source", o->source}, {"target", o->target}, {"iterations", o->iterations},
                    {"tile", tile}});
    return kOk;
  };
}

inline json table_row(const FlowEvalReport& r) {
  json j = r;
  j["pck_1px"] = r.pck.count(1.0) ? r.pck.at(1.0) : 0.0;
  j["pck_5px"] = r.pck.count(5.0) ? r.pck.at(5.0) : 0.0;
  return j;
}

inline Action add_eval(CLI::App& app) {
  auto* cmd = app.add_subcommand("eval", "AEPE and PCK of predicted flows");
  struct Opts {
    std::optional<std::string> pred, gt, data, model, out;
    bool zero = false;
    int iterations = 7;
    std::vector<double> thresholds = default_pck_thresholds();
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--pred", o->pred, "Predicted flow file");
  cmd->add_option("--gt", o->gt, "Ground-truth flow file");
  cmd->add_option("--data", o->data, "Dataset directory to evaluate a model on");
  cmd->add_option("--model", o->model, "Checkpoint (with --data)");
  cmd->add_flag("--zero", o->zero, "Evaluate the zero-flow baseline (with --data)");
  cmd->add_option("--iterations", o->iterations, "Refinement iterations")->check(CLI::NonNegativeNumber);
  cmd->add_option("--pck", o->thresholds, "PCK thresholds in pixels");
  cmd->add_option("--out", o->out, "Write the report to this JSON file");
  return [=](const Context& ctx) {
    json report;
    json cfg = {{"thresholds", o->thresholds}};
    if (o->pred || o->gt) {
      if (!o->pred || !o->gt || o->data) throw InvalidArgument("eval: use --pred with --gt, or --data");
      report = table_row(evaluate_flow(read_flow(*o->pred), read_flow(*o->gt), o->thresholds));
      cfg["pred"] = *o->pred;
      cfg["gt"] = *o->gt;
    } else {
      if (!o->data || (!o->model) == !o->zero) throw InvalidArgument("eval: --data needs exactly one of --model, --zero");
      const auto data = load_samples(*o->data);
      std::vector<FlowEvalReport> reports;
      json samples = json::array();
      double ssim = 0.0;
      std::optional<nn::ParamSet<float>> params;
      if (o->model) params = nn::load_checkpoint(*o->model);
      for (const auto& s : data) {
        const FlowField<float> pred = params ? nn::predict(*params, model_for(*params, o->iterations), s.photo, s.clean)
                                             : FlowField<float>(s.flow.height(), s.flow.width());
        reports.push_back(evaluate_flow(pred, s.flow, o->thresholds));
        const double m = ms_ssim(warp(s.photo, pred), s.clean);
        ssim += m;
        json row = table_row(reports.back());
        row["id"] = s.id;
        row["ms_ssim"] = m;
        samples.push_back(row);
      }
      report = table_row(merge_reports(reports));
      report["ms_ssim"] = data.empty() ? 0.0 : ssim / double(data.size());
      report["samples"] = samples;
      cfg["data"] = *o->data;
      if (o->model) {
        cfg["model"] = *o->model;
        cfg["iterations"] = o->iterations;
      } else {
        cfg["zero"] = true;
      }
    }
    std::printf("%s\n", report.dump(2).c_str());
    if (o->out) {
      const fs::path out(*o->out);
      if (out.has_parent_path()) make_dirs(out.parent_path());
      write_json_file(out, report);
      write_run_json(out.has_parent_path() ? out.parent_path() : fs::path("."), "eval", ctx.argv, cfg);
    }
    return kOk;
  };
}

inline Action add_transfer(CLI::App& app) {
  auto* cmd = app.add_subcommand("transfer", "Move COCO annotations from the clean image onto the photo");
  struct Opts {
    std::string annotations, flow, out;
    std::optional<std::string> inverse, overlay;
    TransferOptions t;
    bool no_simplify = false;
    std::optional<std::int64_t> image_id;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--annotations", o->annotations, "COCO JSON on the clean image")->required()->check(CLI::ExistingFile);
  cmd->add_option("--flow", o->flow, "Flow aligning the photo to the clean image")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", o->out, "Output COCO JSON")->required();
  cmd->add_option("--inverse-tps", o->inverse, "transform.json from prealign, to reach raw photo coordinates");
  cmd->add_option("--densify", o->t.densify, "Points inserted per polygon edge")->check(CLI::NonNegativeNumber);
  cmd->add_option("--width", o->t.out_width, "Photo width (0 = flow width)")->check(CLI::NonNegativeNumber);
  cmd->add_option("--height", o->t.out_height, "Photo height (0 = flow height)")->check(CLI::NonNegativeNumber);
  cmd->add_flag("--no-simplify", o->no_simplify, "Keep every densified vertex");
  cmd->add_option("--overlay", o->overlay, "Photo to draw the transferred annotations on");
  cmd->add_option("--image-id", o->image_id, "Image id drawn by --overlay (default: first)");
  return [=](const Context& ctx) {
    const AnnotationSet set = read_annotations(o->annotations);
    const FlowField<float> flow = read_flow(o->flow);
    std::optional<TpsTransform> inv;
    if (o->inverse) inv = tps_from_json(read_json_file(*o->inverse));
    TransferOptions t = o->t;
    t.simplify = !o->no_simplify;
    const AnnotationSet moved = transfer_annotations(set, flow, inv ? &*inv : nullptr, t);
    const fs::path out(o->out);
    const fs::path dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
    make_dirs(dir);
    write_annotations(moved, out);
    json cfg = {{"annotations", o->annotations}, {"flow", o->flow},          {"densify", t.densify},
                {"out_width", t.out_width},      {"out_height", t.out_height}, {"simplify", t.simplify}};
    if (o->inverse) cfg["inverse_tps"] = *o->inverse;
    if (o->overlay) {
      if (moved.images.empty()) throw InvalidArgument("transfer: --overlay needs at least one image");
      const std::int64_t id = o->image_id.value_or(moved.images.front().id);
      fs::path img_out = out;
      img_out.replace_extension(".overlay.png");
      write_png(render_overlay(read_image(*o->overlay), moved, id), img_out);
      cfg["overlay"] = *o->overlay;
      cfg["image_id"] = id;
    }
    write_run_json(dir, "transfer", ctx.argv, cfg);
    return kOk;
  };
}

inline Action add_gradcheck(CLI::App& app) {
  auto* cmd = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable block");
  struct Opts {
    bool all = false;
    std::vector<std::string> blocks;
    std::uint64_t seed = 0;
    std::optional<std::string> out;
  };
  auto o = std::make_shared<Opts>();
  auto* all = cmd->add_flag("--all", o->all, "Check every registered block");
  auto* blk = cmd->add_option("--block", o->blocks, "Block name (repeatable)");
  all->excludes(blk);
  cmd->add_option("--seed", o->seed, "Seed of the random probes");
  cmd->add_option("--out", o->out, "Directory for report.json");
  return [=](const Context& ctx) {
    const auto known = nn::gradcheck_blocks();
    std::vector<std::string> blocks = o->all || o->blocks.empty() ? known : o->blocks;
    for (const auto& b : blocks) {
      if (std::find(known.begin(), known.end(), b) == known.end()) throw InvalidArgument("gradcheck: unknown block " + b);
    }
    bool ok = true;
    json rows = json::array();
    for (const auto& b : blocks) {
      const auto r = nn::gradient_check(b, o->seed);
      ok = ok && r.passed();
      std::printf("%-20s max_rel_err %.3e tol %.0e checks %4d  %s\n", b.c_str(), r.max_rel_error, r.tolerance, r.checks,
                  r.passed() ? "PASS" : "FAIL");
      rows.push_back({{"block", b}, {"max_rel_error", r.max_rel_error}, {"tolerance", r.tolerance}, {"checks", r.checks},
                      {"passed", r.passed()}});
    }
    if (o->out) {
      const fs::path out(*o->out);
      make_dirs(out);
      write_json_file(out / "report.json", rows);
      write_run_json(out, "gradcheck", ctx.argv, {{"blocks", blocks}, {"seed", o->seed}});
    }
    return ok ? kOk : kNumeric;
  };
}

// Parses and runs one command line. Library errors map onto exit codes:
// usage and validation 2, I/O and parsing 3, numerical failure 4.
inline int run(std::vector<std::string> args) {
  CLI::App app{"Document image alignment toolkit", "docalign"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Progress on stderr");
  std::vector<std::pair<CLI::App*, Action>> actions;
  const auto reg = [&](Action (*add)(CLI::App&)) {
    Action a = add(app);
    actions.emplace_back(app.get_subcommands([](CLI::App*) { return true; }).back(), std::move(a));
  };
  reg(add_synth);
  reg(add_prealign);
  reg(add_train);
  reg(add_selfsup);
  reg(add_align);
  reg(add_eval);
  reg(add_transfer);
  reg(add_gradcheck);

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  const Context ctx{args, verbose};
  std::string name = "docalign";
  try {
    for (auto& [sub, action] : actions) {
      if (sub->parsed()) {
        name += " " + sub->get_name();
        return action(ctx);
      }
    }
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << name << ": numerical error: " << e.what() << '\n';
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << name << ": I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const InvalidArgument& e) {
    std::cerr << name << ": invalid argument: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << name << ": error: " << e.what() << '\n';
    return kFailure;
  }
}

inline int run(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc)); }

}  // namespace docalign::cli
