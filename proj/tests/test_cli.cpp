#include <gtest/gtest.h>

#include <map>

#include "docalign/cli.hpp"
#include "test_util.hpp"

namespace da = docalign;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "docalign");
  return da::cli::run(args);
}

// Relative path -> bytes for every file under dir.
std::map<std::string, da::Bytes> tree(const fs::path& dir) {
  std::map<std::string, da::Bytes> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = da::read_bytes(e.path());
  }
  return out;
}

json read_json(const fs::path& p) { return da::cli::read_json_file(p); }

void expect_run_json(const fs::path& dir, const std::string& command) {
  ASSERT_TRUE(fs::exists(dir / "run.json")) << dir;
  const json j = read_json(dir / "run.json");
  EXPECT_EQ(j.at("command"), command);
  EXPECT_TRUE(j.at("config").is_object());
  EXPECT_TRUE(j.at("argv").is_array());
}

}  // namespace

TEST(Cli, SynthTwiceGivesIdenticalTrees) {
  const auto dir = da::testing::temp_dir("cli_synth");
  ASSERT_EQ(run({"synth", "--count", "3", "--seed", "7", "--size", "128", "--out", (dir / "a").string()}), 0);
  ASSERT_EQ(run({"synth", "--count", "3", "--seed", "7", "--size", "128", "--out", (dir / "b").string()}), 0);
  auto a = tree(dir / "a"), b = tree(dir / "b");
  ASSERT_EQ(a.size(), 3u * 3u + 2u);  // clean, photo, flow per triplet + manifest + run.json
  const json ra = read_json(dir / "a" / "run.json"), rb = read_json(dir / "b" / "run.json");
  EXPECT_EQ(ra.at("config"), rb.at("config"));
  a.erase("run.json");
  b.erase("run.json");
  EXPECT_TRUE(a == b);
  // Same output directory: resuming rewrites nothing.
  ASSERT_EQ(run({"synth", "--count", "3", "--seed", "7", "--size", "128", "--out", (dir / "a").string()}), 0);
  auto again = tree(dir / "a");
  again.erase("run.json");
  EXPECT_TRUE(again == b);
}

TEST(Cli, SynthParamsFileIsMergedWithDefaults) {
  const auto dir = da::testing::temp_dir("cli_synth_params");
  da::cli::write_json_file(dir / "p.json", {{"canvas", 64}, {"translation", {0.0, 0.0}}});
  ASSERT_EQ(run({"synth", "--count", "1", "--params", (dir / "p.json").string(), "--out", (dir / "o").string()}), 0);
  const json p = read_json(dir / "o" / "run.json").at("config").at("params");
  EXPECT_EQ(p.at("canvas"), 64);
  EXPECT_EQ(p.at("translation"), json({0.0, 0.0}));
  EXPECT_EQ(p.at("kernel"), da::SynthParams::scaled(64).kernel);
}

TEST(Cli, EvalOfFlowAgainstItself) {
  const auto dir = da::testing::temp_dir("cli_eval");
  const auto f = da::testing::smooth_flow<float>(32, 32, 3, 20.0, 5);
  da::write_flow(f, dir / "f.dafl");
  ASSERT_EQ(run({"eval", "--pred", (dir / "f.dafl").string(), "--gt", (dir / "f.dafl").string(), "--out",
                 (dir / "r" / "report.json").string()}),
            0);
  const json r = read_json(dir / "r" / "report.json");
  EXPECT_EQ(r.at("aepe"), 0.0);
  EXPECT_EQ(r.at("pck_1px"), 1.0);
  EXPECT_EQ(r.at("pck_5px"), 1.0);
  expect_run_json(dir / "r", "eval");
}

TEST(Cli, GradcheckAllPasses) {
  const auto dir = da::testing::temp_dir("cli_gradcheck");
  EXPECT_EQ(run({"gradcheck", "--all", "--out", dir.string()}), 0);
  const json r = read_json(dir / "report.json");
  EXPECT_EQ(r.size(), da::nn::gradcheck_blocks().size());
  for (const auto& row : r) EXPECT_TRUE(row.at("passed").get<bool>()) << row.dump();
  EXPECT_EQ(run({"gradcheck", "--block", "no_such_block"}), 2);
}

TEST(Cli, ExitCodes) {
  const auto dir = da::testing::temp_dir("cli_exit");
  EXPECT_EQ(run({}), 2);
  EXPECT_EQ(run({"frobnicate"}), 2);
  EXPECT_EQ(run({"synth", "--count", "2"}), 2);                       // missing --out
  EXPECT_EQ(run({"synth", "--count", "-1", "--out", dir.string()}), 2);  // validation
  EXPECT_EQ(run({"eval", "--pred", "x.dafl"}), 2);
  EXPECT_EQ(run({"train", "--data", (dir / "missing").string(), "--out", (dir / "t").string()}), 3);
  da::write_bytes(dir / "bad.json", {'{', 'x'});
  EXPECT_EQ(run({"train", "--data", dir.string(), "--out", (dir / "t").string(), "--config", (dir / "bad.json").string()}), 3);
  da::cli::write_json_file(dir / "unknown.json", {{"learning_rate", 1.0}});
  EXPECT_EQ(
      run({"train", "--data", dir.string(), "--out", (dir / "t").string(), "--config", (dir / "unknown.json").string()}),
      2);
  EXPECT_EQ(run({"--version"}), 0);
}

TEST(Cli, NonFiniteTrainingLossExitsWithFour) {
  const auto dir = da::testing::temp_dir("cli_nan");
  ASSERT_EQ(run({"synth", "--count", "1", "--size", "64", "--out", (dir / "d").string()}), 0);
  const auto rec = da::read_manifest(dir / "d" / "manifest.jsonl").at(0);
  da::FlowField<float> f = da::read_flow(dir / "d" / rec.flow);
  f(0, 10, 10) = std::numeric_limits<float>::infinity();
  da::write_flow(f, dir / "d" / rec.flow);
  EXPECT_EQ(run({"train", "--data", (dir / "d").string(), "--out", (dir / "t").string(), "--max-steps", "1",
                 "--iterations", "1"}),
            4);
}

TEST(Cli, TrainAlignSelfsupPipeline) {
  const auto dir = da::testing::temp_dir("cli_pipeline");
  const std::string data = (dir / "d").string();
  ASSERT_EQ(run({"synth", "--count", "2", "--size", "64", "--seed", "3", "--out", data}), 0);
  const std::vector<std::string> train{"train", "--data", data, "--max-steps", "2", "--iterations", "1",
                                       "--lr", "1e-3", "--augment", "--seed", "5"};
  auto a = train, b = train;
  a.insert(a.end(), {"--out", (dir / "t1").string()});
  b.insert(b.end(), {"--out", (dir / "t2").string()});
  ASSERT_EQ(run(a), 0);
  ASSERT_EQ(run(b), 0);
  EXPECT_EQ(da::read_bytes(dir / "t1" / "model.dapm"), da::read_bytes(dir / "t2" / "model.dapm"));
  EXPECT_EQ(da::read_bytes(dir / "t1" / "loss.csv"), da::read_bytes(dir / "t2" / "loss.csv"));
  expect_run_json(dir / "t1", "train");
  EXPECT_EQ(read_json(dir / "t1" / "run.json").at("config").at("train").at("augment"), true);

  const auto rec = da::read_manifest(dir / "d" / "manifest.jsonl").at(0);
  ASSERT_EQ(run({"align", "--model", (dir / "t1" / "model.dapm").string(), "--source", (dir / "d" / rec.photo).string(),
                 "--target", (dir / "d" / rec.clean).string(), "--iterations", "1", "--out", (dir / "al").string()}),
            0);
  for (const char* f : {"flow.dafl", "warped.png", "overlay.png"}) EXPECT_TRUE(fs::exists(dir / "al" / f)) << f;
  expect_run_json(dir / "al", "align");
  EXPECT_EQ(da::read_flow(dir / "al" / "flow.dafl").height(), 64);

  // Fine-tuning must not need the flow files.
  fs::remove_all(dir / "d" / "flow");
  ASSERT_EQ(run({"selfsup", "--pairs", data, "--model", (dir / "t1" / "model.dapm").string(), "--epochs", "1",
                 "--iterations", "1", "--augmentations", "1", "--out", (dir / "ss").string()}),
            0);
  expect_run_json(dir / "ss", "selfsup");
  const json s = read_json(dir / "ss" / "summary.json");
  EXPECT_GE(s.at("loss_before").get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(dir / "ss" / "model.dapm"));
  // Inputs are untouched.
  EXPECT_TRUE(fs::exists(dir / "d" / rec.photo));
}

TEST(Cli, PrealignThenTransfer) {
  const auto dir = da::testing::temp_dir("cli_prealign");
  const auto page = da::render_document(128, 4);
  const std::array<da::Point, 4> quad{da::Point{40, 30}, da::Point{215, 45}, da::Point{205, 230}, da::Point{30, 215}};
  const auto comp = da::composite_document(page, quad, 256, 256, 0.12, 2);
  da::write_png(comp.photo, dir / "photo.png");
  ASSERT_EQ(run({"prealign", "--photo", (dir / "photo.png").string(), "--out", (dir / "pa").string()}), 0);
  for (const char* f : {"prealigned.png", "mask.png", "flow.dafl", "transform.json", "control_points.json"}) {
    EXPECT_TRUE(fs::exists(dir / "pa" / f)) << f;
  }
  expect_run_json(dir / "pa", "prealign");

  // A box on the clean image, moved by a constant flow and then into raw photo coordinates.
  da::FlowField<float> flow(256, 256);
  for (auto& v : flow.plane(0)) v = 2.0f;
  da::write_flow(flow, dir / "flow.dafl");
  const json coco = {{"images", {{{"id", 1}, {"width", 256}, {"height", 256}, {"file_name", "p.png"}}}},
                     {"categories", {{{"id", 1}, {"name", "text"}}}},
                     {"annotations", {{{"id", 1}, {"image_id", 1}, {"category_id", 1}, {"bbox", {100, 100, 20, 10}},
                                       {"segmentation", json::array()}, {"area", 200}, {"iscrowd", 0}}}}};
  da::cli::write_json_file(dir / "ann.json", coco);
  ASSERT_EQ(run({"transfer", "--annotations", (dir / "ann.json").string(), "--flow", (dir / "flow.dafl").string(),
                 "--inverse-tps", (dir / "pa" / "transform.json").string(), "--overlay", (dir / "photo.png").string(),
                 "--out", (dir / "tr" / "out.json").string()}),
            0);
  expect_run_json(dir / "tr", "transfer");
  EXPECT_TRUE(fs::exists(dir / "tr" / "out.overlay.png"));
  const auto moved = da::read_annotations(dir / "tr" / "out.json");
  const auto inv = da::tps_from_json(read_json(dir / "pa" / "transform.json"));
  const da::Point c = inv(da::Point{112.0, 105.0});  // box centre shifted by the flow
  const da::Box& b = moved.instances.at(0).bbox;
  EXPECT_NEAR(b.x + b.w / 2, c.x, 1.0);
  EXPECT_NEAR(b.y + b.h / 2, c.y, 1.0);
  EXPECT_EQ(run({"prealign", "--photo", (dir / "nope.png").string(), "--out", (dir / "pb").string()}), 2);
}
