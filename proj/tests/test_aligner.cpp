#include <gtest/gtest.h>

#include "docalign/nn/gradcheck.hpp"
#include "test_util.hpp"

namespace docalign::nn {
namespace {

Tensor<double> rand_t(std::vector<int> shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  return detail::random_tensor(std::move(shape), rng, lo, hi);
}

TEST(Pyramid, LevelSizesFollowStrides) {
  const auto params = init_params<double>(gradcheck_config(), 1);
  Graph<double> g;
  ParamBinder<double> p(g, params);
  const auto pyr = extract_pyramid(p, g.constant(rand_t({3, 64, 64}, 2, 0, 1)));
  const int sizes[] = {2, 4, 8, 16};
  for (int l = 0; l < 4; ++l) {
    EXPECT_EQ(g.value(pyr.levels[l]).height(), sizes[l]);
    EXPECT_EQ(g.value(pyr.levels[l]).width(), sizes[l]);
    EXPECT_EQ(g.value(pyr.levels[l]).channels(), gradcheck_config().pyramid_channels[l]);
  }
}

TEST(Pyramid, IdenticalImagesGiveIdenticalFeatures) {
  const auto params = init_params<float>(ModelConfig{}, 3);
  const auto img = rand_t({3, 64, 96}, 4, 0, 1).cast<float>();
  Graph<float> g;
  ParamBinder<float> p(g, params);
  const auto a = extract_pyramid(p, g.constant(img));
  const auto b = extract_pyramid(p, g.constant(img));
  for (int l = 0; l < 4; ++l) EXPECT_EQ(g.value(a.levels[l]), g.value(b.levels[l]));
}

TEST(Pyramid, RejectsSizesNotDivisibleBy32) {
  const auto params = init_params<double>(gradcheck_config(), 1);
  Graph<double> g;
  ParamBinder<double> p(g, params);
  try {
    extract_pyramid(p, g.constant(Tensor<double>::chw(3, 48, 64)));
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("32"), std::string::npos);
  }
}

TEST(FlowDecoder, ShapeAndZeroWeights) {
  const ModelConfig c = gradcheck_config();
  auto params = init_params<double>(c, 5);
  Graph<double> g;
  ParamBinder<double> p(g, params);
  const Var corr = g.constant(rand_t({local_channel_count(c.local_radius), 6, 7}, 6));
  const Var up = g.constant(rand_t({2, 6, 7}, 7));
  EXPECT_EQ(g.value(flow_decoder(p, 2, corr, up, c)).shape(), (std::vector<int>{2, 6, 7}));

  for (const auto& n : params.names()) {
    if (n.rfind("dec2.", 0) == 0) params.at(n).fill(0.0);
  }
  Graph<double> g2;
  ParamBinder<double> p2(g2, params);
  const auto& zero = g2.value(flow_decoder(p2, 2, g2.constant(g.value(corr)), g2.constant(g.value(up)), c));
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
}

TEST(FlowDecoder, RejectsMismatchedGrids) {
  const ModelConfig c = gradcheck_config();
  const auto params = init_params<double>(c, 5);
  Graph<double> g;
  ParamBinder<double> p(g, params);
  EXPECT_THROW(flow_decoder(p, 2, g.constant(Tensor<double>::chw(25, 6, 6)), g.constant(Tensor<double>::chw(2, 5, 6)), c),
               ShapeError);
  EXPECT_THROW(flow_decoder(p, 2, g.constant(Tensor<double>::chw(24, 6, 6)), g.constant(Tensor<double>::chw(2, 6, 6)), c),
               ShapeError);
}

TEST(HierarchicalAlign, OutputOnStride8Grid) {
  const ModelConfig c = gradcheck_config();
  const auto params = init_params<double>(c, 8);
  Graph<double> g;
  ParamBinder<double> p(g, params);
  const auto ps = extract_pyramid(p, g.constant(rand_t({3, 64, 96}, 9, 0, 1)));
  const auto pt = extract_pyramid(p, g.constant(rand_t({3, 64, 96}, 10, 0, 1)));
  const auto lf = hierarchical_align(p, ps, pt, c);
  EXPECT_EQ(g.value(lf.flows[0]).shape(), (std::vector<int>{2, c.global_grid, c.global_grid}));
  EXPECT_EQ(g.value(lf.flows[1]).shape(), (std::vector<int>{2, 4, 6}));
  EXPECT_EQ(g.value(lf.flows[2]).shape(), (std::vector<int>{2, 8, 12}));
}

struct GruFixture {
  ModelConfig c = gradcheck_config();
  ParamSet<double> params = detail::gradcheck_params(11);
  Tensor<double> x = rand_t({c.context + c.motion, 5, 5}, 12);
  Tensor<double> h = rand_t({c.hidden, 5, 5}, 13, -0.99, 0.99);

  Tensor<double> run(Tensor<double>* candidate = nullptr) {
    Graph<double> g;
    ParamBinder<double> p(g, params);
    const Var out = convgru_cell(p, "ref.gru", g.constant(x), g.constant(h));
    if (candidate) {
      // h~ computed independently: tanh(conv_q([r*h, x])).
      const Var hx = concat(g, {g.constant(h), g.constant(x)});
      const Var r = sigmoid(g, conv_layer(p, "ref.gru.r", hx));
      *candidate = g.value(
          tanh(g, conv_layer(p, "ref.gru.q", concat(g, {mul(g, r, g.constant(h)), g.constant(x)}))));
    }
    return g.value(out);
  }
};

TEST(ConvGru, ClosedUpdateGateKeepsHidden) {
  GruFixture f;
  f.params.at("ref.gru.z.w").fill(0.0);
  f.params.at("ref.gru.z.b").fill(-1e4);
  EXPECT_EQ(f.run(), f.h);
}

TEST(ConvGru, OpenUpdateGateTakesCandidate) {
  GruFixture f;
  f.params.at("ref.gru.z.w").fill(0.0);
  f.params.at("ref.gru.z.b").fill(1e4);
  Tensor<double> cand;
  EXPECT_EQ(f.run(&cand), cand);
}

TEST(ConvGru, HiddenStaysInOpenUnitInterval) {
  GruFixture f;
  for (std::uint64_t s = 0; s < 5; ++s) {
    f.params = detail::gradcheck_params(100 + s);
    for (double v : f.run().data()) {
      EXPECT_GT(v, -1.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(ConvGru, RejectsMismatchedSizes) {
  GruFixture f;
  Graph<double> g;
  ParamBinder<double> p(g, f.params);
  EXPECT_THROW(convgru_cell(p, "ref.gru", g.constant(Tensor<double>::chw(12, 4, 4)), g.constant(Tensor<double>::chw(8, 4, 5))),
               ShapeError);
}

Planar<double> softmax_weights(int h, int w, std::uint64_t seed) {
  Graph<double> g;
  return g.value(softmax_groups(g, g.constant(rand_t({kUpsampleWeights, h, w}, seed, -3, 3)), 9)).to_planar();
}

TEST(ConvexUpsampleField, UniformWeightsOnConstantResidual) {
  const auto f = FlowField<double>::constant(3, 4, 0.25, -1.5);
  const Planar<double> w(kUpsampleWeights, 3, 4, 1.0 / 9.0);
  const auto up = convex_upsample(f, w);
  ASSERT_EQ(up.height(), 12);
  ASSERT_EQ(up.width(), 16);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 16; ++j) {
      EXPECT_NEAR(up.x(i, j), 1.0, 1e-12);
      EXPECT_NEAR(up.y(i, j), -6.0, 1e-12);
    }
}

TEST(ConvexUpsampleField, CentreOneHotIsNearestNeighbour) {
  FlowField<double> f(Planar<double>(rand_t({2, 3, 4}, 14).to_planar()));
  Planar<double> w(kUpsampleWeights, 3, 4);
  for (int k = 0; k < 16; ++k) std::fill(w.plane(k * 9 + 4).begin(), w.plane(k * 9 + 4).end(), 1.0);
  const auto up = convex_upsample(f, w);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 16; ++j) {
      EXPECT_EQ(up.x(i, j), 4.0 * f.x(i / 4, j / 4));
      EXPECT_EQ(up.y(i, j), 4.0 * f.y(i / 4, j / 4));
    }
}

TEST(ConvexUpsampleField, BoundedByNeighbourhoodExtrema) {
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    FlowField<double> f(rand_t({2, 4, 5}, 200 + trial, -5, 5).to_planar());
    const auto up = convex_upsample(f, softmax_weights(4, 5, 400 + trial));
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 20; ++j)
        for (int ch = 0; ch < 2; ++ch) {
          double lo = 1e300, hi = -1e300;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const double v = f(ch, std::clamp(i / 4 + dy, 0, 3), std::clamp(j / 4 + dx, 0, 4));
              lo = std::min(lo, v);
              hi = std::max(hi, v);
            }
          ASSERT_GE(up(ch, i, j), 4 * lo - 1e-9);
          ASSERT_LE(up(ch, i, j), 4 * hi + 1e-9);
        }
  }
}

TEST(ConvexUpsampleField, RejectsUnnormalisedWeights) {
  const FlowField<double> f(3, 3);
  EXPECT_THROW(convex_upsample(f, Planar<double>(kUpsampleWeights, 3, 3, 0.2)), InvalidArgument);
  Planar<double> neg(kUpsampleWeights, 3, 3, 1.0 / 9.0);
  neg(0, 0, 0) = -0.1;
  neg(1, 0, 0) += 0.1 + 1.0 / 9.0;
  EXPECT_THROW(convex_upsample(f, neg), InvalidArgument);
  EXPECT_THROW(convex_upsample(f, Planar<double>(9, 3, 3, 1.0 / 9.0)), ShapeError);
}

TEST(RefineRecurrent, ZeroIterationsLeavesFlowUnchanged) {
  const ModelConfig c = gradcheck_config();
  const auto params = init_params<double>(c, 15);
  Graph<double> g;
  ParamBinder<double> p(g, params);
  const auto f0 = rand_t({2, 32, 32}, 16);
  const auto out = refine_recurrent(p, g.constant(f0), g.constant(rand_t({6, 8, 8}, 17)), g.constant(rand_t({6, 8, 8}, 18)),
                                    c, 0);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(g.value(out[0]), f0);
}

TEST(RefineRecurrent, ProducesOneIteratePerStep) {
  const ModelConfig c = gradcheck_config();
  const auto params = init_params<double>(c, 15);
  Graph<double> g;
  ParamBinder<double> p(g, params);
  const auto out = refine_recurrent(p, g.constant(rand_t({2, 32, 32}, 16)), g.constant(rand_t({6, 8, 8}, 17)),
                                    g.constant(rand_t({6, 8, 8}, 18)), c, 7);
  ASSERT_EQ(out.size(), 7u);
  for (Var v : out) EXPECT_EQ(g.value(v).shape(), (std::vector<int>{2, 32, 32}));
}

TEST(Forward, OutputShapeMatchesInputForDefaultModel) {
  const auto params = init_params<float>(ModelConfig{}, 19);
  for (int n : {64, 96, 128}) {
    const auto a = testing::random_image(3, n, n, 20 + n).cast<float>();
    const auto b = testing::random_image(3, n, n, 30 + n).cast<float>();
    const auto f = predict(params, ModelConfig{}, a, b);
    EXPECT_EQ(f.height(), n);
    EXPECT_EQ(f.width(), n);
    EXPECT_TRUE(f.all_finite());
  }
}

TEST(Forward, DeterministicGivenParamsAndInputs) {
  const auto params = init_params<float>(ModelConfig{}, 21);
  const auto a = testing::random_image(3, 64, 64, 1).cast<float>();
  const auto b = testing::random_image(3, 64, 64, 2).cast<float>();
  EXPECT_EQ(predict(params, ModelConfig{}, a, b), predict(params, ModelConfig{}, a, b));
}

TEST(Forward, InitIsSeedDeterministic) {
  EXPECT_EQ(init_params<float>(ModelConfig{}, 5), init_params<float>(ModelConfig{}, 5));
  EXPECT_FALSE(init_params<float>(ModelConfig{}, 5) == init_params<float>(ModelConfig{}, 6));
}

TEST(Losses, SupervisedLossIsZeroForOracleFlows) {
  const auto gt = testing::smooth_flow<double>(64, 64, 3, 4.0, 9);
  Graph<double> g;
  ForwardResult r;
  const int sizes[] = {4, 4, 8};
  for (int l = 0; l < 3; ++l) r.levels.flows[l] = g.constant(Tensor<double>::from_planar(resize_flow(gt, sizes[l], sizes[l])));
  const Var full = g.constant(Tensor<double>::from_planar(gt));
  r.iterates = {full, full, full};
  r.flow = full;
  EXPECT_EQ(g.value(supervised_loss(g, r, gt))[0], 0.0);
}

TEST(Losses, GradientAlignmentZeroForIdenticalPairAndZeroFlow) {
  const auto img = testing::test_card<double>(64, 64);
  Graph<double> g;
  const Var zero = g.constant(Tensor<double>::chw(2, 64, 64));
  EXPECT_EQ(g.value(gradient_alignment_loss(g, zero, img, img))[0], 0.0);
  const Var some = g.constant(Tensor<double>::chw(2, 64, 64, 0.7));
  EXPECT_GT(g.value(gradient_alignment_loss(g, some, img, img))[0], 0.0);
}

TEST(Checkpoint, RoundTripsAndInfersConfig) {
  ModelConfig c = gradcheck_config();
  const auto params = init_params<float>(c, 22);
  const auto path = testing::temp_dir("ckpt") / "model.dapm";
  save_checkpoint(path, params);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back, params);
  const ModelConfig inferred = ModelConfig::infer(back);
  EXPECT_EQ(param_specs(inferred).size(), param_specs(c).size());
  EXPECT_EQ(inferred.local_radius, c.local_radius);
  EXPECT_EQ(inferred.refine_radius, c.refine_radius);
  EXPECT_EQ(inferred.global_grid, c.global_grid);
  EXPECT_EQ(inferred.hidden, c.hidden);
}

TEST(Checkpoint, CorruptionNamesOffset) {
  const auto bytes = encode_checkpoint(init_params<float>(gradcheck_config(), 1));
  Bytes bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), ParseError);
  Bytes cut(bytes.begin(), bytes.begin() + 30);
  try {
    decode_checkpoint(cut);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
}

class BlockGradients : public ::testing::TestWithParam<std::string> {};

TEST_P(BlockGradients, MatchCentralDifferences) {
  const auto r = gradient_check(GetParam(), 1);
  EXPECT_GT(r.checks, 0);
  EXPECT_LT(r.max_rel_error, r.tolerance) << r.block;
}

INSTANTIATE_TEST_SUITE_P(All, BlockGradients, ::testing::ValuesIn(gradcheck_blocks()));

}  // namespace
}  // namespace docalign::nn
