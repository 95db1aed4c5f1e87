#include <gtest/gtest.h>

#include <cmath>

#include "docalign/filter.hpp"
#include "docalign/io.hpp"
#include "docalign/sampling.hpp"
#include "test_util.hpp"

namespace docalign {
namespace {

using testing::mean_abs_diff;
using testing::random_image;
using testing::smooth_flow;
using testing::test_card;

// ---------------------------------------------------------------- sampling

TEST(BilinearSample, LatticePointIsExact) {
  const auto img = random_image(1, 8, 8, 1);
  EXPECT_EQ(sample_bilinear<float>(img, 0, 3.0f, 5.0f), img(0, 5, 3));
}

TEST(BilinearSample, MidpointAverages) {
  Image<float> img(1, 1, 2);
  img(0, 0, 1) = 1.0f;
  EXPECT_FLOAT_EQ(sample_bilinear<float>(img, 0, 0.5f, 0.0f), 0.5f);
}

TEST(BilinearSample, ZeroFillOutOfBounds) {
  Image<float> img(1, 4, 4, 0.7f);
  EXPECT_EQ(sample_bilinear<float>(img, 0, -10.0f, -10.0f, Padding::kZero), 0.0f);
  EXPECT_EQ(sample_bilinear<float>(img, 0, -10.0f, -10.0f, Padding::kBorder), 0.7f);
}

TEST(BilinearSample, RejectsNonFiniteAndEmpty) {
  Image<float> img(1, 4, 4);
  EXPECT_THROW(sample_bilinear<float>(img, 0, NAN, 1.0f), InvalidArgument);
  EXPECT_THROW(sample_bilinear<float>(Planar<float>{}, 0, 1.0f, 1.0f), InvalidArgument);
}

TEST(BilinearSample, LinearInImage) {
  const auto a = testing::random_planar(2, 9, 7, 11);
  const auto b = testing::random_planar(2, 9, 7, 12);
  Planar<double> mix(2, 9, 7);
  const double ca = 0.3, cb = -1.7;
  for (std::size_t k = 0; k < mix.size(); ++k) mix.data()[k] = ca * a.data()[k] + cb * b.data()[k];
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const double x = rng.uniform(-2, 9), y = rng.uniform(-2, 11);
    for (auto pad : {Padding::kBorder, Padding::kZero}) {
      for (int c = 0; c < 2; ++c) {
        const double lhs = sample_bilinear(mix, c, x, y, pad);
        const double rhs = ca * sample_bilinear(a, c, x, y, pad) + cb * sample_bilinear(b, c, x, y, pad);
        EXPECT_NEAR(lhs, rhs, 1e-6);
      }
    }
  }
}

TEST(Warp, ZeroFlowIsBitExact) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto img = random_image(3, 13, 17, seed);
    EXPECT_EQ(warp(img, FlowField<float>(13, 17)), img);
  }
}

TEST(Warp, ConstantShiftOfRamp) {
  Image<float> ramp(1, 6, 10);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 10; ++x) ramp(0, y, x) = float(x);
  const auto out = warp(ramp, FlowField<float>::constant(6, 10, 1.0f, 0.0f));
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 9; ++x) EXPECT_EQ(out(0, y, x), float(x + 1));
}

TEST(Warp, ShapeMismatchThrows) {
  EXPECT_THROW(warp(Image<float>(1, 4, 4), FlowField<float>(4, 5)), ShapeError);
}

// ---------------------------------------------------------------- composition

TEST(ComposeFlows, ZeroOuterIsExact) {
  const auto f = smooth_flow(16, 16, 3, 8.0, 3);
  EXPECT_EQ(compose_flows(FlowField<float>(16, 16), f), f);
}

TEST(ComposeFlows, ZeroInnerIsIdentity) {
  const auto f = smooth_flow<double>(16, 16, 4, 8.0, 3);
  const auto g = compose_flows(f, FlowField<double>(16, 16));
  for (std::size_t k = 0; k < g.size(); ++k) EXPECT_NEAR(g.data()[k], f.data()[k], 1e-6);
}

TEST(ComposeFlows, TranslationsAdd) {
  const auto g = compose_flows(FlowField<float>::constant(8, 8, 1.5f, -2.0f), FlowField<float>::constant(8, 8, 0.25f, 3.0f));
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      EXPECT_EQ(g.x(y, x), 1.75f);
      EXPECT_EQ(g.y(y, x), 1.0f);
    }
  }
}

TEST(ComposeFlows, MatchesSequentialWarp) {
  const auto card = test_card(128, 128);
  const auto f1 = smooth_flow(128, 128, 21, 60.0, 15);
  const auto f2 = smooth_flow(128, 128, 22, 60.0, 15);
  const auto composed = warp(card, compose_flows(f1, f2));
  const auto sequential = warp(warp(card, f2), f1);
  // Compare away from the border where clamping makes the two routes differ.
  double err = 0.0;
  int n = 0;
  for (int y = 16; y < 112; ++y) {
    for (int x = 16; x < 112; ++x) {
      err += std::abs(composed(0, y, x) - sequential(0, y, x));
      ++n;
    }
  }
  EXPECT_LT(err / n, 2.0 / 255.0);
}

TEST(InvertFlow, RoundTripsSmoothFlow) {
  const auto f = smooth_flow<double>(64, 64, 8, 12.0, 9);
  const auto g = invert_flow(f);
  const auto id = compose_flows(g, f);  // x + g(x) + f(x + g(x)) == x
  for (int y = 8; y < 56; ++y)
    for (int x = 8; x < 56; ++x) EXPECT_NEAR(id.x(y, x), 0.0, 1e-6);
}

// ---------------------------------------------------------------- resizing

TEST(ResizeFlow, UpsampleConstantScalesMagnitude) {
  const auto up = resize_flow(FlowField<float>::constant(4, 4, 4.0f, 0.0f), 8, 8);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      EXPECT_EQ(up.x(y, x), 8.0f);
      EXPECT_EQ(up.y(y, x), 0.0f);
    }
  }
}

TEST(ResizeFlow, DownUpConstantIsExact) {
  for (int k : {2, 4, 8}) {
    const auto f = FlowField<float>::constant(32, 32, 3.0f, -5.0f);
    const auto back = resize_flow(resize_flow(f, 32 / k, 32 / k), 32, 32);
    EXPECT_EQ(back, f) << "factor " << k;
  }
}

TEST(ResizeFlow, UpsampledRampMatchesClosedForm) {
  // Coarse ramp v(u, w) = a*u + b*w + c in coarse pixel units; fine pixel j sits at
  // coarse position (j + 0.5) / 4 - 0.5, and displacements scale by 4.
  const double a = 0.7, b = -0.3, c = 1.25;
  FlowField<double> coarse(8, 8);
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 8; ++j) {
      coarse.x(i, j) = a * j + b * i + c;
      coarse.y(i, j) = -a * i + c;
    }
  }
  const auto fine = resize_flow(coarse, 32, 32);
  for (int i = 2; i < 30; ++i) {
    for (int j = 2; j < 30; ++j) {
      const double u = (j + 0.5) / 4.0 - 0.5;
      const double w = (i + 0.5) / 4.0 - 0.5;
      EXPECT_NEAR(fine.x(i, j), 4.0 * (a * u + b * w + c), 1e-5);
      EXPECT_NEAR(fine.y(i, j), 4.0 * (-a * w + c), 1e-5);
    }
  }
}

TEST(ResizeFlow, RejectsInvalidDims) {
  EXPECT_THROW(resize_flow(FlowField<float>(4, 4), 0, 4), InvalidArgument);
}

// ---------------------------------------------------------------- filters

TEST(MeanFilter, ConstantIsPreserved) {
  Planar<float> f(2, 9, 11, 0.375f);
  EXPECT_EQ(mean_filter(f, 5), f);
}

TEST(MeanFilter, ImpulseSpreadsOverKernel) {
  Planar<double> f(1, 7, 7);
  f(0, 3, 3) = 1.0;
  const auto out = mean_filter(f, 3);
  for (int y = 0; y < 7; ++y) {
    for (int x = 0; x < 7; ++x) {
      const bool covered = std::abs(y - 3) <= 1 && std::abs(x - 3) <= 1;
      EXPECT_NEAR(out(0, y, x), covered ? 1.0 / 9.0 : 0.0, 1e-12);
    }
  }
}

TEST(MeanFilter, KernelOneIsIdentityAndEvenThrows) {
  const auto f = testing::random_planar(1, 5, 5, 2);
  EXPECT_EQ(mean_filter(f, 1), f);
  EXPECT_THROW(mean_filter(f, 4), InvalidArgument);
  EXPECT_THROW(mean_filter(f, 0), InvalidArgument);
}

TEST(MeanFilter, PreservesMassOfInteriorSupport) {
  // Support kept at least one radius away from the border, so no mass is
  // clipped by the replicate padding.
  Planar<double> f(1, 40, 40);
  Rng rng(9);
  for (int y = 10; y < 30; ++y)
    for (int x = 10; x < 30; ++x) f(0, y, x) = rng.uniform();
  const auto out = mean_filter(f, 9);
  double before = 0.0, after = 0.0;
  for (double v : f.data()) before += v;
  for (double v : out.data()) after += v;
  EXPECT_NEAR(after / before, 1.0, 1e-6);
}

TEST(Sobel, ConstantImageGivesZero) {
  const auto g = sobel_gradients(Image<float>(3, 6, 6, 0.4f));
  for (float v : g.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Sobel, RampGradient) {
  Image<double> ramp(1, 8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) ramp(0, y, x) = x / 255.0;
  const auto g = sobel_gradients(ramp);
  for (int y = 1; y < 7; ++y) {
    for (int x = 1; x < 7; ++x) {
      EXPECT_NEAR(g.x(y, x), 8.0 / 255.0, 1e-12);
      EXPECT_EQ(g.y(y, x), 0.0);
    }
  }
}

TEST(Sobel, ZeroOnlyForConstantQuantizedImages) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Image<float> img(1, 6, 6);
    for (auto& v : img.data()) v = float(rng.uniform_int(0, 2)) / 255.0f;
    const bool constant = std::all_of(img.data().begin(), img.data().end(), [&](float v) { return v == img.data()[0]; });
    const auto g = sobel_gradients(img);
    const bool zero = std::all_of(g.data().begin(), g.data().end(), [](float v) { return v == 0.0f; });
    EXPECT_EQ(zero, constant);
  }
  Image<float> checker(1, 6, 6);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) checker(0, y, x) = float((x + y) % 2);
  const auto g = sobel_gradients(checker);
  EXPECT_TRUE(std::any_of(g.data().begin(), g.data().end(), [](float v) { return v != 0.0f; }));
}

// ---------------------------------------------------------------- files

TEST(FlowFile, RoundTripIsBitExact) {
  auto f = smooth_flow(7, 5, 99, 10.0, 3);
  f.x(0, 0) = -0.0f;
  f.y(6, 4) = 1e-38f;
  const auto dir = testing::temp_dir("flowio");
  write_flow(f, dir / "f.flow");
  const auto g = read_flow(dir / "f.flow");
  ASSERT_TRUE(g.same_shape(f));
  EXPECT_EQ(std::memcmp(g.data().data(), f.data().data(), f.size() * sizeof(float)), 0);
}

TEST(FlowFile, TwoByTwoSize) {
  EXPECT_EQ(encode_flow(FlowField<float>(2, 2)).size(), 12u + 32u);
}

TEST(FlowFile, BadMagicAndTruncation) {
  auto bytes = encode_flow(FlowField<float>(2, 2));
  auto bad = bytes;
  bad[0] = 'X';
  try {
    decode_flow(bad);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos);
  }
  bytes.resize(30);
  try {
    decode_flow(bytes);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 12"), std::string::npos);
  }
  EXPECT_THROW(decode_flow(Bytes{'D', 'A'}), ParseError);
}

TEST(ImageFile, PngRoundTripOfQuantizedImage) {
  const auto img = quantize_u8(random_image(3, 9, 6, 4));
  EXPECT_EQ(decode_png(encode_png(img)), img);
  const auto gray = quantize_u8(random_image(1, 5, 5, 5));
  EXPECT_EQ(decode_png(encode_png(gray)), gray);
}

TEST(ImageFile, JpegHighQualityIsClose) {
  const auto card = test_card(32, 32, 3);
  const auto back = decode_jpeg(encode_jpeg(card, 100));
  EXPECT_LT(mean_abs_diff(card, back), 2.0 / 255.0);
}

}  // namespace
}  // namespace docalign
