#include <gtest/gtest.h>

#include <cmath>

#include "hazediff/hazesim.hpp"
#include "test_util.hpp"

using namespace hazediff;
using hazediff::testing::random_image;

TEST(ApplyAsm, UnitTransmissionIsClean) {
  const auto J = random_image<double>(6, 5, 3, 1);
  EXPECT_EQ(apply_asm(J, Image<double>(6, 5, 1, 1.0), Light{0.8, 0.9, 1.0}), J);
}

TEST(ApplyAsm, ZeroTransmissionIsAirlight) {
  const auto J = random_image<double>(6, 5, 3, 2);
  const auto I = apply_asm(J, Image<double>(6, 5, 1, 0.0), Light{0.8, 0.9, 1.0});
  for (std::size_t p = 0; p < I.pixels(); ++p) {
    EXPECT_DOUBLE_EQ(I[3 * p], 0.8);
    EXPECT_DOUBLE_EQ(I[3 * p + 1], 0.9);
    EXPECT_DOUBLE_EQ(I[3 * p + 2], 1.0);
  }
}

TEST(ApplyAsm, DirectSubstitution) {
  const auto I = apply_asm(Image<double>(3, 3, 3, 0.5), Image<double>(3, 3, 1, 0.5), Light{1, 1, 1});
  for (double v : I.data()) EXPECT_DOUBLE_EQ(v, 0.75);
}

TEST(ApplyAsm, ConvexHullAndMonotoneInT) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto J = random_image<double>(4, 4, 3, 10 + trial);
    const Light A{uniform(rng, 0.7, 1), uniform(rng, 0.7, 1), uniform(rng, 0.7, 1)};
    const double t1 = uniform(rng, 0, 1), t2 = uniform(rng, 0, t1);
    const auto I1 = apply_asm(J, Image<double>(4, 4, 1, t1), A);
    const auto I2 = apply_asm(J, Image<double>(4, 4, 1, t2), A);
    for (std::size_t i = 0; i < J.size(); ++i) {
      const double a = A[i % 3];
      EXPECT_GE(I1[i], std::min(J[i], a) - 1e-15);
      EXPECT_LE(I1[i], std::max(J[i], a) + 1e-15);
      // lower t sits closer to A
      EXPECT_LE(std::abs(I2[i] - a), std::abs(I1[i] - a) + 1e-15);
      // linear in t: I = A + t (J - A)
      EXPECT_NEAR(I1[i], a + t1 * (J[i] - a), 1e-15);
    }
  }
}

TEST(ApplyAsm, ShapeErrors) {
  EXPECT_THROW(apply_asm(Image<double>(3, 3, 3), Image<double>(3, 4, 1), Light{1, 1, 1}), std::invalid_argument);
  EXPECT_THROW(apply_asm(Image<double>(3, 3, 3), Image<double>(3, 3, 3), Light{1, 1, 1}), std::invalid_argument);
}

TEST(DepthToTransmission, Cases) {
  for (double v : depth_to_transmission(Image<double>(2, 2, 1, 0.0), 2.0).data()) EXPECT_EQ(v, 1.0);
  for (double v : depth_to_transmission(Image<double>(2, 2, 1, 0.7), 0.0).data()) EXPECT_EQ(v, 1.0);
  for (double v : depth_to_transmission(Image<double>(2, 2, 1, 1.0), std::log(2.0)).data())
    EXPECT_NEAR(v, 0.5, 1e-15);
  EXPECT_THROW(depth_to_transmission(Image<double>(2, 2, 1, -0.1), 1.0), std::invalid_argument);
  EXPECT_THROW(depth_to_transmission(Image<double>(2, 2, 1, 0.1), -1.0), std::invalid_argument);
}

TEST(GenToyScene, Deterministic) {
  const auto a = gen_toy_scene<float>(42, 32, 32), b = gen_toy_scene<float>(42, 32, 32);
  EXPECT_EQ(a.clean, b.clean);
  EXPECT_EQ(a.depth, b.depth);
}

TEST(GenToyScene, DifferentSeedsDiffer) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto a = gen_toy_scene<float>(2 * s, 32, 32), b = gen_toy_scene<float>(2 * s + 1, 32, 32);
    std::size_t diff = 0;
    for (std::size_t p = 0; p < a.clean.pixels(); ++p)
      for (int ch = 0; ch < 3; ++ch)
        if (a.clean[3 * p + ch] != b.clean[3 * p + ch]) {
          ++diff;
          break;
        }
    EXPECT_GE(diff * 100, a.clean.pixels()) << "seed pair " << s;
  }
}

TEST(GenToyScene, DarkPixelQuotaOver1000Seeds) {
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto sc = gen_toy_scene<float>(split_seed(99, s), 16, 16);
    std::size_t dark = 0;
    for (std::size_t p = 0; p < sc.clean.pixels(); ++p)
      if (std::min({sc.clean[3 * p], sc.clean[3 * p + 1], sc.clean[3 * p + 2]}) < 0.05f) ++dark;
    ASSERT_GE(dark * 100, sc.clean.pixels()) << "seed " << s;
  }
}

TEST(GenToyScene, RangesAndShapes) {
  const auto sc = gen_toy_scene<double>(5, 24, 40);
  EXPECT_EQ(sc.clean.height(), 24);
  EXPECT_EQ(sc.clean.width(), 40);
  EXPECT_EQ(sc.depth.channels(), 1);
  for (double v : sc.clean.data()) EXPECT_TRUE(v >= 0 && v <= 1);
  for (double v : sc.depth.data()) EXPECT_TRUE(v >= 0 && v <= 1);
  EXPECT_THROW(gen_toy_scene<float>(1, 8, 32), std::invalid_argument);
}

TEST(SynthPair, ZeroBetaIsClean) {
  HazeRanges r;
  r.beta = {0, 0};
  const auto p = synth_pair<double>(7, 32, 32, r);
  EXPECT_EQ(p.hazy, p.clean);
  for (double v : p.transmission.data()) EXPECT_EQ(v, 1.0);
}

TEST(SynthPair, DenseWhiteHaze) {
  HazeRanges r;
  r.beta = {10, 10};
  r.A = {1, 1};
  Rng rng(1);
  const auto sc = gen_toy_scene<double>(8, 32, 32);
  const auto p = haze_scene(sc.clean, Image<double>(32, 32, 1, 1.0), r, rng);
  for (double v : p.hazy.data()) EXPECT_NEAR(v, 1.0, 1e-4);
}

TEST(SynthPair, InversionRecoversClean) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto p = synth_pair<double>(s, 32, 32);
    for (std::size_t px = 0; px < p.clean.pixels(); ++px) {
      const double t = p.transmission[px];
      ASSERT_GT(t, 0.0);
      for (int ch = 0; ch < 3; ++ch) {
        const double J = (p.hazy[3 * px + ch] - p.A[ch] * (1 - t)) / t;
        ASSERT_NEAR(J, p.clean[3 * px + ch], 1e-6);
      }
    }
  }
}

TEST(SynthPair, DrawsWithinRangesAndDeterministic) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto p = synth_pair<float>(s, 16, 16);
    EXPECT_GE(p.beta, 0.5);
    EXPECT_LE(p.beta, 3.0);
    for (double a : p.A) {
      EXPECT_GE(a, 0.7);
      EXPECT_LE(a, 1.0);
    }
    for (float t : p.transmission.data()) EXPECT_TRUE(t > 0 && t <= 1);
  }
  EXPECT_EQ(synth_pair<float>(3, 16, 16).hazy, synth_pair<float>(3, 16, 16).hazy);
}

TEST(HazeRanges, Validation) {
  HazeRanges r;
  r.beta = {2, 1};
  EXPECT_THROW(r.validate(), std::invalid_argument);
  r = {};
  r.A = {0.5, 1.2};
  EXPECT_THROW(r.validate(), std::invalid_argument);
}
