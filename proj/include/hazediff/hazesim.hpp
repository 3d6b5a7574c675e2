#pragma once

// Physical haze synthesis: I = J*t + A*(1-t) with t = exp(-beta*depth), plus a
// procedural scene generator standing in for real clean imagery.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "hazediff/image.hpp"
#include "hazediff/rng.hpp"

namespace hazediff {

using Light = std::array<double, 3>;

struct Range {
  double lo = 0;
  double hi = 0;
};

template <typename T>
Image<T> apply_asm(const Image<T>& clean, const Image<T>& t, const Light& A) {
  if (!clean.same_spatial(t) || t.channels() != 1)
    throw std::invalid_argument("apply_asm: transmission must be single-channel with matching dims");
  if (clean.channels() > 3) throw std::invalid_argument("apply_asm: at most 3 channels");
  Image<T> out(clean.height(), clean.width(), clean.channels());
  const int C = clean.channels();
  for (std::size_t p = 0; p < clean.pixels(); ++p) {
    const T tp = t[p];
    for (int ch = 0; ch < C; ++ch)
      out[p * C + ch] = clean[p * C + ch] * tp + T(A[ch]) * (T(1) - tp);
  }
  return out;
}

template <typename T>
Image<T> depth_to_transmission(const Image<T>& depth, double beta) {
  if (beta < 0) throw std::invalid_argument("depth_to_transmission: beta must be >= 0");
  Image<T> t(depth.height(), depth.width(), depth.channels());
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (depth[i] < 0) throw std::invalid_argument("depth_to_transmission: negative depth");
    t[i] = T(std::exp(-beta * double(depth[i])));
  }
  return t;
}

template <typename T>
struct ToyScene {
  Image<T> clean;
  Image<T> depth;
};

namespace detail {

// A colour with one channel pinned near zero, so every surface satisfies
// the dark-channel premise.
inline std::array<double, 3> dark_biased_color(Rng& rng) {
  std::array<double, 3> c{uniform(rng, 0.1, 1.0), uniform(rng, 0.1, 1.0), uniform(rng, 0.1, 1.0)};
  const auto dark = static_cast<int>(std::uniform_int_distribution<int>(0, 2)(rng));
  c[dark] = uniform(rng, 0.0, 0.015);
  return c;
}

template <typename T>
ToyScene<T> draw_scene(Rng& rng, int h, int w) {
  ToyScene<T> s{Image<T>(h, w, 3), Image<T>(h, w, 1)};
  const auto base = dark_biased_color(rng);
  std::array<double, 3> slope{};
  for (int ch = 0; ch < 3; ++ch) slope[ch] = base[ch] < 0.05 ? 0.0 : uniform(rng, -0.3, 0.3);
  const double angle = uniform(rng, 0.0, 2.0 * M_PI);
  const double gx = std::cos(angle), gy = std::sin(angle);
  const double far = uniform(rng, 0.8, 1.0), near = uniform(rng, 0.3, 0.6);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double u = gx * (double(c) / (w - 1) - 0.5) + gy * (double(r) / (h - 1) - 0.5);
      for (int ch = 0; ch < 3; ++ch)
        s.clean(r, c, ch) = T(std::clamp(base[ch] + slope[ch] * u, 0.0, 1.0));
      s.depth(r, c, 0) = T(far + (near - far) * double(r) / (h - 1));
    }

  const int objects = std::uniform_int_distribution<int>(3, 8)(rng);
  struct Obj {
    bool disk;
    double cy, cx, a, b, depth;
    std::array<double, 3> color;
  };
  std::vector<Obj> objs;
  for (int i = 0; i < objects; ++i) {
    Obj o;
    o.disk = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    o.cy = uniform(rng, 0, h);
    o.cx = uniform(rng, 0, w);
    o.a = uniform(rng, 0.08, 0.3) * h;
    o.b = uniform(rng, 0.08, 0.3) * w;
    o.depth = uniform(rng, 0.05, 0.7);
    o.color = dark_biased_color(rng);
    objs.push_back(o);
  }
  // far objects first so nearer ones occlude them
  std::stable_sort(objs.begin(), objs.end(), [](const Obj& x, const Obj& y) { return x.depth > y.depth; });
  for (const auto& o : objs) {
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const double dy = (r + 0.5 - o.cy) / o.a, dx = (c + 0.5 - o.cx) / o.b;
        const bool inside = o.disk ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        for (int ch = 0; ch < 3; ++ch) s.clean(r, c, ch) = T(o.color[ch]);
        s.depth(r, c, 0) = T(o.depth);
      }
  }

  auto [mn, mx] = std::minmax_element(s.depth.data().begin(), s.depth.data().end());
  const double lo = *mn, span = double(*mx) - double(*mn);
  for (auto& d : s.depth.data()) d = span > 0 ? T((double(d) - lo) / span) : T(0);
  return s;
}

template <typename T>
bool meets_dark_quota(const Image<T>& clean) {
  std::size_t dark = 0;
  for (std::size_t p = 0; p < clean.pixels(); ++p) {
    const T m = std::min({clean[3 * p], clean[3 * p + 1], clean[3 * p + 2]});
    if (m < T(0.05)) ++dark;
  }
  return dark * 100 >= clean.pixels();
}

}  // namespace detail

// Smooth gradient background plus 3-8 rectangles/disks, each on its own depth
// plane; depth min-max normalised to [0, 1]. Deterministic in `seed`.
template <typename T = float>
ToyScene<T> gen_toy_scene(std::uint64_t seed, int h, int w) {
  if (h < 16 || w < 16) throw std::invalid_argument("gen_toy_scene: dims must be >= 16");
  Rng rng(seed);
  for (;;) {
    auto s = detail::draw_scene<T>(rng, h, w);
    if (detail::meets_dark_quota(s.clean)) return s;
  }
}

template <typename T>
struct HazyPair {
  Image<T> clean;
  Image<T> hazy;
  Image<T> transmission;
  Image<T> depth;
  Light A{};
  double beta = 0;
};

struct HazeRanges {
  Range beta{0.5, 3.0};
  Range A{0.7, 1.0};

  void validate() const {
    if (beta.lo < 0 || beta.lo > beta.hi) throw std::invalid_argument("invalid beta range");
    if (A.lo < 0 || A.hi > 1 || A.lo > A.hi) throw std::invalid_argument("invalid atmospheric light range");
  }
};

// Hazes a given clean/depth pair with beta and A drawn from `ranges`.
template <typename T>
HazyPair<T> haze_scene(Image<T> clean, Image<T> depth, const HazeRanges& ranges, Rng& rng) {
  ranges.validate();
  HazyPair<T> p;
  p.beta = uniform(rng, ranges.beta.lo, ranges.beta.hi);
  for (auto& a : p.A) a = uniform(rng, ranges.A.lo, ranges.A.hi);
  p.transmission = depth_to_transmission(depth, p.beta);
  p.hazy = apply_asm(clean, p.transmission, p.A);
  p.clean = std::move(clean);
  p.depth = std::move(depth);
  return p;
}

template <typename T = float>
HazyPair<T> synth_pair(std::uint64_t seed, int h, int w, const HazeRanges& ranges = {}) {
  ranges.validate();
  auto scene = gen_toy_scene<T>(split_seed(seed, 0), h, w);
  Rng rng(split_seed(seed, 1));
  return haze_scene(std::move(scene.clean), std::move(scene.depth), ranges, rng);
}

}  // namespace hazediff
