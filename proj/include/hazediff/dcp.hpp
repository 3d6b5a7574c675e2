#pragma once

// Dark channel prior: transmission estimation and the haze-density weighting
// map used by guided refinement.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "hazediff/hazesim.hpp"
#include "hazediff/image.hpp"

namespace hazediff {

struct DcpConfig {
  int window = 15;
  double dcp_omega = 0.95;
  double light_fraction = 0.001;
  double t_floor = 0.05;

  void validate() const {
    if (window < 1 || window % 2 == 0) throw std::invalid_argument("DcpConfig: window must be odd and >= 1");
    if (!(dcp_omega > 0 && dcp_omega <= 1)) throw std::invalid_argument("DcpConfig: dcp_omega must be in (0, 1]");
    if (!(light_fraction > 0 && light_fraction <= 0.1))
      throw std::invalid_argument("DcpConfig: light_fraction must be in (0, 0.1]");
    if (!(t_floor >= 0 && t_floor < 1)) throw std::invalid_argument("DcpConfig: t_floor must be in [0, 1)");
  }
};

// Min over channels, then min over a window centred at each pixel, clipped
// to the image bounds. The window min is separable, so rows then columns.
template <typename T>
Image<T> dark_channel(const Image<T>& img, int window) {
  if (img.channels() != 3) throw std::invalid_argument("dark_channel: need a 3-channel image");
  if (window < 1 || window % 2 == 0) throw std::invalid_argument("dark_channel: window must be odd");
  const int H = img.height(), W = img.width(), r = window / 2;
  Image<T> mins(H, W, 1);
  for (std::size_t p = 0; p < img.pixels(); ++p)
    mins[p] = std::min({img[3 * p], img[3 * p + 1], img[3 * p + 2]});
  Image<T> tmp(H, W, 1), out(H, W, 1);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      T m = mins(y, std::max(0, x - r), 0);
      for (int xx = std::max(0, x - r); xx <= std::min(W - 1, x + r); ++xx) m = std::min(m, mins(y, xx, 0));
      tmp(y, x, 0) = m;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      T m = tmp(std::max(0, y - r), x, 0);
      for (int yy = std::max(0, y - r); yy <= std::min(H - 1, y + r); ++yy) m = std::min(m, tmp(yy, x, 0));
      out(y, x, 0) = m;
    }
  return out;
}

// Among the ceil(light_fraction*H*W) pixels with the highest dark-channel
// value, picks the one with the highest mean intensity. Ties resolve to the
// lowest row-major index in both rankings.
template <typename T>
Light estimate_atmospheric_light(const Image<T>& img, const Image<T>& dark, double light_fraction) {
  if (img.channels() != 3 || !img.same_spatial(dark) || dark.channels() != 1)
    throw std::invalid_argument("estimate_atmospheric_light: shape mismatch");
  const std::size_t n = img.pixels();
  const auto top = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(light_fraction * double(n))), 1, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + std::ptrdiff_t(top), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (dark[a] != dark[b]) return dark[a] > dark[b];
                      return a < b;
                    });
  std::size_t best = idx[0];
  double best_mean = -1;
  for (std::size_t i = 0; i < top; ++i) {
    const std::size_t p = idx[i];
    const double m = (double(img[3 * p]) + img[3 * p + 1] + img[3 * p + 2]) / 3.0;
    if (m > best_mean || (m == best_mean && p < best)) {
      best_mean = m;
      best = p;
    }
  }
  return {double(img[3 * best]), double(img[3 * best + 1]), double(img[3 * best + 2])};
}

template <typename T>
Image<T> estimate_transmission(const Image<T>& img, const Light& A, const DcpConfig& cfg = {}) {
  cfg.validate();
  if (img.channels() != 3) throw std::invalid_argument("estimate_transmission: need a 3-channel image");
  for (double a : A)
    if (!(a > 0)) throw std::invalid_argument("estimate_transmission: atmospheric light must be positive");
  Image<T> normalized = img;
  for (std::size_t p = 0; p < img.pixels(); ++p)
    for (int ch = 0; ch < 3; ++ch) normalized[3 * p + ch] = T(double(img[3 * p + ch]) / A[ch]);
  Image<T> t = dark_channel(normalized, cfg.window);
  for (auto& v : t.data()) v = T(std::clamp(1.0 - cfg.dcp_omega * double(v), cfg.t_floor, 1.0));
  return t;
}

// Rough transmission of the hazy input, resampled to (h2, w2). High where
// haze is light.
template <typename T>
Image<T> weighting_map(const Image<T>& hazy, int h2, int w2, const DcpConfig& cfg = {}) {
  cfg.validate();
  const auto dark = dark_channel(hazy, cfg.window);
  auto A = estimate_atmospheric_light(hazy, dark, cfg.light_fraction);
  // a black input has no usable airlight; avoid the division by zero
  for (auto& a : A) a = std::max(a, 1e-6);
  auto W = resize_bilinear(estimate_transmission(hazy, A, cfg), h2, w2);
  for (auto& v : W.data()) v = T(std::clamp(double(v), cfg.t_floor, 1.0));
  return W;
}

}  // namespace hazediff
