#pragma once

#include <cstdint>
#include <random>

#include "hazediff/image.hpp"

namespace hazediff {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Child seed for stream `index` under `root`; used to give every image of a
// batch run its own independent, order-free generator.
inline std::uint64_t split_seed(std::uint64_t root, std::uint64_t index) {
  return splitmix64(splitmix64(root) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

template <typename T>
void fill_normal(Image<T>& img, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : img.data()) v = T(n(rng));
}

template <typename T>
Image<T> normal_like(int h, int w, int c, Rng& rng) {
  Image<T> img(h, w, c);
  fill_normal(img, rng);
  return img;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace hazediff
