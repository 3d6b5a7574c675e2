#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hazediff {

// H x W x C intensities, row-major with interleaved channels.
template <typename T>
class Image {
 public:
  using value_type = T;

  Image() = default;
  Image(int height, int width, int channels, T fill = T(0))
      : height_(height), width_(width), channels_(channels) {
    if (height < 0 || width < 0 || channels < 0)
      throw std::invalid_argument("Image: negative dimension");
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
  }
  Image(int height, int width, int channels, std::vector<T> data)
      : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(height) * width * channels)
      throw std::invalid_argument("Image: data length does not match dimensions");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  std::size_t pixels() const { return static_cast<std::size_t>(height_) * width_; }
  bool empty() const { return data_.empty(); }

  T& operator()(int r, int c, int ch) { return data_[index(r, c, ch)]; }
  const T& operator()(int r, int c, int ch) const { return data_[index(r, c, ch)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& data() & { return data_; }
  const std::vector<T>& data() const& { return data_; }
  std::vector<T> data() && { return std::move(data_); }

  bool same_shape(const Image& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }
  bool same_spatial(const Image& o) const { return height_ == o.height_ && width_ == o.width_; }

  template <typename U>
  Image<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Image<U>(height_, width_, channels_, std::move(out));
  }

  friend bool operator==(const Image& a, const Image& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  std::size_t index(int r, int c, int ch) const {
    return (static_cast<std::size_t>(r) * width_ + c) * channels_ + ch;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<T> data_;
};

template <typename T>
inline void require_same_shape(const Image<T>& a, const Image<T>& b, const char* what) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

template <typename T>
Image<T> clamp01(Image<T> img) {
  for (auto& v : img.data()) v = std::clamp(v, T(0), T(1));
  return img;
}

// Elementwise a*x + b*y.
template <typename T>
Image<T> axpby(T a, const Image<T>& x, T b, const Image<T>& y) {
  require_same_shape(x, y, "axpby");
  Image<T> out(x.height(), x.width(), x.channels());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

template <typename T>
Image<T> scaled(const Image<T>& x, T a) {
  Image<T> out = x;
  for (auto& v : out.data()) v *= a;
  return out;
}

template <typename T>
T max_abs_diff(const Image<T>& a, const Image<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Sliding-window tiling. Window origins per axis are 0, d, 2d, ... plus a
// final origin flush with the far edge when the stride does not land on it.
template <typename T>
struct PatchGrid {
  struct Origin {
    int row;
    int col;
  };
  std::vector<Image<T>> patches;
  std::vector<Origin> origins;
  int k = 0;
  int d = 0;
  int source_height = 0;
  int source_width = 0;
  int channels = 0;
};

inline std::vector<int> window_positions(int dim, int k, int d) {
  if (k < 1 || k > dim) throw std::invalid_argument("window_positions: patch size out of range");
  if (d < 1) throw std::invalid_argument("window_positions: stride must be >= 1");
  std::vector<int> pos;
  for (int p = 0; p + k <= dim; p += d) pos.push_back(p);
  if (pos.back() != dim - k) pos.push_back(dim - k);
  return pos;
}

template <typename T>
PatchGrid<T> extract_patches(const Image<T>& img, int k, int d) {
  if (k < 1 || k > std::min(img.height(), img.width()))
    throw std::invalid_argument("extract_patches: patch size exceeds image dimension");
  if (d < 1 || d > k) throw std::invalid_argument("extract_patches: stride must be in [1, k]");
  PatchGrid<T> grid;
  grid.k = k;
  grid.d = d;
  grid.source_height = img.height();
  grid.source_width = img.width();
  grid.channels = img.channels();
  const auto rows = window_positions(img.height(), k, d);
  const auto cols = window_positions(img.width(), k, d);
  const int C = img.channels();
  for (int r0 : rows) {
    for (int c0 : cols) {
      Image<T> p(k, k, C);
      for (int r = 0; r < k; ++r)
        for (int c = 0; c < k; ++c)
          for (int ch = 0; ch < C; ++ch) p(r, c, ch) = img(r0 + r, c0 + c, ch);
      grid.patches.push_back(std::move(p));
      grid.origins.push_back({r0, c0});
    }
  }
  return grid;
}

template <typename T>
Image<T> assemble_patches(const PatchGrid<T>& grid) {
  if (grid.patches.size() != grid.origins.size())
    throw std::invalid_argument("assemble_patches: patch/origin count mismatch");
  const int H = grid.source_height, W = grid.source_width, C = grid.channels, k = grid.k;
  Image<T> sum(H, W, C);
  std::vector<int> count(static_cast<std::size_t>(H) * W, 0);
  for (std::size_t i = 0; i < grid.patches.size(); ++i) {
    const auto& p = grid.patches[i];
    const auto [r0, c0] = grid.origins[i];
    if (p.height() != k || p.width() != k || p.channels() != C || r0 < 0 || c0 < 0 ||
        r0 + k > H || c0 + k > W)
      throw std::invalid_argument("assemble_patches: inconsistent geometry");
    for (int r = 0; r < k; ++r)
      for (int c = 0; c < k; ++c) {
        ++count[static_cast<std::size_t>(r0 + r) * W + (c0 + c)];
        for (int ch = 0; ch < C; ++ch) sum(r0 + r, c0 + c, ch) += p(r, c, ch);
      }
  }
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const int n = count[static_cast<std::size_t>(r) * W + c];
      if (n == 0) throw std::invalid_argument("assemble_patches: pixel not covered");
      for (int ch = 0; ch < C; ++ch) sum(r, c, ch) /= T(n);
    }
  return sum;
}

template <typename T>
struct ChannelStats {
  std::vector<T> mean;
  std::vector<T> std;
};

// Per-channel mean and population standard deviation (divide by N).
template <typename T>
ChannelStats<T> channel_stats(const Image<T>& patch) {
  if (patch.empty()) throw std::invalid_argument("channel_stats: empty patch");
  const int C = patch.channels();
  const std::size_t n = patch.pixels();
  ChannelStats<T> s{std::vector<T>(C, T(0)), std::vector<T>(C, T(0))};
  std::vector<double> acc(C, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (int ch = 0; ch < C; ++ch) acc[ch] += patch[i * C + ch];
  for (int ch = 0; ch < C; ++ch) {
    const double mu = acc[ch] / double(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dv = patch[i * C + ch] - mu;
      var += dv * dv;
    }
    s.mean[ch] = T(mu);
    s.std[ch] = T(std::sqrt(var / double(n)));
  }
  return s;
}

// Half-pixel-centred bilinear resampling; samples outside are clamped to the edge.
template <typename T>
Image<T> resize_bilinear(const Image<T>& img, int h2, int w2) {
  if (h2 < 1 || w2 < 1) throw std::invalid_argument("resize_bilinear: target size must be >= 1");
  if (h2 == img.height() && w2 == img.width()) return img;
  const int H = img.height(), W = img.width(), C = img.channels();
  Image<T> out(h2, w2, C);
  const double sy = double(H) / h2, sx = double(W) / w2;
  for (int r = 0; r < h2; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, double(H - 1));
    const int y0 = static_cast<int>(std::floor(y));
    const int y1 = std::min(y0 + 1, H - 1);
    const double fy = y - y0;
    for (int c = 0; c < w2; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, double(W - 1));
      const int x0 = static_cast<int>(std::floor(x));
      const int x1 = std::min(x0 + 1, W - 1);
      const double fx = x - x0;
      for (int ch = 0; ch < C; ++ch) {
        const double top = (1 - fx) * img(y0, x0, ch) + fx * img(y0, x1, ch);
        const double bot = (1 - fx) * img(y1, x0, ch) + fx * img(y1, x1, ch);
        out(r, c, ch) = T((1 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

}  // namespace hazediff
