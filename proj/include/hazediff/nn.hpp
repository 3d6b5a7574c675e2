#pragma once

// Channel-major (C, H, W) tensors and the handful of layers the denoiser
// needs, each with an explicit backward pass. 3x3 convolutions run as
// im2col + GEMM.

#include <Eigen/Core>

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace hazediff::nn {

template <typename T>
struct Tensor {
  int c = 0, h = 0, w = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(std::size_t(c_) * h_ * w_, T(0)) {}
  std::size_t plane() const { return std::size_t(h) * w; }
  T* ch(int i) { return v.data() + std::size_t(i) * plane(); }
  const T* ch(int i) const { return v.data() + std::size_t(i) * plane(); }
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// cols is (C*9) x (H*W), zero padding of 1.
template <typename T>
void im2col3x3(const Tensor<T>& x, std::vector<T>& cols) {
  const int H = x.h, W = x.w;
  cols.assign(std::size_t(x.c) * 9 * H * W, T(0));
  for (int ci = 0; ci < x.c; ++ci) {
    const T* src = x.ch(ci);
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = cols.data() + (std::size_t(ci) * 9 + ky * 3 + kx) * H * W;
        const int dy = ky - 1, dx = kx - 1;
        for (int y = 0; y < H; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          const T* srow = src + std::size_t(sy) * W + dx;
          T* drow = dst + std::size_t(y) * W;
          for (int xx = x0; xx < x1; ++xx) drow[xx] = srow[xx];
        }
      }
  }
}

template <typename T>
void col2im3x3_add(const std::vector<T>& cols, Tensor<T>& dx) {
  const int H = dx.h, W = dx.w;
  for (int ci = 0; ci < dx.c; ++ci) {
    T* dst = dx.ch(ci);
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = cols.data() + (std::size_t(ci) * 9 + ky * 3 + kx) * H * W;
        const int dy = ky - 1, ddx = kx - 1;
        for (int y = 0; y < H; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          const int x0 = std::max(0, -ddx), x1 = std::min(W, W - ddx);
          T* drow = dst + std::size_t(sy) * W + ddx;
          const T* srow = src + std::size_t(y) * W;
          for (int xx = x0; xx < x1; ++xx) drow[xx] += srow[xx];
        }
      }
  }
}

// Weight layout: (Cout, Cin, 3, 3) followed by Cout biases.
struct ConvShape {
  int cin = 0, cout = 0;
  std::size_t weight_count() const { return std::size_t(cout) * cin * 9; }
  std::size_t count() const { return weight_count() + std::size_t(cout); }
};

template <typename T>
Tensor<T> conv3x3_forward(const ConvShape& s, std::span<const T> p, const Tensor<T>& x, std::vector<T>& cols) {
  if (x.c != s.cin) throw std::invalid_argument("conv3x3: channel mismatch");
  im2col3x3(x, cols);
  Tensor<T> y(s.cout, x.h, x.w);
  const long HW = long(x.plane());
  CMapMat<T> Wm(p.data(), s.cout, long(s.cin) * 9);
  CMapMat<T> Cm(cols.data(), long(s.cin) * 9, HW);
  MapMat<T> Ym(y.v.data(), s.cout, HW);
  Ym.noalias() = Wm * Cm;
  const T* b = p.data() + s.weight_count();
  for (int co = 0; co < s.cout; ++co) Ym.row(co).array() += b[co];
  return y;
}

// Accumulates parameter gradients into `g`; returns dL/dx when wanted.
template <typename T>
Tensor<T> conv3x3_backward(const ConvShape& s, std::span<const T> p, std::span<T> g, const std::vector<T>& cols,
                           const Tensor<T>& dy, bool want_dx) {
  const long HW = long(dy.plane());
  const long K = long(s.cin) * 9;
  CMapMat<T> Dy(dy.v.data(), s.cout, HW);
  CMapMat<T> Cm(cols.data(), K, HW);
  MapMat<T> Gw(g.data(), s.cout, K);
  Gw.noalias() += Dy * Cm.transpose();
  T* gb = g.data() + s.weight_count();
  // plain loop: Eigen's vectorised sum peels by address, so its order varies
  for (int co = 0; co < s.cout; ++co) {
    const T* row = dy.v.data() + std::size_t(co) * HW;
    T acc = 0;
    for (long i = 0; i < HW; ++i) acc += row[i];
    gb[co] += acc;
  }
  Tensor<T> dx;
  if (!want_dx) return dx;
  dx = Tensor<T>(s.cin, dy.h, dy.w);
  std::vector<T> dcols(std::size_t(K) * HW);
  MapMat<T> Dc(dcols.data(), K, HW);
  CMapMat<T> Wm(p.data(), s.cout, K);
  Dc.noalias() = Wm.transpose() * Dy;
  col2im3x3_add(dcols, dx);
  return dx;
}

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> y(x.c, x.h, x.w);
  for (std::size_t i = 0; i < x.v.size(); ++i) y.v[i] = x.v[i] * sigmoid(x.v[i]);
  return y;
}

// dy * d silu(x)/dx, evaluated at the pre-activation x.
template <typename T>
Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.c, x.h, x.w);
  for (std::size_t i = 0; i < x.v.size(); ++i) {
    const T s = sigmoid(x.v[i]);
    dx.v[i] = dy.v[i] * s * (T(1) + x.v[i] * (T(1) - s));
  }
  return dx;
}

template <typename T>
Tensor<T> avgpool2(const Tensor<T>& x) {
  Tensor<T> y(x.c, x.h / 2, x.w / 2);
  for (int c = 0; c < x.c; ++c) {
    const T* s = x.ch(c);
    T* d = y.ch(c);
    for (int r = 0; r < y.h; ++r)
      for (int q = 0; q < y.w; ++q)
        d[r * y.w + q] = T(0.25) * (s[2 * r * x.w + 2 * q] + s[2 * r * x.w + 2 * q + 1] +
                                    s[(2 * r + 1) * x.w + 2 * q] + s[(2 * r + 1) * x.w + 2 * q + 1]);
  }
  return y;
}

template <typename T>
Tensor<T> avgpool2_backward(const Tensor<T>& dy, int h, int w) {
  Tensor<T> dx(dy.c, h, w);
  for (int c = 0; c < dy.c; ++c) {
    const T* s = dy.ch(c);
    T* d = dx.ch(c);
    for (int r = 0; r < h; ++r)
      for (int q = 0; q < w; ++q) d[r * w + q] = T(0.25) * s[(r / 2) * dy.w + q / 2];
  }
  return dx;
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
  Tensor<T> y(x.c, x.h * 2, x.w * 2);
  for (int c = 0; c < x.c; ++c) {
    const T* s = x.ch(c);
    T* d = y.ch(c);
    for (int r = 0; r < y.h; ++r)
      for (int q = 0; q < y.w; ++q) d[r * y.w + q] = s[(r / 2) * x.w + q / 2];
  }
  return y;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.c, dy.h / 2, dy.w / 2);
  for (int c = 0; c < dy.c; ++c) {
    const T* s = dy.ch(c);
    T* d = dx.ch(c);
    for (int r = 0; r < dy.h; ++r)
      for (int q = 0; q < dy.w; ++q) d[(r / 2) * dx.w + q / 2] += s[r * dy.w + q];
  }
  return dx;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> y(a.c + b.c, a.h, a.w);
  std::copy(a.v.begin(), a.v.end(), y.v.begin());
  std::copy(b.v.begin(), b.v.end(), y.v.begin() + std::ptrdiff_t(a.v.size()));
  return y;
}

// Splits a gradient for concat(a, b) into the first `ca` channels and the rest.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split(const Tensor<T>& y, int ca) {
  Tensor<T> a(ca, y.h, y.w), b(y.c - ca, y.h, y.w);
  std::copy(y.v.begin(), y.v.begin() + std::ptrdiff_t(a.v.size()), a.v.begin());
  std::copy(y.v.begin() + std::ptrdiff_t(a.v.size()), y.v.end(), b.v.begin());
  return {std::move(a), std::move(b)};
}

}  // namespace hazediff::nn
