#pragma once

// PSNR, SSIM and MS-SSIM, the latter with an exact reverse-mode gradient.
//
// SSIM uses a Gaussian window applied in "valid" mode (no padding). MS-SSIM
// takes contrast-structure means at every scale and luminance only at the
// coarsest, with 2x2 mean pooling between scales. Scale exponents are applied
// as sign(x)|x|^w so negative contrast terms stay finite and differentiable.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "hazediff/image.hpp"

namespace hazediff {

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  int levels = 3;

  double c1() const { return k1 * k1; }
  double c2() const { return k2 * k2; }

  // Standard five-scale weights truncated to `levels` and renormalised.
  std::vector<double> weights() const {
    static constexpr double kStandard[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    if (levels < 1 || levels > 5) throw std::invalid_argument("SsimParams: levels must be in [1, 5]");
    std::vector<double> w(kStandard, kStandard + levels);
    const double sum = std::accumulate(w.begin(), w.end(), 0.0);
    for (auto& v : w) v /= sum;
    return w;
  }
};

template <typename T>
double psnr(const Image<T>& a, const Image<T>& b) {
  require_same_shape(a, b, "psnr");
  if (a.empty()) throw std::invalid_argument("psnr: empty image");
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    se += d * d;
  }
  const double mse = se / double(a.size());
  if (mse < 1e-10) return 99.0;
  return 10.0 * std::log10(1.0 / mse);
}

namespace ssim_detail {

// Internal precision: extended, so that finite differences at 1e-5 resolve
// gradients far below the statistics' own magnitude.
using Real = long double;

struct Plane {
  int h = 0, w = 0;
  std::vector<Real> v;
  Plane() = default;
  Plane(int h_, int w_) : h(h_), w(w_), v(std::size_t(h_) * w_, 0.0) {}
  Real& at(int r, int c) { return v[std::size_t(r) * w + c]; }
  Real at(int r, int c) const { return v[std::size_t(r) * w + c]; }
};

inline std::vector<Real> gaussian_kernel(int size, Real sigma) {
  std::vector<Real> g(size);
  const Real c = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) g[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
  const Real s = std::accumulate(g.begin(), g.end(), Real(0));
  for (auto& x : g) x /= s;
  return g;
}

// Separable valid-mode correlation.
inline Plane filter_valid(const Plane& x, const std::vector<Real>& g) {
  const int K = int(g.size());
  Plane tmp(x.h, x.w - K + 1);
  for (int r = 0; r < tmp.h; ++r)
    for (int c = 0; c < tmp.w; ++c) {
      Real s = 0;
      for (int k = 0; k < K; ++k) s += g[k] * x.at(r, c + k);
      tmp.at(r, c) = s;
    }
  Plane out(x.h - K + 1, tmp.w);
  for (int r = 0; r < out.h; ++r)
    for (int c = 0; c < out.w; ++c) {
      Real s = 0;
      for (int k = 0; k < K; ++k) s += g[k] * tmp.at(r + k, c);
      out.at(r, c) = s;
    }
  return out;
}

// Adjoint of filter_valid: scatters an output-shaped map back to (h, w).
inline Plane filter_valid_adjoint(const Plane& y, const std::vector<Real>& g, int h, int w) {
  const int K = int(g.size());
  Plane tmp(h, y.w);
  for (int r = 0; r < y.h; ++r)
    for (int c = 0; c < y.w; ++c)
      for (int k = 0; k < K; ++k) tmp.at(r + k, c) += g[k] * y.at(r, c);
  Plane out(h, w);
  for (int r = 0; r < tmp.h; ++r)
    for (int c = 0; c < tmp.w; ++c)
      for (int k = 0; k < K; ++k) out.at(r, c + k) += g[k] * tmp.at(r, c);
  return out;
}

inline Plane pool2(const Plane& x) {
  Plane out(x.h / 2, x.w / 2);
  for (int r = 0; r < out.h; ++r)
    for (int c = 0; c < out.w; ++c)
      out.at(r, c) = 0.25 * (x.at(2 * r, 2 * c) + x.at(2 * r, 2 * c + 1) + x.at(2 * r + 1, 2 * c) +
                             x.at(2 * r + 1, 2 * c + 1));
  return out;
}

inline Plane pool2_adjoint(const Plane& y, int h, int w) {
  Plane out(h, w);
  for (int r = 0; r < y.h; ++r)
    for (int c = 0; c < y.w; ++c) {
      const Real v = 0.25 * y.at(r, c);
      out.at(2 * r, 2 * c) += v;
      out.at(2 * r, 2 * c + 1) += v;
      out.at(2 * r + 1, 2 * c) += v;
      out.at(2 * r + 1, 2 * c + 1) += v;
    }
  return out;
}

template <typename T>
std::vector<Plane> split_channels(const Image<T>& img) {
  std::vector<Plane> planes(img.channels(), Plane(img.height(), img.width()));
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c)
      for (int ch = 0; ch < img.channels(); ++ch) planes[ch].at(r, c) = Real(img(r, c, ch));
  return planes;
}

// Local statistics of one channel at one scale; kept for the backward pass.
struct ScaleStats {
  Plane mu_a, mu_b, var_a, var_b, cov;
};

inline ScaleStats local_stats(const Plane& a, const Plane& b, const std::vector<Real>& g) {
  Plane aa(a.h, a.w), bb(a.h, a.w), ab(a.h, a.w);
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    aa.v[i] = a.v[i] * a.v[i];
    bb.v[i] = b.v[i] * b.v[i];
    ab.v[i] = a.v[i] * b.v[i];
  }
  ScaleStats s{filter_valid(a, g), filter_valid(b, g), filter_valid(aa, g), filter_valid(bb, g),
               filter_valid(ab, g)};
  for (std::size_t i = 0; i < s.mu_a.v.size(); ++i) {
    const Real ma = s.mu_a.v[i], mb = s.mu_b.v[i];
    s.var_a.v[i] -= ma * ma;
    s.var_b.v[i] -= mb * mb;
    s.cov.v[i] -= ma * mb;
  }
  return s;
}

inline Real signed_pow(Real x, Real w) { return std::copysign(std::pow(std::abs(x), w), x); }

inline Real signed_pow_deriv(Real x, Real w) {
  return w * std::pow(std::max(std::abs(x), Real(1e-300)), w - 1.0);
}

template <typename T>
struct MsSsimResult {
  double value = 0;
  Image<T> grad;  // empty unless requested
};

template <typename T>
MsSsimResult<T> evaluate(const Image<T>& a, const Image<T>& b, const SsimParams& p, bool want_grad) {
  require_same_shape(a, b, "ms_ssim");
  const auto weights = p.weights();
  const int L = p.levels;
  const long need = long(p.window) << (L - 1);
  if (a.height() < need || a.width() < need)
    throw std::invalid_argument("ms_ssim: image too small for window and level count");
  const auto g = gaussian_kernel(p.window, p.sigma);
  const Real C1 = p.c1(), C2 = p.c2();
  const int C = a.channels();

  // pyramids: [level][channel]
  std::vector<std::vector<Plane>> pa(L), pb(L);
  pa[0] = split_channels(a);
  pb[0] = split_channels(b);
  for (int j = 1; j < L; ++j)
    for (int ch = 0; ch < C; ++ch) {
      pa[j].push_back(pool2(pa[j - 1][ch]));
      pb[j].push_back(pool2(pb[j - 1][ch]));
    }

  std::vector<std::vector<ScaleStats>> stats(L);
  std::vector<Real> term(L, 0.0);  // CS_j for j < L-1, luminance*CS at L-1
  std::vector<Real> count(L, 0.0);
  for (int j = 0; j < L; ++j) {
    const bool last = j == L - 1;
    Real acc = 0;
    for (int ch = 0; ch < C; ++ch) {
      stats[j].push_back(local_stats(pa[j][ch], pb[j][ch], g));
      const auto& s = stats[j].back();
      for (std::size_t i = 0; i < s.mu_a.v.size(); ++i) {
        Real v = (2 * s.cov.v[i] + C2) / (s.var_a.v[i] + s.var_b.v[i] + C2);
        if (last) {
          const Real ma = s.mu_a.v[i], mb = s.mu_b.v[i];
          v *= (2 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        }
        acc += v;
      }
      count[j] += Real(s.mu_a.v.size());
    }
    term[j] = acc / count[j];
  }

  MsSsimResult<T> res;
  Real value = 1.0;
  for (int j = 0; j < L; ++j) value *= signed_pow(term[j], weights[j]);
  res.value = double(value);
  if (!want_grad) return res;

  // d value / d term_j
  std::vector<Real> dterm(L);
  for (int j = 0; j < L; ++j) {
    Real others = 1.0;
    for (int i = 0; i < L; ++i)
      if (i != j) others *= signed_pow(term[i], weights[i]);
    dterm[j] = others * signed_pow_deriv(term[j], weights[j]);
  }

  std::vector<Plane> carry;  // gradient flowing into level j from coarser levels
  for (int j = L - 1; j >= 0; --j) {
    const bool last = j == L - 1;
    std::vector<Plane> gl(C);
    for (int ch = 0; ch < C; ++ch) {
      const auto& s = stats[j][ch];
      const Plane& xa = pa[j][ch];
      const Plane& xb = pb[j][ch];
      const Real gmean = dterm[j] / count[j];
      Plane g_mu(s.mu_a.h, s.mu_a.w), g_saa(s.mu_a.h, s.mu_a.w), g_sab(s.mu_a.h, s.mu_a.w);
      for (std::size_t i = 0; i < s.mu_a.v.size(); ++i) {
        const Real ma = s.mu_a.v[i], mb = s.mu_b.v[i];
        const Real N = 2 * s.cov.v[i] + C2, D = s.var_a.v[i] + s.var_b.v[i] + C2;
        const Real cs = N / D;
        Real g_cs = gmean, g_l = 0;
        if (last) {
          const Real Nl = 2 * ma * mb + C1, Dl = ma * ma + mb * mb + C1;
          g_cs = gmean * (Nl / Dl);
          g_l = gmean * cs;
        }
        const Real g_cov = g_cs * 2.0 / D;
        const Real g_var = -g_cs * N / (D * D);
        Real gm = -g_cov * mb - 2.0 * ma * g_var;
        if (last) {
          const Real Nl = 2 * ma * mb + C1, Dl = ma * ma + mb * mb + C1;
          gm += g_l * (2 * mb / Dl - Nl * 2 * ma / (Dl * Dl));
        }
        g_mu.v[i] = gm;
        g_saa.v[i] = g_var;
        g_sab.v[i] = g_cov;
      }
      const Plane bmu = filter_valid_adjoint(g_mu, g, xa.h, xa.w);
      const Plane baa = filter_valid_adjoint(g_saa, g, xa.h, xa.w);
      const Plane bab = filter_valid_adjoint(g_sab, g, xa.h, xa.w);
      Plane out(xa.h, xa.w);
      for (std::size_t i = 0; i < out.v.size(); ++i)
        out.v[i] = bmu.v[i] + 2.0 * xa.v[i] * baa.v[i] + xb.v[i] * bab.v[i];
      if (!carry.empty())
        for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += carry[ch].v[i];
      gl[ch] = std::move(out);
    }
    if (j > 0) {
      carry.assign(C, Plane());
      for (int ch = 0; ch < C; ++ch) carry[ch] = pool2_adjoint(gl[ch], pa[j - 1][ch].h, pa[j - 1][ch].w);
    } else {
      res.grad = Image<T>(a.height(), a.width(), C);
      for (int r = 0; r < a.height(); ++r)
        for (int c = 0; c < a.width(); ++c)
          for (int ch = 0; ch < C; ++ch) res.grad(r, c, ch) = T(gl[ch].at(r, c));
    }
  }
  return res;
}

}  // namespace ssim_detail

template <typename T>
double ms_ssim(const Image<T>& a, const Image<T>& b, const SsimParams& p = {}) {
  return ssim_detail::evaluate(a, b, p, false).value;
}

// Single-scale SSIM (mean of luminance * contrast-structure).
template <typename T>
double ssim(const Image<T>& a, const Image<T>& b, SsimParams p = {}) {
  p.levels = 1;
  return ms_ssim(a, b, p);
}

// d ms_ssim(a, b) / d a
template <typename T>
Image<T> ms_ssim_grad(const Image<T>& a, const Image<T>& b, const SsimParams& p = {}) {
  return ssim_detail::evaluate(a, b, p, true).grad;
}

template <typename T>
std::pair<double, Image<T>> ms_ssim_with_grad(const Image<T>& a, const Image<T>& b, const SsimParams& p = {}) {
  auto r = ssim_detail::evaluate(a, b, p, true);
  return {r.value, std::move(r.grad)};
}

}  // namespace hazediff
