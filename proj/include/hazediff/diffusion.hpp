#pragma once

// Noise schedule, forward process, x0 prediction, (respaced) DDPM stepping,
// and the denoiser / codec interfaces every sampler runs against.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hazediff/image.hpp"

namespace hazediff {

class NoiseSchedule {
 public:
  NoiseSchedule() : NoiseSchedule(1000, 1e-4, 0.02) {}

  // Linear betas; alpha_bar is the cumulative product of alpha = 1 - beta.
  NoiseSchedule(int T, double beta_start, double beta_end) : T_(T) {
    if (T < 1) throw std::invalid_argument("NoiseSchedule: T must be >= 1");
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
      throw std::invalid_argument("NoiseSchedule: need 0 < beta_start <= beta_end < 1");
    beta_.assign(T + 1, 0.0);
    alpha_.assign(T + 1, 1.0);
    alpha_bar_.assign(T + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
      beta_[t] = T == 1 ? beta_start : beta_start + double(t - 1) / double(T - 1) * (beta_end - beta_start);
      alpha_[t] = 1.0 - beta_[t];
      alpha_bar_[t] = alpha_bar_[t - 1] * alpha_[t];
    }
  }

  int T() const { return T_; }
  double beta(int t) const { return beta_.at(t); }
  double alpha(int t) const { return alpha_.at(t); }
  // alpha_bar(0) == 1
  double alpha_bar(int t) const { return alpha_bar_.at(t); }

 private:
  int T_;
  std::vector<double> beta_, alpha_, alpha_bar_;
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  return NoiseSchedule(T, beta_start, beta_end);
}

template <typename T>
class Condition {
 public:
  static Condition null() { return Condition(); }
  static Condition of(Image<T> encoded) { return Condition(std::move(encoded)); }

  bool is_null() const { return !payload_.has_value(); }
  const Image<T>& payload() const {
    if (!payload_) throw std::logic_error("Condition: null condition has no payload");
    return *payload_;
  }

 private:
  Condition() = default;
  explicit Condition(Image<T> p) : payload_(std::move(p)) {}
  std::optional<Image<T>> payload_;
};

// epsilon-prediction network. Implementations must be safe for concurrent
// const calls.
template <typename T>
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Image<T> predict(const Image<T>& z_t, const Condition<T>& cond, int t) const = 0;
};

template <typename T>
class Codec {
 public:
  virtual ~Codec() = default;
  virtual Image<T> encode(const Image<T>& img) const = 0;
  virtual Image<T> decode(const Image<T>& latent) const = 0;
  // J_decode(latent)^T applied to `cotangent` (an image-shaped vector).
  virtual Image<T> decode_vjp(const Image<T>& latent, const Image<T>& cotangent) const = 0;
};

template <typename T>
class IdentityCodec final : public Codec<T> {
 public:
  Image<T> encode(const Image<T>& img) const override { return img; }
  Image<T> decode(const Image<T>& latent) const override { return latent; }
  Image<T> decode_vjp(const Image<T>&, const Image<T>& cotangent) const override { return cotangent; }
};

// Latent at twice the image resolution: decode is 2x2 mean pooling, encode
// is nearest-neighbour upsampling (a right inverse of decode).
template <typename T>
class PoolCodec final : public Codec<T> {
 public:
  Image<T> encode(const Image<T>& img) const override {
    Image<T> z(2 * img.height(), 2 * img.width(), img.channels());
    for (int r = 0; r < z.height(); ++r)
      for (int c = 0; c < z.width(); ++c)
        for (int ch = 0; ch < z.channels(); ++ch) z(r, c, ch) = img(r / 2, c / 2, ch);
    return z;
  }
  Image<T> decode(const Image<T>& z) const override {
    if (z.height() % 2 || z.width() % 2) throw std::invalid_argument("PoolCodec: odd latent dims");
    Image<T> img(z.height() / 2, z.width() / 2, z.channels());
    for (int r = 0; r < img.height(); ++r)
      for (int c = 0; c < img.width(); ++c)
        for (int ch = 0; ch < img.channels(); ++ch)
          img(r, c, ch) = (z(2 * r, 2 * c, ch) + z(2 * r, 2 * c + 1, ch) + z(2 * r + 1, 2 * c, ch) +
                           z(2 * r + 1, 2 * c + 1, ch)) /
                          T(4);
    return img;
  }
  Image<T> decode_vjp(const Image<T>& z, const Image<T>& g) const override {
    if (g.height() * 2 != z.height() || g.width() * 2 != z.width() || g.channels() != z.channels())
      throw std::invalid_argument("PoolCodec::decode_vjp: cotangent shape mismatch");
    Image<T> out(z.height(), z.width(), z.channels());
    for (int r = 0; r < out.height(); ++r)
      for (int c = 0; c < out.width(); ++c)
        for (int ch = 0; ch < out.channels(); ++ch) out(r, c, ch) = g(r / 2, c / 2, ch) / T(4);
    return out;
  }
};

// z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps
template <typename T>
Image<T> forward_noise(const Image<T>& z0, int t, const Image<T>& eps, const NoiseSchedule& s) {
  if (t < 0 || t > s.T()) throw std::invalid_argument("forward_noise: timestep out of range");
  require_same_shape(z0, eps, "forward_noise");
  const double ab = s.alpha_bar(t);
  return axpby(T(std::sqrt(ab)), z0, T(std::sqrt(1.0 - ab)), eps);
}

template <typename T>
Image<T> predict_x0(const Image<T>& z_t, const Image<T>& eps_hat, int t, const NoiseSchedule& s) {
  if (t < 1 || t > s.T()) throw std::invalid_argument("predict_x0: timestep out of range");
  require_same_shape(z_t, eps_hat, "predict_x0");
  const double ab = s.alpha_bar(t);
  const double inv = 1.0 / std::sqrt(ab);
  return axpby(T(inv), z_t, T(-std::sqrt(1.0 - ab) * inv), eps_hat);
}

// Coefficients of one (possibly respaced) reverse jump t_hi -> t_lo, with
// alpha' = ab(t_hi) / ab(t_lo) playing the role of alpha_t.
struct StepCoefficients {
  double alpha_eff;
  double beta_eff;
  double eps_coef;      // mean = (z - eps_coef * eps) / sqrt(alpha_eff)
  double x0_coef;       // mean = x0_coef * x0 + zt_coef * z
  double zt_coef;
  double sigma;         // 0 when t_lo == 0
};

inline StepCoefficients step_coefficients(int t_hi, int t_lo, const NoiseSchedule& s) {
  if (!(0 <= t_lo && t_lo < t_hi && t_hi <= s.T()))
    throw std::invalid_argument("ddpm step: need 0 <= t_lo < t_hi <= T");
  const double ab_hi = s.alpha_bar(t_hi), ab_lo = s.alpha_bar(t_lo);
  StepCoefficients c{};
  c.alpha_eff = ab_hi / ab_lo;
  c.beta_eff = 1.0 - c.alpha_eff;
  c.eps_coef = c.beta_eff / std::sqrt(1.0 - ab_hi);
  c.x0_coef = std::sqrt(ab_lo) * c.beta_eff / (1.0 - ab_hi);
  c.zt_coef = std::sqrt(c.alpha_eff) * (1.0 - ab_lo) / (1.0 - ab_hi);
  c.sigma = t_lo == 0 ? 0.0 : std::sqrt((1.0 - ab_lo) / (1.0 - ab_hi) * c.beta_eff);
  return c;
}

template <typename T>
Image<T> ddpm_step(const Image<T>& z_t, const Image<T>& eps_hat, int t_hi, int t_lo, const Image<T>& noise,
                   const NoiseSchedule& s) {
  require_same_shape(z_t, eps_hat, "ddpm_step");
  require_same_shape(z_t, noise, "ddpm_step");
  const auto c = step_coefficients(t_hi, t_lo, s);
  const double inv = 1.0 / std::sqrt(c.alpha_eff);
  Image<T> out(z_t.height(), z_t.width(), z_t.channels());
  for (std::size_t i = 0; i < z_t.size(); ++i)
    out[i] = T(inv * (double(z_t[i]) - c.eps_coef * double(eps_hat[i])) + c.sigma * double(noise[i]));
  return out;
}

// Same jump expressed through an explicit x0 estimate (the posterior mean
// of q(z_lo | z_hi, x0)); equal to ddpm_step when x0 = predict_x0(z_t, eps).
template <typename T>
Image<T> posterior_step(const Image<T>& z_t, const Image<T>& x0_hat, int t_hi, int t_lo, const Image<T>& noise,
                        const NoiseSchedule& s) {
  require_same_shape(z_t, x0_hat, "posterior_step");
  require_same_shape(z_t, noise, "posterior_step");
  const auto c = step_coefficients(t_hi, t_lo, s);
  Image<T> out(z_t.height(), z_t.width(), z_t.channels());
  for (std::size_t i = 0; i < z_t.size(); ++i)
    out[i] = T(c.x0_coef * double(x0_hat[i]) + c.zt_coef * double(z_t[i]) + c.sigma * double(noise[i]));
  return out;
}

// Descending timesteps round(T*(n-i)/n), i = 0..n-1; stepping continues to 0.
inline std::vector<int> space_timesteps(int T, int n) {
  if (n < 1 || n > T) throw std::invalid_argument("space_timesteps: need 1 <= n <= T");
  std::vector<int> ts;
  for (int i = 0; i < n; ++i) {
    const int t = static_cast<int>(std::llround(double(T) * double(n - i) / double(n)));
    if (ts.empty() || t < ts.back()) ts.push_back(t);
  }
  return ts;
}

// Optimal epsilon predictor for data z0 ~ N(m, s^2 I).
template <typename T>
class AnalyticGaussianDenoiser final : public Denoiser<T> {
 public:
  AnalyticGaussianDenoiser(Image<T> mean, double std, const NoiseSchedule& sched)
      : mean_(std::move(mean)), std_(std), sched_(sched) {
    if (std < 0) throw std::invalid_argument("AnalyticGaussianDenoiser: std must be >= 0");
  }

  Image<T> predict(const Image<T>& z_t, const Condition<T>&, int t) const override {
    require_same_shape(z_t, mean_, "AnalyticGaussianDenoiser");
    const double ab = sched_.alpha_bar(t), sab = std::sqrt(ab), s2 = std_ * std_;
    const double gain = sab * s2 / (ab * s2 + 1.0 - ab);
    const double denom = std::sqrt(1.0 - ab);
    Image<T> eps(z_t.height(), z_t.width(), z_t.channels());
    for (std::size_t i = 0; i < z_t.size(); ++i) {
      const double m = mean_[i];
      const double x0 = m + gain * (double(z_t[i]) - sab * m);
      eps[i] = T((double(z_t[i]) - sab * x0) / denom);
    }
    return eps;
  }

 private:
  Image<T> mean_;
  double std_;
  NoiseSchedule sched_;
};

// Forwards to another denoiser and counts calls.
template <typename T>
class CountingDenoiser final : public Denoiser<T> {
 public:
  explicit CountingDenoiser(const Denoiser<T>& inner) : inner_(inner) {}
  Image<T> predict(const Image<T>& z_t, const Condition<T>& c, int t) const override {
    calls_.fetch_add(1, std::memory_order_relaxed);
    return inner_.predict(z_t, c, t);
  }
  std::uint64_t calls() const { return calls_.load(); }
  void reset() { calls_.store(0); }

 private:
  const Denoiser<T>& inner_;
  mutable std::atomic<std::uint64_t> calls_{0};
};

}  // namespace hazediff
