#pragma once

// Generative procedures: blended conditional/unconditional sampling for hazy
// image generation, and the accelerated two-stage dehazing sampler.
//
// Random draws happen in a fixed order: z_T first, then for every reverse
// step the denoiser is evaluated before that step's noise is drawn. The
// dehazing sampler draws its re-noising noise between the two stages.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "hazediff/dcp.hpp"
#include "hazediff/diffusion.hpp"
#include "hazediff/image.hpp"
#include "hazediff/metrics.hpp"
#include "hazediff/rng.hpp"

namespace hazediff {

struct TraceRow {
  int step = 0;           // 0-based position in the run
  int timestep = 0;
  double fidelity_loss = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t call = 0;  // running denoiser-call count after this step
  std::string stage;
};

struct BlendedConfig {
  double w = 0.85;
  int steps = 50;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(w >= 0 && w <= 1)) throw std::invalid_argument("BlendedConfig: w must be in [0, 1]");
    if (steps < 1) throw std::invalid_argument("BlendedConfig: steps must be >= 1");
  }
};

namespace sampler_detail {

// Runs the reverse chain over `ts` (then to 0) starting from z; `eps_fn`
// produces the noise prediction at a timestep.
template <typename T, typename EpsFn>
Image<T> reverse_chain(Image<T> z, const std::vector<int>& ts, EpsFn&& eps_fn, const NoiseSchedule& sched, Rng& rng,
                       std::vector<TraceRow>* trace, std::uint64_t& calls, const char* stage) {
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t_hi = ts[i];
    const int t_lo = i + 1 < ts.size() ? ts[i + 1] : 0;
    const Image<T> eps = eps_fn(z, t_hi, calls);
    const Image<T> noise = normal_like<T>(z.height(), z.width(), z.channels(), rng);
    z = ddpm_step(z, eps, t_hi, t_lo, noise, sched);
    if (trace) trace->push_back({int(trace->size()), t_hi, std::numeric_limits<double>::quiet_NaN(), calls, stage});
  }
  return z;
}

}  // namespace sampler_detail

// Hazy image generation: each step mixes the conditional and unconditional
// noise predictions as w*eps(z, E(y)) + (1-w)*eps(z, null). A coefficient of
// exactly 0 or 1 skips the branch it zeroes out.
template <typename T>
Image<T> blended_sample(const Denoiser<T>& den, const Image<T>& clean, const Codec<T>& codec, const BlendedConfig& cfg,
                        const NoiseSchedule& sched, std::vector<TraceRow>* trace = nullptr) {
  cfg.validate();
  const Image<T> c = codec.encode(clean);
  const auto cond = Condition<T>::of(c);
  const auto null = Condition<T>::null();
  Rng rng(cfg.seed);
  Image<T> z = normal_like<T>(c.height(), c.width(), c.channels(), rng);
  const T w = T(cfg.w), v = T(1) - T(cfg.w);
  auto eps_fn = [&](const Image<T>& zt, int t, std::uint64_t& calls) {
    if (cfg.w == 1.0) {
      ++calls;
      return den.predict(zt, cond, t);
    }
    if (cfg.w == 0.0) {
      ++calls;
      return den.predict(zt, null, t);
    }
    calls += 2;
    return axpby(w, den.predict(zt, cond, t), v, den.predict(zt, null, t));
  };
  std::uint64_t calls = 0;
  z = sampler_detail::reverse_chain(std::move(z), space_timesteps(sched.T(), cfg.steps), eps_fn, sched, rng, trace,
                                    calls, "blended");
  return clamp01(codec.decode(z));
}

// Plain spaced conditional DDPM sampling, condition = E(cond_image).
template <typename T>
Image<T> conditional_sample(const Denoiser<T>& den, const Image<T>& cond_image, const Codec<T>& codec, int steps,
                            std::uint64_t seed, const NoiseSchedule& sched, std::vector<TraceRow>* trace = nullptr) {
  if (steps < 1) throw std::invalid_argument("conditional_sample: steps must be >= 1");
  const Image<T> c = codec.encode(cond_image);
  const auto cond = Condition<T>::of(c);
  Rng rng(seed);
  Image<T> z = normal_like<T>(c.height(), c.width(), c.channels(), rng);
  auto eps_fn = [&](const Image<T>& zt, int t, std::uint64_t& calls) {
    ++calls;
    return den.predict(zt, cond, t);
  };
  std::uint64_t calls = 0;
  z = sampler_detail::reverse_chain(std::move(z), space_timesteps(sched.T(), steps), eps_fn, sched, rng, trace, calls,
                                    "conditional");
  return clamp01(codec.decode(z));
}

template <typename T>
struct DehazeEstimate {
  Image<T> image;
  int source_timestep = 0;
};

inline constexpr double kAlignStdFloor = 1e-6;

// Tiled statistics transfer: every k x k window of the hazy image is
// standardised per channel and given the reference window's mean and std;
// overlaps are averaged and the result clamped to [0, 1].
template <typename T>
DehazeEstimate<T> align_op(const Image<T>& hazy, const Image<T>& reference, int k, int d, int source_timestep = 0) {
  require_same_shape(hazy, reference, "align_op");
  auto gx = extract_patches(hazy, k, d);
  const auto gr = extract_patches(reference, k, d);
  const int C = hazy.channels();
  for (std::size_t i = 0; i < gx.patches.size(); ++i) {
    auto& px = gx.patches[i];
    const auto sx = channel_stats(px);
    const auto sr = channel_stats(gr.patches[i]);
    for (std::size_t q = 0; q < px.pixels(); ++q)
      for (int ch = 0; ch < C; ++ch) {
        const double sd = std::max(double(sx.std[ch]), kAlignStdFloor);
        const double v = (double(px[q * C + ch]) - double(sx.mean[ch])) / sd * double(sr.std[ch]) + double(sr.mean[ch]);
        px[q * C + ch] = T(v);
      }
  }
  return {clamp01(assemble_patches(gx)), source_timestep};
}

// z_omega = sqrt(ab) E(y_hat) + sqrt(1 - ab) noise
template <typename T>
Image<T> renoise(const Image<T>& y_hat, int omega, const Image<T>& noise, const Codec<T>& codec,
                 const NoiseSchedule& sched) {
  if (omega < 0 || omega > sched.T()) throw std::invalid_argument("renoise: omega out of range");
  return forward_noise(codec.encode(y_hat), omega, noise, sched);
}

template <typename T>
struct GuidedUpdate {
  Image<T> latent;
  double fidelity_loss = 0;  // 1 - MS-SSIM before the update
};

// Largest MS-SSIM level count (<= p.levels) the given dims can support.
inline SsimParams fit_ssim_levels(SsimParams p, int h, int w) {
  while (p.levels > 1 && (long(p.window) << (p.levels - 1)) > std::min(h, w)) --p.levels;
  return p;
}

// One weighted fidelity-guidance step: descend (1 - MS-SSIM(D(z0), y_hat)),
// with the image-space gradient masked by W (broadcast over channels) and
// pulled back through the decoder's Jacobian transpose.
template <typename T>
GuidedUpdate<T> guided_update(const Image<T>& z0_hat, const Image<T>& y_hat, const Image<T>& W, double s,
                              const Codec<T>& codec, const SsimParams& params = {}) {
  const Image<T> decoded = codec.decode(z0_hat);
  require_same_shape(decoded, y_hat, "guided_update");
  if (!W.same_spatial(decoded) || W.channels() != 1)
    throw std::invalid_argument("guided_update: weighting map must be single-channel at decoded resolution");
  if (s < 0) throw std::invalid_argument("guided_update: s must be >= 0");
  GuidedUpdate<T> out;
  const auto [score, grad] = ms_ssim_with_grad(decoded, y_hat, params);
  out.fidelity_loss = 1.0 - score;
  if (s == 0) {
    out.latent = z0_hat;
    return out;
  }
  const int C = decoded.channels();
  Image<T> cot(decoded.height(), decoded.width(), C);
  for (std::size_t p = 0; p < decoded.pixels(); ++p)
    for (int ch = 0; ch < C; ++ch) cot[p * C + ch] = -W[p] * grad[p * C + ch];  // d(1 - ms_ssim) = -d ms_ssim
  const Image<T> pull = codec.decode_vjp(z0_hat, cot);
  out.latent = axpby(T(1), z0_hat, T(-s), pull);
  return out;
}

struct AccSampConfig {
  int tau = 800;
  int omega = 600;
  double s = 0.1;
  int steps = 50;
  int k = 16;
  int d = 8;
  std::uint64_t seed = 0;
  DcpConfig dcp;
  SsimParams ssim;

  void validate(int T) const {
    if (!(0 < omega && omega <= tau && tau <= T)) throw std::invalid_argument("AccSampConfig: need 0 < omega <= tau <= T");
    if (s < 0) throw std::invalid_argument("AccSampConfig: s must be >= 0");
    if (k < 2) throw std::invalid_argument("AccSampConfig: k must be >= 2");
    if (d < 1 || d > k) throw std::invalid_argument("AccSampConfig: need 1 <= d <= k");
    if (steps < 2) throw std::invalid_argument("AccSampConfig: steps must be >= 2");
    dcp.validate();
  }
};

// Step budget per stage. Both stages keep the density of the full respaced
// grid: stage 1 gets round(steps*(T-tau)/T) calls (at least 1), stage 2
// round(steps*omega/T) (at least 1, at most what remains); the skipped
// interval (omega, tau) costs nothing.
struct StageBudget {
  int stage1 = 1;
  int stage2 = 1;
  std::vector<int> stage1_timesteps;  // descending, ends at tau (or {T} for a single call)
  std::vector<int> stage2_timesteps;  // descending from omega, stepping continues to 0
};

inline StageBudget stage_budget(const AccSampConfig& cfg, int T) {
  cfg.validate(T);
  StageBudget b;
  b.stage1 = std::max(1, int(std::llround(double(cfg.steps) * double(T - cfg.tau) / double(T))));
  b.stage1 = std::min(b.stage1, cfg.steps - 1);
  const int want2 = int(std::llround(double(cfg.steps) * double(cfg.omega) / double(T)));
  b.stage2 = std::max(1, std::min(cfg.steps - b.stage1, want2));
  if (b.stage1 == 1) {
    b.stage1_timesteps = {T};
  } else {
    for (int i = 0; i < b.stage1; ++i) {
      const int t = cfg.tau + int(std::llround(double(T - cfg.tau) * double(b.stage1 - 1 - i) / double(b.stage1 - 1)));
      if (b.stage1_timesteps.empty() || t < b.stage1_timesteps.back()) b.stage1_timesteps.push_back(t);
    }
    b.stage1 = int(b.stage1_timesteps.size());
  }
  b.stage2_timesteps = space_timesteps(cfg.omega, std::min(b.stage2, cfg.omega));
  b.stage2 = int(b.stage2_timesteps.size());
  return b;
}

template <typename T>
struct AccSampResult {
  Image<T> image;
  DehazeEstimate<T> estimate;
  Image<T> weighting;
  std::uint64_t denoiser_calls = 0;
  StageBudget budget;
};

template <typename T>
AccSampResult<T> accsamp(const Denoiser<T>& den, const Image<T>& hazy, const Codec<T>& codec,
                         const AccSampConfig& cfg, const NoiseSchedule& sched,
                         std::vector<TraceRow>* trace = nullptr) {
  AccSampResult<T> res;
  res.budget = stage_budget(cfg, sched.T());
  const auto& b = res.budget;
  const Image<T> c = codec.encode(hazy);
  const auto cond = Condition<T>::of(c);
  Rng rng(cfg.seed);
  std::uint64_t& calls = res.denoiser_calls;

  // stage 1: T -> tau, then x0 prediction at the last stage-1 timestep
  Image<T> z = normal_like<T>(c.height(), c.width(), c.channels(), rng);
  const auto& ts1 = b.stage1_timesteps;
  for (std::size_t i = 0; i + 1 < ts1.size(); ++i) {
    const Image<T> eps = den.predict(z, cond, ts1[i]);
    ++calls;
    const Image<T> noise = normal_like<T>(z.height(), z.width(), z.channels(), rng);
    z = ddpm_step(z, eps, ts1[i], ts1[i + 1], noise, sched);
    if (trace) trace->push_back({int(trace->size()), ts1[i], std::numeric_limits<double>::quiet_NaN(), calls, "estimate"});
  }
  const int t_est = ts1.back();
  const Image<T> eps_est = den.predict(z, cond, t_est);
  ++calls;
  if (trace) trace->push_back({int(trace->size()), t_est, std::numeric_limits<double>::quiet_NaN(), calls, "estimate"});
  const Image<T> reference = clamp01(codec.decode(predict_x0(z, eps_est, t_est, sched)));
  res.estimate = align_op(hazy, reference, cfg.k, cfg.d, t_est);

  // skip to omega
  const Image<T> renoise_eps = normal_like<T>(c.height(), c.width(), c.channels(), rng);
  z = renoise(res.estimate.image, cfg.omega, renoise_eps, codec, sched);

  // stage 2: guided refinement omega -> 0
  const Image<T> decoded_shape = codec.decode(z);
  res.weighting = weighting_map(hazy, decoded_shape.height(), decoded_shape.width(), cfg.dcp);
  const SsimParams sp = fit_ssim_levels(cfg.ssim, decoded_shape.height(), decoded_shape.width());
  const auto& ts2 = b.stage2_timesteps;
  for (std::size_t i = 0; i < ts2.size(); ++i) {
    const int t_hi = ts2[i];
    const int t_lo = i + 1 < ts2.size() ? ts2[i + 1] : 0;
    const Image<T> eps = den.predict(z, cond, t_hi);
    ++calls;
    auto upd = guided_update(predict_x0(z, eps, t_hi, sched), res.estimate.image, res.weighting, cfg.s, codec, sp);
    const Image<T> noise = normal_like<T>(z.height(), z.width(), z.channels(), rng);
    z = posterior_step(z, upd.latent, t_hi, t_lo, noise, sched);
    if (trace) trace->push_back({int(trace->size()), t_hi, upd.fidelity_loss, calls, "refine"});
  }
  res.image = clamp01(codec.decode(z));
  return res;
}

}  // namespace hazediff
