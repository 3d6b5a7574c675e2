#pragma once

// Training for the epsilon predictor: the hybrid conditional/unconditional
// objective, AdamW, a seed-deterministic training loop, and a
// finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "hazediff/denoisernet.hpp"
#include "hazediff/diffusion.hpp"
#include "hazediff/image.hpp"
#include "hazediff/parallel.hpp"
#include "hazediff/rng.hpp"

namespace hazediff {

struct HybridConfig {
  double p = 0.3;
  int batch_size = 16;
  double learning_rate = 1e-3;
  int iterations = 5000;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(p >= 0 && p <= 1)) throw std::invalid_argument("HybridConfig: p must be in [0, 1]");
    if (batch_size < 1) throw std::invalid_argument("HybridConfig: batch_size must be >= 1");
    if (iterations < 0) throw std::invalid_argument("HybridConfig: iterations must be >= 0");
  }
};

// A conditional training example: the diffusion target and its (encoded)
// condition image.
template <typename T>
struct PairSample {
  Image<T> target;
  Image<T> cond;
};

// Random quantities of one batch slot, drawn before any network evaluation.
// The branch uniform is always consumed, so two objectives sharing an RNG
// stream see identical timesteps and noise.
template <typename T>
struct SlotDraw {
  bool conditional = true;
  int t = 1;
  Image<T> eps;
};

template <typename T>
std::vector<SlotDraw<T>> draw_slots(int batch, double p, int h, int w, int c, const NoiseSchedule& sched, Rng& rng) {
  std::vector<SlotDraw<T>> slots(batch);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> ut(1, sched.T());
  for (auto& s : slots) {
    s.conditional = u01(rng) < p;
    s.t = ut(rng);
    s.eps = normal_like<T>(h, w, c, rng);
  }
  return slots;
}

template <typename T>
struct LossResult {
  double loss = 0;
  std::vector<T> grad;
  int conditional_evals = 0;
  int unconditional_evals = 0;
};

// Per-slot squared error mean, averaged over the batch; gradients are summed
// in slot order so the result does not depend on `threads`.
template <typename T>
LossResult<T> evaluate_slots(const UNet<T>& net, const std::vector<SlotDraw<T>>& slots,
                             std::span<const PairSample<T>> synth, std::span<const Image<T>> real,
                             const NoiseSchedule& sched, int threads = 1, bool want_grad = true) {
  const std::size_t B = slots.size();
  std::vector<double> losses(B, 0.0);
  std::vector<std::vector<T>> grads(want_grad ? B : 0);
  LossResult<T> res;
  for (std::size_t i = 0; i < B; ++i) {
    if (slots[i].conditional && i >= synth.size())
      throw std::invalid_argument("loss_hybrid: synthetic batch too small for the drawn branches");
    if (!slots[i].conditional && i >= real.size())
      throw std::invalid_argument("loss_hybrid: real batch too small for the drawn branches");
    (slots[i].conditional ? res.conditional_evals : res.unconditional_evals)++;
  }
  parallel_for(B, threads, [&](std::size_t i) {
    const auto& s = slots[i];
    const Image<T>& z0 = s.conditional ? synth[i].target : real[i];
    const auto cond = s.conditional ? Condition<T>::of(synth[i].cond) : Condition<T>::null();
    const Image<T> zt = forward_noise(z0, s.t, s.eps, sched);
    typename UNet<T>::Cache cache;
    const Image<T> pred = net.forward(zt, cond, s.t, cache);
    const double n = double(pred.size());
    double se = 0;
    Image<T> d(pred.height(), pred.width(), pred.channels());
    for (std::size_t j = 0; j < pred.size(); ++j) {
      const double diff = double(pred[j]) - double(s.eps[j]);
      se += diff * diff;
      d[j] = T(2.0 * diff / (n * double(B)));
    }
    losses[i] = se / n;
    if (want_grad) {
      grads[i].assign(net.param_count(), T(0));
      net.backward(cache, d, grads[i]);
    }
  });
  for (double l : losses) res.loss += l;
  res.loss /= double(B);
  if (want_grad) {
    res.grad.assign(net.param_count(), T(0));
    for (const auto& g : grads)
      for (std::size_t j = 0; j < g.size(); ++j) res.grad[j] += g[j];
  }
  return res;
}

// Hybrid objective: slot i is conditional with probability p, using
// (synth[i].target, synth[i].cond); otherwise unconditional on real[i] with
// the null condition.
template <typename T>
LossResult<T> loss_hybrid(const UNet<T>& net, std::span<const PairSample<T>> synth, std::span<const Image<T>> real,
                          const HybridConfig& cfg, const NoiseSchedule& sched, Rng& rng, int threads = 1) {
  cfg.validate();
  if (synth.empty() && real.empty()) throw std::invalid_argument("loss_hybrid: empty batches");
  const Image<T>& shape = !synth.empty() ? synth[0].target : real[0];
  const auto slots = draw_slots<T>(cfg.batch_size, cfg.p, shape.height(), shape.width(), shape.channels(), sched, rng);
  return evaluate_slots(net, slots, synth, real, sched, threads);
}

// Plain conditional denoising objective.
template <typename T>
LossResult<T> loss_conditional(const UNet<T>& net, std::span<const PairSample<T>> synth, int batch_size,
                               const NoiseSchedule& sched, Rng& rng, int threads = 1) {
  if (synth.empty()) throw std::invalid_argument("loss_conditional: empty batch");
  const auto& s0 = synth[0].target;
  const auto slots = draw_slots<T>(batch_size, 1.0, s0.height(), s0.width(), s0.channels(), sched, rng);
  return evaluate_slots(net, slots, synth, std::span<const Image<T>>{}, sched, threads);
}

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

template <typename T>
class AdamW {
 public:
  AdamW(std::size_t n, AdamWConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<T>& params, const std::vector<T>& grad) {
    ++t_;
    const double b1t = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double b2t = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grad[i];
      m_[i] = cfg_.beta1 * m_[i] + (1 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1 - cfg_.beta2) * g * g;
      const double mhat = m_[i] / b1t, vhat = v_[i] / b2t;
      double p = params[i];
      p -= cfg_.lr * cfg_.weight_decay * p;
      p -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      params[i] = T(p);
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

template <typename T>
struct TrainData {
  std::vector<PairSample<T>> synth;  // conditional examples
  std::vector<Image<T>> real;        // unconditional examples
};

struct TrainOptions {
  HybridConfig hybrid;
  AdamWConfig adamw;
  int crop = 0;  // random square crop size (multiple of 4); 0 trains on full images
  int threads = 1;
  int checkpoint_every = 0;
  // called after every checkpoint_every iterations (and never when 0)
  std::function<void(int)> on_checkpoint;
  std::function<void(int, double)> on_log;
  int log_every = 0;
};

template <typename T>
Image<T> crop_image(const Image<T>& img, int r0, int c0, int size) {
  Image<T> out(size, size, img.channels());
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c)
      for (int ch = 0; ch < img.channels(); ++ch) out(r, c, ch) = img(r0 + r, c0 + c, ch);
  return out;
}

// Trains `net` in place and returns the per-iteration loss. Data order,
// crops, timesteps and noise all come from one stream seeded by
// opts.hybrid.seed.
template <typename T>
std::vector<double> train(UNet<T>& net, const TrainData<T>& data, const TrainOptions& opts,
                          const NoiseSchedule& sched) {
  const auto& cfg = opts.hybrid;
  cfg.validate();
  if (cfg.p > 0 && data.synth.empty()) throw std::invalid_argument("train: no conditional examples");
  if (cfg.p < 1 && data.real.empty()) throw std::invalid_argument("train: no unconditional examples");
  AdamWConfig ac = opts.adamw;
  ac.lr = cfg.learning_rate;
  AdamW<T> opt(net.param_count(), ac);
  Rng rng(cfg.seed);
  std::vector<double> history;
  history.reserve(std::size_t(cfg.iterations));

  const auto crop_pair = [&](const Image<T>& a, const Image<T>* b, Image<T>& oa, Image<T>* ob) {
    if (opts.crop <= 0 || (opts.crop >= a.height() && opts.crop >= a.width())) {
      oa = a;
      if (b) *ob = *b;
      return;
    }
    const int r0 = std::uniform_int_distribution<int>(0, a.height() - opts.crop)(rng);
    const int c0 = std::uniform_int_distribution<int>(0, a.width() - opts.crop)(rng);
    oa = crop_image(a, r0, c0, opts.crop);
    if (b) *ob = crop_image(*b, r0, c0, opts.crop);
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    const int B = cfg.batch_size;
    std::vector<PairSample<T>> synth(data.synth.empty() ? 0 : B);
    std::vector<Image<T>> real(data.real.empty() ? 0 : B);
    for (int i = 0; i < B; ++i) {
      if (!data.synth.empty()) {
        const auto& s = data.synth[std::uniform_int_distribution<std::size_t>(0, data.synth.size() - 1)(rng)];
        crop_pair(s.target, &s.cond, synth[i].target, &synth[i].cond);
      }
      if (!data.real.empty()) {
        const auto& r = data.real[std::uniform_int_distribution<std::size_t>(0, data.real.size() - 1)(rng)];
        crop_pair(r, nullptr, real[i], nullptr);
      }
    }
    auto res = loss_hybrid<T>(net, synth, real, cfg, sched, rng, opts.threads);
    if (!std::isfinite(res.loss)) {
      std::ostringstream msg;
      msg << "train: non-finite loss at iteration " << it;
      throw std::runtime_error(msg.str());
    }
    opt.step(net.params(), res.grad);
    history.push_back(res.loss);
    if (opts.on_log && opts.log_every > 0 && (it + 1) % opts.log_every == 0) opts.on_log(it + 1, res.loss);
    if (opts.on_checkpoint && opts.checkpoint_every > 0 && (it + 1) % opts.checkpoint_every == 0)
      opts.on_checkpoint(it + 1);
  }
  return history;
}

// Mean of the trailing `window` entries ending at index `end` (exclusive).
inline double smoothed(const std::vector<double>& h, std::size_t end, std::size_t window) {
  const std::size_t lo = end > window ? end - window : 0;
  double s = 0;
  for (std::size_t i = lo; i < end; ++i) s += h[i];
  return end > lo ? s / double(end - lo) : 0.0;
}

struct GradCheckReport {
  double max_rel_error = 0;
  double max_abs_error = 0;
  int probes = 0;
};

// Compares an analytic gradient with central differences of `loss` on
// `probes` randomly chosen coordinates. Relative error is
// |analytic - fd| / max(|analytic|, |fd|, abs_floor).
template <typename T, typename LossFn>
GradCheckReport grad_check(std::vector<T>& params, const std::vector<T>& analytic, LossFn&& loss, int probes,
                           double epsilon, Rng& rng, double abs_floor = 1e-6) {
  if (analytic.size() != params.size()) throw std::invalid_argument("grad_check: size mismatch");
  GradCheckReport rep;
  std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
  for (int i = 0; i < probes; ++i) {
    const std::size_t j = pick(rng);
    const T saved = params[j];
    params[j] = T(double(saved) + epsilon);
    const double up = loss(params);
    params[j] = T(double(saved) - epsilon);
    const double down = loss(params);
    params[j] = saved;
    const double fd = (up - down) / (2 * epsilon);
    const double a = analytic[j];
    const double err = std::abs(a - fd);
    rep.max_abs_error = std::max(rep.max_abs_error, err);
    rep.max_rel_error = std::max(rep.max_rel_error, err / std::max({std::abs(a), std::abs(fd), abs_floor}));
    ++rep.probes;
  }
  return rep;
}

// Gradient check of the denoising loss for a fixed set of slots.
template <typename T>
GradCheckReport grad_check_net(UNet<T>& net, const std::vector<SlotDraw<T>>& slots,
                               std::span<const PairSample<T>> synth, std::span<const Image<T>> real,
                               const NoiseSchedule& sched, int probes, double epsilon, Rng& rng,
                               double abs_floor = 1e-6) {
  const auto base = evaluate_slots(net, slots, synth, real, sched);
  auto loss = [&](const std::vector<T>&) { return evaluate_slots(net, slots, synth, real, sched, 1, false).loss; };
  return grad_check(net.params(), base.grad, loss, probes, epsilon, rng, abs_floor);
}

}  // namespace hazediff
