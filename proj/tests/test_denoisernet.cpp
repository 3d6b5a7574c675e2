#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "hazediff/hazesim.hpp"
#include "hazediff/train.hpp"
#include "test_util.hpp"

using namespace hazediff;
using hazediff::testing::random_image;
using hazediff::testing::TempDir;

namespace {

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Gives the zero-initialised output layer random weights so gradients reach
// every layer.
template <typename T>
void randomize_output(UNet<T>& net, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (const auto& pt : net.layout())
    if (pt.name.starts_with("out."))
      for (std::size_t i = 0; i < pt.count(); ++i) net.params()[pt.offset + i] = T(n(rng));
}

// Scenes need 16 px; smaller test images are downsampled from 16.
HazyPair<double> small_pair(std::uint64_t seed, int size) {
  auto p = synth_pair<double>(seed, std::max(size, 16), std::max(size, 16));
  if (size < 16) {
    p.clean = resize_bilinear(p.clean, size, size);
    p.hazy = resize_bilinear(p.hazy, size, size);
  }
  return p;
}

std::vector<PairSample<double>> toy_pairs(int n, int size, std::uint64_t seed) {
  std::vector<PairSample<double>> out;
  for (int i = 0; i < n; ++i) {
    const auto p = small_pair(split_seed(seed, std::uint64_t(i)), size);
    out.push_back({p.hazy, p.clean});
  }
  return out;
}

NetConfig small_config(Prediction pred = Prediction::epsilon) {
  NetConfig c;
  c.prediction = pred;
  c.widths = {4, 6, 8};
  c.emb_dim = 8;
  return c;
}

}  // namespace

TEST(UNet, FreshNetworkPredictsZero) {
  const UNet<float> net({}, 3);
  const auto z = random_image<float>(16, 16, 3, 1, -1, 1);
  for (float v : net.predict(z, Condition<float>::of(random_image<float>(16, 16, 3, 2)), 500).data())
    EXPECT_EQ(v, 0.0f);
  for (float v : net.predict(z, Condition<float>::null(), 1).data()) EXPECT_EQ(v, 0.0f);
}

TEST(UNet, ShapeAndDeterminism) {
  UNet<float> net({}, 4);
  randomize_output(net, 5);
  for (auto [h, w] : {std::pair{8, 8}, std::pair{16, 24}, std::pair{32, 12}}) {
    const auto z = random_image<float>(h, w, 3, 6, -1, 1);
    const auto c = Condition<float>::of(random_image<float>(h, w, 3, 7));
    const auto a = net.predict(z, c, 321), b = net.predict(z, c, 321);
    EXPECT_EQ(a.height(), h);
    EXPECT_EQ(a.width(), w);
    EXPECT_EQ(a.channels(), 3);
    EXPECT_EQ(a, b);
  }
}

TEST(UNet, ConditionAndTimestepMatter) {
  UNet<double> net({}, 8);
  randomize_output(net, 9);
  const auto z = random_image<double>(8, 8, 3, 10, -1, 1);
  const auto c = Condition<double>::of(random_image<double>(8, 8, 3, 11));
  EXPECT_GT(max_abs_diff(net.predict(z, c, 10), net.predict(z, Condition<double>::null(), 10)), 1e-6);
  // a black condition is still distinguishable from no condition
  EXPECT_GT(max_abs_diff(net.predict(z, Condition<double>::of(Image<double>(8, 8, 3)), 10),
                         net.predict(z, Condition<double>::null(), 10)),
            1e-6);
  EXPECT_GT(max_abs_diff(net.predict(z, c, 10), net.predict(z, c, 900)), 1e-6);
}

TEST(UNet, InputValidation) {
  const UNet<float> net;
  EXPECT_THROW(net.predict(Image<float>(10, 8, 3), Condition<float>::null(), 1), std::invalid_argument);
  EXPECT_THROW(net.predict(Image<float>(8, 8, 1), Condition<float>::null(), 1), std::invalid_argument);
  EXPECT_THROW(net.predict(Image<float>(8, 8, 3), Condition<float>::of(Image<float>(4, 4, 3)), 1),
               std::invalid_argument);
}

TEST(UNet, ParameterCountFixedByConfig) {
  const UNet<float> a({}, 1), b({}, 2);
  EXPECT_EQ(a.param_count(), b.param_count());
  std::size_t n = 0;
  for (const auto& pt : a.layout()) {
    EXPECT_EQ(pt.offset, n);
    n += pt.count();
  }
  EXPECT_EQ(n, a.param_count());
  EXPECT_NE(UNet<float>(small_config()).param_count(), a.param_count());
}

TEST(UNet, VelocityOutputMapping) {
  NetConfig cfg;
  cfg.prediction = Prediction::velocity;
  const UNet<double> net(cfg, 1);
  const NoiseSchedule s;
  const auto z = random_image<double>(8, 8, 3, 12, -1, 1);
  // zero raw output: eps_hat = sqrt(1 - ab) z
  const auto e = net.predict(z, Condition<double>::null(), 400);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(e[i], std::sqrt(1 - s.alpha_bar(400)) * z[i], 1e-15);
  EXPECT_EQ(parse_prediction("v"), Prediction::velocity);
  EXPECT_EQ(parse_prediction("epsilon"), Prediction::epsilon);
  EXPECT_THROW(parse_prediction("x0"), std::invalid_argument);
}

TEST(GradCheck, LinearModelIsExact) {
  // loss(w) = mean_i (x_i . w - y_i)^2, gradient (2/n) X^T (Xw - y)
  Rng rng(13);
  const int n = 32, d = 12;
  std::vector<double> X(n * d), y(n), w(d);
  for (auto& v : X) v = uniform(rng, -1, 1);
  for (auto& v : y) v = uniform(rng, -1, 1);
  for (auto& v : w) v = uniform(rng, -1, 1);
  auto loss = [&](const std::vector<double>& p) {
    double l = 0;
    for (int i = 0; i < n; ++i) {
      double r = -y[i];
      for (int j = 0; j < d; ++j) r += X[i * d + j] * p[j];
      l += r * r;
    }
    return l / n;
  };
  std::vector<double> g(d, 0.0);
  for (int i = 0; i < n; ++i) {
    double r = -y[i];
    for (int j = 0; j < d; ++j) r += X[i * d + j] * w[j];
    for (int j = 0; j < d; ++j) g[j] += 2.0 * r * X[i * d + j] / n;
  }
  const auto rep = grad_check(w, g, loss, 100, 1e-5, rng);
  EXPECT_LT(rep.max_rel_error, 1e-8);
}

TEST(GradCheck, FullNetwork) {
  for (auto pred : {Prediction::epsilon, Prediction::velocity}) {
    NetConfig cfg;
    cfg.prediction = pred;
    UNet<double> net(cfg, 14);
    randomize_output(net, 15);
    const NoiseSchedule s;
    const auto synth = toy_pairs(2, 8, 16);
    std::vector<Image<double>> real{small_pair(17, 8).hazy, small_pair(18, 8).hazy};
    Rng rng(19);
    auto slots = draw_slots<double>(2, 0.5, 8, 8, 3, s, rng);
    slots[0].conditional = true;
    slots[1].conditional = false;
    const auto rep = grad_check_net<double>(net, slots, synth, real, s, 300, 1e-4, rng);
    EXPECT_EQ(rep.probes, 300);
    EXPECT_LT(rep.max_rel_error, 1e-5) << prediction_name(pred);
  }
}

TEST(GradCheck, EveryLayerReceivesGradient) {
  UNet<double> net({}, 20);
  randomize_output(net, 21);
  const NoiseSchedule s;
  const auto synth = toy_pairs(1, 8, 22);
  Rng rng(23);
  const auto slots = draw_slots<double>(1, 1.0, 8, 8, 3, s, rng);
  const auto res = evaluate_slots<double>(net, slots, synth, {}, s);
  for (const auto& pt : net.layout()) {
    double mx = 0;
    for (std::size_t i = 0; i < pt.count(); ++i) mx = std::max(mx, std::abs(res.grad[pt.offset + i]));
    EXPECT_GT(mx, 0.0) << pt.name;
  }
}

TEST(GradCheck, ZeroInputBatch) {
  UNet<double> net({}, 24);
  randomize_output(net, 25);
  const NoiseSchedule s;
  // zero target and zero noise: z_t = 0, null condition, so every input channel is zero
  std::vector<Image<double>> real{Image<double>(8, 8, 3)};
  std::vector<SlotDraw<double>> slots{{false, 300, Image<double>(8, 8, 3)}};
  const auto base = evaluate_slots<double>(net, slots, {}, real, s);
  // the first convolution's weights only see the input, so their gradient is exactly zero
  const auto& c1 = net.layout()[0];
  ASSERT_EQ(c1.name, "c1a.weight");
  for (std::size_t i = 0; i < c1.count(); ++i) EXPECT_EQ(base.grad[c1.offset + i], 0.0);
  auto loss = [&](const std::vector<double>&) {
    return evaluate_slots<double>(net, slots, {}, real, s, 1, false).loss;
  };
  Rng rng(26);
  std::vector<double> fd_zero;
  for (int probe = 0; probe < 20; ++probe) {
    const auto j = c1.offset + std::uniform_int_distribution<std::size_t>(0, c1.count() - 1)(rng);
    const double keep = net.params()[j];
    net.params()[j] = keep + 1e-3;
    const double up = loss(net.params());
    net.params()[j] = keep - 1e-3;
    const double dn = loss(net.params());
    net.params()[j] = keep;
    EXPECT_EQ(up, dn);
  }
  const auto rep = grad_check(net.params(), base.grad, loss, 200, 1e-6, rng);
  EXPECT_LT(rep.max_rel_error, 1e-5);
}

TEST(LossHybrid, OracleZeroNoiseGivesZeroLoss) {
  const UNet<double> net(small_config(), 27);
  const NoiseSchedule s;
  const auto synth = toy_pairs(3, 8, 28);
  std::vector<SlotDraw<double>> slots;
  for (int i = 0; i < 3; ++i) slots.push_back({true, 100 + i, Image<double>(8, 8, 3)});
  const auto r = evaluate_slots<double>(net, slots, synth, {}, s);
  EXPECT_EQ(r.loss, 0.0);
  for (double g : r.grad) EXPECT_EQ(g, 0.0);
}

TEST(LossHybrid, PEqualsOneMatchesConditionalObjective) {
  UNet<double> net(small_config(), 29);
  randomize_output(net, 30);
  const NoiseSchedule s;
  const auto synth = toy_pairs(8, 8, 31);
  std::vector<Image<double>> real;
  for (int i = 0; i < 8; ++i) real.push_back(small_pair(split_seed(32, std::uint64_t(i)), 8).hazy);
  HybridConfig cfg;
  cfg.p = 1.0;
  cfg.batch_size = 8;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng r1(seed), r2(seed);
    const auto a = loss_hybrid<double>(net, synth, real, cfg, s, r1);
    const auto b = loss_conditional<double>(net, synth, 8, s, r2);
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(a.grad, b.grad);
    EXPECT_EQ(a.conditional_evals, 8);
    EXPECT_EQ(r1(), r2());
  }
}

TEST(LossHybrid, PZeroNeverEvaluatesConditional) {
  const UNet<double> net(small_config(), 33);
  const NoiseSchedule s;
  std::vector<Image<double>> real;
  for (int i = 0; i < 4; ++i) real.push_back(small_pair(split_seed(34, std::uint64_t(i)), 8).hazy);
  HybridConfig cfg;
  cfg.p = 0.0;
  cfg.batch_size = 4;
  Rng rng(35);
  for (int rep = 0; rep < 50; ++rep) {
    const auto r = loss_hybrid<double>(net, {}, real, cfg, s, rng);
    EXPECT_EQ(r.conditional_evals, 0);
    EXPECT_EQ(r.unconditional_evals, 4);
  }
}

TEST(LossHybrid, DefaultPAndBranchFrequency) {
  EXPECT_EQ(HybridConfig{}.p, 0.3);
  const NoiseSchedule s;
  Rng rng(36);
  int cond = 0;
  const int N = 20000;
  for (const auto& sl : draw_slots<float>(N, 0.3, 4, 4, 3, s, rng)) cond += sl.conditional;
  EXPECT_NEAR(double(cond) / N, 0.3, 3 * std::sqrt(0.3 * 0.7 / N));
}

TEST(LossHybrid, DeterministicAndThreadIndependent) {
  UNet<double> net(small_config(), 37);
  randomize_output(net, 38);
  const NoiseSchedule s;
  const auto synth = toy_pairs(6, 8, 39);
  std::vector<Image<double>> real;
  for (const auto& p : synth) real.push_back(p.target);
  HybridConfig cfg;
  cfg.batch_size = 6;
  Rng r1(40), r2(40);
  const auto a = loss_hybrid<double>(net, synth, real, cfg, s, r1, 1);
  const auto b = loss_hybrid<double>(net, synth, real, cfg, s, r2, 3);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grad, b.grad);
}

TEST(LossHybrid, Errors) {
  const UNet<double> net(small_config(), 41);
  const NoiseSchedule s;
  HybridConfig cfg;
  Rng rng(42);
  EXPECT_THROW(loss_hybrid<double>(net, {}, {}, cfg, s, rng), std::invalid_argument);
  cfg.p = 1.5;
  const auto synth = toy_pairs(1, 8, 43);
  EXPECT_THROW(loss_hybrid<double>(net, synth, {}, cfg, s, rng), std::invalid_argument);
}

TEST(AdamW, MatchesHandComputedFirstStep) {
  AdamWConfig c;
  c.lr = 0.1;
  AdamW<double> opt(2, c);
  std::vector<double> p{1.0, -2.0}, g{0.5, -0.25};
  opt.step(p, g);
  // bias-corrected first step moves each coordinate by lr * sign(g) (up to eps), after decay
  EXPECT_NEAR(p[0], 1.0 * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(p[1], -2.0 * (1 - 0.1 * 0.01) + 0.1 * 0.25 / (0.25 + 1e-8), 1e-12);
}

TEST(Train, ZeroIterationsKeepsInitialisation) {
  UNet<float> net({}, 44);
  const auto init = net.params();
  TrainData<float> data;
  for (const auto& p : toy_pairs(2, 16, 45)) {
    data.synth.push_back({p.target.cast<float>(), p.cond.cast<float>()});
    data.real.push_back(p.target.cast<float>());
  }
  TrainOptions o;
  o.hybrid.iterations = 0;
  EXPECT_TRUE(train(net, data, o, NoiseSchedule()).empty());
  EXPECT_EQ(net.params(), init);
}

TEST(Train, SameSeedGivesIdenticalCheckpoints) {
  TempDir dir("train");
  TrainData<float> data;
  for (const auto& p : toy_pairs(8, 24, 46)) {
    data.synth.push_back({p.target.cast<float>(), p.cond.cast<float>()});
    data.real.push_back(p.target.cast<float>());
  }
  TrainOptions o;
  o.hybrid.iterations = 15;
  o.hybrid.batch_size = 4;
  o.hybrid.seed = 47;
  o.crop = 16;
  for (int run = 0; run < 2; ++run) {
    UNet<float> net({}, 48);
    o.threads = run == 0 ? 1 : 2;
    train(net, data, o, NoiseSchedule());
    save_checkpoint(net, dir.path() / ("ck" + std::to_string(run) + ".hzc"));
  }
  EXPECT_EQ(slurp(dir.path() / "ck0.hzc"), slurp(dir.path() / "ck1.hzc"));
}

TEST(Train, ToyRunHalvesTheLoss) {
  TrainData<float> data;
  for (int i = 0; i < 64; ++i) {
    const auto p = synth_pair<float>(split_seed(5, std::uint64_t(i)), 16, 16);
    data.synth.push_back({p.hazy, p.clean});
    data.real.push_back(p.hazy);
  }
  UNet<float> net({}, 1);
  TrainOptions o;
  o.hybrid.iterations = 2000;
  o.hybrid.seed = 3;
  const auto h = train(net, data, o, NoiseSchedule());
  ASSERT_EQ(h.size(), 2000u);
  EXPECT_LT(smoothed(h, h.size(), 200), 0.5 * h[0]);
}

TEST(Train, GaussianTaskApproachesAnalyticOptimum) {
  const NoiseSchedule s;
  const double m = 0.5, sd = 0.5;
  TrainData<float> data;
  Rng rng(9);
  for (int i = 0; i < 2048; ++i) {
    Image<float> img(8, 8, 3);
    for (auto& v : img.data()) v = float(m + sd * std::normal_distribution<double>()(rng));
    data.real.push_back(img);
  }
  UNet<float> net({}, 2);
  TrainOptions o;
  o.hybrid.iterations = 2000;
  o.hybrid.seed = 4;
  o.hybrid.p = 0;
  const auto h = train(net, data, o, s);
  // per-dimension error of the exact posterior predictor, averaged over t
  double opt = 0;
  for (int t = 1; t <= s.T(); ++t) {
    const double ab = s.alpha_bar(t);
    opt += ab * sd * sd / (ab * sd * sd + 1 - ab);
  }
  opt /= s.T();
  EXPECT_LT(std::abs(smoothed(h, h.size(), 500) - opt), 0.1 * opt);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ckpt");
  for (auto pred : {Prediction::epsilon, Prediction::velocity}) {
    NetConfig cfg = small_config(pred);
    cfg.schedule_T = 500;
    cfg.beta_end = 0.03;
    UNet<float> net(cfg, 49);
    randomize_output(net, 50);
    save_checkpoint(net, dir.path() / "a.hzc");
    const auto back = load_checkpoint<float>(dir.path() / "a.hzc");
    EXPECT_TRUE(back.config() == cfg);
    EXPECT_EQ(back.params(), net.params());
    save_checkpoint(back, dir.path() / "b.hzc");
    EXPECT_EQ(slurp(dir.path() / "a.hzc"), slurp(dir.path() / "b.hzc"));
  }
}

TEST(Checkpoint, Errors) {
  TempDir dir("ckpt");
  std::ofstream(dir.path() / "bad.hzc") << "XXXXjunk";
  EXPECT_THROW(load_checkpoint<float>(dir.path() / "bad.hzc"), IoError);
  EXPECT_THROW(load_checkpoint<float>(dir.path() / "missing.hzc"), IoError);
}
