#pragma once

// A small three-level U-shaped epsilon predictor.
//
// Input channels: noisy latent, condition payload, and a 0/1 mask channel
// that marks whether a condition is present (the null condition is a zero
// payload with mask 0). Each level adds a learned projection of sinusoidal
// timestep features after its first convolution. The output convolution is
// zero-initialised, so a fresh network predicts zero noise.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hazediff/diffusion.hpp"
#include "hazediff/image.hpp"
#include "hazediff/io.hpp"
#include "hazediff/nn.hpp"

namespace hazediff {

// How the raw network output F maps to the noise prediction. `epsilon`
// returns F directly; `velocity` returns sqrt(1-ab_t) z_t + sqrt(ab_t) F, i.e.
// F is a v-prediction, which keeps x0 estimates well conditioned at high t.
enum class Prediction { epsilon, velocity };

inline const char* prediction_name(Prediction p) { return p == Prediction::epsilon ? "epsilon" : "velocity"; }

inline Prediction parse_prediction(const std::string& s) {
  if (s == "epsilon" || s == "eps") return Prediction::epsilon;
  if (s == "velocity" || s == "v") return Prediction::velocity;
  throw std::invalid_argument("unknown prediction type: " + s);
}

struct NetConfig {
  Prediction prediction = Prediction::epsilon;
  // schedule used by the velocity output mapping
  int schedule_T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int image_channels = 3;
  int cond_channels = 3;
  std::array<int, 3> widths{16, 32, 64};
  int emb_dim = 32;

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

struct ParamTensor {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::uint32_t> shape;
  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

template <typename T>
class UNet final : public Denoiser<T> {
  using Tensor = nn::Tensor<T>;

 public:
  // Everything the backward pass needs from one forward evaluation.
  struct Cache {
    int t = 0;
    std::vector<T> emb;
    std::vector<T> cols_c1a, cols_c1b, cols_c2a, cols_c2b, cols_c3a, cols_c3b, cols_u2, cols_u1, cols_out;
    Tensor h1a, h1b, s1, h2a, h2b, s2, h3a, h3b, h4, h5, a5;
  };

  explicit UNet(NetConfig cfg = {}, std::uint64_t seed = 0)
      : cfg_(cfg), sched_(cfg.schedule_T, cfg.beta_start, cfg.beta_end) {
    build_layout();
    initialize(seed);
  }

  const NetConfig& config() const { return cfg_; }
  const std::vector<ParamTensor>& layout() const { return layout_; }
  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }

  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    params_.assign(total_, T(0));
    for (const auto& pt : layout_) {
      const bool bias = pt.name.ends_with(".bias");
      if (bias || pt.name.starts_with("out.")) continue;
      double fan_in = 1;
      for (std::size_t i = 1; i < pt.shape.size(); ++i) fan_in *= pt.shape[i];
      // temb projections start small so early training is driven by the image path
      const double std = pt.name.starts_with("t") ? 0.1 / std::sqrt(fan_in) : std::sqrt(2.0 / fan_in);
      std::normal_distribution<double> n(0.0, std);
      for (std::size_t i = 0; i < pt.count(); ++i) params_[pt.offset + i] = T(n(rng));
    }
  }

  Image<T> predict(const Image<T>& z_t, const Condition<T>& cond, int t) const override {
    Cache cache;
    return forward(z_t, cond, t, cache);
  }

  Image<T> forward(const Image<T>& z_t, const Condition<T>& cond, int t, Cache& k) const {
    const Tensor x = assemble_input(z_t, cond);
    const auto p = std::span<const T>(params_);
    k.t = t;
    k.emb = timestep_features(t);

    k.h1a = nn::conv3x3_forward(conv_[0], slice(p, kC1a), x, k.cols_c1a);
    add_temb(k.h1a, slice(p, kT1), k.emb);
    k.h1b = nn::conv3x3_forward(conv_[1], slice(p, kC1b), nn::silu(k.h1a), k.cols_c1b);
    k.s1 = nn::silu(k.h1b);

    k.h2a = nn::conv3x3_forward(conv_[2], slice(p, kC2a), nn::avgpool2(k.s1), k.cols_c2a);
    add_temb(k.h2a, slice(p, kT2), k.emb);
    k.h2b = nn::conv3x3_forward(conv_[3], slice(p, kC2b), nn::silu(k.h2a), k.cols_c2b);
    k.s2 = nn::silu(k.h2b);

    k.h3a = nn::conv3x3_forward(conv_[4], slice(p, kC3a), nn::avgpool2(k.s2), k.cols_c3a);
    add_temb(k.h3a, slice(p, kT3), k.emb);
    k.h3b = nn::conv3x3_forward(conv_[5], slice(p, kC3b), nn::silu(k.h3a), k.cols_c3b);

    k.h4 = nn::conv3x3_forward(conv_[6], slice(p, kU2), nn::concat(nn::upsample2(nn::silu(k.h3b)), k.s2), k.cols_u2);
    k.h5 = nn::conv3x3_forward(conv_[7], slice(p, kU1), nn::concat(nn::upsample2(nn::silu(k.h4)), k.s1), k.cols_u1);
    k.a5 = nn::silu(k.h5);
    const Tensor y = nn::conv3x3_forward(conv_[8], slice(p, kOut), k.a5, k.cols_out);
    Image<T> out = to_image(y);
    if (cfg_.prediction == Prediction::velocity) {
      const double ab = sched_.alpha_bar(t);
      out = axpby(T(std::sqrt(1.0 - ab)), z_t, T(std::sqrt(ab)), out);
    }
    return out;
  }

  // Accumulates dL/dparams into `grad` given dL/d(output).
  void backward(const Cache& k, const Image<T>& d_out, std::span<T> grad) const {
    if (grad.size() != params_.size()) throw std::invalid_argument("UNet::backward: gradient size mismatch");
    const auto p = std::span<const T>(params_);
    const int w1 = cfg_.widths[1], w2 = cfg_.widths[2];
    Tensor dy = to_tensor(d_out);
    if (cfg_.prediction == Prediction::velocity) {
      const T g = T(std::sqrt(sched_.alpha_bar(k.t)));
      for (auto& v : dy.v) v *= g;
    }

    Tensor da5 = nn::conv3x3_backward(conv_[8], slice(p, kOut), gslice(grad, kOut), k.cols_out, dy, true);
    Tensor dh5 = nn::silu_backward(k.h5, da5);
    Tensor dcat1 = nn::conv3x3_backward(conv_[7], slice(p, kU1), gslice(grad, kU1), k.cols_u1, dh5, true);
    auto [dup1, ds1_skip] = nn::split(dcat1, w1);
    Tensor dh4 = nn::silu_backward(k.h4, nn::upsample2_backward(dup1));
    Tensor dcat2 = nn::conv3x3_backward(conv_[6], slice(p, kU2), gslice(grad, kU2), k.cols_u2, dh4, true);
    auto [dup2, ds2_skip] = nn::split(dcat2, w2);

    Tensor dh3b = nn::silu_backward(k.h3b, nn::upsample2_backward(dup2));
    Tensor da3a = nn::conv3x3_backward(conv_[5], slice(p, kC3b), gslice(grad, kC3b), k.cols_c3b, dh3b, true);
    Tensor dh3a = nn::silu_backward(k.h3a, da3a);
    temb_backward(dh3a, gslice(grad, kT3), k.emb);
    Tensor dp2 = nn::conv3x3_backward(conv_[4], slice(p, kC3a), gslice(grad, kC3a), k.cols_c3a, dh3a, true);

    Tensor ds2 = nn::avgpool2_backward(dp2, k.s2.h, k.s2.w);
    for (std::size_t i = 0; i < ds2.v.size(); ++i) ds2.v[i] += ds2_skip.v[i];
    Tensor dh2b = nn::silu_backward(k.h2b, ds2);
    Tensor da2a = nn::conv3x3_backward(conv_[3], slice(p, kC2b), gslice(grad, kC2b), k.cols_c2b, dh2b, true);
    Tensor dh2a = nn::silu_backward(k.h2a, da2a);
    temb_backward(dh2a, gslice(grad, kT2), k.emb);
    Tensor dp1 = nn::conv3x3_backward(conv_[2], slice(p, kC2a), gslice(grad, kC2a), k.cols_c2a, dh2a, true);

    Tensor ds1 = nn::avgpool2_backward(dp1, k.s1.h, k.s1.w);
    for (std::size_t i = 0; i < ds1.v.size(); ++i) ds1.v[i] += ds1_skip.v[i];
    Tensor dh1b = nn::silu_backward(k.h1b, ds1);
    Tensor da1a = nn::conv3x3_backward(conv_[1], slice(p, kC1b), gslice(grad, kC1b), k.cols_c1b, dh1b, true);
    Tensor dh1a = nn::silu_backward(k.h1a, da1a);
    temb_backward(dh1a, gslice(grad, kT1), k.emb);
    nn::conv3x3_backward(conv_[0], slice(p, kC1a), gslice(grad, kC1a), k.cols_c1a, dh1a, false);
  }

  std::vector<T> timestep_features(int t) const {
    const int half = cfg_.emb_dim / 2;
    std::vector<T> e(cfg_.emb_dim);
    for (int i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * double(i) / double(half));
      e[i] = T(std::sin(double(t) * f));
      e[half + i] = T(std::cos(double(t) * f));
    }
    return e;
  }

 private:
  // layer indices into blocks_
  enum Block { kC1a, kT1, kC1b, kC2a, kT2, kC2b, kC3a, kT3, kC3b, kU2, kU1, kOut, kBlockCount };

  struct BlockRange {
    std::size_t offset = 0, count = 0;
  };

  std::span<const T> slice(std::span<const T> p, Block b) const {
    return p.subspan(blocks_[b].offset, blocks_[b].count);
  }
  std::span<T> gslice(std::span<T> g, Block b) const { return g.subspan(blocks_[b].offset, blocks_[b].count); }

  void build_layout() {
    const auto [w0, w1, w2] = cfg_.widths;
    if (cfg_.emb_dim < 2 || cfg_.emb_dim % 2) throw std::invalid_argument("NetConfig: emb_dim must be even");
    const int cin = cfg_.image_channels + cfg_.cond_channels + 1;
    conv_ = {nn::ConvShape{cin, w0},     nn::ConvShape{w0, w0},      nn::ConvShape{w0, w1},
             nn::ConvShape{w1, w1},      nn::ConvShape{w1, w2},      nn::ConvShape{w2, w2},
             nn::ConvShape{w2 + w1, w1}, nn::ConvShape{w1 + w0, w0}, nn::ConvShape{w0, cfg_.image_channels}};
    const char* names[kBlockCount] = {"c1a", "t1", "c1b", "c2a", "t2", "c2b", "c3a", "t3", "c3b", "u2", "u1", "out"};
    const int conv_of[kBlockCount] = {0, -1, 1, 2, -1, 3, 4, -1, 5, 6, 7, 8};
    const int temb_width[kBlockCount] = {0, w0, 0, 0, w1, 0, 0, w2, 0, 0, 0, 0};
    std::size_t off = 0;
    layout_.clear();
    for (int b = 0; b < kBlockCount; ++b) {
      blocks_[b].offset = off;
      const std::string n = names[b];
      if (conv_of[b] >= 0) {
        const auto& s = conv_[conv_of[b]];
        layout_.push_back({n + ".weight", off, {std::uint32_t(s.cout), std::uint32_t(s.cin), 3, 3}});
        off += s.weight_count();
        layout_.push_back({n + ".bias", off, {std::uint32_t(s.cout)}});
        off += std::size_t(s.cout);
      } else {
        const int c = temb_width[b];
        layout_.push_back({n + ".weight", off, {std::uint32_t(c), std::uint32_t(cfg_.emb_dim)}});
        off += std::size_t(c) * cfg_.emb_dim;
        layout_.push_back({n + ".bias", off, {std::uint32_t(c)}});
        off += std::size_t(c);
      }
      blocks_[b].count = off - blocks_[b].offset;
    }
    total_ = off;
  }

  void add_temb(Tensor& h, std::span<const T> p, const std::vector<T>& emb) const {
    const int E = cfg_.emb_dim;
    for (int c = 0; c < h.c; ++c) {
      T v = p[std::size_t(h.c) * E + c];
      for (int e = 0; e < E; ++e) v += p[std::size_t(c) * E + e] * emb[e];
      T* d = h.ch(c);
      for (std::size_t i = 0; i < h.plane(); ++i) d[i] += v;
    }
  }

  void temb_backward(const Tensor& dh, std::span<T> g, const std::vector<T>& emb) const {
    const int E = cfg_.emb_dim;
    for (int c = 0; c < dh.c; ++c) {
      T s = 0;
      const T* d = dh.ch(c);
      for (std::size_t i = 0; i < dh.plane(); ++i) s += d[i];
      for (int e = 0; e < E; ++e) g[std::size_t(c) * E + e] += s * emb[e];
      g[std::size_t(dh.c) * E + c] += s;
    }
  }

  Tensor assemble_input(const Image<T>& z, const Condition<T>& cond) const {
    if (z.channels() != cfg_.image_channels) throw std::invalid_argument("UNet: latent channel mismatch");
    if (z.height() % 4 || z.width() % 4) throw std::invalid_argument("UNet: spatial dims must be multiples of 4");
    const int Ci = cfg_.image_channels, Cc = cfg_.cond_channels;
    Tensor x(Ci + Cc + 1, z.height(), z.width());
    const std::size_t P = x.plane();
    for (std::size_t q = 0; q < P; ++q)
      for (int c = 0; c < Ci; ++c) x.ch(c)[q] = z[q * Ci + c];
    if (!cond.is_null()) {
      const auto& pay = cond.payload();
      if (!pay.same_spatial(z) || pay.channels() != Cc)
        throw std::invalid_argument("UNet: condition payload shape mismatch");
      for (std::size_t q = 0; q < P; ++q) {
        for (int c = 0; c < Cc; ++c) x.ch(Ci + c)[q] = pay[q * Cc + c];
        x.ch(Ci + Cc)[q] = T(1);
      }
    }
    return x;
  }

  static Image<T> to_image(const Tensor& y) {
    Image<T> img(y.h, y.w, y.c);
    const std::size_t P = y.plane();
    for (std::size_t q = 0; q < P; ++q)
      for (int c = 0; c < y.c; ++c) img[q * y.c + c] = y.ch(c)[q];
    return img;
  }

  static Tensor to_tensor(const Image<T>& img) {
    Tensor y(img.channels(), img.height(), img.width());
    const std::size_t P = y.plane();
    for (std::size_t q = 0; q < P; ++q)
      for (int c = 0; c < y.c; ++c) y.ch(c)[q] = img[q * y.c + c];
    return y;
  }

  NetConfig cfg_;
  NoiseSchedule sched_;
  std::array<nn::ConvShape, 9> conv_{};
  std::array<BlockRange, kBlockCount> blocks_{};
  std::vector<ParamTensor> layout_;
  std::size_t total_ = 0;
  std::vector<T> params_;
};

// Checkpoint container: magic "HZC1", u32-length-prefixed manifest text
// (architecture key=value lines), u32 tensor count, then per tensor a
// u32-length-prefixed name followed by an HZT1 raw tensor.
template <typename T>
void save_checkpoint(const UNet<T>& net, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  const auto& c = net.config();
  std::ostringstream m;
  m << "prediction=" << prediction_name(c.prediction) << "\nschedule_T=" << c.schedule_T
    << "\nbeta_start=" << format_double(c.beta_start) << "\nbeta_end=" << format_double(c.beta_end)
    << "\nimage_channels=" << c.image_channels << "\ncond_channels=" << c.cond_channels << "\nwidths="
    << c.widths[0] << "," << c.widths[1] << "," << c.widths[2] << "\nemb_dim=" << c.emb_dim << "\n";
  const std::string manifest = m.str();
  os.write("HZC1", 4);
  detail::put_u32(os, std::uint32_t(manifest.size()));
  os.write(manifest.data(), std::streamsize(manifest.size()));
  detail::put_u32(os, std::uint32_t(net.layout().size()));
  for (const auto& pt : net.layout()) {
    detail::put_u32(os, std::uint32_t(pt.name.size()));
    os.write(pt.name.data(), std::streamsize(pt.name.size()));
    RawTensor rt{pt.shape, {}};
    rt.data.assign(net.params().begin() + std::ptrdiff_t(pt.offset),
                   net.params().begin() + std::ptrdiff_t(pt.offset + pt.count()));
    write_raw_tensor(os, rt);
  }
  if (!os) throw IoError("checkpoint write failed: " + path.string());
}

template <typename T = float>
UNet<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "HZC1") throw IoError("not a checkpoint: " + path.string());
  std::string manifest(detail::get_u32(is), '\0');
  is.read(manifest.data(), std::streamsize(manifest.size()));
  NetConfig cfg;
  std::istringstream ms(manifest);
  std::string line;
  while (std::getline(ms, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "prediction") cfg.prediction = parse_prediction(val);
    else if (key == "schedule_T") cfg.schedule_T = std::stoi(val);
    else if (key == "beta_start") cfg.beta_start = std::stod(val);
    else if (key == "beta_end") cfg.beta_end = std::stod(val);
    else if (key == "image_channels") cfg.image_channels = std::stoi(val);
    else if (key == "cond_channels") cfg.cond_channels = std::stoi(val);
    else if (key == "emb_dim") cfg.emb_dim = std::stoi(val);
    else if (key == "widths") {
      std::istringstream ws(val);
      std::string part;
      for (int i = 0; i < 3 && std::getline(ws, part, ','); ++i) cfg.widths[i] = std::stoi(part);
    } else
      throw IoError("unknown checkpoint manifest key: " + key);
  }
  UNet<T> net(cfg, 0);
  const auto count = detail::get_u32(is);
  if (count != net.layout().size()) throw IoError("checkpoint tensor count mismatch");
  for (const auto& pt : net.layout()) {
    std::string name(detail::get_u32(is), '\0');
    is.read(name.data(), std::streamsize(name.size()));
    if (name != pt.name) throw IoError("checkpoint tensor order mismatch at " + name);
    const RawTensor rt = read_raw_tensor(is);
    if (rt.dims != pt.shape) throw IoError("checkpoint tensor shape mismatch at " + name);
    std::copy(rt.data.begin(), rt.data.end(), net.params().begin() + std::ptrdiff_t(pt.offset));
  }
  return net;
}

}  // namespace hazediff
