#pragma once

// Command-line driver: synth, train, gen-hazy, dehaze, eval, bench.
//
// Every setting is a flat `key = value` entry. Values come from the built-in
// defaults, then an optional --config file, then --key flags. Unknown keys
// are an error. Each run writes the fully resolved settings to
// <out>/run.json. Image i of a batch run uses seed split_seed(seed, i).

#if __has_include(<malloc.h>)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hazediff/dataset.hpp"
#include "hazediff/denoisernet.hpp"
#include "hazediff/metrics.hpp"
#include "hazediff/parallel.hpp"
#include "hazediff/samplers.hpp"
#include "hazediff/train.hpp"

namespace hazediff::cli {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Kind { integer, unsigned_integer, real, text };

struct KeySpec {
  const char* name;
  Kind kind;
  const char* fallback;
  const char* help;
};

inline const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs = {
      {"seed", Kind::unsigned_integer, "0", "root random seed"},
      {"threads", Kind::integer, "1", "worker threads"},
      {"out", Kind::text, "", "output directory"},
      {"data", Kind::text, "", "paired dataset directory (manifest.tsv, clean/, hazy/)"},
      {"real", Kind::text, "", "folder of unpaired hazy images (train --mode hazegen)"},
      {"input", Kind::text, "", "input image folder"},
      {"gt", Kind::text, "", "ground-truth image folder (eval)"},
      {"checkpoint", Kind::text, "", "model checkpoint file"},
      // synthesis
      {"count", Kind::integer, "64", "number of pairs to synthesize"},
      {"height", Kind::integer, "64", "image height"},
      {"width", Kind::integer, "64", "image width"},
      {"beta_min", Kind::real, "0.5", "scattering coefficient lower bound"},
      {"beta_max", Kind::real, "3.0", "scattering coefficient upper bound"},
      {"a_min", Kind::real, "0.7", "atmospheric light lower bound"},
      {"a_max", Kind::real, "1.0", "atmospheric light upper bound"},
      // schedule and network
      {"schedule_T", Kind::integer, "1000", "diffusion steps"},
      {"beta_start", Kind::real, "1e-4", "first noise variance"},
      {"beta_end", Kind::real, "0.02", "last noise variance"},
      {"prediction", Kind::text, "auto", "network output: epsilon, velocity, or auto (velocity for dehaze)"},
      // training
      {"mode", Kind::text, "hazegen", "training direction: hazegen or dehaze"},
      {"p", Kind::real, "0.3", "probability of the conditional branch"},
      {"batch_size", Kind::integer, "16", "batch size"},
      {"learning_rate", Kind::real, "1e-3", "AdamW learning rate"},
      {"weight_decay", Kind::real, "1e-2", "AdamW decoupled weight decay"},
      {"iterations", Kind::integer, "5000", "training iterations"},
      {"crop", Kind::integer, "0", "random square training crop (0 = full image)"},
      {"checkpoint_every", Kind::integer, "0", "extra checkpoint interval (0 = off)"},
      {"log_every", Kind::integer, "100", "loss logging interval"},
      // sampling
      {"w", Kind::real, "0.85", "conditional weight for hazy generation"},
      {"steps", Kind::integer, "50", "respaced sampling steps"},
      {"tau", Kind::integer, "800", "end of the estimate stage"},
      {"omega", Kind::integer, "600", "start of the refinement stage"},
      {"s", Kind::real, "0.1", "fidelity guidance strength"},
      {"k", Kind::integer, "16", "alignment window size"},
      {"d", Kind::integer, "8", "alignment window stride"},
      // dark channel prior
      {"dcp_window", Kind::integer, "15", "dark channel window"},
      {"dcp_omega", Kind::real, "0.95", "haze retention factor"},
      {"light_fraction", Kind::real, "0.001", "fraction of pixels used for airlight"},
      {"t_floor", Kind::real, "0.05", "transmission floor"},
  };
  return specs;
}

inline const KeySpec* find_key(const std::string& name) {
  for (const auto& k : key_specs())
    if (name == k.name) return &k;
  return nullptr;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : key_specs()) values_[k.name] = k.fallback;
  }

  void set(const std::string& key, const std::string& value) {
    const auto* spec = find_key(key);
    if (!spec) throw UsageError("unknown config key: " + key);
    check_value(*spec, value);
    values_[key] = value;
  }

  // `key = value` lines; '#' starts a comment.
  void load_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config file " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      if (trim(line).empty()) continue;
      if (eq == std::string::npos)
        throw UsageError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  const std::string& str(const std::string& key) const { return values_.at(key); }
  long long integer(const std::string& key) const { return std::stoll(str(key)); }
  std::uint64_t u64(const std::string& key) const { return std::stoull(str(key)); }
  double real(const std::string& key) const { return std::stod(str(key)); }

  std::string require(const std::string& key) const {
    if (str(key).empty()) throw UsageError("--" + key + " is required");
    return str(key);
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    for (const auto& k : key_specs()) {
      const auto& v = values_.at(k.name);
      switch (k.kind) {
        case Kind::integer: j[k.name] = std::stoll(v); break;
        case Kind::unsigned_integer: j[k.name] = std::stoull(v); break;
        case Kind::real: j[k.name] = std::stod(v); break;
        case Kind::text: j[k.name] = v; break;
      }
    }
    return j;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  static void check_value(const KeySpec& spec, const std::string& v) {
    std::size_t used = 0;
    try {
      switch (spec.kind) {
        case Kind::integer: std::stoll(v, &used); break;
        case Kind::unsigned_integer:
          if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
          std::stoull(v, &used);
          break;
        case Kind::real: std::stod(v, &used); break;
        case Kind::text: used = v.size(); break;
      }
    } catch (const std::exception&) {
      used = std::string::npos;
    }
    if (used != v.size()) throw UsageError("bad value for " + std::string(spec.name) + ": '" + v + "'");
  }

  std::map<std::string, std::string> values_;
};

// Typed views of the flat settings.
struct Settings {
  NoiseSchedule sched;
  HazeRanges ranges;
  DcpConfig dcp;
  AccSampConfig acc;
  BlendedConfig blend;
  TrainOptions train;
  int threads = 1;
};

inline Settings resolve(const RunConfig& c) {
  Settings s;
  try {
    s.sched = NoiseSchedule(int(c.integer("schedule_T")), c.real("beta_start"), c.real("beta_end"));
    s.ranges.beta = {c.real("beta_min"), c.real("beta_max")};
    s.ranges.A = {c.real("a_min"), c.real("a_max")};
    s.ranges.validate();
    s.dcp.window = int(c.integer("dcp_window"));
    s.dcp.dcp_omega = c.real("dcp_omega");
    s.dcp.light_fraction = c.real("light_fraction");
    s.dcp.t_floor = c.real("t_floor");
    s.dcp.validate();
    s.acc.tau = int(c.integer("tau"));
    s.acc.omega = int(c.integer("omega"));
    s.acc.s = c.real("s");
    s.acc.steps = int(c.integer("steps"));
    s.acc.k = int(c.integer("k"));
    s.acc.d = int(c.integer("d"));
    s.acc.dcp = s.dcp;
    s.acc.validate(s.sched.T());
    s.blend.w = c.real("w");
    s.blend.steps = int(c.integer("steps"));
    s.blend.validate();
    if (s.blend.steps > s.sched.T()) throw std::invalid_argument("steps must not exceed schedule_T");
    auto& h = s.train.hybrid;
    h.p = c.real("p");
    h.batch_size = int(c.integer("batch_size"));
    h.learning_rate = c.real("learning_rate");
    h.iterations = int(c.integer("iterations"));
    h.validate();
    s.train.adamw.weight_decay = c.real("weight_decay");
    s.train.crop = int(c.integer("crop"));
    if (s.train.crop < 0 || s.train.crop % 4) throw std::invalid_argument("crop must be a multiple of 4");
    s.train.checkpoint_every = int(c.integer("checkpoint_every"));
    s.train.log_every = int(c.integer("log_every"));
    s.threads = std::max(1, int(c.integer("threads")));
    s.train.threads = s.threads;
    if (c.integer("count") < 0) throw std::invalid_argument("count must be >= 0");
    if (c.integer("height") < 16 || c.integer("width") < 16) throw std::invalid_argument("height/width must be >= 16");
    const auto& mode = c.str("mode");
    if (mode != "hazegen" && mode != "dehaze") throw std::invalid_argument("mode must be hazegen or dehaze");
    if (c.str("prediction") != "auto") parse_prediction(c.str("prediction"));
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
  return s;
}

inline void write_run_json(const fs::path& dir, const std::string& command, const RunConfig& c,
                           const nlohmann::ordered_json& extra = {}) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config"] = c.to_json();
  if (!extra.is_null()) j["derived"] = extra;
  std::ofstream os(dir / "run.json");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("cannot write " + (dir / "run.json").string());
}

inline fs::path prepare_out(const RunConfig& c) {
  const fs::path out = c.require("out");
  fs::create_directories(out);
  return out;
}

// Runs fn(i) for every image, in parallel; per-image work must only depend on i.
template <typename Fn>
void for_each_image(std::size_t n, int threads, Fn&& fn) {
  parallel_for(n, threads, std::forward<Fn>(fn));
}

inline int cmd_synth(const RunConfig& c, const Settings& s, std::ostream& log) {
  const auto out = prepare_out(c);
  const auto rows = write_synthetic_dataset(out, int(c.integer("count")), c.u64("seed"), int(c.integer("height")),
                                            int(c.integer("width")), s.ranges);
  write_run_json(out, "synth", c);
  log << "wrote " << rows.size() << " pairs to " << out.string() << '\n';
  return 0;
}

inline int cmd_train(const RunConfig& c, Settings s, std::ostream& log) {
  const auto out = prepare_out(c);
  const bool dehaze = c.str("mode") == "dehaze";
  const auto items = load_dataset(c.require("data"));
  if (items.empty()) throw std::runtime_error("dataset is empty");
  TrainData<float> data;
  for (const auto& it : items) {
    // hazegen learns hazy | clean; dehaze learns clean | hazy
    if (dehaze)
      data.synth.push_back({it.clean, it.hazy});
    else
      data.synth.push_back({it.hazy, it.clean});
  }
  if (dehaze) {
    // the dehazing model has no unpaired branch
    s.train.hybrid.p = 1.0;
  } else if (!c.str("real").empty()) {
    for (const auto& p : list_images(c.str("real"))) data.real.push_back(read_image<float>(p));
  } else {
    for (const auto& it : items) data.real.push_back(it.hazy);
  }
  NetConfig nc;
  nc.schedule_T = s.sched.T();
  nc.beta_start = c.real("beta_start");
  nc.beta_end = c.real("beta_end");
  const auto& pred = c.str("prediction");
  nc.prediction = pred == "auto" ? (dehaze ? Prediction::velocity : Prediction::epsilon) : parse_prediction(pred);
  s.train.hybrid.seed = split_seed(c.u64("seed"), 0);
  UNet<float> net(nc, split_seed(c.u64("seed"), 1));
  s.train.on_log = [&](int it, double loss) { log << "iter " << it << " loss " << loss << '\n'; };
  s.train.on_checkpoint = [&](int it) {
    char name[32];
    std::snprintf(name, sizeof name, "model_%06d.hzc", it);
    save_checkpoint(net, out / name);
  };
  const auto history = train(net, data, s.train, s.sched);
  save_checkpoint(net, out / "model.hzc");
  std::ofstream lt(out / "loss.tsv");
  lt << "iteration\tloss\n";
  for (std::size_t i = 0; i < history.size(); ++i) lt << i + 1 << '\t' << format_double(history[i]) << '\n';
  nlohmann::ordered_json extra;
  extra["prediction"] = prediction_name(nc.prediction);
  extra["effective_p"] = s.train.hybrid.p;
  extra["parameters"] = net.param_count();
  extra["pairs"] = data.synth.size();
  extra["unpaired"] = data.real.size();
  write_run_json(out, "train", c, extra);
  log << "trained " << history.size() << " iterations; checkpoint " << (out / "model.hzc").string() << '\n';
  return 0;
}

inline std::vector<fs::path> input_images(const RunConfig& c) {
  const fs::path dir = c.require("input");
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  auto files = list_images(dir);
  if (files.empty()) throw std::runtime_error("no images in " + dir.string());
  return files;
}

inline int cmd_gen_hazy(const RunConfig& c, const Settings& s, std::ostream& log) {
  const auto net = load_checkpoint<float>(c.require("checkpoint"));
  const auto files = input_images(c);
  const auto out = prepare_out(c);
  const IdentityCodec<float> codec;
  for_each_image(files.size(), s.threads, [&](std::size_t i) {
    BlendedConfig bc = s.blend;
    bc.seed = split_seed(c.u64("seed"), i);
    const auto img = blended_sample<float>(net, read_image<float>(files[i]), codec, bc, s.sched);
    write_png(img, out / (files[i].stem().string() + ".png"));
  });
  write_run_json(out, "gen-hazy", c);
  log << "generated " << files.size() << " hazy images in " << out.string() << '\n';
  return 0;
}

inline int cmd_dehaze(const RunConfig& c, const Settings& s, std::ostream& log) {
  const auto net = load_checkpoint<float>(c.require("checkpoint"));
  const auto files = input_images(c);
  const auto out = prepare_out(c);
  fs::create_directories(out / "estimate");
  const IdentityCodec<float> codec;
  std::vector<std::uint64_t> calls(files.size());
  for_each_image(files.size(), s.threads, [&](std::size_t i) {
    AccSampConfig ac = s.acc;
    ac.seed = split_seed(c.u64("seed"), i);
    const auto res = accsamp<float>(net, read_image<float>(files[i]), codec, ac, s.sched);
    const auto stem = files[i].stem().string();
    write_png(res.image, out / (stem + ".png"));
    write_png(res.estimate.image, out / "estimate" / (stem + ".png"));
    calls[i] = res.denoiser_calls;
  });
  std::ofstream t(out / "calls.tsv");
  t << "image\tdenoiser_calls\n";
  for (std::size_t i = 0; i < files.size(); ++i) t << files[i].stem().string() << '\t' << calls[i] << '\n';
  const auto b = stage_budget(s.acc, s.sched.T());
  nlohmann::ordered_json extra;
  extra["stage1_calls"] = b.stage1;
  extra["stage2_calls"] = b.stage2;
  write_run_json(out, "dehaze", c, extra);
  log << "dehazed " << files.size() << " images into " << out.string() << '\n';
  return 0;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline int cmd_eval(const RunConfig& c, const Settings&, std::ostream& log) {
  const auto files = input_images(c);
  const fs::path gt = c.require("gt");
  const auto out = prepare_out(c);
  std::ofstream t(out / "eval.tsv");
  t << "image\tpsnr\tms_ssim\n";
  std::vector<double> ps, ms;
  for (const auto& f : files) {
    const auto stem = f.stem().string();
    fs::path ref = gt / (stem + ".png");
    if (!fs::exists(ref)) ref = gt / (stem + ".hzt");
    const auto a = read_image<float>(f);
    const auto b = read_image<float>(ref);
    const double p = psnr(a, b);
    const double m = ms_ssim(a, b, fit_ssim_levels({}, a.height(), a.width()));
    ps.push_back(p);
    ms.push_back(m);
    t << stem << '\t' << format_double(p) << '\t' << format_double(m) << '\n';
  }
  t << "median\t" << format_double(median(ps)) << '\t' << format_double(median(ms)) << '\n';
  write_run_json(out, "eval", c);
  log << "images\t" << files.size() << "\nmedian_psnr\t" << median(ps) << "\nmedian_ms_ssim\t" << median(ms) << '\n';
  return 0;
}

// Denoiser calls are written to <out>/bench.tsv; wall times vary between
// runs, so they only go to the log.
inline int cmd_bench(const RunConfig& c, const Settings& s, std::ostream& log) {
  const auto out = prepare_out(c);
  std::optional<UNet<float>> loaded;
  if (!c.str("checkpoint").empty()) loaded = load_checkpoint<float>(c.str("checkpoint"));
  const UNet<float> fresh;
  const Denoiser<float>& base = loaded ? static_cast<const Denoiser<float>&>(*loaded) : fresh;
  std::vector<Image<float>> images;
  if (!c.str("input").empty()) {
    for (const auto& f : input_images(c)) images.push_back(read_image<float>(f));
  } else {
    images.push_back(synth_pair<float>(split_seed(c.u64("seed"), 0), int(c.integer("height")),
                                       int(c.integer("width")), s.ranges)
                         .hazy);
  }
  const IdentityCodec<float> codec;
  struct Row {
    std::string method;
    std::uint64_t calls = 0;
    double seconds = 0;
  };
  std::vector<Row> rows{{"accsamp"}, {"conditional"}};
  for (std::size_t i = 0; i < images.size(); ++i) {
    CountingDenoiser<float> den(base);
    AccSampConfig ac = s.acc;
    ac.seed = split_seed(c.u64("seed"), i);
    auto t0 = std::chrono::steady_clock::now();
    accsamp<float>(den, images[i], codec, ac, s.sched);
    rows[0].seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows[0].calls += den.calls();
    den.reset();
    t0 = std::chrono::steady_clock::now();
    conditional_sample<float>(den, images[i], codec, s.acc.steps, ac.seed, s.sched);
    rows[1].seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows[1].calls += den.calls();
  }
  std::ofstream t(out / "bench.tsv");
  t << "method\timages\tdenoiser_calls\n";
  log << "method\timages\tdenoiser_calls\tseconds\n";
  for (const auto& r : rows) {
    t << r.method << '\t' << images.size() << '\t' << r.calls << '\n';
    log << r.method << '\t' << images.size() << '\t' << r.calls << '\t' << r.seconds << '\n';
  }
  write_run_json(out, "bench", c);
  return 0;
}

// Returns 0 on success, 1 on usage errors, 2 on runtime failures.
// Training and sampling allocate the same large buffers every step; keeping
// them on the heap instead of fresh mappings removes most kernel time.
inline void tune_allocator() {
#ifdef M_MMAP_THRESHOLD
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 1 << 28);
#endif
}

inline int run_cli(int argc, const char* const* argv, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  tune_allocator();
  CLI::App app{"Haze synthesis and diffusion dehazing toolkit", "hazediff"};
  app.require_subcommand(1);
  std::string config_file;
  std::map<std::string, std::string> flags;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth", "write a procedural clean/hazy dataset"},
      {"train", "train a denoiser (--mode hazegen|dehaze)"},
      {"gen-hazy", "generate hazy images from a folder of clean images"},
      {"dehaze", "dehaze a folder of hazy images"},
      {"eval", "PSNR / MS-SSIM of --input against --gt"},
      {"bench", "denoiser calls and wall time, dehazing sampler vs plain sampling"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_file, "settings file of key = value lines");
    for (const auto& k : key_specs()) {
      sub->add_option_function<std::string>(
          std::string("--") + k.name, [&flags, key = std::string(k.name)](const std::string& v) { flags[key] = v; },
          std::string(k.help) + " (default: " + k.fallback + ")");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    log << app.help();  // follows the selected subcommand
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  std::string command;
  for (auto* sub : app.get_subcommands()) command = sub->get_name();

  RunConfig cfg;
  Settings settings;
  try {
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& [k, v] : flags) cfg.set(k, v);
    settings = resolve(cfg);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (command == "synth") return cmd_synth(cfg, settings, log);
    if (command == "train") return cmd_train(cfg, settings, log);
    if (command == "gen-hazy") return cmd_gen_hazy(cfg, settings, log);
    if (command == "dehaze") return cmd_dehaze(cfg, settings, log);
    if (command == "eval") return cmd_eval(cfg, settings, log);
    if (command == "bench") return cmd_bench(cfg, settings, log);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace hazediff::cli
