// Synthesizes one hazy toy scene, dehazes it with the dark channel prior,
// then re-aligns the hazy input to that estimate window by window.
//
//   dcp_demo [seed] [out_dir]

#include <cstdio>
#include <cstdlib>
#include <filesystem>

#include "hazediff/hazediff.hpp"

using namespace hazediff;

int main(int argc, char** argv) {
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;
  const std::filesystem::path out = argc > 2 ? argv[2] : "dcp_demo_out";
  std::filesystem::create_directories(out);

  const auto pair = synth_pair<double>(seed, 64, 64);
  const DcpConfig cfg;
  const auto A = estimate_atmospheric_light(pair.hazy, dark_channel(pair.hazy, cfg.window), cfg.light_fraction);
  const auto t = estimate_transmission(pair.hazy, A, cfg);

  // invert I = J t + A (1 - t)
  Image<double> J(64, 64, 3);
  for (std::size_t p = 0; p < J.pixels(); ++p)
    for (int ch = 0; ch < 3; ++ch) J[3 * p + ch] = (pair.hazy[3 * p + ch] - A[ch] * (1 - t[p])) / t[p];
  J = clamp01(J);
  const auto aligned = align_op(pair.hazy, J, 16, 8).image;

  std::printf("beta %.3f  A true (%.3f %.3f %.3f) est (%.3f %.3f %.3f)\n", pair.beta, pair.A[0], pair.A[1],
              pair.A[2], A[0], A[1], A[2]);
  std::printf("%-10s %8s %8s\n", "image", "psnr", "ms_ssim");
  const std::pair<const char*, const Image<double>*> rows[] = {{"hazy", &pair.hazy}, {"dcp", &J}, {"aligned", &aligned}};
  for (const auto& [name, img] : rows)
    std::printf("%-10s %8.2f %8.4f\n", name, psnr(*img, pair.clean), ms_ssim(*img, pair.clean));

  write_png(pair.clean, out / "clean.png");
  write_png(pair.hazy, out / "hazy.png");
  write_png(t, out / "transmission.png");
  write_png(J, out / "dcp.png");
  write_png(aligned, out / "aligned.png");
  return 0;
}
