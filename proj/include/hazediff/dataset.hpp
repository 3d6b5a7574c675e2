#pragma once

// On-disk paired dataset:
//   <root>/clean/NNNNN.png  <root>/hazy/NNNNN.png  <root>/depth/NNNNN.hzt
//   <root>/manifest.tsv     columns: id seed beta A_r A_g A_b

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hazediff/hazesim.hpp"
#include "hazediff/io.hpp"

namespace hazediff {

struct ManifestRow {
  int id = 0;
  std::uint64_t seed = 0;
  double beta = 0;
  Light A{};
};

struct DatasetItem {
  ManifestRow row;
  Image<float> clean;
  Image<float> hazy;
};

inline std::string item_stem(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d", id);
  return buf;
}

// Writes `count` pairs with ids [first_id, first_id + count); pair i uses
// seed split_seed(root_seed, i).
inline std::vector<ManifestRow> write_synthetic_dataset(const std::filesystem::path& root, int count,
                                                        std::uint64_t root_seed, int h, int w,
                                                        const HazeRanges& ranges = {}, int first_id = 0) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "clean");
  fs::create_directories(root / "hazy");
  fs::create_directories(root / "depth");
  std::vector<ManifestRow> rows;
  for (int i = 0; i < count; ++i) {
    const int id = first_id + i;
    const std::uint64_t seed = split_seed(root_seed, std::uint64_t(id));
    const auto pair = synth_pair<float>(seed, h, w, ranges);
    write_png(pair.clean, root / "clean" / (item_stem(id) + ".png"));
    write_png(pair.hazy, root / "hazy" / (item_stem(id) + ".png"));
    write_raw_tensor_file(root / "depth" / (item_stem(id) + ".hzt"), to_raw_tensor(pair.depth));
    rows.push_back({id, seed, pair.beta, pair.A});
  }
  std::ofstream m(root / "manifest.tsv");
  if (!m) throw IoError("cannot write manifest in " + root.string());
  m << "id\tseed\tbeta\tA_r\tA_g\tA_b\n";
  for (const auto& r : rows)
    m << item_stem(r.id) << '\t' << r.seed << '\t' << format_double(r.beta) << '\t' << format_double(r.A[0])
      << '\t' << format_double(r.A[1]) << '\t' << format_double(r.A[2]) << '\n';
  if (!m) throw IoError("manifest write failed in " + root.string());
  return rows;
}

inline std::vector<ManifestRow> read_manifest(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest.tsv");
  if (!in) throw IoError("cannot read manifest in " + root.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("id\tseed", 0) != 0) throw IoError("bad manifest header in " + root.string());
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestRow r;
    std::string id;
    if (!(ls >> id >> r.seed >> r.beta >> r.A[0] >> r.A[1] >> r.A[2]))
      throw IoError("malformed manifest row: " + line);
    r.id = std::stoi(id);
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<DatasetItem> load_dataset(const std::filesystem::path& root, bool need_clean = true) {
  std::vector<DatasetItem> items;
  for (const auto& row : read_manifest(root)) {
    DatasetItem it;
    it.row = row;
    const auto stem = item_stem(row.id) + ".png";
    it.hazy = read_png(root / "hazy" / stem);
    if (need_clean) it.clean = read_png(root / "clean" / stem);
    items.push_back(std::move(it));
  }
  return items;
}

// Sorted *.png / *.hzt files of a folder; used for plain image folders.
inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    if (detail::has_extension(e.path(), ".png") || detail::has_extension(e.path(), ".hzt")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace hazediff
