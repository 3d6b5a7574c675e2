#pragma once

// Image and tensor file I/O.
//
// Raw tensor format (".hzt"): the 4 magic bytes "HZT1", a little-endian u32
// rank, `rank` little-endian u32 dims, then row-major little-endian float32
// data. Images are stored as rank 3 (H, W, C); rank-2 tensors load as a
// single-channel image.

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hazediff/image.hpp"

namespace hazediff {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shortest-roundtrip-safe text form of a double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct RawTensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
                              char((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw IoError("unexpected end of tensor data");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

inline bool has_extension(const std::filesystem::path& p, const char* ext) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e == ext;
}

}  // namespace detail

inline void write_raw_tensor(std::ostream& os, const RawTensor& t) {
  std::size_t n = 1;
  for (auto d : t.dims) n *= d;
  if (n != t.data.size()) throw std::invalid_argument("write_raw_tensor: dims do not match data");
  os.write("HZT1", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) detail::put_u32(os, d);
  for (float f : t.data) detail::put_u32(os, std::bit_cast<std::uint32_t>(f));
  if (!os) throw IoError("write_raw_tensor: stream write failed");
}

inline RawTensor read_raw_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "HZT1", 4) != 0)
    throw IoError("read_raw_tensor: bad magic");
  RawTensor t;
  const auto rank = detail::get_u32(is);
  if (rank > 8) throw IoError("read_raw_tensor: implausible rank");
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    t.dims.push_back(detail::get_u32(is));
    n *= t.dims.back();
  }
  t.data.resize(n);
  for (auto& f : t.data) f = std::bit_cast<float>(detail::get_u32(is));
  return t;
}

inline void write_raw_tensor_file(const std::filesystem::path& path, const RawTensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  write_raw_tensor(os, t);
}

inline RawTensor read_raw_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  return read_raw_tensor(is);
}

template <typename T>
RawTensor to_raw_tensor(const Image<T>& img) {
  RawTensor t;
  t.dims = {std::uint32_t(img.height()), std::uint32_t(img.width()), std::uint32_t(img.channels())};
  t.data.assign(img.data().begin(), img.data().end());
  return t;
}

template <typename T>
Image<T> from_raw_tensor(const RawTensor& t) {
  if (t.dims.size() == 2)
    return Image<T>(int(t.dims[0]), int(t.dims[1]), 1, std::vector<T>(t.data.begin(), t.data.end()));
  if (t.dims.size() == 3)
    return Image<T>(int(t.dims[0]), int(t.dims[1]), int(t.dims[2]),
                    std::vector<T>(t.data.begin(), t.data.end()));
  throw IoError("raw tensor is not an image (rank must be 2 or 3)");
}

inline Image<float> read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  const auto fmt = img.format;
  if ((fmt & PNG_FORMAT_FLAG_LINEAR) || (fmt & PNG_FORMAT_FLAG_ALPHA)) {
    png_image_free(&img);
    throw IoError("unsupported PNG (need 8-bit gray or RGB): " + path.string());
  }
  const bool color = (fmt & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int C = color ? 3 : 1;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  Image<float> out(int(img.height), int(img.width), C);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = float(buf[i]) / 255.0f;
  return out;
}

template <typename T>
void write_png(const Image<T>& src, const std::filesystem::path& path) {
  if (src.channels() != 1 && src.channels() != 3)
    throw std::invalid_argument("write_png: need 1 or 3 channels");
  std::vector<png_byte> buf(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double v = std::clamp(double(src[i]), 0.0, 1.0);
    buf[i] = static_cast<png_byte>(std::lround(v * 255.0));
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(src.width());
  img.height = png_uint_32(src.height());
  img.format = src.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
}

// Dispatches on extension: ".png" or raw tensor (anything else).
template <typename T = float>
Image<T> read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
  if (detail::has_extension(path, ".png")) return read_png(path).template cast<T>();
  return from_raw_tensor<T>(read_raw_tensor_file(path));
}

template <typename T>
void write_image(const Image<T>& img, const std::filesystem::path& path) {
  if (detail::has_extension(path, ".png"))
    write_png(img, path);
  else
    write_raw_tensor_file(path, to_raw_tensor(img));
}

}  // namespace hazediff
