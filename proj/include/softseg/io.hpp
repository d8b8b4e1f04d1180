#pragma once

// PNG input and output for RGB images and 8-bit label maps (libpng).

#include <png.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "softseg/imaging.hpp"

namespace softseg {

namespace detail {
struct PngImage {
  png_image img{};
  PngImage() {
    img.version = PNG_IMAGE_VERSION;
  }
  ~PngImage() { png_image_free(&img); }
};

inline std::vector<png_byte> read_png_bytes(const std::filesystem::path& path, png_uint_32 format, int& h, int& w) {
  PngImage png;
  if (!png_image_begin_read_from_file(&png.img, path.string().c_str()))
    throw Error("cannot read PNG " + path.string() + ": " + png.img.message);
  png.img.format = format;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(png.img));
  if (!png_image_finish_read(&png.img, nullptr, buf.data(), 0, nullptr))
    throw Error("cannot decode PNG " + path.string() + ": " + png.img.message);
  h = static_cast<int>(png.img.height);
  w = static_cast<int>(png.img.width);
  return buf;
}

inline void write_png_bytes(const std::filesystem::path& path, png_uint_32 format, int h, int w,
                            const std::vector<png_byte>& buf) {
  PngImage png;
  png.img.width = static_cast<png_uint_32>(w);
  png.img.height = static_cast<png_uint_32>(h);
  png.img.format = format;
  if (!png_image_write_to_file(&png.img, path.string().c_str(), 0, buf.data(), 0, nullptr))
    throw Error("cannot write PNG " + path.string() + ": " + png.img.message);
}
}  // namespace detail

inline RasterImage read_png(const std::filesystem::path& path, double spacing = kWorkingSpacing) {
  int h = 0, w = 0;
  const auto buf = detail::read_png_bytes(path, PNG_FORMAT_RGB, h, w);
  RasterImage img(h, w, 0.0, spacing);
  for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = buf[i] / 255.0;
  return img;
}

inline void write_png(const std::filesystem::path& path, const RasterImage& img) {
  std::vector<png_byte> buf(img.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<png_byte>(std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
  detail::write_png_bytes(path, PNG_FORMAT_RGB, img.height, img.width, buf);
}

/// Grey-level label map; values must lie in [0, 255].
inline void write_label_png(const std::filesystem::path& path, const LabelGrid& labels) {
  std::vector<png_byte> buf(labels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 255) throw Error("write_label_png: label out of range");
    buf[i] = static_cast<png_byte>(labels[i]);
  }
  detail::write_png_bytes(path, PNG_FORMAT_GRAY, labels.height(), labels.width(), buf);
}

inline LabelGrid read_label_png(const std::filesystem::path& path) {
  int h = 0, w = 0;
  const auto buf = detail::read_png_bytes(path, PNG_FORMAT_GRAY, h, w);
  LabelGrid out(h, w);
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = buf[i];
  return out;
}

inline void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
  std::vector<png_byte> buf(mask.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = mask[i] ? 255 : 0;
  detail::write_png_bytes(path, PNG_FORMAT_GRAY, mask.height(), mask.width(), buf);
}

}  // namespace softseg
