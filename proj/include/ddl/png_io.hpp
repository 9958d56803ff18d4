#pragma once

// 8-bit PNG read/write through libpng's simplified API.

#include <png.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ddl/errors.hpp"

namespace ddl {

struct Image8 {
  std::size_t width = 0, height = 0, channels = 1;  // channels: 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;                 // row-major, interleaved

  Image8() = default;
  Image8(std::size_t w, std::size_t h, std::size_t c) : width(w), height(h), channels(c), pixels(w * h * c, 0) {}
};

// Decodes to gray or RGB depending on whether the file carries color.
inline Image8 read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IngestError("cannot decode image " + path.string() + ": " + img.message);
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out(img.width, img.height, color ? 3 : 1);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IngestError("cannot decode image " + path.string() + ": " + msg);
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw ContractError("write_png: channels must be 1 or 3");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr))
    throw IoError("cannot write image " + path.string() + ": " + img.message);
}

inline std::uint8_t to_byte(double v) {
  const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<std::uint8_t>(c * 255.0 + 0.5);
}

}  // namespace ddl
