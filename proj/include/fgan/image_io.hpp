#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fgan/error.hpp"

namespace fgan {

/// 8-bit interleaved RGB raster.
struct ImageU8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3, row-major

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * 3 + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

/// Decodes a PNG or JPEG file (sniffed by magic bytes) to RGB; grayscale and
/// palette inputs are expanded, alpha is dropped. Throws DataError with the
/// path on undecodable input.
ImageU8 read_image_rgb8(const std::string& path);

void write_png_rgb8(const std::string& path, const ImageU8& image);

}  // namespace fgan
