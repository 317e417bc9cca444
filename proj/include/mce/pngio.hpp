#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mce {

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;  // row-major RGB triples
};

// Writes an 8-bit RGB PNG (zlib-compressed, filter 0 scanlines).
void write_png(const std::string& path, const RgbImage& image);

}  // namespace mce
