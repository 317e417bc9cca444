#include "mce/pngio.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>

#include "mce/errors.hpp"

namespace mce {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
  put_u32(out, static_cast<uint32_t>(data.size()));
  const size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
  put_u32(out, crc);
}

}  // namespace

void write_png(const std::string& path, const RgbImage& image) {
  const int w = image.width, h = image.height;
  if (w <= 0 || h <= 0 || image.pixels.size() != static_cast<size_t>(w) * h * 3) {
    throw ConfigError("write_png: pixel buffer does not match dimensions");
  }

  // Raw stream: one filter byte (0) per scanline.
  std::vector<uint8_t> raw(static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * 3));
  for (int y = 0; y < h; ++y) {
    uint8_t* row = raw.data() + static_cast<size_t>(y) * (1 + static_cast<size_t>(w) * 3);
    row[0] = 0;
    std::memcpy(row + 1, image.pixels.data() + static_cast<size_t>(y) * w * 3,
                static_cast<size_t>(w) * 3);
  }
  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> compressed(comp_len);
  if (compress2(compressed.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 9) !=
      Z_OK) {
    throw IoError("write_png: compression failed");
  }
  compressed.resize(comp_len);

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<uint8_t> ihdr;
  put_u32(ihdr, static_cast<uint32_t>(w));
  put_u32(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type: truecolor
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter
  ihdr.push_back(0);  // interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", compressed);
  put_chunk(out, "IEND", {});

  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) throw IoError("write_png: cannot open " + path);
  const size_t written = std::fwrite(out.data(), 1, out.size(), f);
  std::fclose(f);
  if (written != out.size()) throw IoError("write_png: short write to " + path);
}

}  // namespace mce
