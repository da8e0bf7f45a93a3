#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfkd {

// Minimal PNG support: 8-bit grayscale or RGB, non-interlaced. Enough for
// dataset files and sample grids; not a general-purpose decoder.

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ImageU8 {
  int64_t width = 0, height = 0, channels = 0;
  std::vector<uint8_t> pixels;  // row-major, interleaved
};

namespace pngdetail {

inline void put_u32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x >> 24));
  v.push_back(static_cast<uint8_t>(x >> 16));
  v.push_back(static_cast<uint8_t>(x >> 8));
  v.push_back(static_cast<uint8_t>(x));
}

inline uint32_t get_u32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline void write_chunk(std::ofstream& f, const char type[4], const std::vector<uint8_t>& data) {
  std::vector<uint8_t> hdr;
  put_u32(hdr, static_cast<uint32_t>(data.size()));
  f.write(reinterpret_cast<const char*>(hdr.data()), 4);
  f.write(type, 4);
  if (!data.empty()) f.write(reinterpret_cast<const char*>(data.data()), data.size());
  uint32_t crc = crc32(0, reinterpret_cast<const Bytef*>(type), 4);
  if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
  std::vector<uint8_t> tail;
  put_u32(tail, crc);
  f.write(reinterpret_cast<const char*>(tail.data()), 4);
}

inline uint8_t paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
  if (pb <= pc) return static_cast<uint8_t>(b);
  return static_cast<uint8_t>(c);
}

}  // namespace pngdetail

inline void write_png(const std::string& path, const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw IoError("write_png: only 1 or 3 channels supported");
  if (static_cast<int64_t>(img.pixels.size()) != img.width * img.height * img.channels)
    throw IoError("write_png: pixel buffer size mismatch");
  const int64_t stride = img.width * img.channels;
  std::vector<uint8_t> raw(static_cast<size_t>((stride + 1) * img.height));
  for (int64_t y = 0; y < img.height; ++y) {
    raw[static_cast<size_t>(y * (stride + 1))] = 0;  // filter: none
    std::memcpy(raw.data() + y * (stride + 1) + 1, img.pixels.data() + y * stride,
                static_cast<size_t>(stride));
  }
  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("write_png: deflate failed");
  comp.resize(comp_len);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_png: cannot open " + path);
  static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  f.write(reinterpret_cast<const char*>(sig), 8);
  std::vector<uint8_t> ihdr;
  pngdetail::put_u32(ihdr, static_cast<uint32_t>(img.width));
  pngdetail::put_u32(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);                                      // bit depth
  ihdr.push_back(img.channels == 1 ? 0 : 2);              // gray / rgb
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  pngdetail::write_chunk(f, "IHDR", ihdr);
  pngdetail::write_chunk(f, "IDAT", comp);
  pngdetail::write_chunk(f, "IEND", {});
  if (!f) throw IoError("write_png: write failed for " + path);
}

inline ImageU8 read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_png: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
    throw IoError("read_png: not a PNG file: " + path);

  ImageU8 img;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  int color_type = -1;
  while (pos + 8 <= buf.size()) {
    uint32_t len = pngdetail::get_u32(buf.data() + pos);
    if (pos + 12 + len > buf.size()) throw IoError("read_png: truncated chunk in " + path);
    std::string type(reinterpret_cast<const char*>(buf.data() + pos + 4), 4);
    const uint8_t* data = buf.data() + pos + 8;
    if (type == "IHDR") {
      if (len != 13) throw IoError("read_png: bad IHDR in " + path);
      img.width = pngdetail::get_u32(data);
      img.height = pngdetail::get_u32(data + 4);
      int bit_depth = data[8];
      color_type = data[9];
      if (bit_depth != 8 || (color_type != 0 && color_type != 2) || data[12] != 0)
        throw IoError("read_png: unsupported format (need 8-bit gray/rgb, no interlace): " + path);
      img.channels = color_type == 0 ? 1 : 3;
    } else if (type == "IDAT") {
      idat.insert(idat.end(), data, data + len);
    } else if (type == "IEND") {
      break;
    }
    pos += 12 + len;
  }
  if (img.width <= 0 || img.height <= 0 || idat.empty())
    throw IoError("read_png: missing image data in " + path);

  const int64_t stride = img.width * img.channels;
  std::vector<uint8_t> raw(static_cast<size_t>((stride + 1) * img.height));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw IoError("read_png: inflate failed for " + path);

  img.pixels.resize(static_cast<size_t>(stride * img.height));
  const int bpp = static_cast<int>(img.channels);
  for (int64_t y = 0; y < img.height; ++y) {
    uint8_t filter = raw[static_cast<size_t>(y * (stride + 1))];
    const uint8_t* src = raw.data() + y * (stride + 1) + 1;
    uint8_t* cur = img.pixels.data() + y * stride;
    const uint8_t* up = y > 0 ? img.pixels.data() + (y - 1) * stride : nullptr;
    for (int64_t x = 0; x < stride; ++x) {
      int a = x >= bpp ? cur[x - bpp] : 0;
      int b = up ? up[x] : 0;
      int c = (up && x >= bpp) ? up[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += pngdetail::paeth(a, b, c); break;
        default: throw IoError("read_png: unknown filter type in " + path);
      }
      cur[x] = static_cast<uint8_t>(v & 0xff);
    }
  }
  return img;
}

}  // namespace dfkd
