#pragma once

// Minimal PNG reader/writer over zlib: 8-bit gray / RGB / RGBA,
// non-interlaced. The writer emits filter-0 scanlines with a fixed
// compression level so identical pixels always produce identical bytes.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "textdet/common.hpp"

namespace textdet {

struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 gray, 3 RGB, 4 RGBA
  std::vector<uint8_t> pixels;  // row-major, interleaved

  uint8_t& at(int r, int c, int ch = 0) {
    return pixels[(static_cast<size_t>(r) * width + c) * channels + ch];
  }
  uint8_t at(int r, int c, int ch = 0) const {
    return pixels[(static_cast<size_t>(r) * width + c) * channels + ch];
  }
};

namespace detail {

inline void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

inline uint32_t get_u32be(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline void put_chunk(std::vector<uint8_t>& out, const char type[4],
                      const std::vector<uint8_t>& data) {
  put_u32be(out, static_cast<uint32_t>(data.size()));
  const size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uint32_t crc = crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
  put_u32be(out, crc);
}

inline uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
  if (pb <= pc) return static_cast<uint8_t>(b);
  return static_cast<uint8_t>(c);
}

}  // namespace detail

inline std::vector<uint8_t> encode_png(const Image& img) {
  if (img.channels != 1 && img.channels != 3 && img.channels != 4)
    throw validation_error("encode_png: channels must be 1, 3 or 4");
  if (img.pixels.size() != static_cast<size_t>(img.width) * img.height * img.channels)
    throw validation_error("encode_png: pixel buffer size mismatch");

  const size_t stride = static_cast<size_t>(img.width) * img.channels;
  std::vector<uint8_t> raw((stride + 1) * img.height);
  for (int r = 0; r < img.height; ++r) {
    raw[r * (stride + 1)] = 0;  // filter: none
    std::memcpy(raw.data() + r * (stride + 1) + 1, img.pixels.data() + r * stride, stride);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> packed(bound);
  if (compress2(packed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("encode_png: deflate failed");
  packed.resize(bound);

  std::vector<uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<uint8_t> ihdr;
  detail::put_u32be(ihdr, static_cast<uint32_t>(img.width));
  detail::put_u32be(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(img.channels == 1 ? 0 : (img.channels == 3 ? 2 : 6));
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  detail::put_chunk(out, "IHDR", ihdr);
  detail::put_chunk(out, "IDAT", packed);
  detail::put_chunk(out, "IEND", {});
  return out;
}

inline Image decode_png(const std::vector<uint8_t>& bytes) {
  static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw std::runtime_error("decode_png: not a PNG file");
  Image img;
  std::vector<uint8_t> packed;
  size_t pos = 8;
  int bit_depth = 0, color_type = -1;
  while (pos + 8 <= bytes.size()) {
    const uint32_t len = detail::get_u32be(bytes.data() + pos);
    if (pos + 12 + len > bytes.size()) throw std::runtime_error("decode_png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const uint8_t* data = bytes.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw std::runtime_error("decode_png: bad IHDR");
      img.width = static_cast<int>(detail::get_u32be(data));
      img.height = static_cast<int>(detail::get_u32be(data + 4));
      bit_depth = data[8];
      color_type = data[9];
      if (bit_depth != 8) throw std::runtime_error("decode_png: only 8-bit supported");
      if (data[12] != 0) throw std::runtime_error("decode_png: interlacing not supported");
      switch (color_type) {
        case 0: img.channels = 1; break;
        case 2: img.channels = 3; break;
        case 6: img.channels = 4; break;
        default: throw std::runtime_error("decode_png: unsupported color type");
      }
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      packed.insert(packed.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (img.width <= 0 || img.height <= 0) throw std::runtime_error("decode_png: missing IHDR");

  const size_t stride = static_cast<size_t>(img.width) * img.channels;
  std::vector<uint8_t> raw((stride + 1) * img.height);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, packed.data(), static_cast<uLong>(packed.size())) != Z_OK ||
      raw_len != raw.size())
    throw std::runtime_error("decode_png: inflate failed");

  img.pixels.resize(stride * img.height);
  const int bpp = img.channels;
  for (int r = 0; r < img.height; ++r) {
    const uint8_t filter = raw[r * (stride + 1)];
    const uint8_t* src = raw.data() + r * (stride + 1) + 1;
    uint8_t* dst = img.pixels.data() + r * stride;
    const uint8_t* up = r > 0 ? img.pixels.data() + (r - 1) * stride : nullptr;
    for (size_t i = 0; i < stride; ++i) {
      const int left = i >= static_cast<size_t>(bpp) ? dst[i - bpp] : 0;
      const int above = up ? up[i] : 0;
      const int corner = (up && i >= static_cast<size_t>(bpp)) ? up[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += left; break;
        case 2: v += above; break;
        case 3: v += (left + above) / 2; break;
        case 4: v += detail::paeth(left, above, corner); break;
        default: throw std::runtime_error("decode_png: bad filter byte");
      }
      dst[i] = static_cast<uint8_t>(v);
    }
  }
  return img;
}

inline void write_png_file(const std::string& path, const Image& img) {
  const std::vector<uint8_t> bytes = encode_png(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline Image read_png_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

}  // namespace textdet
