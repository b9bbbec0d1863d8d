#pragma once

#include <zlib.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "xmodal/tensor.hpp"

namespace xmodal {

// Minimal 8-bit grayscale PNG codec over zlib. Writes filter-0 scanlines;
// reads any of the five standard filters, non-interlaced only.
namespace png {

namespace detail {

inline void put_be32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>((v >> 24) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>(v & 0xff));
}

inline std::uint32_t get_be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline void append_chunk(std::string& out, const char type[4],
                         const std::string& data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t crc_start = out.size();
  out.append(type, 4);
  out.append(data);
  const auto crc = ::crc32(
      0, reinterpret_cast<const Bytef*>(out.data() + crc_start),
      static_cast<uInt>(out.size() - crc_start));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

}  // namespace detail

inline std::string encode_gray8(const std::vector<std::uint8_t>& pixels,
                                int width, int height) {
  if (static_cast<std::size_t>(width) * height != pixels.size())
    throw IoError("png encode: pixel count does not match dimensions");
  std::string raw;
  raw.reserve(static_cast<std::size_t>(height) * (width + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back('\0');  // filter 0
    raw.append(reinterpret_cast<const char*>(pixels.data()) +
                   static_cast<std::size_t>(y) * width,
               width);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string compressed(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png encode: deflate failed");
  compressed.resize(bound);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(width));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(0);   // grayscale
  ihdr.push_back(0);   // deflate
  ihdr.push_back(0);   // adaptive filtering
  ihdr.push_back(0);   // no interlace
  detail::append_chunk(out, "IHDR", ihdr);
  detail::append_chunk(out, "IDAT", compressed);
  detail::append_chunk(out, "IEND", "");
  return out;
}

struct Gray8 {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

inline Gray8 decode_gray8(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  static const unsigned char sig[8] = {137, 'P', 'N', 'G', 13, 10, 26, 10};
  if (n < 8 || std::memcmp(p, sig, 8) != 0)
    throw IoError("png decode: bad signature");

  Gray8 img;
  std::string compressed;
  bool saw_ihdr = false;
  std::size_t off = 8;
  while (off + 12 <= n) {
    const std::uint32_t len = detail::get_be32(p + off);
    if (off + 12 + len > n) throw IoError("png decode: truncated chunk");
    const char* type = reinterpret_cast<const char*>(p + off + 4);
    const unsigned char* data = p + off + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw IoError("png decode: bad IHDR");
      img.width = static_cast<int>(detail::get_be32(data));
      img.height = static_cast<int>(detail::get_be32(data + 4));
      if (data[8] != 8 || data[9] != 0)
        throw IoError("png decode: only 8-bit grayscale is supported");
      if (data[12] != 0) throw IoError("png decode: interlace not supported");
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      compressed.append(reinterpret_cast<const char*>(data), len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    off += 12 + len;
  }
  if (!saw_ihdr || img.width <= 0 || img.height <= 0)
    throw IoError("png decode: missing or empty IHDR");

  const std::size_t stride = static_cast<std::size_t>(img.width) + 1;
  std::vector<unsigned char> raw(stride * img.height);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len,
                 reinterpret_cast<const Bytef*>(compressed.data()),
                 static_cast<uLong>(compressed.size())) != Z_OK ||
      raw_len != raw.size())
    throw IoError("png decode: inflate failed");

  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  std::vector<unsigned char> prev(img.width, 0);
  for (int y = 0; y < img.height; ++y) {
    const unsigned char filter = raw[y * stride];
    const unsigned char* src = raw.data() + y * stride + 1;
    unsigned char* dst = img.pixels.data() + static_cast<std::size_t>(y) * img.width;
    for (int x = 0; x < img.width; ++x) {
      const int a = x > 0 ? dst[x - 1] : 0;
      const int b = prev[x];
      const int c = x > 0 ? prev[x - 1] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += detail::paeth(a, b, c); break;
        default: throw IoError("png decode: unknown filter");
      }
      dst[x] = static_cast<unsigned char>(v & 0xff);
    }
    std::memcpy(prev.data(), dst, img.width);
  }
  return img;
}

inline void write_file(const std::filesystem::path& path,
                       const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Images travel through the pipeline as doubles in [0, 1]; quantization to
// 8 bits happens only at the file boundary.
inline std::vector<std::uint8_t> quantize(const Tensor& img) {
  std::vector<std::uint8_t> out(img.numel());
  for (std::size_t i = 0; i < img.numel(); ++i) {
    const real v = std::clamp(img[i], real(0), real(1));
    out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

inline Tensor dequantize(const Gray8& img) {
  Tensor t({1, 1, img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    t[i] = static_cast<real>(img.pixels[i]) / 255.0;
  return t;
}

inline void save_gray(const std::filesystem::path& path, const Tensor& img) {
  const auto& s = img.shape();
  if (s.size() != 4 || s[0] != 1 || s[1] != 1)
    throw ShapeError("save_gray expects a {1,1,H,W} tensor");
  write_file(path, encode_gray8(quantize(img), s[3], s[2]));
}

inline Tensor load_gray(const std::filesystem::path& path) {
  return dequantize(decode_gray8(read_file(path)));
}

}  // namespace png
}  // namespace xmodal
