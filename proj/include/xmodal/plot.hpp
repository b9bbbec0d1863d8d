#pragma once

#include "xmodal/png.hpp"

namespace xmodal {
namespace plot {

// Self-contained grayscale chart rasteriser for loss curves and metric bars.
// White canvas, dark ink, 5x7 bitmap glyphs; text is uppercased on draw.

namespace detail {

struct Glyph {
  char c;
  std::uint8_t rows[7];  // 5 low bits per row, bit 4 = leftmost column
};

inline const std::uint8_t* glyph(char c) {
  static const Glyph table[] = {
      {' ', {0, 0, 0, 0, 0, 0, 0}},
      {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
      {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
      {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}},
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
      {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
      {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
      {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
      {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
      {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
      {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
      {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
      {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
      {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
      {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
      {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
      {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
      {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
      {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
      {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}},
      {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
  };
  for (const auto& g : table)
    if (g.c == c) return g.rows;
  return nullptr;
}

inline void put(Tensor& img, int y, int x, real shade) {
  if (y < 0 || x < 0 || y >= img.dim(2) || x >= img.dim(3)) return;
  img.at4(0, 0, y, x) = shade;
}

inline void draw_text(Tensor& img, int y, int x, std::string text,
                      real shade = 0) {
  for (auto& c : text) c = static_cast<char>(std::toupper(c));
  for (const char c : text) {
    if (const std::uint8_t* rows = glyph(c)) {
      for (int r = 0; r < 7; ++r)
        for (int b = 0; b < 5; ++b)
          if (rows[r] & (1 << (4 - b))) put(img, y + r, x + b, shade);
    }
    x += 6;
  }
}

inline void draw_line(Tensor& img, int y0, int x0, int y1, int x1,
                      real shade) {
  const int steps = std::max({std::abs(y1 - y0), std::abs(x1 - x0), 1});
  for (int s = 0; s <= steps; ++s) {
    const real t = static_cast<real>(s) / steps;
    put(img, static_cast<int>(std::lround(y0 + t * (y1 - y0))),
        static_cast<int>(std::lround(x0 + t * (x1 - x0))), shade);
  }
}

inline std::string fmt(real v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

inline Tensor canvas(int h, int w) {
  Tensor img({1, 1, h, w});
  for (auto& v : img.vec()) v = 1;
  return img;
}

inline void save(const Tensor& img, const fs::path& out) {
  png::write_file(
      out, png::encode_gray8(png::quantize(img), img.dim(3), img.dim(2)));
}

}  // namespace detail

struct Series {
  std::string name;
  std::vector<real> ys;
};

// Polyline chart of one or more series against their sample index. Shades
// cycle per series; a legend sits in the upper left of the plot area.
inline void line_chart(const std::vector<Series>& series,
                       const std::string& title, const fs::path& out) {
  if (series.empty()) throw ConfigError("line_chart: no series");
  const int W = 640, H = 400, left = 64, right = 16, top = 28, bottom = 36;
  const int pw = W - left - right, ph = H - top - bottom;
  Tensor img = detail::canvas(H, W);

  real lo = std::numeric_limits<real>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.ys.size());
    for (const real v : s.ys) {
      if (!std::isfinite(v)) throw ConfigError("line_chart: non-finite value");
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (n == 0) throw ConfigError("line_chart: empty series");
  if (hi - lo < 1e-12) {
    lo -= 1;
    hi += 1;
  }
  const real pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;

  auto ypix = [&](real v) {
    return top + static_cast<int>(std::lround((hi - v) / (hi - lo) * (ph - 1)));
  };
  auto xpix = [&](std::size_t i) {
    return left +
           (n > 1 ? static_cast<int>(i * static_cast<std::size_t>(pw - 1) /
                                     (n - 1))
                  : pw / 2);
  };

  detail::draw_line(img, top, left, top + ph - 1, left, 0);
  detail::draw_line(img, top + ph - 1, left, top + ph - 1, left + pw - 1, 0);
  detail::draw_text(img, 8, left, title);
  for (const real v : {lo + pad, (lo + hi) / 2, hi - pad}) {
    const int y = ypix(v);
    detail::draw_line(img, y, left - 3, y, left, 0);
    detail::draw_text(img, y - 3, 4, detail::fmt(v));
  }
  detail::draw_text(img, top + ph + 6, left, "0");
  const std::string xmax = detail::fmt(static_cast<real>(n - 1));
  detail::draw_text(img, top + ph + 6,
                    left + pw - static_cast<int>(xmax.size()) * 6, xmax);

  static const real shades[] = {0.0, 0.45, 0.65, 0.3, 0.55, 0.8};
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& ys = series[si].ys;
    const real shade = shades[si % 6];
    for (std::size_t i = 1; i < ys.size(); ++i)
      detail::draw_line(img, ypix(ys[i - 1]), xpix(i - 1), ypix(ys[i]),
                        xpix(i), shade);
    const int ly = top + 6 + static_cast<int>(si) * 10;
    detail::draw_line(img, ly + 3, left + 8, ly + 3, left + 24, shade);
    detail::draw_text(img, ly, left + 30, series[si].name);
  }
  detail::save(img, out);
}

// Bars with +/- one standard deviation whiskers and numeric labels.
inline void bar_chart(const std::vector<std::string>& labels,
                      const std::vector<real>& means,
                      const std::vector<real>& stds, const std::string& title,
                      const fs::path& out) {
  const int k = static_cast<int>(means.size());
  if (k == 0 || labels.size() != means.size() || stds.size() != means.size())
    throw ConfigError("bar_chart: inconsistent inputs");
  const int W = 640, H = 400, left = 64, right = 16, top = 28, bottom = 44;
  const int pw = W - left - right, ph = H - top - bottom;
  Tensor img = detail::canvas(H, W);

  real lo = 0, hi = -std::numeric_limits<real>::infinity();
  for (int i = 0; i < k; ++i) {
    if (!std::isfinite(means[i]) || !std::isfinite(stds[i]))
      throw ConfigError("bar_chart: non-finite value");
    lo = std::min(lo, means[i] - stds[i]);
    hi = std::max(hi, means[i] + stds[i]);
  }
  if (hi <= lo) hi = lo + 1;
  const real pad = 0.08 * (hi - lo);
  hi += pad;
  if (lo < 0) lo -= pad;

  auto ypix = [&](real v) {
    return top + static_cast<int>(std::lround((hi - v) / (hi - lo) * (ph - 1)));
  };

  detail::draw_line(img, top, left, top + ph - 1, left, 0);
  const int base = ypix(std::max(real(0), lo));
  detail::draw_line(img, base, left, base, left + pw - 1, 0);
  detail::draw_text(img, 8, left, title);
  for (const real v : {lo, (lo + hi) / 2, hi - pad}) {
    const int y = ypix(v);
    detail::draw_line(img, y, left - 3, y, left, 0);
    detail::draw_text(img, y - 3, 4, detail::fmt(v));
  }

  const int slot = pw / k, bw = std::max(8, slot * 3 / 5);
  for (int i = 0; i < k; ++i) {
    const int cx = left + slot * i + slot / 2;
    const int x0 = cx - bw / 2, x1 = cx + bw / 2;
    const int ytop = ypix(means[i]);
    const int y0 = std::min(ytop, base), y1 = std::max(ytop, base);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        detail::put(img, y, x, 0.62);
    detail::draw_line(img, y0, x0, y0, x1, 0);
    detail::draw_line(img, y1, x0, y1, x1, 0);
    detail::draw_line(img, y0, x0, y1, x0, 0);
    detail::draw_line(img, y0, x1, y1, x1, 0);
    const int wy0 = ypix(means[i] + stds[i]), wy1 = ypix(means[i] - stds[i]);
    detail::draw_line(img, wy0, cx, wy1, cx, 0);
    detail::draw_line(img, wy0, cx - 4, wy0, cx + 4, 0);
    detail::draw_line(img, wy1, cx - 4, wy1, cx + 4, 0);
    const std::string val = detail::fmt(means[i]);
    detail::draw_text(img, std::max(top, wy0 - 10),
                      cx - static_cast<int>(val.size()) * 3, val);
    std::string lab = labels[i];
    if (static_cast<int>(lab.size()) * 6 > slot)
      lab = lab.substr(0, std::max(1, slot / 6));
    detail::draw_text(img, top + ph + 8,
                      cx - static_cast<int>(lab.size()) * 3, lab);
  }
  detail::save(img, out);
}

}  // namespace plot
}  // namespace xmodal
