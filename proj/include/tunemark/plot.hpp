#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tunemark/common.hpp"
#include "tunemark/image_io.hpp"

namespace tunemark {

// ---------------------------------------------------------------------------
// Minimal raster canvas + classic 5x7 column font, enough for axis labels.
// ---------------------------------------------------------------------------

namespace plotdetail {

using Rgb = std::array<uint8_t, 3>;

struct Canvas {
  ImageU8 img;

  Canvas(int w, int h, Rgb bg) {
    img.width = w;
    img.height = h;
    img.rgb.assign(static_cast<size_t>(w) * h * 3, 0);
    for (int i = 0; i < w * h; ++i) {
      img.rgb[static_cast<size_t>(i) * 3 + 0] = bg[0];
      img.rgb[static_cast<size_t>(i) * 3 + 1] = bg[1];
      img.rgb[static_cast<size_t>(i) * 3 + 2] = bg[2];
    }
  }

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    const size_t i = (static_cast<size_t>(y) * img.width + x) * 3;
    img.rgb[i + 0] = c[0];
    img.rgb[i + 1] = c[1];
    img.rgb[i + 2] = c[2];
  }

  void fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) set(x, y, c);
    }
  }

  void line(int x0, int y0, int x1, int y1, Rgb c) {
    // Bresenham
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void marker(int x, int y, Rgb c) { fill_rect(x - 1, y - 1, x + 1, y + 1, c); }
};

// Column-major 5x7 glyphs, bit 0 = top row. Lowercase folds to uppercase;
// anything unknown renders as a hollow box.
inline std::array<uint8_t, 5> glyph(char ch) {
  if (ch >= 'a' && ch <= 'z') ch = static_cast<char>(ch - 'a' + 'A');
  switch (ch) {
    case ' ': return {0x00, 0x00, 0x00, 0x00, 0x00};
    case '%': return {0x23, 0x13, 0x08, 0x64, 0x62};
    case '(': return {0x00, 0x1C, 0x22, 0x41, 0x00};
    case ')': return {0x00, 0x41, 0x22, 0x1C, 0x00};
    case '+': return {0x08, 0x08, 0x3E, 0x08, 0x08};
    case ',': return {0x00, 0x50, 0x30, 0x00, 0x00};
    case '-': return {0x08, 0x08, 0x08, 0x08, 0x08};
    case '.': return {0x00, 0x60, 0x60, 0x00, 0x00};
    case '/': return {0x20, 0x10, 0x08, 0x04, 0x02};
    case '0': return {0x3E, 0x51, 0x49, 0x45, 0x3E};
    case '1': return {0x00, 0x42, 0x7F, 0x40, 0x00};
    case '2': return {0x42, 0x61, 0x51, 0x49, 0x46};
    case '3': return {0x21, 0x41, 0x45, 0x4B, 0x31};
    case '4': return {0x18, 0x14, 0x12, 0x7F, 0x10};
    case '5': return {0x27, 0x45, 0x45, 0x45, 0x39};
    case '6': return {0x3C, 0x4A, 0x49, 0x49, 0x30};
    case '7': return {0x01, 0x71, 0x09, 0x05, 0x03};
    case '8': return {0x36, 0x49, 0x49, 0x49, 0x36};
    case '9': return {0x06, 0x49, 0x49, 0x29, 0x1E};
    case ':': return {0x00, 0x36, 0x36, 0x00, 0x00};
    case '=': return {0x14, 0x14, 0x14, 0x14, 0x14};
    case 'A': return {0x7E, 0x11, 0x11, 0x11, 0x7E};
    case 'B': return {0x7F, 0x49, 0x49, 0x49, 0x36};
    case 'C': return {0x3E, 0x41, 0x41, 0x41, 0x22};
    case 'D': return {0x7F, 0x41, 0x41, 0x22, 0x1C};
    case 'E': return {0x7F, 0x49, 0x49, 0x49, 0x41};
    case 'F': return {0x7F, 0x09, 0x09, 0x09, 0x01};
    case 'G': return {0x3E, 0x41, 0x49, 0x49, 0x7A};
    case 'H': return {0x7F, 0x08, 0x08, 0x08, 0x7F};
    case 'I': return {0x00, 0x41, 0x7F, 0x41, 0x00};
    case 'J': return {0x20, 0x40, 0x41, 0x3F, 0x01};
    case 'K': return {0x7F, 0x08, 0x14, 0x22, 0x41};
    case 'L': return {0x7F, 0x40, 0x40, 0x40, 0x40};
    case 'M': return {0x7F, 0x02, 0x0C, 0x02, 0x7F};
    case 'N': return {0x7F, 0x04, 0x08, 0x10, 0x7F};
    case 'O': return {0x3E, 0x41, 0x41, 0x41, 0x3E};
    case 'P': return {0x7F, 0x09, 0x09, 0x09, 0x06};
    case 'Q': return {0x3E, 0x41, 0x51, 0x21, 0x5E};
    case 'R': return {0x7F, 0x09, 0x19, 0x29, 0x46};
    case 'S': return {0x46, 0x49, 0x49, 0x49, 0x31};
    case 'T': return {0x01, 0x01, 0x7F, 0x01, 0x01};
    case 'U': return {0x3F, 0x40, 0x40, 0x40, 0x3F};
    case 'V': return {0x1F, 0x20, 0x40, 0x20, 0x1F};
    case 'W': return {0x3F, 0x40, 0x38, 0x40, 0x3F};
    case 'X': return {0x63, 0x14, 0x08, 0x14, 0x63};
    case 'Y': return {0x07, 0x08, 0x70, 0x08, 0x07};
    case 'Z': return {0x61, 0x51, 0x49, 0x45, 0x43};
    case '_': return {0x40, 0x40, 0x40, 0x40, 0x40};
    default: return {0x7F, 0x41, 0x41, 0x41, 0x7F};
  }
}

inline int text_width(const std::string& s) { return static_cast<int>(s.size()) * 6 - 1; }

inline void draw_text(Canvas& cv, int x, int y, const std::string& s, Rgb c) {
  for (char ch : s) {
    const auto g = glyph(ch);
    for (int col = 0; col < 5; ++col) {
      for (int row = 0; row < 7; ++row) {
        if (g[static_cast<size_t>(col)] & (1u << row)) cv.set(x + col, y + row, c);
      }
    }
    x += 6;
  }
}

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

}  // namespace plotdetail

// ---------------------------------------------------------------------------
// Line chart
// ---------------------------------------------------------------------------

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  int width = 640;
  int height = 420;
  std::optional<double> y_min;  // default: padded data range
  std::optional<double> y_max;
};

inline void write_line_chart(const std::filesystem::path& path, const ChartSpec& spec,
                             const std::vector<Series>& series) {
  using namespace plotdetail;
  require(!series.empty(), "chart needs at least one series");
  for (const Series& s : series) {
    require(s.x.size() == s.y.size(), "series x and y lengths differ");
  }
  require(spec.width >= 160 && spec.height >= 120, "chart dimensions too small");

  static const std::array<Rgb, 6> kPalette{{{31, 119, 180},
                                            {214, 39, 40},
                                            {44, 160, 44},
                                            {255, 127, 14},
                                            {148, 103, 189},
                                            {140, 86, 75}}};
  const Rgb white{255, 255, 255}, black{20, 20, 20}, gray{210, 210, 210};

  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const Series& s : series) {
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (!any) {
        xmin = xmax = s.x[i];
        ymin = ymax = s.y[i];
        any = true;
      } else {
        xmin = std::min(xmin, s.x[i]);
        xmax = std::max(xmax, s.x[i]);
        ymin = std::min(ymin, s.y[i]);
        ymax = std::max(ymax, s.y[i]);
      }
    }
  }
  require(any, "chart needs at least one finite data point");
  if (spec.y_min) ymin = *spec.y_min;
  if (spec.y_max) ymax = *spec.y_max;
  if (xmax == xmin) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  if (ymax == ymin) {
    ymin -= 0.5;
    ymax += 0.5;
  } else if (!spec.y_min && !spec.y_max) {
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
  }

  const int left = 58, right = 14, top = 26, bottom = 38;
  const int px0 = left, px1 = spec.width - right - 1;
  const int py0 = top, py1 = spec.height - bottom - 1;

  Canvas cv(spec.width, spec.height, white);
  auto to_px = [&](double x) {
    return px0 + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (px1 - px0)));
  };
  auto to_py = [&](double y) {
    return py1 - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (py1 - py0)));
  };

  // grid + ticks
  const int n_ticks = 5;
  for (int t = 0; t < n_ticks; ++t) {
    const double fx = xmin + (xmax - xmin) * t / (n_ticks - 1);
    const double fy = ymin + (ymax - ymin) * t / (n_ticks - 1);
    const int gx = to_px(fx), gy = to_py(fy);
    cv.line(gx, py0, gx, py1, gray);
    cv.line(px0, gy, px1, gy, gray);
    const std::string xl = tick_label(fx), yl = tick_label(fy);
    draw_text(cv, gx - text_width(xl) / 2, py1 + 6, xl, black);
    draw_text(cv, px0 - 6 - text_width(yl), gy - 3, yl, black);
  }

  // axes frame
  cv.line(px0, py0, px0, py1, black);
  cv.line(px0, py1, px1, py1, black);

  // series
  for (size_t si = 0; si < series.size(); ++si) {
    const Rgb c = kPalette[si % kPalette.size()];
    const Series& s = series[si];
    int prev_x = 0, prev_y = 0;
    bool have_prev = false;
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
        have_prev = false;  // break the polyline at gaps
        continue;
      }
      const int x = to_px(s.x[i]), y = to_py(s.y[i]);
      if (have_prev) cv.line(prev_x, prev_y, x, y, c);
      cv.marker(x, y, c);
      prev_x = x;
      prev_y = y;
      have_prev = true;
    }
  }

  // title + axis labels
  draw_text(cv, px0, 8, spec.title, black);
  draw_text(cv, px0 + ((px1 - px0) - text_width(spec.x_label)) / 2, spec.height - 14,
            spec.x_label, black);
  draw_text(cv, 4, py0 - 10, spec.y_label, black);

  // legend, top-right inside the plot area
  int ly = py0 + 6;
  for (size_t si = 0; si < series.size(); ++si) {
    const Rgb c = kPalette[si % kPalette.size()];
    const int lw = text_width(series[si].label);
    const int lx = px1 - lw - 26;
    cv.line(lx, ly + 3, lx + 16, ly + 3, c);
    cv.marker(lx + 8, ly + 3, c);
    draw_text(cv, lx + 20, ly, series[si].label, black);
    ly += 11;
  }

  write_png(path.string(), cv.img);
}

}  // namespace tunemark
