#include "vemkd_cli/plot.hpp"

#include "vemkd/errors.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>

namespace vemkd::cli {

namespace {

// 3x5 glyphs, one row per entry, bit 2 = leftmost column.
const std::map<char, std::array<uint8_t, 5>> kGlyphs = {
    {'0', {7, 5, 5, 5, 7}}, {'1', {2, 6, 2, 2, 7}}, {'2', {7, 1, 7, 4, 7}}, {'3', {7, 1, 7, 1, 7}},
    {'4', {5, 5, 7, 1, 1}}, {'5', {7, 4, 7, 1, 7}}, {'6', {7, 4, 7, 5, 7}}, {'7', {7, 1, 1, 1, 1}},
    {'8', {7, 5, 7, 5, 7}}, {'9', {7, 5, 7, 1, 7}}, {'.', {0, 0, 0, 0, 2}}, {'-', {0, 0, 7, 0, 0}},
    {'+', {0, 2, 7, 2, 0}}, {'e', {0, 6, 7, 4, 3}}, {' ', {0, 0, 0, 0, 0}},
};

std::string short_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

}  // namespace

Canvas::Canvas(int width, int height) : width_(width), height_(height), rgb_(static_cast<size_t>(width) * height * 3, 255) {}

void Canvas::set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
  if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
  auto* p = &rgb_[(static_cast<size_t>(y) * width_ + x) * 3];
  p[0] = r;
  p[1] = g;
  p[2] = b;
}

void Canvas::line(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    set(x0, y0, r, g, b);
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

void Canvas::text(int x, int y, const std::string& s, int scale) {
  for (char c : s) {
    auto it = kGlyphs.find(c);
    if (it != kGlyphs.end()) {
      for (int row = 0; row < 5; ++row) {
        for (int col = 0; col < 3; ++col) {
          if (!((it->second[row] >> (2 - col)) & 1)) continue;
          for (int a = 0; a < scale; ++a) {
            for (int b = 0; b < scale; ++b) set(x + col * scale + a, y + row * scale + b, 0, 0, 0);
          }
        }
      }
    }
    x += 4 * scale;
  }
}

void Canvas::write_png(const std::filesystem::path& path, const std::string& title) const {
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw IoError("cannot write plot '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng failed while writing '" + path.string() + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, width_, height_, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  std::string key = "Title";
  png_text text{};
  text.compression = PNG_TEXT_COMPRESSION_NONE;
  text.key = key.data();
  text.text = const_cast<char*>(title.c_str());
  png_set_text(png, info, &text, 1);
  png_write_info(png, info);
  for (int y = 0; y < height_; ++y) {
    png_write_row(png, const_cast<png_bytep>(&rgb_[static_cast<size_t>(y) * width_ * 3]));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

void plot_series(const std::filesystem::path& path, const std::string& title, const std::vector<double>& x,
                 const std::vector<double>& y) {
  constexpr int kW = 640, kH = 400, kLeft = 90, kRight = 20, kTop = 20, kBottom = 40;
  Canvas c(kW, kH);

  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (size_t i = 0; i < x.size() && i < y.size(); ++i) {
    if (!std::isfinite(y[i]) || !std::isfinite(x[i])) continue;
    xmin = std::min(xmin, x[i]);
    xmax = std::max(xmax, x[i]);
    ymin = std::min(ymin, y[i]);
    ymax = std::max(ymax, y[i]);
  }
  const bool any = std::isfinite(ymin);
  if (!any) {
    xmin = ymin = 0.0;
    xmax = ymax = 1.0;
  }
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) {
    const double pad = std::max(std::abs(ymin) * 0.05, 0.5);
    ymin -= pad;
    ymax += pad;
  }

  const int x0 = kLeft, x1 = kW - kRight, y0 = kTop, y1 = kH - kBottom;
  auto px = [&](double v) { return x0 + static_cast<int>(std::lround((v - xmin) / (xmax - xmin) * (x1 - x0))); };
  auto py = [&](double v) { return y1 - static_cast<int>(std::lround((v - ymin) / (ymax - ymin) * (y1 - y0))); };

  for (int k = 0; k <= 4; ++k) {
    const double v = ymin + (ymax - ymin) * k / 4.0;
    const int yy = py(v);
    c.line(x0, yy, x1, yy, 225, 225, 225);
    c.text(4, yy - 5, short_number(v));
  }
  c.line(x0, y0, x0, y1, 0, 0, 0);
  c.line(x0, y1, x1, y1, 0, 0, 0);
  c.text(x0, y1 + 10, short_number(xmin));
  const auto xmax_label = short_number(xmax);
  c.text(x1 - static_cast<int>(xmax_label.size()) * 8, y1 + 10, xmax_label);

  bool pen = false;
  int lx = 0, ly = 0;
  for (size_t i = 0; i < x.size() && i < y.size(); ++i) {
    if (!std::isfinite(y[i]) || !std::isfinite(x[i])) {
      pen = false;
      continue;
    }
    const int cx = px(x[i]), cy = py(y[i]);
    if (pen) {
      c.line(lx, ly, cx, cy, 31, 119, 180);
    } else {
      c.set(cx, cy, 31, 119, 180);
    }
    lx = cx;
    ly = cy;
    pen = true;
  }
  c.write_png(path, title);
}

}  // namespace vemkd::cli
