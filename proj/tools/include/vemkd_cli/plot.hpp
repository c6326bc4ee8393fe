#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace vemkd::cli {

/// RGB raster with just enough drawing primitives for training-curve plots.
class Canvas {
 public:
  Canvas(int width, int height);
  void set(int x, int y, uint8_t r, uint8_t g, uint8_t b);
  void line(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b);
  /// Digits, '.', '-', '+', 'e' and space in a 3x5 pixel font scaled by `scale`.
  void text(int x, int y, const std::string& s, int scale = 2);
  void write_png(const std::filesystem::path& path, const std::string& title) const;
  int width() const { return width_; }
  int height() const { return height_; }

 private:
  int width_, height_;
  std::vector<uint8_t> rgb_;
};

/// Line plot of y against x (NaNs break the line). The title goes into a PNG tEXt chunk.
void plot_series(const std::filesystem::path& path, const std::string& title, const std::vector<double>& x,
                 const std::vector<double>& y);

}  // namespace vemkd::cli
