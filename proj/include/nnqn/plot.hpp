#pragma once

// Deterministic raster output: per-element heatmaps and simple line plots,
// written as binary PPM. Axis labels are left to whoever reads the CSVs
// written next to each image.

#include "nnqn/core.hpp"
#include "nnqn/mesh.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

namespace nnqn {

using Rgb = std::array<std::uint8_t, 3>;

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, top row first

  Image() = default;
  Image(int w, int h, Rgb fill = {255, 255, 255}) : width(w), height(h), rgb(static_cast<size_t>(3 * w * h)) {
    require(w > 0 && h > 0, "Image: dimensions must be positive");
    for (size_t i = 0; i < rgb.size(); i += 3) std::copy(fill.begin(), fill.end(), rgb.begin() + static_cast<long>(i));
  }
  Rgb at(int x, int y) const {
    const size_t i = 3 * (static_cast<size_t>(y) * static_cast<size_t>(width) + static_cast<size_t>(x));
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
  }
  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const size_t i = 3 * (static_cast<size_t>(y) * static_cast<size_t>(width) + static_cast<size_t>(x));
    rgb[i] = c[0];
    rgb[i + 1] = c[1];
    rgb[i + 2] = c[2];
  }
};

inline constexpr Rgb kOutside{255, 255, 255};

/// Viridis-like map on [0, 1], piecewise linear between nine anchors.
inline Rgb colormap(double t) {
  static constexpr std::array<std::array<double, 3>, 9> lut{{{68, 1, 84},
                                                             {71, 44, 122},
                                                             {59, 81, 139},
                                                             {44, 113, 142},
                                                             {33, 144, 141},
                                                             {39, 173, 129},
                                                             {92, 200, 99},
                                                             {170, 220, 50},
                                                             {253, 231, 37}}};
  if (!std::isfinite(t)) t = 0.0;
  t = std::clamp(t, 0.0, 1.0) * static_cast<double>(lut.size() - 1);
  const size_t i = std::min(static_cast<size_t>(t), lut.size() - 2);
  const double f = t - static_cast<double>(i);
  Rgb c{};
  for (int k = 0; k < 3; ++k) c[k] = static_cast<std::uint8_t>(std::lround((1 - f) * lut[i][k] + f * lut[i + 1][k]));
  return c;
}

/// Normalized position of v in [lo, hi]; a degenerate range maps to 0.5.
inline double color_position(double v, double lo, double hi) { return hi > lo ? (v - lo) / (hi - lo) : 0.5; }

/// Element containing each pixel center over the mesh bounding box
/// (-1 outside), found through a uniform bucket grid.
inline std::vector<int> pixel_elements(const Mesh& mesh, int width, int height) {
  require(mesh.n_elements() > 0, "pixel_elements: empty mesh");
  Point lo = mesh.nodes.front(), hi = mesh.nodes.front();
  for (const auto& p : mesh.nodes) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double sx = (hi.x() - lo.x()) / width, sy = (hi.y() - lo.y()) / height;
  std::vector<std::vector<int>> bucket(static_cast<size_t>(width * height));
  for (int e = 0; e < mesh.n_elements(); ++e) {
    Point a = mesh.nodes[mesh.elements[e][0]], b = a;
    for (int v : mesh.elements[e]) {
      a = a.cwiseMin(mesh.nodes[v]);
      b = b.cwiseMax(mesh.nodes[v]);
    }
    const int x0 = std::max(0, static_cast<int>(std::floor((a.x() - lo.x()) / sx)));
    const int x1 = std::min(width - 1, static_cast<int>(std::floor((b.x() - lo.x()) / sx)));
    // Image rows run top to bottom, y decreases downwards.
    const int y0 = std::max(0, static_cast<int>(std::floor((hi.y() - b.y()) / sy)));
    const int y1 = std::min(height - 1, static_cast<int>(std::floor((hi.y() - a.y()) / sy)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) bucket[static_cast<size_t>(y * width + x)].push_back(e);
  }
  std::vector<int> owner(static_cast<size_t>(width * height), -1);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const Point p(lo.x() + (x + 0.5) * sx, hi.y() - (y + 0.5) * sy);
      for (int e : bucket[static_cast<size_t>(y * width + x)]) {
        const auto& t = mesh.elements[e];
        const Point& a = mesh.nodes[t[0]];
        const Point& b = mesh.nodes[t[1]];
        const Point& c = mesh.nodes[t[2]];
        auto cross = [](const Point& u, const Point& v, const Point& q) {
          return (v - u).x() * (q - u).y() - (v - u).y() * (q - u).x();
        };
        if (cross(a, b, p) >= 0 && cross(b, c, p) >= 0 && cross(c, a, p) >= 0) {
          owner[static_cast<size_t>(y * width + x)] = e;
          break;
        }
      }
    }
  return owner;
}

/// Nearest-element heatmap. When lo >= hi the range is taken from the values.
inline Image render_heatmap(const Mesh& mesh, const Vec& values, int width, int height, double lo = 0.0,
                            double hi = 0.0) {
  require(values.size() == mesh.n_elements(), "render_heatmap: one value per element");
  if (!(hi > lo)) {
    lo = values.minCoeff();
    hi = values.maxCoeff();
  }
  Image img(width, height, kOutside);
  const auto owner = pixel_elements(mesh, width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const int e = owner[static_cast<size_t>(y * width + x)];
      if (e >= 0) img.set(x, y, colormap(color_position(values[e], lo, hi)));
    }
  return img;
}

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

inline Rgb series_color(size_t i) {
  static constexpr std::array<Rgb, 6> palette{
      {{31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {255, 127, 14}, {148, 103, 189}, {140, 86, 75}}};
  return palette[i % palette.size()];
}

namespace detail {

inline void draw_line(Image& img, int x0, int y0, int x1, int y1, Rgb c) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    img.set(x0, y0, c);
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

}  // namespace detail

/// Polylines on shared axes with a gray frame. With log_y, non-positive
/// values are skipped.
inline Image render_line_plot(const std::vector<Series>& series, int width, int height, bool log_y = false) {
  Image img(width, height, {255, 255, 255});
  const int margin = std::max(4, std::min(width, height) / 12);
  auto ty = [log_y](double v) { return log_y ? std::log10(v) : v; };
  double xlo = INFINITY, xhi = -INFINITY, ylo = INFINITY, yhi = -INFINITY;
  for (const auto& s : series) {
    require(s.x.size() == s.y.size(), "render_line_plot: x and y differ in length");
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]) || (log_y && !(s.y[i] > 0.0))) continue;
      xlo = std::min(xlo, s.x[i]);
      xhi = std::max(xhi, s.x[i]);
      ylo = std::min(ylo, ty(s.y[i]));
      yhi = std::max(yhi, ty(s.y[i]));
    }
  }
  const Rgb frame{160, 160, 160};
  const int l = margin, r = width - 1 - margin, t = margin, b = height - 1 - margin;
  detail::draw_line(img, l, t, r, t, frame);
  detail::draw_line(img, r, t, r, b, frame);
  detail::draw_line(img, r, b, l, b, frame);
  detail::draw_line(img, l, b, l, t, frame);
  if (!(xhi >= xlo)) return img;  // nothing plottable
  if (xhi == xlo) xhi = xlo + 1.0;
  if (yhi == ylo) {
    ylo -= 0.5;
    yhi += 0.5;
  }
  auto px = [&](double x) { return static_cast<int>(std::lround(l + (x - xlo) / (xhi - xlo) * (r - l))); };
  auto py = [&](double y) { return static_cast<int>(std::lround(b - (ty(y) - ylo) / (yhi - ylo) * (b - t))); };
  for (size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    int last_x = 0, last_y = 0;
    bool have = false;
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]) || (log_y && !(s.y[i] > 0.0))) {
        have = false;
        continue;
      }
      const int x = px(s.x[i]), y = py(s.y[i]);
      if (have) detail::draw_line(img, last_x, last_y, x, y, series_color(k));
      else img.set(x, y, series_color(k));
      last_x = x;
      last_y = y;
      have = true;
    }
  }
  return img;
}

inline void write_ppm(std::ostream& os, const Image& img) {
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  write_ppm(f, img);
}

/// Long format: series, x, y.
inline void write_series_csv(std::ostream& os, const std::vector<Series>& series) {
  os << "series,x,y\n" << std::setprecision(17);
  for (const auto& s : series)
    for (size_t i = 0; i < s.x.size(); ++i) os << s.name << ',' << s.x[i] << ',' << s.y[i] << '\n';
}

}  // namespace nnqn
