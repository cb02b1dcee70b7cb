#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cavinet/image.hpp"

namespace cavinet {

// Minimal line-plot rasterizer: enough to render metric-vs-parameter sweeps
// as standalone PNGs without pulling in a plotting stack.

struct PlotSeries {
  std::string label;
  std::vector<double> x, y;
  double r = 0.8, g = 0.1, b = 0.1;
};

namespace detail {

template <class Scalar>
void draw_line(Tensor<Scalar>& img, double x0, double y0, double x1, double y1,
               double r, double g, double b) {
  const Index h = img.dim(1), w = img.dim(2);
  double dx = x1 - x0, dy = y1 - y0;
  int steps = static_cast<int>(std::max(std::abs(dx), std::abs(dy))) + 1;
  for (int s = 0; s <= steps; ++s) {
    double t = static_cast<double>(s) / steps;
    Index px = static_cast<Index>(std::lround(x0 + t * dx));
    Index py = static_cast<Index>(std::lround(y0 + t * dy));
    if (px < 0 || px >= w || py < 0 || py >= h) continue;
    img(0, py, px) = static_cast<Scalar>(r);
    img(1, py, px) = static_cast<Scalar>(g);
    img(2, py, px) = static_cast<Scalar>(b);
  }
}

inline std::string short_number(double v) {
  char buf[16];
  if (std::abs(v) < 10)
    std::snprintf(buf, sizeof(buf), "%.2f", v);
  else
    std::snprintf(buf, sizeof(buf), "%.0f", v);
  return buf;
}

}  // namespace detail

template <class Scalar = double>
Tensor<Scalar> render_line_plot(const std::vector<PlotSeries>& series,
                                Index width = 640, Index height = 440) {
  Tensor<Scalar> img = Tensor<Scalar>::ones({3, height, width});
  const Index ml = 56, mr = 16, mt = 28, mb = 36;  // margins
  const Index x0 = ml, x1 = width - mr, y0 = height - mb, y1 = mt;

  double lo_x = 1e300, hi_x = -1e300, lo_y = 1e300, hi_y = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      lo_x = std::min(lo_x, s.x[i]);
      hi_x = std::max(hi_x, s.x[i]);
      lo_y = std::min(lo_y, s.y[i]);
      hi_y = std::max(hi_y, s.y[i]);
    }
  if (lo_x > hi_x) { lo_x = 0; hi_x = 1; }
  if (lo_y > hi_y) { lo_y = 0; hi_y = 1; }
  if (hi_x == lo_x) hi_x = lo_x + 1;
  if (hi_y == lo_y) hi_y = lo_y + 1;

  auto px = [&](double v) {
    return static_cast<double>(x0) +
           (v - lo_x) / (hi_x - lo_x) * static_cast<double>(x1 - x0);
  };
  auto py = [&](double v) {
    return static_cast<double>(y0) -
           (v - lo_y) / (hi_y - lo_y) * static_cast<double>(y0 - y1);
  };

  // axes box and ticks
  detail::draw_line(img, x0, y0, x1, y0, 0, 0, 0);
  detail::draw_line(img, x0, y0, x0, y1, 0, 0, 0);
  for (int t = 0; t <= 4; ++t) {
    double fx = lo_x + (hi_x - lo_x) * t / 4.0;
    double fy = lo_y + (hi_y - lo_y) * t / 4.0;
    detail::draw_line(img, px(fx), y0, px(fx), y0 + 4, 0, 0, 0);
    detail::draw_line(img, x0 - 4, py(fy), x0, py(fy), 0, 0, 0);
    Tensor<Scalar>& ref = img;
    stamp_text(ref, detail::short_number(fx),
               static_cast<Index>(px(fx)) - 8, y0 + 8, 2, 0.0);
    stamp_text(ref, detail::short_number(fy), 8,
               static_cast<Index>(py(fy)) - 4, 2, 0.0);
  }

  Index legend_x = x0 + 8;
  for (const auto& s : series) {
    for (std::size_t i = 0; i + 1 < s.x.size(); ++i)
      detail::draw_line(img, px(s.x[i]), py(s.y[i]), px(s.x[i + 1]), py(s.y[i + 1]),
                        s.r, s.g, s.b);
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      detail::draw_line(img, px(s.x[i]) - 2, py(s.y[i]), px(s.x[i]) + 2, py(s.y[i]),
                        s.r, s.g, s.b);
      detail::draw_line(img, px(s.x[i]), py(s.y[i]) - 2, px(s.x[i]), py(s.y[i]) + 2,
                        s.r, s.g, s.b);
    }
    // legend swatch (labels are in the sweep table; the plot keeps swatches only)
    for (Index dy = 0; dy < 6; ++dy)
      detail::draw_line(img, legend_x, mt - 16 + dy, legend_x + 18, mt - 16 + dy,
                        s.r, s.g, s.b);
    legend_x += 30;
  }
  return img;
}

}  // namespace cavinet
