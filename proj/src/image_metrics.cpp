#include "smd/image_metrics.hpp"

#include <algorithm>
#include <cmath>

#include "smd/error.hpp"

namespace smd {

bool is_valid_intensity(const ImageGrid& g) {
  if (g.height <= 0 || g.width <= 0) return false;
  if (g.pixels.size() != static_cast<std::size_t>(g.height) * g.width) return false;
  return std::all_of(g.pixels.begin(), g.pixels.end(),
                     [](float v) { return std::isfinite(v) && v >= 0.0f && v <= 1.0f; });
}

void require_same_shape(const ImageGrid& a, const ImageGrid& b, const char* what) {
  if (a.height != b.height || a.width != b.width || a.pixels.size() != b.pixels.size()) {
    throw ValidationError(std::string(what) + ": shape mismatch " + std::to_string(a.height) +
                          "x" + std::to_string(a.width) + " vs " + std::to_string(b.height) +
                          "x" + std::to_string(b.width));
  }
}

}  // namespace smd

namespace smd::translate {
namespace {

// Summed-area table with a zero first row/column: (H+1) x (W+1).
std::vector<double> integral(int h, int w, auto&& value) {
  std::vector<double> s(static_cast<std::size_t>(h + 1) * (w + 1), 0.0);
  const auto at = [&](int y, int x) -> double& { return s[static_cast<std::size_t>(y) * (w + 1) + x]; };
  for (int y = 0; y < h; ++y) {
    double row = 0.0;
    for (int x = 0; x < w; ++x) {
      row += value(y, x);
      at(y + 1, x + 1) = at(y, x + 1) + row;
    }
  }
  return s;
}

double box(const std::vector<double>& s, int w, int y, int x, int size) {
  const auto at = [&](int yy, int xx) { return s[static_cast<std::size_t>(yy) * (w + 1) + xx]; };
  return at(y + size, x + size) - at(y, x + size) - at(y + size, x) + at(y, x);
}

}  // namespace

double ssim(const ImageGrid& x, const ImageGrid& y, int window, double data_range) {
  require_same_shape(x, y, "ssim");
  if (window < 1 || window > x.height || window > x.width) {
    throw ValidationError("ssim: window larger than the image");
  }
  const int h = x.height;
  const int w = x.width;
  const auto px = [&](int r, int c) { return static_cast<double>(x.at(r, c)); };
  const auto py = [&](int r, int c) { return static_cast<double>(y.at(r, c)); };
  const auto sx = integral(h, w, px);
  const auto sy = integral(h, w, py);
  const auto sxx = integral(h, w, [&](int r, int c) { return px(r, c) * px(r, c); });
  const auto syy = integral(h, w, [&](int r, int c) { return py(r, c) * py(r, c); });
  const auto sxy = integral(h, w, [&](int r, int c) { return px(r, c) * py(r, c); });

  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);
  const double n = static_cast<double>(window) * window;

  double total = 0.0;
  int count = 0;
  for (int r = 0; r + window <= h; ++r) {
    for (int c = 0; c + window <= w; ++c) {
      const double mx = box(sx, w, r, c, window) / n;
      const double my = box(sy, w, r, c, window) / n;
      // Clamp tiny negative variances from cancellation in the running sums.
      const double vx = std::max(0.0, box(sxx, w, r, c, window) / n - mx * mx);
      const double vy = std::max(0.0, box(syy, w, r, c, window) / n - my * my);
      const double cxy = box(sxy, w, r, c, window) / n - mx * my;
      total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / count;
}

double mean_squared_error(const ImageGrid& x, const ImageGrid& y) {
  require_same_shape(x, y, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x.pixels[i]) - y.pixels[i];
    acc += d * d;
  }
  return acc / static_cast<double>(x.size());
}

double mean_absolute_error(const ImageGrid& x, const ImageGrid& y) {
  require_same_shape(x, y, "l1");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc += std::abs(static_cast<double>(x.pixels[i]) - y.pixels[i]);
  }
  return acc / static_cast<double>(x.size());
}

double psnr(const ImageGrid& x, const ImageGrid& y, double peak) {
  const double mse = mean_squared_error(x, y);
  if (mse == 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / mse));
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

}  // namespace smd::translate
