#pragma once

#include <span>
#include <vector>

#include "smd/image.hpp"

namespace smd::translate {

inline constexpr double kPsnrCapDb = 99.0;

// Mean SSIM over all fully contained window x window uniform windows, with
// population (1/n) moments and C1 = (0.01 L)^2, C2 = (0.03 L)^2.
double ssim(const ImageGrid& x, const ImageGrid& y, int window = 8, double data_range = 1.0);

// 10 log10(peak^2 / MSE), capped at kPsnrCapDb (which is also the zero-MSE value).
double psnr(const ImageGrid& x, const ImageGrid& y, double peak = 1.0);

double mean_squared_error(const ImageGrid& x, const ImageGrid& y);
double mean_absolute_error(const ImageGrid& x, const ImageGrid& y);

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for fewer than two values
  std::size_t count = 0;
};

Summary summarize(std::span<const double> values);

}  // namespace smd::translate
