#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace smd {

// Single-channel H x W intensity image, row-major. Values are expected to be
// finite and within [0, 1]; `is_valid_intensity` checks that.
struct ImageGrid {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  ImageGrid() = default;
  ImageGrid(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  [[nodiscard]] float at(int y, int x) const {
    return pixels[static_cast<std::size_t>(y) * width + x];
  }
  float& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }

  [[nodiscard]] std::size_t size() const { return pixels.size(); }
  [[nodiscard]] std::span<const float> view() const { return pixels; }

  bool operator==(const ImageGrid&) const = default;
};

bool is_valid_intensity(const ImageGrid& g);

// Throws ValidationError unless both grids have identical dimensions.
void require_same_shape(const ImageGrid& a, const ImageGrid& b, const char* what);

}  // namespace smd
