// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

namespace seqjepa {

/// Planar (channel-major) float image with values in [0, 1].
struct Image {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  std::size_t size() const { return pixels.size(); }

  bool operator==(const Image&) const = default;
};

/// Copies the `size` x `size` window with top-left corner (x0, y0).
Image crop(const Image& img, int x0, int y0, int size);

/// Separable Gaussian blur with reflected borders; sigma in pixels.
Image gaussian_blur(const Image& img, double sigma);

/// Binary PPM (P6), 8 bits per channel. Requires 3 channels.
void write_ppm(const Image& img, const std::string& path);
Image read_ppm(const std::string& path);

}  // namespace seqjepa
