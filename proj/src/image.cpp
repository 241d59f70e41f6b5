// SPDX-License-Identifier: Apache-2.0

#include "seqjepa/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "seqjepa/errors.hpp"

namespace seqjepa {

Image crop(const Image& img, int x0, int y0, int size) {
  if (x0 < 0 || y0 < 0 || x0 + size > img.width || y0 + size > img.height) {
    throw ConfigError("crop window leaves the image");
  }
  Image out(img.channels, size, size);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
    }
  }
  return out;
}

Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 1e-6) return img;
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& k : kernel) k /= total;

  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  Image tmp = img;
  Image out = img;
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        double acc = 0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * img.at(c, y, reflect(x + k, img.width));
        tmp.at(c, y, x) = static_cast<float>(acc);
      }
    }
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        double acc = 0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp.at(c, reflect(y + k, img.height), x);
        out.at(c, y, x) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

void write_ppm(const Image& img, const std::string& path) {
  if (img.channels != 3) throw ConfigError("write_ppm: image must have 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        row[static_cast<std::size_t>(x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw FormatError("'" + path + "' is not an 8-bit P6 image");
  in.get();
  Image img(3, h, w);
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    if (!in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()))) {
      throw FormatError("'" + path + "' is truncated");
    }
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = row[static_cast<std::size_t>(x) * 3 + c] / 255.0f;
    }
  }
  return img;
}

}  // namespace seqjepa
