// SPDX-License-Identifier: Apache-2.0

#include "seqjepa/sprite.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "seqjepa/errors.hpp"

namespace seqjepa {
namespace {

constexpr int kSupersample = 4;
constexpr double kSpriteLuminance = 0.72;
constexpr double kChroma = 0.25;

/// Coverage of one placed sprite into `alpha` (max-combined), returning the
/// centroid of this sprite's coverage. Each supersample row is filled
/// between even-odd edge crossings of the polygon mapped to pixel space.
std::array<double, 2> rasterize(const SpritePlacement& s, const Polygon& poly, int width, int height,
                                std::vector<float>& alpha) {
  const double sy = s.radius;
  const double sx = s.radius * s.latents.aspect;
  const double c = std::cos(s.latents.angle);
  const double sn = std::sin(s.latents.angle);
  std::vector<std::array<double, 2>> pts;
  pts.reserve(poly.size());
  double ylo = 1e300, yhi = -1e300;
  for (const auto& p : poly) {
    const double u = p[0] * sx;
    const double v = p[1] * sy;
    pts.push_back({s.center_x + c * u - sn * v, s.center_y + sn * u + c * v});
    ylo = std::min(ylo, pts.back()[1]);
    yhi = std::max(yhi, pts.back()[1]);
  }
  std::vector<int> hits(static_cast<std::size_t>(width) * height, 0);
  std::vector<double> xs;
  const int row0 = std::max(0, static_cast<int>(std::floor(ylo)));
  const int row1 = std::min(height - 1, static_cast<int>(std::floor(yhi)));
  const std::size_t n = pts.size();
  for (int y = row0; y <= row1; ++y) {
    for (int b = 0; b < kSupersample; ++b) {
      const double v = y + (b + 0.5) / kSupersample;
      xs.clear();
      for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const auto& p = pts[i];
        const auto& q = pts[j];
        if ((p[1] > v) != (q[1] > v)) xs.push_back(p[0] + (v - p[1]) * (q[0] - p[0]) / (q[1] - p[1]));
      }
      std::sort(xs.begin(), xs.end());
      for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
        // Sample columns a with x + (a + 0.5)/S in [xs[k], xs[k+1]).
        const long first = static_cast<long>(std::ceil(xs[k] * kSupersample - 0.5));
        const long last = static_cast<long>(std::ceil(xs[k + 1] * kSupersample - 0.5)) - 1;
        for (long t = std::max(first, 0L); t <= std::min(last, static_cast<long>(width) * kSupersample - 1); ++t) {
          ++hits[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(t / kSupersample)];
        }
      }
    }
  }
  double mass = 0, mx = 0, my = 0;
  for (int y = row0; y <= row1; ++y) {
    for (int x = 0; x < width; ++x) {
      const int h = hits[static_cast<std::size_t>(y) * width + x];
      if (h == 0) continue;
      const float cov = static_cast<float>(h) / (kSupersample * kSupersample);
      float& dst = alpha[static_cast<std::size_t>(y) * width + x];
      dst = std::max(dst, cov);
      mass += cov;
      mx += cov * (x + 0.5);
      my += cov * (y + 0.5);
    }
  }
  if (mass == 0) return {s.center_x, s.center_y};
  return {mx / mass, my / mass};
}

}  // namespace

SpriteCatalog::SpriteCatalog(std::vector<Polygon> shapes) : shapes_(std::move(shapes)) {
  if (shapes_.empty()) throw ConfigError("sprite catalog is empty");
  for (const auto& p : shapes_) {
    if (p.size() < 3) throw ConfigError("sprite polygon needs at least three vertices");
  }
}

SpriteCatalog SpriteCatalog::irregular(int classes, std::uint64_t seed) {
  if (classes <= 0) throw ConfigError("num_classes must be positive");
  std::vector<Polygon> shapes;
  for (int k = 0; k < classes; ++k) {
    std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(k));
    std::uniform_real_distribution<double> radius(0.25, 1.0);
    std::uniform_real_distribution<double> wobble(-0.25, 0.25);
    const int n = 3 + k % 5;
    Polygon poly;
    for (int i = 0; i < n; ++i) {
      const double a = 2 * std::numbers::pi * (i + 0.5 + wobble(rng)) / n;
      const double r = radius(rng);
      poly.push_back({r * std::cos(a), r * std::sin(a)});
    }
    shapes.push_back(std::move(poly));
  }
  return SpriteCatalog(std::move(shapes));
}

const Polygon& SpriteCatalog::shape(int class_id) const {
  if (class_id < 0 || class_id >= size()) throw ConfigError("class id " + std::to_string(class_id) + " out of range");
  return shapes_[static_cast<std::size_t>(class_id)];
}

std::array<std::array<double, 3>, 3> hue_rotation(double turns) {
  const double phi = 2 * std::numbers::pi * turns;
  const double c = std::cos(phi);
  const double s = std::sin(phi);
  const double k = 1.0 / std::sqrt(3.0);
  const double t = (1 - c) * k * k;
  return {{{c + t, t - s * k, t + s * k}, {t + s * k, c + t, t - s * k}, {t - s * k, t + s * k, c + t}}};
}

std::array<double, 3> sprite_color(double hue) {
  const auto r = hue_rotation(hue);
  const double base[3] = {2 * kChroma / std::sqrt(6.0), -kChroma / std::sqrt(6.0), -kChroma / std::sqrt(6.0)};
  std::array<double, 3> out{};
  for (int i = 0; i < 3; ++i) {
    out[i] = kSpriteLuminance;
    for (int j = 0; j < 3; ++j) out[i] += r[i][j] * base[j];
  }
  return out;
}

SceneRender render_scene(const std::vector<SpritePlacement>& sprites, const SpriteCatalog& catalog, int width,
                         int height) {
  if (width <= 0 || height <= 0) throw ConfigError("render size must be positive");
  SceneRender out;
  out.image = Image(3, height, width, static_cast<float>(kBackgroundGray));
  out.coverage.assign(static_cast<std::size_t>(width) * height, 0.0f);
  std::vector<float> alpha(out.coverage.size());
  for (const auto& s : sprites) {
    std::fill(alpha.begin(), alpha.end(), 0.0f);
    out.centroids.push_back(rasterize(s, catalog.shape(s.latents.class_id), width, height, alpha));
    const auto color = sprite_color(s.latents.hue);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * width + x;
        const float a = alpha[i];
        if (a == 0.0f) continue;
        for (int ch = 0; ch < 3; ++ch) {
          float& px = out.image.at(ch, y, x);
          px = static_cast<float>(a * color[ch] + (1 - a) * px);
        }
        out.coverage[i] = std::max(out.coverage[i], a);
      }
    }
  }

  if (!sprites.empty()) {
    const auto& l = sprites.front().latents;
    if (l.saturation != 1 || l.contrast != 1 || l.brightness != 1) {
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          double rgb[3];
          for (int ch = 0; ch < 3; ++ch) rgb[ch] = out.image.at(ch, y, x);
          const double gray = (rgb[0] + rgb[1] + rgb[2]) / 3;
          for (int ch = 0; ch < 3; ++ch) {
            double v = gray + l.saturation * (rgb[ch] - gray);
            v = 0.5 + l.contrast * (v - 0.5);
            v *= l.brightness;
            out.image.at(ch, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      }
    }
    if (l.blur_sigma > 0) out.image = gaussian_blur(out.image, l.blur_sigma);
  }
  return out;
}

namespace {

SpritePlacement centered(const SpriteLatents& l, int resolution) {
  return {l, (0.5 + l.pos_x) * resolution, (0.5 + l.pos_y) * resolution, kSpriteRadius * l.scale * resolution};
}

}  // namespace

Image render_sprite(const SpriteLatents& latents, int resolution, const SpriteCatalog& catalog) {
  return render_scene({centered(latents, resolution)}, catalog, resolution, resolution).image;
}

std::vector<float> sprite_coverage(const SpriteLatents& latents, int resolution, const SpriteCatalog& catalog) {
  return render_scene({centered(latents, resolution)}, catalog, resolution, resolution).coverage;
}

}  // namespace seqjepa
