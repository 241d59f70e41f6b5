// SPDX-License-Identifier: Apache-2.0
//
// Deterministic anti-aliased sprite rasterizer. Each class is a fixed
// polygon; latents place, rotate, scale and color it.

#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "seqjepa/image.hpp"

namespace seqjepa {

struct SpriteLatents {
  int class_id = 0;
  double angle = 0;   // radians, sampled in (-pi/2, pi/2)
  double hue = 0;     // [0, 1)
  double pos_x = 0;   // [-0.25, 0.25], fraction of image width
  double pos_y = 0;
  double scale = 1;   // [0.8, 1.2], sprite height factor
  // Augmentation-style parameters; identity by default.
  double aspect = 1;  // width / height
  double brightness = 1;
  double contrast = 1;
  double saturation = 1;
  double blur_sigma = 0;  // pixels

  bool operator==(const SpriteLatents&) const = default;
};

using Polygon = std::vector<std::array<double, 2>>;

/// Class id -> polygon in unit sprite coordinates (radius <= 1).
class SpriteCatalog {
 public:
  /// `classes` irregular polygons with no rotational symmetry.
  static SpriteCatalog irregular(int classes, std::uint64_t seed = 0x5eed);
  explicit SpriteCatalog(std::vector<Polygon> shapes);

  int size() const { return static_cast<int>(shapes_.size()); }
  const Polygon& shape(int class_id) const;

 private:
  std::vector<Polygon> shapes_;
};

/// RGB of a sprite with the given hue: a fixed luminance plus a chroma
/// vector rotated about the gray axis by 2*pi*hue.
std::array<double, 3> sprite_color(double hue);

/// Rotation about the gray axis (1,1,1)/sqrt(3) by 2*pi*turns, row-major.
std::array<std::array<double, 3>, 3> hue_rotation(double turns);

inline constexpr double kBackgroundGray = 0.35;
/// Sprite height radius as a fraction of the resolution at scale 1.
inline constexpr double kSpriteRadius = 0.3;

struct SpritePlacement {
  SpriteLatents latents;
  double center_x = 0;  // pixels
  double center_y = 0;
  double radius = 0;  // pixels, sprite height radius
};

struct SceneRender {
  Image image;
  std::vector<float> coverage;  // union of sprite coverage, height x width
  std::vector<std::array<double, 2>> centroids;  // per-sprite coverage centroid (x, y), pixels
};

/// Renders sprites in order over a gray background (later ones on top).
/// Appearance parameters of the first sprite apply to the whole frame.
SceneRender render_scene(const std::vector<SpritePlacement>& sprites, const SpriteCatalog& catalog, int width,
                         int height);

/// Single sprite centred at (0.5 + pos) * resolution with radius
/// kSpriteRadius * scale * resolution.
Image render_sprite(const SpriteLatents& latents, int resolution, const SpriteCatalog& catalog);
std::vector<float> sprite_coverage(const SpriteLatents& latents, int resolution, const SpriteCatalog& catalog);

}  // namespace seqjepa
