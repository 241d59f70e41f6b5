// SPDX-License-Identifier: Apache-2.0
//
// Saliency maps, fixation sampling and inhibition of return.

#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace seqjepa {

struct SaliencyMap {
  int height = 0;
  int width = 0;
  std::vector<float> values;  // row-major, non-negative
  bool normalized = false;

  static SaliencyMap uniform(int height, int width);
  float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  double total() const;
  /// Throws SamplingError when the map has no mass.
  SaliencyMap normalized_copy() const;
};

/// Continuous pixel coordinates of a cell centre: (col + 0.5, row + 0.5).
struct Fixation {
  double x = 0;
  double y = 0;
};

/// Draws a cell with probability proportional to its value and returns its
/// centre. Throws SamplingError on an all-zero map.
Fixation saliency_sample_fixation(const SaliencyMap& map, std::mt19937_64& rng);

/// Zeroes every cell whose centre lies within `radius` of a prior fixation
/// and renormalizes. When that removes all mass, falls back to uniform over
/// the unmasked cells; throws ExhaustedSaliencyError when none remain.
SaliencyMap apply_ior(const SaliencyMap& map, std::span<const Fixation> fixations, double radius);

/// Zeroes cells whose centre lies outside the window [x0, x1) x [y0, y1).
SaliencyMap restrict_to_window(const SaliencyMap& map, int x0, int y0, int x1, int y1);

/// Isotropic Gaussians (std = sigma_fraction * width) around each centre,
/// mixed with a uniform floor of weight `floor`; normalized.
SaliencyMap synthetic_saliency(std::span<const std::array<double, 2>> centres, int width, int height,
                               double sigma_fraction = 1.0 / 8.0, double floor = 0.05);

/// Raw float grid container: "SALG", u16 version, u64 rows, u64 cols, then
/// rows*cols little-endian float32 values, row-major.
struct RawGrid {
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::vector<float> values;
};

inline constexpr std::uint16_t kGridFormatVersion = 1;

void write_grid(const RawGrid& grid, const std::string& path);
/// Throws FormatError on bad magic, version, or truncation.
RawGrid read_grid(const std::string& path);

void save_saliency(const SaliencyMap& map, const std::string& path);
/// Parses, validates (finite, non-negative, non-empty mass) and normalizes.
SaliencyMap load_saliency(const std::string& path);

}  // namespace seqjepa
