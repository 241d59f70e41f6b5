// SPDX-License-Identifier: Apache-2.0

#include "seqjepa/saliency.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "seqjepa/errors.hpp"

namespace seqjepa {

SaliencyMap SaliencyMap::uniform(int height, int width) {
  SaliencyMap m;
  m.height = height;
  m.width = width;
  m.values.assign(static_cast<std::size_t>(height) * width, 1.0f / static_cast<float>(height * width));
  m.normalized = true;
  return m;
}

double SaliencyMap::total() const {
  double t = 0;
  for (float v : values) t += v;
  return t;
}

SaliencyMap SaliencyMap::normalized_copy() const {
  const double t = total();
  if (!(t > 0)) throw SamplingError("saliency map has no mass");
  SaliencyMap out = *this;
  for (float& v : out.values) v = static_cast<float>(v / t);
  out.normalized = true;
  return out;
}

Fixation saliency_sample_fixation(const SaliencyMap& map, std::mt19937_64& rng) {
  std::vector<double> cdf(map.values.size());
  double acc = 0;
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    if (map.values[i] < 0) throw SamplingError("negative saliency");
    acc += map.values[i];
    cdf[i] = acc;
  }
  if (!(acc > 0)) throw SamplingError("cannot sample from an all-zero saliency map");
  std::uniform_real_distribution<double> u(0.0, acc);
  double r = u(rng);
  auto it = std::upper_bound(cdf.begin(), cdf.end(), r);
  // Skip zero-mass cells that share the boundary value.
  while (it != cdf.end() && map.values[static_cast<std::size_t>(it - cdf.begin())] == 0.0f) ++it;
  if (it == cdf.end()) it = std::prev(cdf.end());
  const auto idx = static_cast<int>(it - cdf.begin());
  return {idx % map.width + 0.5, idx / map.width + 0.5};
}

SaliencyMap apply_ior(const SaliencyMap& map, std::span<const Fixation> fixations, double radius) {
  if (!(radius > 0)) throw ConfigError("ior radius must be positive");
  if (fixations.empty()) return map;
  SaliencyMap out = map;
  std::vector<char> masked(map.values.size(), 0);
  const double r2 = radius * radius;
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      for (const auto& f : fixations) {
        const double dx = x + 0.5 - f.x;
        const double dy = y + 0.5 - f.y;
        if (dx * dx + dy * dy <= r2) {
          masked[static_cast<std::size_t>(y) * map.width + x] = 1;
          break;
        }
      }
    }
  }
  double remaining = 0;
  std::size_t open = 0;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    if (masked[i]) out.values[i] = 0.0f;
    else ++open;
    remaining += out.values[i];
  }
  if (open == 0) throw ExhaustedSaliencyError("inhibition of return masked every cell");
  if (remaining > 0) {
    for (float& v : out.values) v = static_cast<float>(v / remaining);
  } else {
    const float w = 1.0f / static_cast<float>(open);
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = masked[i] ? 0.0f : w;
  }
  out.normalized = true;
  return out;
}

SaliencyMap restrict_to_window(const SaliencyMap& map, int x0, int y0, int x1, int y1) {
  SaliencyMap out = map;
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      if (x < x0 || x >= x1 || y < y0 || y >= y1) out.values[static_cast<std::size_t>(y) * map.width + x] = 0.0f;
    }
  }
  out.normalized = false;
  return out;
}

SaliencyMap synthetic_saliency(std::span<const std::array<double, 2>> centres, int width, int height,
                               double sigma_fraction, double floor) {
  if (width <= 0 || height <= 0) throw ConfigError("saliency size must be positive");
  if (floor < 0 || floor > 1) throw ConfigError("saliency floor must lie in [0, 1]");
  const double sigma = sigma_fraction * width;
  std::vector<double> mix(static_cast<std::size_t>(width) * height, 0.0);
  double total = 0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double v = 0;
      for (const auto& c : centres) {
        const double dx = x + 0.5 - c[0];
        const double dy = y + 0.5 - c[1];
        v += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      }
      mix[static_cast<std::size_t>(y) * width + x] = v;
      total += v;
    }
  }
  const double n = static_cast<double>(mix.size());
  SaliencyMap m;
  m.height = height;
  m.width = width;
  m.values.resize(mix.size());
  for (std::size_t i = 0; i < mix.size(); ++i) {
    const double g = total > 0 ? mix[i] / total : 1.0 / n;
    m.values[i] = static_cast<float>((1 - floor) * g + floor / n);
  }
  return m.normalized_copy();
}

namespace {

constexpr char kMagic[4] = {'S', 'A', 'L', 'G'};

template <typename U>
void put_le(std::ostream& out, U value) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get_le(std::istream& in, const std::string& path) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw FormatError("'" + path + "': truncated header");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes[i]) << (8 * i));
  return v;
}

}  // namespace

void write_grid(const RawGrid& grid, const std::string& path) {
  if (grid.values.size() != grid.rows * grid.cols) throw ConfigError("grid value count does not match shape");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out.write(kMagic, 4);
  put_le<std::uint16_t>(out, kGridFormatVersion);
  put_le<std::uint64_t>(out, grid.rows);
  put_le<std::uint64_t>(out, grid.cols);
  for (float v : grid.values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  if (!out) throw Error("short write to '" + path + "'");
}

RawGrid read_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("'" + path + "': bad magic");
  const auto version = get_le<std::uint16_t>(in, path);
  if (version != kGridFormatVersion) throw FormatError("'" + path + "': unsupported version " + std::to_string(version));
  RawGrid g;
  g.rows = get_le<std::uint64_t>(in, path);
  g.cols = get_le<std::uint64_t>(in, path);
  if (g.rows == 0 || g.cols == 0 || g.rows > (1ULL << 32) || g.cols > (1ULL << 32)) {
    throw FormatError("'" + path + "': implausible grid shape");
  }
  const std::uint64_t n = g.rows * g.cols;
  std::vector<unsigned char> raw(static_cast<std::size_t>(n) * 4);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError("'" + path + "': truncated data");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("'" + path + "': trailing bytes");
  g.values.resize(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(raw[i * 4 + b]) << (8 * b);
    g.values[i] = std::bit_cast<float>(bits);
  }
  return g;
}

void save_saliency(const SaliencyMap& map, const std::string& path) {
  write_grid({static_cast<std::uint64_t>(map.height), static_cast<std::uint64_t>(map.width), map.values}, path);
}

SaliencyMap load_saliency(const std::string& path) {
  const RawGrid g = read_grid(path);
  for (float v : g.values) {
    if (std::isnan(v) || std::isinf(v)) throw FormatError("'" + path + "': non-finite saliency value");
    if (v < 0) throw FormatError("'" + path + "': negative saliency value");
  }
  SaliencyMap m;
  m.height = static_cast<int>(g.rows);
  m.width = static_cast<int>(g.cols);
  m.values = g.values;
  if (!(m.total() > 0)) throw FormatError("'" + path + "': saliency map has no mass");
  return m.normalized_copy();
}

}  // namespace seqjepa
