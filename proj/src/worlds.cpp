// SPDX-License-Identifier: Apache-2.0

#include "seqjepa/worlds.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "seqjepa/errors.hpp"

namespace seqjepa {
namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Redraws the latent factors that an action kind acts on.
void redraw(ActionKind kind, Rng& rng, SpriteLatents& l, int resolution) {
  switch (kind) {
    case ActionKind::rotation_quat:
      l.angle = uniform(rng, -std::numbers::pi / 2, std::numbers::pi / 2);
      break;
    case ActionKind::hue_delta:
      l.hue = uniform(rng, 0.0, 1.0);
      break;
    case ActionKind::position_delta:
      l.pos_x = uniform(rng, -0.25, 0.25);
      l.pos_y = uniform(rng, -0.25, 0.25);
      break;
    case ActionKind::crop_params:
      l.pos_x = uniform(rng, -0.25, 0.25);
      l.pos_y = uniform(rng, -0.25, 0.25);
      l.scale = uniform(rng, 0.8, 1.2);
      l.aspect = uniform(rng, 0.8, 1.25);
      break;
    case ActionKind::jitter_params:
      l.brightness = uniform(rng, 0.7, 1.3);
      l.contrast = uniform(rng, 0.7, 1.3);
      l.saturation = uniform(rng, 0.5, 1.5);
      l.hue = uniform(rng, 0.0, 1.0);
      break;
    case ActionKind::blur_param:
      l.blur_sigma = uniform(rng, 0.0, 0.03 * resolution);
      break;
    case ActionKind::saccade:
      throw CodecError("saccade actions do not apply to the sprite world");
  }
}

SpriteLatents draw_base(Rng& rng, int classes) {
  SpriteLatents l;
  l.class_id = std::uniform_int_distribution<int>(0, classes - 1)(rng);
  l.angle = uniform(rng, -std::numbers::pi / 2, std::numbers::pi / 2);
  l.hue = uniform(rng, 0.0, 1.0);
  l.pos_x = uniform(rng, -0.25, 0.25);
  l.pos_y = uniform(rng, -0.25, 0.25);
  l.scale = uniform(rng, 0.8, 1.2);
  return l;
}

void add_noise(Image& img, double std, Rng& rng) {
  if (std <= 0) return;
  std::normal_distribution<double> n(0.0, std);
  for (float& p : img.pixels) p = static_cast<float>(std::clamp(p + n(rng), 0.0, 1.0));
}

Image render_view(const SpriteLatents& l, const SpriteWorldOptions& opts, const SpriteCatalog& catalog, Rng& rng) {
  Image img = render_sprite(l, opts.resolution, catalog);
  add_noise(img, opts.noise_std, rng);
  return img;
}

Image crop_at(const Image& scene, const Fixation& f, int patch) {
  const int col = static_cast<int>(std::floor(f.x));
  const int row = static_cast<int>(std::floor(f.y));
  return crop(scene, col - patch / 2, row - patch / 2, patch);
}

/// Saliency restricted to centres whose patch stays inside the image,
/// falling back to uniform over that window when it carries no mass.
SaliencyMap valid_centres(const SaliencyMap& map, int patch) {
  const int half = patch / 2;
  const int x1 = map.width - patch + half + 1;
  const int y1 = map.height - patch + half + 1;
  if (x1 <= half || y1 <= half) throw ConfigError("patch_size exceeds the image");
  SaliencyMap out = restrict_to_window(map, half, half, x1, y1);
  if (!(out.total() > 0)) {
    for (int y = half; y < y1; ++y) {
      for (int x = half; x < x1; ++x) out.values[static_cast<std::size_t>(y) * out.width + x] = 1.0f;
    }
  }
  return out.normalized_copy();
}

std::vector<ActionKind> parse_kinds(const std::string& text) {
  std::vector<ActionKind> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    std::string item = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    item.erase(0, item.find_first_not_of(' '));
    item.erase(item.find_last_not_of(' ') + 1);
    try {
      out.push_back(parse_action_kind(item));
    } catch (const CodecError& e) {
      throw ConfigError(std::string("action_kinds: ") + e.what());
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

std::string_view to_string(WorldKind kind) { return kind == WorldKind::sprite ? "sprite" : "saccade"; }

Action relative_action(const ViewLatents& from, const ViewLatents& to, ActionKind kind) {
  if (from.world != to.world) throw CodecError("relative_action: latents come from different worlds");
  if ((from.world == WorldKind::saccade) != (kind == ActionKind::saccade)) {
    throw CodecError("relative_action: kind " + std::string(to_string(kind)) + " does not apply to the " +
                     std::string(to_string(from.world)) + " world");
  }
  const SpriteLatents& a = from.sprite;
  const SpriteLatents& b = to.sprite;
  Action out{kind, {}};
  switch (kind) {
    case ActionKind::rotation_quat: {
      // q_to * q_from^-1; for two z-axis rotations this is the z-axis
      // rotation by the angle difference, which keeps t -> t exactly identity.
      const Quaternion q = Quaternion::planar(b.angle - a.angle);
      const auto v = q.values();
      out.values.assign(v.begin(), v.end());
      break;
    }
    case ActionKind::hue_delta:
      out.values = {wrap_hue(b.hue - a.hue)};
      break;
    case ActionKind::position_delta:
      out.values = {b.pos_x - a.pos_x, b.pos_y - a.pos_y};
      break;
    case ActionKind::crop_params:
      out.values = {b.pos_y - a.pos_y, b.pos_x - a.pos_x, b.scale - a.scale, b.scale * b.aspect - a.scale * a.aspect};
      break;
    case ActionKind::jitter_params:
      out.values = {b.brightness - a.brightness, b.contrast - a.contrast, b.saturation - a.saturation,
                    wrap_hue(b.hue - a.hue)};
      break;
    case ActionKind::blur_param:
      out.values = {b.blur_sigma - a.blur_sigma};
      break;
    case ActionKind::saccade:
      if (!(from.extent_x > 0 && from.extent_y > 0) || from.extent_x != to.extent_x || from.extent_y != to.extent_y) {
        throw CodecError("relative_action: saccade latents need a common positive extent");
      }
      out.values = {(to.fixation.x - from.fixation.x) / from.extent_x, (to.fixation.y - from.fixation.y) / from.extent_y};
      break;
  }
  return out;
}

ActionTuple relative_tuple(const ViewLatents& from, const ViewLatents& to, const std::vector<ActionKind>& kinds) {
  ActionTuple t;
  t.reserve(kinds.size());
  for (ActionKind k : kinds) t.push_back(relative_action(from, to, k));
  return t;
}

namespace {

void fill_actions(Episode& ep) {
  const int M = static_cast<int>(ep.latents.size()) - 1;
  ep.actions.clear();
  for (int i = 0; i < M; ++i) ep.actions.push_back(relative_tuple(ep.latents[i], ep.latents[i + 1], ep.kinds));
  ep.cumulative_action = relative_tuple(ep.latents.front(), ep.latents.back(), ep.kinds);
}

}  // namespace

Episode sample_episode_sprite(Rng& rng, int M, const SpriteWorldOptions& opts, const SpriteCatalog& catalog) {
  if (M < 1) throw ConfigError("episode length M must be at least 1");
  if (opts.kinds.empty()) throw ConfigError("sprite world needs at least one action kind");
  Episode ep;
  ep.kinds = opts.kinds;
  const SpriteLatents base = draw_base(rng, catalog.size());
  ep.class_id = base.class_id;
  for (int i = 0; i <= M; ++i) {
    ViewLatents v;
    v.world = WorldKind::sprite;
    v.sprite = base;
    for (ActionKind k : opts.kinds) redraw(k, rng, v.sprite, opts.resolution);
    v.extent_x = v.extent_y = opts.resolution;
    ep.views.push_back(render_view(v.sprite, opts, catalog, rng));
    ep.latents.push_back(v);
  }
  fill_actions(ep);
  return ep;
}

Episode sample_episode_saccade(const Image& image, const SaliencyMap& map, Rng& rng, int M,
                               const SaccadeOptions& opts) {
  if (M < 1) throw ConfigError("episode length M must be at least 1");
  if (map.height != image.height || map.width != image.width) {
    throw ConfigError("saliency map shape does not match the image");
  }
  const SaliencyMap base = valid_centres(map, opts.patch_size);
  Episode ep;
  ep.kinds = {ActionKind::saccade};
  std::vector<Fixation> fixations;
  for (int i = 0; i <= M; ++i) {
    const SaliencyMap current = opts.use_ior ? apply_ior(base, fixations, opts.ior_radius) : base;
    const Fixation f = saliency_sample_fixation(current, rng);
    fixations.push_back(f);
    ViewLatents v;
    v.world = WorldKind::saccade;
    v.fixation = f;
    v.extent_x = image.width;
    v.extent_y = image.height;
    ep.latents.push_back(v);
    ep.views.push_back(crop_at(image, f, opts.patch_size));
  }
  fill_actions(ep);
  return ep;
}

// ---------------------------------------------------------------------------
// WorldConfig

void WorldConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& msg) { throw ConfigError(key + ": " + msg); };
  if (num_classes < 2) fail("num_classes", "must be at least 2");
  if (kind == WorldKind::sprite) {
    if (resolution < 8) fail("resolution", "must be at least 8");
    if (kinds.empty()) fail("action_kinds", "must name at least one kind");
    for (std::size_t i = 0; i < kinds.size(); ++i) {
      if (kinds[i] == ActionKind::saccade) fail("action_kinds", "saccade applies only to the saccade world");
      for (std::size_t j = 0; j < i; ++j) {
        if (kinds[i] == kinds[j]) fail("action_kinds", "duplicate kind");
      }
    }
    if (noise_std < 0) fail("noise_std", "must be non-negative");
  } else {
    if (patch_size < 4 || patch_size > image_size) fail("patch_size", "must lie in [4, image_size]");
    if (!(ior_radius > 0)) fail("ior_radius", "must be positive");
    if (sprites_per_scene < 1) fail("sprites_per_scene", "must be positive");
    if (!(saliency_sigma > 0)) fail("saliency_sigma", "must be positive");
    if (saliency_floor < 0 || saliency_floor > 1) fail("saliency_floor", "must lie in [0, 1]");
  }
}

std::vector<std::string> WorldConfig::keys() {
  return {"world", "num_classes", "catalog_seed", "resolution", "action_kinds", "noise_std", "image_size",
          "patch_size", "ior_radius", "use_ior", "sprites_per_scene", "saliency_sigma", "saliency_floor",
          "uniform_saliency"};
}

void WorldConfig::write(KeyValueConfig& kv) const {
  kv.set("world", std::string(to_string(kind)));
  kv.set("num_classes", std::to_string(num_classes));
  kv.set("catalog_seed", std::to_string(catalog_seed));
  if (kind == WorldKind::sprite) {
    kv.set("resolution", std::to_string(resolution));
    std::string ks;
    for (std::size_t i = 0; i < kinds.size(); ++i) ks += (i ? "," : "") + std::string(to_string(kinds[i]));
    kv.set("action_kinds", ks);
    kv.set("noise_std", fmt(noise_std));
  } else {
    kv.set("image_size", std::to_string(image_size));
    kv.set("patch_size", std::to_string(patch_size));
    kv.set("ior_radius", fmt(ior_radius));
    kv.set("use_ior", use_ior ? "true" : "false");
    kv.set("sprites_per_scene", std::to_string(sprites_per_scene));
    kv.set("saliency_sigma", fmt(saliency_sigma));
    kv.set("saliency_floor", fmt(saliency_floor));
    kv.set("uniform_saliency", uniform_saliency ? "true" : "false");
  }
}

WorldConfig WorldConfig::read(const KeyValueConfig& kv) {
  WorldConfig c;
  const auto w = kv.get_string("world", "sprite");
  if (w == "sprite") {
    c.kind = WorldKind::sprite;
  } else if (w == "saccade") {
    c.kind = WorldKind::saccade;
    c.kinds = {ActionKind::saccade};
  } else {
    throw ConfigError("world: expected sprite or saccade, got '" + w + "'");
  }
  c.num_classes = static_cast<int>(kv.get_int("num_classes", c.num_classes));
  c.catalog_seed = static_cast<std::uint64_t>(kv.get_int("catalog_seed", static_cast<std::int64_t>(c.catalog_seed)));
  c.resolution = static_cast<int>(kv.get_int("resolution", c.resolution));
  if (c.kind == WorldKind::sprite) {
    if (const auto ks = kv.get("action_kinds")) c.kinds = parse_kinds(*ks);
  }
  c.noise_std = kv.get_double("noise_std", c.noise_std);
  c.image_size = static_cast<int>(kv.get_int("image_size", c.image_size));
  c.patch_size = static_cast<int>(kv.get_int("patch_size", c.patch_size));
  c.ior_radius = kv.get_double("ior_radius", c.ior_radius);
  c.use_ior = kv.get_bool("use_ior", c.use_ior);
  c.sprites_per_scene = static_cast<int>(kv.get_int("sprites_per_scene", c.sprites_per_scene));
  c.saliency_sigma = kv.get_double("saliency_sigma", c.saliency_sigma);
  c.saliency_floor = kv.get_double("saliency_floor", c.saliency_floor);
  c.uniform_saliency = kv.get_bool("uniform_saliency", c.uniform_saliency);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Saccade scenes and the World facade

SaccadeScene sample_saccade_scene(const WorldConfig& cfg, const SpriteCatalog& catalog, Rng& rng) {
  const int size = cfg.image_size;
  SaccadeScene out;
  out.class_id = std::uniform_int_distribution<int>(0, catalog.size() - 1)(rng);
  std::vector<SpritePlacement> sprites;
  for (int k = 0; k < cfg.sprites_per_scene; ++k) {
    SpritePlacement p;
    p.latents.class_id = out.class_id;
    p.latents.angle = uniform(rng, -std::numbers::pi / 2, std::numbers::pi / 2);
    p.latents.hue = uniform(rng, 0.0, 1.0);
    p.latents.scale = uniform(rng, 0.8, 1.2);
    p.center_x = uniform(rng, 0.15, 0.85) * size;
    p.center_y = uniform(rng, 0.15, 0.85) * size;
    p.radius = 0.11 * p.latents.scale * size;
    sprites.push_back(p);
  }
  SceneRender r = render_scene(sprites, catalog, size, size);
  out.image = std::move(r.image);
  out.saliency = cfg.uniform_saliency
                     ? SaliencyMap::uniform(size, size)
                     : synthetic_saliency(r.centroids, size, size, cfg.saliency_sigma, cfg.saliency_floor);
  return out;
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
  return std::mt19937_64(seq);
}

World::World(WorldConfig cfg)
    : cfg_(std::move(cfg)), catalog_(SpriteCatalog::irregular(cfg_.num_classes, cfg_.catalog_seed)) {
  if (cfg_.kind == WorldKind::saccade) cfg_.kinds = {ActionKind::saccade};
  cfg_.validate();
  kinds_ = cfg_.kinds;
}

int World::action_dim() const { return tuple_width(kinds_); }
int World::view_height() const { return cfg_.kind == WorldKind::sprite ? cfg_.resolution : cfg_.patch_size; }
int World::view_width() const { return view_height(); }

Episode World::sample(std::uint64_t seed, std::uint64_t stream, int M, bool keep_scene, int attempt) const {
  const std::uint64_t salt = 4 * static_cast<std::uint64_t>(attempt);
  Episode ep;
  if (cfg_.kind == WorldKind::sprite) {
    Rng rng = stream_rng(seed, stream, salt);
    ep = sample_episode_sprite(rng, M, {cfg_.resolution, kinds_, cfg_.noise_std}, catalog_);
  } else {
    Rng scene_rng = stream_rng(seed, stream, salt);
    SaccadeScene scene = sample_saccade_scene(cfg_, catalog_, scene_rng);
    Rng rng = stream_rng(seed, stream, salt + 1);
    ep = sample_episode_saccade(scene.image, scene.saliency, rng, M, {cfg_.patch_size, cfg_.ior_radius, cfg_.use_ior});
    ep.class_id = scene.class_id;
    if (keep_scene) {
      ep.scene = std::move(scene.image);
      ep.saliency = std::move(scene.saliency);
    }
  }
  ep.seed = seed;
  ep.source_id = stream;
  ep.attempt = attempt;
  return ep;
}

std::vector<Image> World::distractors(const Episode& ep, std::uint64_t seed, int count) const {
  Rng rng = stream_rng(seed, ep.source_id, 4 * static_cast<std::uint64_t>(ep.attempt) + 2);
  std::vector<Image> out;
  out.reserve(static_cast<std::size_t>(count));
  if (cfg_.kind == WorldKind::sprite) {
    const SpriteWorldOptions opts{cfg_.resolution, kinds_, cfg_.noise_std};
    for (int i = 0; i < count; ++i) {
      SpriteLatents l = ep.latents.front().sprite;
      for (ActionKind k : kinds_) redraw(k, rng, l, cfg_.resolution);
      out.push_back(render_view(l, opts, catalog_, rng));
    }
  } else {
    Rng scene_rng = stream_rng(ep.seed, ep.source_id, 4 * static_cast<std::uint64_t>(ep.attempt));
    const SaccadeScene scene = sample_saccade_scene(cfg_, catalog_, scene_rng);
    const SaliencyMap map = valid_centres(scene.saliency, cfg_.patch_size);
    for (int i = 0; i < count; ++i) out.push_back(crop_at(scene.image, saliency_sample_fixation(map, rng), cfg_.patch_size));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episode dump

namespace {

std::string action_text(const Action& a) {
  std::string s = std::string(to_string(a.kind)) + " =";
  for (double v : a.values) s += " " + fmt(v);
  return s;
}

void mark(Image& img, double fx, double fy, int half, const std::array<float, 3>& color) {
  const int cx = static_cast<int>(std::floor(fx));
  const int cy = static_cast<int>(std::floor(fy));
  auto put = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[c];
  };
  for (int d = -2; d <= 2; ++d) {
    put(cx + d, cy);
    put(cx, cy + d);
  }
  for (int d = -half; d < half; ++d) {
    put(cx + d, cy - half);
    put(cx + d, cy + half - 1);
    put(cx - half, cy + d);
    put(cx + half - 1, cy + d);
  }
}

}  // namespace

void write_episode_dump(const Episode& ep, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  char name[32];
  for (std::size_t i = 0; i < ep.views.size(); ++i) {
    std::snprintf(name, sizeof name, "view_%02zu.ppm", i);
    write_ppm(ep.views[i], (fs::path(dir) / name).string());
  }
  std::ofstream out(fs::path(dir) / "episode.txt");
  if (!out) throw Error("cannot write episode record in '" + dir + "'");
  out << "source_id = " << ep.source_id << "\n";
  out << "seed = " << ep.seed << "\n";
  out << "class_id = " << ep.class_id << "\n";
  out << "M = " << ep.length() << "\n";
  for (std::size_t i = 0; i < ep.latents.size(); ++i) {
    const ViewLatents& v = ep.latents[i];
    out << "view " << i << ":";
    if (v.world == WorldKind::sprite) {
      const SpriteLatents& s = v.sprite;
      out << " class=" << s.class_id << " angle=" << fmt(s.angle) << " hue=" << fmt(s.hue) << " pos_x=" << fmt(s.pos_x)
          << " pos_y=" << fmt(s.pos_y) << " scale=" << fmt(s.scale) << " aspect=" << fmt(s.aspect)
          << " brightness=" << fmt(s.brightness) << " contrast=" << fmt(s.contrast)
          << " saturation=" << fmt(s.saturation) << " blur_sigma=" << fmt(s.blur_sigma);
    } else {
      out << " fixation_x=" << fmt(v.fixation.x) << " fixation_y=" << fmt(v.fixation.y);
    }
    out << "\n";
  }
  for (std::size_t i = 0; i < ep.actions.size(); ++i) {
    for (const Action& a : ep.actions[i]) out << "action " << i << ": " << action_text(a) << "\n";
  }
  for (const Action& a : ep.cumulative_action) out << "cumulative: " << action_text(a) << "\n";

  if (!ep.scene.pixels.empty()) {
    write_ppm(ep.scene, (fs::path(dir) / "scene.ppm").string());
    Image overlay = ep.scene;
    if (!ep.saliency.values.empty()) {
      float peak = 0;
      for (float v : ep.saliency.values) peak = std::max(peak, v);
      for (int y = 0; y < overlay.height; ++y) {
        for (int x = 0; x < overlay.width; ++x) {
          const float s = peak > 0 ? ep.saliency.at(y, x) / peak : 0.0f;
          overlay.at(0, y, x) = 0.6f * overlay.at(0, y, x) + 0.4f * s;
        }
      }
    }
    const int half = ep.views.empty() ? 0 : ep.views.front().width / 2;
    for (std::size_t i = 0; i < ep.latents.size(); ++i) {
      const float t = ep.latents.size() > 1 ? static_cast<float>(i) / static_cast<float>(ep.latents.size() - 1) : 0;
      mark(overlay, ep.latents[i].fixation.x, ep.latents[i].fixation.y, half, {1.0f - t, t, 1.0f});
    }
    write_ppm(overlay, (fs::path(dir) / "overlay.ppm").string());
  }
}

}  // namespace seqjepa
