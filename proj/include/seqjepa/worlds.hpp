// SPDX-License-Identifier: Apache-2.0
//
// Synthetic action-observation worlds. The sprite world varies a single
// sprite's latent factors between views; the saccade world crops patches
// from a multi-sprite scene at saliency-sampled fixations with inhibition
// of return. Both produce episodes of M+1 views and M relative actions.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "seqjepa/action.hpp"
#include "seqjepa/config.hpp"
#include "seqjepa/image.hpp"
#include "seqjepa/saliency.hpp"
#include "seqjepa/sprite.hpp"

namespace seqjepa {

enum class WorldKind { sprite, saccade };

std::string_view to_string(WorldKind kind);

/// Ground truth behind one view.
struct ViewLatents {
  WorldKind world = WorldKind::sprite;
  SpriteLatents sprite;  // sprite world only
  Fixation fixation;     // saccade world only, pixels in the scene
  double extent_x = 0;   // scene size used to normalize displacements
  double extent_y = 0;

  bool operator==(const ViewLatents& o) const {
    return world == o.world && sprite == o.sprite && fixation.x == o.fixation.x && fixation.y == o.fixation.y &&
           extent_x == o.extent_x && extent_y == o.extent_y;
  }
};

/// The action of `kind` carrying view `from` to view `to`. Throws
/// CodecError when the latents belong to different worlds or the kind does
/// not apply to them.
Action relative_action(const ViewLatents& from, const ViewLatents& to, ActionKind kind);
ActionTuple relative_tuple(const ViewLatents& from, const ViewLatents& to, const std::vector<ActionKind>& kinds);

struct Episode {
  std::vector<Image> views;                 // M+1
  std::vector<ActionTuple> actions;         // M; actions[i] maps views[i] to views[i+1]
  std::vector<ViewLatents> latents;         // M+1
  ActionTuple cumulative_action;            // views[0] -> views[M]
  std::vector<ActionKind> kinds;
  std::uint64_t seed = 0;  // world seed the episode was drawn under
  std::uint64_t source_id = 0;
  int attempt = 0;  // resampling attempt after an exhausted saliency map
  int class_id = 0;
  // Saccade world, filled on request: the full scene and its saliency.
  Image scene;
  SaliencyMap saliency;

  int length() const { return static_cast<int>(actions.size()); }
};

struct SpriteWorldOptions {
  int resolution = 64;
  std::vector<ActionKind> kinds{ActionKind::rotation_quat};
  /// Std of additive Gaussian pixel noise applied to each view (0 = off).
  double noise_std = 0;
};

/// One base sprite, then M+1 draws of the conditioned factors only.
Episode sample_episode_sprite(std::mt19937_64& rng, int M, const SpriteWorldOptions& opts,
                              const SpriteCatalog& catalog);

struct SaccadeOptions {
  int patch_size = 32;
  double ior_radius = 16;
  bool use_ior = true;
};

/// M+1 fixations drawn from `map` (masked by inhibition of return between
/// draws) and restricted to centres whose patch stays inside the image.
/// Throws ExhaustedSaliencyError when the support runs out.
Episode sample_episode_saccade(const Image& image, const SaliencyMap& map, std::mt19937_64& rng, int M,
                               const SaccadeOptions& opts);

struct WorldConfig {
  WorldKind kind = WorldKind::sprite;
  int num_classes = 10;
  std::uint64_t catalog_seed = 0x5eed;
  // sprite world
  int resolution = 64;
  std::vector<ActionKind> kinds{ActionKind::rotation_quat};
  double noise_std = 0;
  // saccade world
  int image_size = 96;
  int patch_size = 32;
  double ior_radius = 16;
  bool use_ior = true;
  int sprites_per_scene = 3;
  double saliency_sigma = 1.0 / 8.0;  // fraction of image width
  double saliency_floor = 0.05;
  bool uniform_saliency = false;

  void validate() const;
  void write(KeyValueConfig& kv) const;
  static WorldConfig read(const KeyValueConfig& kv);
  static std::vector<std::string> keys();
};

/// Multi-sprite saccade scene: every sprite shares one class.
struct SaccadeScene {
  Image image;
  SaliencyMap saliency;
  int class_id = 0;
};

SaccadeScene sample_saccade_scene(const WorldConfig& cfg, const SpriteCatalog& catalog, std::mt19937_64& rng);

/// RNG for (seed, stream, salt); stream ids make samples independent of how
/// work is split.
std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t salt = 0);

class World {
 public:
  explicit World(WorldConfig cfg);

  const WorldConfig& config() const { return cfg_; }
  const SpriteCatalog& catalog() const { return catalog_; }
  const std::vector<ActionKind>& kinds() const { return kinds_; }
  int action_dim() const;
  int view_channels() const { return 3; }
  int view_height() const;
  int view_width() const;

  /// Episode with M actions for sample `stream`. Pure in (seed, stream, M,
  /// attempt); a later attempt draws a fresh source for the same stream.
  Episode sample(std::uint64_t seed, std::uint64_t stream, int M, bool keep_scene = false, int attempt = 0) const;

  /// Views of the same source as `ep` under freshly sampled transformations.
  std::vector<Image> distractors(const Episode& ep, std::uint64_t seed, int count) const;

 private:
  WorldConfig cfg_;
  SpriteCatalog catalog_;
  std::vector<ActionKind> kinds_;
};

/// Debug dump: view_NN.ppm per view, episode.txt with labeled latents and
/// actions, and for saccade episodes scene.ppm plus a fixation overlay.
void write_episode_dump(const Episode& ep, const std::string& dir);

}  // namespace seqjepa
