// SPDX-License-Identifier: Apache-2.0
//
// Typed relative transformations and their codecs. An action maps one view
// to the next; compose() chains them in order so that the composite of
// a_1..a_M maps view 1 directly to view M+1.

#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace seqjepa {

/// Unit quaternion (w, x, y, z) acting on 3-vectors.
struct Quaternion {
  double w = 1, x = 0, y = 0, z = 0;

  static Quaternion from_axis_angle(double ax, double ay, double az, double angle);
  /// Rotation by `angle` about the z axis: (cos a/2, 0, 0, sin a/2).
  static Quaternion planar(double angle) { return from_axis_angle(0, 0, 1, angle); }

  Quaternion operator*(const Quaternion& o) const;
  Quaternion conjugate() const { return {w, -x, -y, -z}; }
  double norm() const;
  Quaternion normalized() const;
  std::array<std::array<double, 3>, 3> to_matrix() const;
  std::array<double, 4> values() const { return {w, x, y, z}; }
};

enum class ActionKind { rotation_quat, hue_delta, position_delta, crop_params, jitter_params, blur_param, saccade };

std::string_view to_string(ActionKind kind);
/// Throws CodecError on an unknown name.
ActionKind parse_action_kind(std::string_view name);
/// Number of values carried by an action of this kind.
int action_width(ActionKind kind);
std::span<const ActionKind> all_action_kinds();

struct Action {
  ActionKind kind = ActionKind::rotation_quat;
  std::vector<double> values;

  bool operator==(const Action&) const = default;
};

/// One action per conditioned kind, in the world's kind order.
using ActionTuple = std::vector<Action>;

/// Checks length and kind-specific constraints (unit quaternion, saccade
/// range). Throws CodecError.
void validate_action(const Action& a);

Action identity_action(ActionKind kind);
/// The action undoing `a`.
Action inverse_action(const Action& a);
/// Applies `seq[0]` first. Throws CodecError on mixed kinds or empty input.
Action compose_actions(std::span<const Action> seq);
/// Composes tuples componentwise.
ActionTuple compose_tuples(std::span<const ActionTuple> seq);

/// Wraps a hue difference into [-0.5, 0.5).
double wrap_hue(double delta);

/// Concatenated raw values of a tuple.
std::vector<double> flatten(const ActionTuple& tuple);
int tuple_width(std::span<const ActionKind> kinds);

}  // namespace seqjepa
