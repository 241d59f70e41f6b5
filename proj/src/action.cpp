// SPDX-License-Identifier: Apache-2.0

#include "seqjepa/action.hpp"

#include <cmath>

#include "seqjepa/errors.hpp"

namespace seqjepa {

Quaternion Quaternion::from_axis_angle(double ax, double ay, double az, double angle) {
  const double n = std::sqrt(ax * ax + ay * ay + az * az);
  if (n == 0) return {};
  const double s = std::sin(angle / 2) / n;
  return {std::cos(angle / 2), ax * s, ay * s, az * s};
}

Quaternion Quaternion::operator*(const Quaternion& o) const {
  return {w * o.w - x * o.x - y * o.y - z * o.z, w * o.x + x * o.w + y * o.z - z * o.y,
          w * o.y - x * o.z + y * o.w + z * o.x, w * o.z + x * o.y - y * o.x + z * o.w};
}

double Quaternion::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Quaternion Quaternion::normalized() const {
  const double n = norm();
  return {w / n, x / n, y / n, z / n};
}

std::array<std::array<double, 3>, 3> Quaternion::to_matrix() const {
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
           {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
           {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

namespace {

constexpr ActionKind kAllKinds[] = {ActionKind::rotation_quat, ActionKind::hue_delta,     ActionKind::position_delta,
                                    ActionKind::crop_params,   ActionKind::jitter_params, ActionKind::blur_param,
                                    ActionKind::saccade};

Quaternion as_quaternion(const Action& a) { return {a.values[0], a.values[1], a.values[2], a.values[3]}; }

Action from_quaternion(const Quaternion& q) { return {ActionKind::rotation_quat, {q.w, q.x, q.y, q.z}}; }

}  // namespace

std::string_view to_string(ActionKind kind) {
  switch (kind) {
    case ActionKind::rotation_quat: return "rotation_quat";
    case ActionKind::hue_delta: return "hue_delta";
    case ActionKind::position_delta: return "position_delta";
    case ActionKind::crop_params: return "crop_params";
    case ActionKind::jitter_params: return "jitter_params";
    case ActionKind::blur_param: return "blur_param";
    case ActionKind::saccade: return "saccade";
  }
  return "unknown";
}

ActionKind parse_action_kind(std::string_view name) {
  for (ActionKind k : kAllKinds) {
    if (to_string(k) == name) return k;
  }
  throw CodecError("unknown action kind '" + std::string(name) + "'");
}

int action_width(ActionKind kind) {
  switch (kind) {
    case ActionKind::rotation_quat: return 4;
    case ActionKind::hue_delta: return 1;
    case ActionKind::position_delta: return 2;
    case ActionKind::crop_params: return 4;
    case ActionKind::jitter_params: return 4;
    case ActionKind::blur_param: return 1;
    case ActionKind::saccade: return 2;
  }
  return 0;
}

std::span<const ActionKind> all_action_kinds() { return kAllKinds; }

void validate_action(const Action& a) {
  if (static_cast<int>(a.values.size()) != action_width(a.kind)) {
    throw CodecError(std::string(to_string(a.kind)) + " action needs " + std::to_string(action_width(a.kind)) +
                     " values, got " + std::to_string(a.values.size()));
  }
  for (double v : a.values) {
    if (!std::isfinite(v)) throw CodecError("non-finite action value");
  }
  if (a.kind == ActionKind::rotation_quat && std::abs(as_quaternion(a).norm() - 1.0) > 1e-6) {
    throw CodecError("rotation quaternion is not unit norm");
  }
  if (a.kind == ActionKind::saccade) {
    for (double v : a.values) {
      if (v < -1.0 || v > 1.0) throw CodecError("saccade displacement outside [-1, 1]");
    }
  }
}

double wrap_hue(double delta) {
  double w = delta - std::floor(delta + 0.5);
  if (w >= 0.5) w -= 1.0;
  return w;
}

Action identity_action(ActionKind kind) {
  Action a{kind, std::vector<double>(static_cast<std::size_t>(action_width(kind)), 0.0)};
  if (kind == ActionKind::rotation_quat) a.values[0] = 1.0;
  return a;
}

Action inverse_action(const Action& a) {
  if (a.kind == ActionKind::rotation_quat) return from_quaternion(as_quaternion(a).conjugate());
  Action out = a;
  for (double& v : out.values) v = -v;
  if (a.kind == ActionKind::hue_delta) out.values[0] = wrap_hue(out.values[0]);
  if (a.kind == ActionKind::jitter_params) out.values[3] = wrap_hue(out.values[3]);
  return out;
}

Action compose_actions(std::span<const Action> seq) {
  if (seq.empty()) throw CodecError("compose: empty action sequence");
  const ActionKind kind = seq.front().kind;
  for (const auto& a : seq) {
    if (a.kind != kind) throw CodecError("compose: heterogeneous action kinds");
    if (static_cast<int>(a.values.size()) != action_width(kind)) throw CodecError("compose: malformed action");
  }
  if (kind == ActionKind::rotation_quat) {
    Quaternion q;
    for (const auto& a : seq) q = as_quaternion(a) * q;
    return from_quaternion(q.normalized());
  }
  Action out = identity_action(kind);
  for (const auto& a : seq) {
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += a.values[i];
  }
  if (kind == ActionKind::hue_delta) out.values[0] = wrap_hue(out.values[0]);
  if (kind == ActionKind::jitter_params) out.values[3] = wrap_hue(out.values[3]);
  return out;
}

ActionTuple compose_tuples(std::span<const ActionTuple> seq) {
  if (seq.empty()) throw CodecError("compose: empty tuple sequence");
  const std::size_t parts = seq.front().size();
  ActionTuple out;
  for (std::size_t p = 0; p < parts; ++p) {
    std::vector<Action> column;
    for (const auto& t : seq) {
      if (t.size() != parts) throw CodecError("compose: tuples differ in arity");
      column.push_back(t[p]);
    }
    out.push_back(compose_actions(column));
  }
  return out;
}

std::vector<double> flatten(const ActionTuple& tuple) {
  std::vector<double> out;
  for (const auto& a : tuple) out.insert(out.end(), a.values.begin(), a.values.end());
  return out;
}

int tuple_width(std::span<const ActionKind> kinds) {
  int w = 0;
  for (auto k : kinds) w += action_width(k);
  return w;
}

}  // namespace seqjepa
