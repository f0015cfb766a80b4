#pragma once

// End-effector keypose shared by the simulator and the policy.

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "regrasp/error.hpp"
#include "regrasp/geometry.hpp"
#include "regrasp/image.hpp"

namespace regrasp {

using Quat = std::array<double, 4>;  ///< (w, x, y, z)

/// Renormalizes and flips the sign so the scalar part is non-negative.
inline Quat canonical_quat(Quat q) {
  double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  if (!(n > 0.0) || !std::isfinite(n)) return {1.0, 0.0, 0.0, 0.0};
  for (auto& v : q) v /= n;
  if (q[0] < 0.0 || (q[0] == 0.0 && q[3] < 0.0))
    for (auto& v : q) v = -v;
  return q;
}

inline Quat yaw_quat(double yaw) {
  return canonical_quat({std::cos(yaw / 2), 0.0, 0.0, std::sin(yaw / 2)});
}

/// Heading of the rotation's projection onto the table plane.
inline double quat_yaw(const Quat& q) {
  return std::atan2(2.0 * (q[0] * q[3] + q[1] * q[2]), 1.0 - 2.0 * (q[2] * q[2] + q[3] * q[3]));
}

/// Position (m), unit quaternion and binary gripper state (1 = closed).
struct Action8 {
  std::array<double, 3> p{};
  Quat r{1.0, 0.0, 0.0, 0.0};
  int s = 0;

  static Action8 planar(const Pose2& pose, double z, int gripper) {
    return {{pose.x, pose.y, z}, yaw_quat(pose.heading), gripper};
  }
  Pose2 pose2() const { return {p[0], p[1], quat_yaw(r)}; }
  bool valid() const {
    double n = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]);
    return std::fabs(n - 1.0) <= 1e-6 && r[0] >= 0.0 && (s == 0 || s == 1);
  }
  friend bool operator==(const Action8&, const Action8&) = default;
};

/// Squared Euclidean distance over the 8 action components, with position
/// measured in centimetres.
inline double action_distance_sq(const Action8& a, const Action8& b) {
  double d = 0.0;
  for (int i = 0; i < 3; ++i) {
    double e = 100.0 * (a.p[std::size_t(i)] - b.p[std::size_t(i)]);
    d += e * e;
  }
  for (int i = 0; i < 4; ++i) {
    double e = a.r[std::size_t(i)] - b.r[std::size_t(i)];
    d += e * e;
  }
  double e = a.s - b.s;
  return d + e * e;
}

/// What the policy sees of one moment: a gripper-centred image and the
/// equivalent low-dimensional object pose features.
struct PolicyObservation {
  Rgb8 image;                    ///< may be empty in state mode
  std::array<double, 4> state{};  ///< (dx / 0.05, dy / 0.05, cos dθ, sin dθ) in the gripper view frame
};

inline constexpr double kStateScale = 0.05;

inline std::array<double, 4> state_features(const Pose2& object_in_view) {
  return {object_in_view.x / kStateScale, object_in_view.y / kStateScale, std::cos(object_in_view.heading),
          std::sin(object_in_view.heading)};
}

struct TrainingPair {
  PolicyObservation o;
  Action8 a;
  PolicyObservation o_star;
  Action8 a_star;
};

}  // namespace regrasp
