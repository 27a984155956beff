#pragma once

// Quaternion and 3-vector algebra plus coordinate-frame bookkeeping.
//
// Conventions used throughout the library:
//   * Hamilton product, scalar-first storage (w, x, y, z), right-handed axes.
//   * An orientation quaternion q of frame S relative to frame N rotates
//     S-frame vectors into N:  v_N = q ⊗ (0, v_S) ⊗ q*.
//   * Angles are radians. Degrees only appear at the CLI boundary.
//   * The earth-fixed navigation frame ("nav") has x along the walking
//     direction and z up, so a resting accelerometer reads (0, 0, +g) in it.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <string>
#include <string_view>

#include "legfusion/errors.hpp"

namespace legfusion {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec4 = Eigen::Vector4d;

struct Quaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static constexpr Quaternion identity() { return {1.0, 0.0, 0.0, 0.0}; }

  /// Pure quaternion (0, v).
  static Quaternion pure(const Vec3& v) { return {0.0, v.x(), v.y(), v.z()}; }

  static Quaternion from_coeffs(const Vec4& c) { return {c[0], c[1], c[2], c[3]}; }

  /// Rotation of `angle` radians about `axis` (need not be unit length).
  static Quaternion from_axis_angle(const Vec3& axis, double angle) {
    const double n = axis.norm();
    if (n == 0.0) return identity();
    const double s = std::sin(0.5 * angle) / n;
    return {std::cos(0.5 * angle), axis.x() * s, axis.y() * s, axis.z() * s};
  }

  Vec4 coeffs() const { return {w, x, y, z}; }
  Vec3 vec() const { return {x, y, z}; }

  double squared_norm() const { return w * w + x * x + y * y + z * z; }
  double norm() const { return std::sqrt(squared_norm()); }

  Quaternion conjugate() const { return {w, -x, -y, -z}; }
  Quaternion operator-() const { return {-w, -x, -y, -z}; }

  friend Quaternion operator*(double s, const Quaternion& q) {
    return {s * q.w, s * q.x, s * q.y, s * q.z};
  }
  friend Quaternion operator+(const Quaternion& a, const Quaternion& b) {
    return {a.w + b.w, a.x + b.x, a.y + b.y, a.z + b.z};
  }
  friend Quaternion operator-(const Quaternion& a, const Quaternion& b) {
    return {a.w - b.w, a.x - b.x, a.y - b.y, a.z - b.z};
  }
};

inline double dot(const Quaternion& a, const Quaternion& b) {
  return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
}

/// Hamilton product a ⊗ b. Accepts non-unit inputs; the norm is multiplicative.
inline Quaternion quat_multiply(const Quaternion& a, const Quaternion& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

inline Quaternion operator*(const Quaternion& a, const Quaternion& b) { return quat_multiply(a, b); }

/// Left-multiplication matrix: quat_multiply(a, b).coeffs() == left_matrix(a) * b.coeffs().
inline Eigen::Matrix4d left_matrix(const Quaternion& a) {
  Eigen::Matrix4d m;
  m << a.w, -a.x, -a.y, -a.z,
       a.x,  a.w, -a.z,  a.y,
       a.y,  a.z,  a.w, -a.x,
       a.z, -a.y,  a.x,  a.w;
  return m;
}

/// Right-multiplication matrix: quat_multiply(a, b).coeffs() == right_matrix(b) * a.coeffs().
inline Eigen::Matrix4d right_matrix(const Quaternion& b) {
  Eigen::Matrix4d m;
  m << b.w, -b.x, -b.y, -b.z,
       b.x,  b.w,  b.z, -b.y,
       b.y, -b.z,  b.w,  b.x,
       b.z,  b.y, -b.x,  b.w;
  return m;
}

inline constexpr double kDegenerateNorm = 1e-12;
inline constexpr double kUnitTolerance = 1e-6;

/// Unit-norm copy with the sign fixed so that w >= 0.
/// Throws DivergenceError when ||q|| <= 1e-12.
inline Quaternion normalize(const Quaternion& q) {
  const double n = q.norm();
  if (!(n > kDegenerateNorm)) {
    throw DivergenceError("quaternion norm degenerate (" + std::to_string(n) + ")");
  }
  const double s = (q.w < 0.0 ? -1.0 : 1.0) / n;
  return s * q;
}

inline bool is_unit(const Quaternion& q, double tol = kUnitTolerance) {
  return std::abs(q.norm() - 1.0) <= tol;
}

/// Vector part of q ⊗ (0, v) ⊗ q*, with no unit-norm requirement. For a
/// non-unit q the result is scaled by ||q||^2.
inline Vec3 sandwich(const Quaternion& q, const Vec3& v) {
  // Expanded form of q (0,v) q*; avoids the two full products.
  const Vec3 u = q.vec();
  const double s = q.w;
  return (s * s - u.squaredNorm()) * v + 2.0 * u.dot(v) * u + 2.0 * s * u.cross(v);
}

/// Rotates v by the unit quaternion q. Rejects ||q|| off unity by more than
/// 1e-6, which means an unnormalized state leaked out of a filter.
inline Vec3 rotate_vector(const Quaternion& q, const Vec3& v) {
  if (!is_unit(q)) {
    throw InvalidArgument("rotate_vector: quaternion is not unit (norm " + std::to_string(q.norm()) + ")");
  }
  return sandwich(q, v);
}

/// 3x3 rotation matrix of a unit quaternion (columns are the rotated axes).
inline Mat3 to_rotation_matrix(const Quaternion& q) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 r;
  r << w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z;
  return r;
}

/// Rotation angle in [0, pi] between two orientations (sign-insensitive).
inline double angle_between(const Quaternion& a, const Quaternion& b) {
  const double c = std::min(1.0, std::abs(dot(a, b)) / (a.norm() * b.norm()));
  return 2.0 * std::acos(c);
}

/// Returns q or -q, whichever lies in the same hemisphere as `reference`.
inline Quaternion align_sign(const Quaternion& q, const Quaternion& reference) {
  return dot(q, reference) < 0.0 ? -q : q;
}

// ---------------------------------------------------------------------------
// Frames

enum class Frame { Nav, SensorUpper, SensorLower, Camera, Reference };

inline std::string_view frame_name(Frame f) {
  switch (f) {
    case Frame::Nav: return "nav";
    case Frame::SensorUpper: return "sensor_upper";
    case Frame::SensorLower: return "sensor_lower";
    case Frame::Camera: return "camera";
    case Frame::Reference: return "reference";
  }
  return "?";
}

inline Frame parse_frame(std::string_view name) {
  for (Frame f : {Frame::Nav, Frame::SensorUpper, Frame::SensorLower, Frame::Camera, Frame::Reference}) {
    if (frame_name(f) == name) return f;
  }
  throw InvalidArgument("unknown frame '" + std::string(name) + "'");
}

/// Rotation taking `from_frame` coordinates into `to_frame` coordinates.
struct FrameRotation {
  Frame from_frame = Frame::Nav;
  Frame to_frame = Frame::Nav;
  Quaternion q = Quaternion::identity();

  FrameRotation inverse() const { return {to_frame, from_frame, q.conjugate()}; }
  Vec3 apply(const Vec3& v) const { return rotate_vector(q, v); }
};

/// outer ∘ inner: inner.from_frame -> outer.to_frame. Requires
/// outer.from_frame == inner.to_frame.
inline FrameRotation compose_frames(const FrameRotation& outer, const FrameRotation& inner) {
  if (outer.from_frame != inner.to_frame) {
    throw FrameMismatch("cannot compose " + std::string(frame_name(inner.from_frame)) + "->" +
                        std::string(frame_name(inner.to_frame)) + " with " +
                        std::string(frame_name(outer.from_frame)) + "->" +
                        std::string(frame_name(outer.to_frame)));
  }
  return {inner.from_frame, outer.to_frame, normalize(quat_multiply(outer.q, inner.q))};
}

}  // namespace legfusion
