#pragma once

// Monocular joint depth from marker size and inter-marker pixel distance,
// a per-joint scalar Kalman filter over the two, and pinhole (back)projection.

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <optional>

#include "legfusion/errors.hpp"
#include "legfusion/marker_vision.hpp"
#include "legfusion/quat.hpp"

namespace legfusion {

struct CameraModel {
  double focal_px = 600.0;
  int width = 640;
  int height = 480;
  double cx = 320.0;
  double cy = 240.0;
  double marker_side_m = 0.05;

  void validate() const {
    if (!(focal_px > 0.0)) throw InvalidArgument("CameraModel: focal_px must be > 0");
    if (!(marker_side_m > 0.0)) throw InvalidArgument("CameraModel: marker_side_m must be > 0");
    if (width < 1 || height < 1) throw InvalidArgument("CameraModel: resolution must be >= 1");
  }
};

enum class DepthSource { Area, Distance, Fused };

struct DepthEstimate {
  double z = 0.0;    ///< m along the optical axis
  double var = 0.0;  ///< m^2
  DepthSource source = DepthSource::Fused;
};

/// Pixel-size uncertainty behind both estimators (half a pixel).
inline constexpr double kPixelHalfWidth = 0.5;

/// z = f s / sqrt(A); sigma_z from a half-pixel error on the marker side.
inline DepthEstimate depth_from_area(double area_px, const CameraModel& cam, double min_area = 1.0) {
  if (!(area_px > 0.0) || area_px < min_area) {
    throw InvalidObservation("depth_from_area: area " + std::to_string(area_px) + " below minimum");
  }
  const double side = std::sqrt(area_px);
  const double z = cam.focal_px * cam.marker_side_m / side;
  const double sigma = z * kPixelHalfWidth / side;
  return {z, sigma * sigma, DepthSource::Area};
}

/// z = f L / d with d the pixel distance between two markers L metres apart.
/// Each endpoint carries a half-pixel error, so sigma_d = 0.5 sqrt(2).
inline DepthEstimate depth_from_distance(const Vec2& pixel_a, const Vec2& pixel_b, double real_dist_m,
                                         const CameraModel& cam) {
  const double d = (pixel_a - pixel_b).norm();
  if (!(d > 1.0)) throw InvalidObservation("depth_from_distance: pixel distance degenerate");
  if (!(real_dist_m > 0.0)) throw InvalidArgument("depth_from_distance: real distance must be > 0");
  const double z = cam.focal_px * real_dist_m / d;
  const double sigma = z / d * kPixelHalfWidth * std::sqrt(2.0);
  return {z, sigma * sigma, DepthSource::Distance};
}

/// Camera-frame point from pixel and depth (+Z along the optical axis).
inline Vec3 backproject(const Vec2& pixel, double z, const CameraModel& cam) {
  if (!(z > 0.0)) throw InvalidArgument("backproject: depth must be > 0");
  return {(pixel.x() - cam.cx) * z / cam.focal_px, (pixel.y() - cam.cy) * z / cam.focal_px, z};
}

inline Vec2 project(const Vec3& p_cam, const CameraModel& cam) {
  if (!(p_cam.z() > 0.0)) throw InvalidArgument("project: point behind the camera");
  return {cam.cx + cam.focal_px * p_cam.x() / p_cam.z(), cam.cy + cam.focal_px * p_cam.y() / p_cam.z()};
}

/// Projected area (px^2) of a fronto-parallel marker at depth z.
inline double projected_marker_area(double z, const CameraModel& cam) {
  const double side = cam.focal_px * cam.marker_side_m / z;
  return side * side;
}

struct DepthFilterOptions {
  double process_var = 1e-5;  ///< m^2 added per frame (random-walk depth)
  double min_area = 9.0;
};

struct FusedDepth {
  DepthEstimate estimate;
  DepthEstimate prediction;
  bool valid = false;
};

/// Scalar depth filter for one joint. Each frame:
///   time update   z- = z, P- = P + q
///   system model  correction of (z-, P-) by the distance-based estimate
///   measurement   correction by the area-based estimate
/// The output after the first two stages is the prediction; it is returned
/// unchanged when the area estimate is missing. With neither source the
/// output is flagged invalid and carries the time-updated prediction.
class DepthFuser {
 public:
  explicit DepthFuser(DepthFilterOptions opts = {}) : opts_(opts) {}

  FusedDepth step(const std::optional<DepthEstimate>& distance, const std::optional<DepthEstimate>& area) {
    FusedDepth out;
    if (!initialized_) {
      if (!distance && !area) return out;
      const DepthEstimate& first = distance ? *distance : *area;
      z_ = first.z;
      p_ = first.var;
      initialized_ = true;
      if (distance && area) correct(*area);
      out.prediction = {z_, p_, DepthSource::Fused};
      out.estimate = out.prediction;
      out.valid = true;
      return out;
    }
    p_ += opts_.process_var;
    if (distance) correct(*distance);
    out.prediction = {z_, p_, DepthSource::Fused};
    if (area) correct(*area);
    out.estimate = {z_, p_, DepthSource::Fused};
    out.valid = distance.has_value() || area.has_value();
    return out;
  }

  bool initialized() const { return initialized_; }
  double z() const { return z_; }
  double var() const { return p_; }

 private:
  void correct(const DepthEstimate& m) {
    const double k = p_ / (p_ + m.var);
    z_ += k * (m.z - z_);
    p_ *= (1.0 - k);
  }

  DepthFilterOptions opts_;
  bool initialized_ = false;
  double z_ = 0.0;
  double p_ = 0.0;
};

struct JointDepthInputs {
  std::optional<DepthEstimate> distance;
  std::optional<DepthEstimate> area;
};

/// Per-joint raw estimates for one frame. The hip uses the hip-knee pixel
/// distance, the ankle the knee-ankle distance, the knee the mean of both;
/// each joint's own marker area gives its area estimate.
inline std::array<JointDepthInputs, 3> joint_depth_inputs(const FrameObservations& obs, double l_upper,
                                                          double l_lower, const CameraModel& cam,
                                                          double min_area = 9.0) {
  auto segment = [&](int a, int b, double len) -> std::optional<DepthEstimate> {
    if (!obs[a].valid || !obs[b].valid) return std::nullopt;
    try {
      return depth_from_distance(obs[a].pixel, obs[b].pixel, len, cam);
    } catch (const InvalidObservation&) {
      return std::nullopt;
    }
  };
  const auto upper = segment(0, 1, l_upper);
  const auto lower = segment(1, 2, l_lower);

  std::array<JointDepthInputs, 3> in;
  in[0].distance = upper;
  in[2].distance = lower;
  if (upper && lower) {
    in[1].distance = DepthEstimate{0.5 * (upper->z + lower->z), 0.25 * (upper->var + lower->var),
                                   DepthSource::Distance};
  } else {
    in[1].distance = upper ? upper : lower;
  }
  for (int j = 0; j < 3; ++j) {
    if (!obs[j].valid || obs[j].area_px < min_area) continue;
    in[j].area = depth_from_area(obs[j].area_px, cam, min_area);
  }
  return in;
}

}  // namespace legfusion
