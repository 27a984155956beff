#pragma once

// Wiring of the estimator variants (IMU only, camera only, fused) and the
// RMSE evaluation against a ground-truth track.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "legfusion/depth_estimation.hpp"
#include "legfusion/errors.hpp"
#include "legfusion/fusion_ekf.hpp"
#include "legfusion/gait_simulator.hpp"
#include "legfusion/marker_vision.hpp"

namespace legfusion {

enum class Variant { ImuOnly, CameraOnly, Fused };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::ImuOnly: return "imu_only";
    case Variant::CameraOnly: return "camera_only";
    case Variant::Fused: return "fused";
  }
  return "?";
}

enum class MissingPolicy {
  Sagittal,  ///< missing joint: sagittal x, z = 0, depth = mean of the other joints' depth
  Linear,    ///< missing joint: linear interpolation in time between valid frames
};

inline const char* missing_policy_name(MissingPolicy p) { return p == MissingPolicy::Sagittal ? "sagittal" : "linear"; }

inline MissingPolicy parse_missing_policy(const std::string& s) {
  if (s == "sagittal") return MissingPolicy::Sagittal;
  if (s == "linear") return MissingPolicy::Linear;
  throw InvalidArgument("unknown missing-marker policy '" + s + "'");
}

// ---------------------------------------------------------------------------
// Camera track

struct CameraSample {
  double t = 0.0;
  std::array<Vec3, 3> joints_cam;  ///< camera frame, m
  std::array<bool, 3> valid{};     ///< marker seen this frame
  std::array<DepthEstimate, 3> depth;
};

/// Labeled marker observations -> per-joint fused depth -> camera-frame 3D.
/// Joints without a marker keep their filter prediction in `depth` but are
/// flagged invalid.
inline std::vector<CameraSample> build_camera_track(const std::vector<FrameObservations>& frames,
                                                    const CameraModel& cam, const LegModel& leg,
                                                    const DepthFilterOptions& depth_opts = {}) {
  std::array<DepthFuser, 3> fusers{DepthFuser(depth_opts), DepthFuser(depth_opts), DepthFuser(depth_opts)};
  std::vector<CameraSample> track;
  track.reserve(frames.size());
  for (const FrameObservations& obs : frames) {
    CameraSample s;
    s.t = obs[0].t;
    const auto inputs = joint_depth_inputs(obs, leg.l_u, leg.l_l, cam, depth_opts.min_area);
    for (int j = 0; j < 3; ++j) {
      const FusedDepth fd = fusers[j].step(inputs[j].distance, inputs[j].area);
      s.depth[j] = fd.estimate;
      s.valid[j] = obs[j].valid && fd.valid && fd.estimate.z > 0.0;
      s.joints_cam[j] = s.valid[j] ? backproject(obs[j].pixel, fd.estimate.z, cam) : Vec3::Zero();
    }
    track.push_back(s);
  }
  return track;
}

/// Camera segment vectors for the filter's camera update.
inline std::vector<SegmentObservation> segment_observations(const std::vector<CameraSample>& track) {
  std::vector<SegmentObservation> out;
  out.reserve(track.size());
  for (const CameraSample& s : track) {
    SegmentObservation o;
    o.t = s.t;
    o.upper_valid = s.valid[0] && s.valid[1];
    o.lower_valid = s.valid[1] && s.valid[2];
    if (o.upper_valid) o.upper = s.joints_cam[1] - s.joints_cam[0];
    if (o.lower_valid) o.lower = s.joints_cam[2] - s.joints_cam[1];
    out.push_back(o);
  }
  return out;
}

struct NavJointSample {
  double t = 0.0;
  JointPositions joints;
  std::array<bool, 3> valid{};
};

/// Camera track mapped into nav coordinates, missing joints left invalid.
inline std::vector<NavJointSample> camera_track_in_nav(const std::vector<CameraSample>& track, const CameraPose& pose) {
  std::vector<NavJointSample> out;
  out.reserve(track.size());
  for (const CameraSample& s : track) {
    NavJointSample n;
    n.t = s.t;
    for (int j = 0; j < 3; ++j) {
      n.valid[j] = s.valid[j];
      if (s.valid[j]) n.joints[j] = pose.to_nav(s.joints_cam[j]);
    }
    out.push_back(n);
  }
  return out;
}

/// Fills missing joints. Sagittal policy: in the nav frame the sagittal
/// coordinates (x, z) of a missing joint are zero and its depth coordinate
/// (y, the camera axis) is the mean of the visible joints' depth; a frame
/// with no visible joint is all zeros. Linear policy: each joint is
/// interpolated in time between its nearest valid frames and held at the
/// ends; a joint never seen stays zero.
inline std::vector<NavJointSample> interpolate_missing(std::vector<NavJointSample> track, MissingPolicy policy) {
  if (policy == MissingPolicy::Sagittal) {
    for (NavJointSample& s : track) {
      double sum = 0.0;
      int n = 0;
      for (int j = 0; j < 3; ++j) {
        if (s.valid[j]) {
          sum += s.joints[j].y();
          ++n;
        }
      }
      const double depth = n > 0 ? sum / n : 0.0;
      for (int j = 0; j < 3; ++j) {
        if (!s.valid[j]) s.joints[j] = Vec3(0.0, depth, 0.0);
      }
    }
    return track;
  }
  for (int j = 0; j < 3; ++j) {
    std::vector<std::size_t> valid_idx;
    for (std::size_t k = 0; k < track.size(); ++k) {
      if (track[k].valid[j]) valid_idx.push_back(k);
    }
    if (valid_idx.empty()) continue;
    std::size_t next = 0;
    for (std::size_t k = 0; k < track.size(); ++k) {
      if (track[k].valid[j]) continue;
      while (next < valid_idx.size() && valid_idx[next] < k) ++next;
      if (next == 0) {
        track[k].joints[j] = track[valid_idx.front()].joints[j];
      } else if (next == valid_idx.size()) {
        track[k].joints[j] = track[valid_idx.back()].joints[j];
      } else {
        const NavJointSample& a = track[valid_idx[next - 1]];
        const NavJointSample& b = track[valid_idx[next]];
        const double w = (track[k].t - a.t) / (b.t - a.t);
        track[k].joints[j] = (1.0 - w) * a.joints[j] + w * b.joints[j];
      }
    }
  }
  return track;
}

/// Hip position at arbitrary times, linear in time over the valid camera
/// samples (held outside their span).
inline std::vector<Vec3> interpolate_hip(const std::vector<NavJointSample>& cam_nav, const std::vector<double>& times) {
  std::vector<std::size_t> valid;
  for (std::size_t k = 0; k < cam_nav.size(); ++k) {
    if (cam_nav[k].valid[0]) valid.push_back(k);
  }
  if (valid.empty()) throw InvalidObservation("no valid hip marker in the camera stream");
  std::vector<Vec3> out;
  out.reserve(times.size());
  std::size_t i = 0;
  for (double t : times) {
    while (i + 1 < valid.size() && cam_nav[valid[i + 1]].t <= t) ++i;
    const NavJointSample& a = cam_nav[valid[i]];
    if (t <= a.t || i + 1 >= valid.size()) {
      out.push_back(a.joints.hip);
      continue;
    }
    const NavJointSample& b = cam_nav[valid[i + 1]];
    const double w = (t - a.t) / (b.t - a.t);
    out.push_back((1.0 - w) * a.joints.hip + w * b.joints.hip);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Estimates

struct TrackRow {
  double t = 0.0;
  JointPositions joints;
  bool has_state = false;
  Quaternion q_u, q_l;
  Vec3 b_u = Vec3::Zero(), b_l = Vec3::Zero();
  bool gate_u = false, gate_l = false;
};

struct EstimateTrack {
  Variant variant = Variant::Fused;
  std::vector<TrackRow> rows;
  FilterDiagnostics diagnostics;
};

struct PipelineOptions {
  EkfOptions ekf;
  DepthFilterOptions depth;
  MissingPolicy missing = MissingPolicy::Sagittal;
};

/// Filter variant. Rows are emitted at every IMU step; the hip comes from
/// `hip_nav` (one entry per IMU step).
inline EstimateTrack run_filter(Variant variant, const ImuStreams& imu, const std::vector<SegmentObservation>& camera,
                                const std::vector<Vec3>& hip_nav, EkfOptions ekf_opts) {
  if (hip_nav.size() != imu.upper.size()) throw InvalidArgument("run_filter: hip track length mismatch");
  ekf_opts.use_camera = variant == Variant::Fused;
  const EkfRun run = ekf_run(imu.upper, imu.lower, ekf_opts.use_camera ? camera : std::vector<SegmentObservation>{},
                             ekf_opts);
  EstimateTrack est;
  est.variant = variant;
  est.diagnostics = run.diagnostics;
  est.rows.reserve(run.steps.size());
  for (std::size_t k = 0; k < run.steps.size(); ++k) {
    const EkfStep& s = run.steps[k];
    TrackRow r;
    r.t = s.t;
    r.has_state = true;
    r.q_u = s.state.upper.q;
    r.q_l = s.state.lower.q;
    r.b_u = s.state.upper.bias;
    r.b_l = s.state.lower.bias;
    r.gate_u = s.gate_u;
    r.gate_l = s.gate_l;
    r.joints = forward_kinematics(hip_nav[k], r.q_u, r.q_l, ekf_opts.leg);
    est.rows.push_back(r);
  }
  return est;
}

inline std::vector<double> imu_times(const ImuStreams& imu) {
  std::vector<double> t;
  t.reserve(imu.upper.size());
  for (const auto& s : imu.upper) t.push_back(s.t);
  return t;
}

/// IMU-only: hip anchored to the reference hip positions.
inline EstimateTrack run_imu_only(const ImuStreams& imu, const std::vector<Vec3>& reference_hip,
                                  const PipelineOptions& opts) {
  return run_filter(Variant::ImuOnly, imu, {}, reference_hip, opts.ekf);
}

/// Camera-only: camera 3D joints at camera timestamps after missing-marker filling.
inline EstimateTrack run_camera_only(const std::vector<CameraSample>& track, const CameraPose& pose,
                                     const PipelineOptions& opts) {
  const auto filled = interpolate_missing(camera_track_in_nav(track, pose), opts.missing);
  EstimateTrack est;
  est.variant = Variant::CameraOnly;
  for (const auto& s : filled) {
    TrackRow r;
    r.t = s.t;
    r.joints = s.joints;
    est.rows.push_back(r);
  }
  return est;
}

/// Fused: all three measurements, hip from the camera hip track.
inline EstimateTrack run_fused(const ImuStreams& imu, const std::vector<CameraSample>& track, const CameraPose& pose,
                               const PipelineOptions& opts) {
  EkfOptions e = opts.ekf;
  e.camera_from_nav = pose.camera_from_nav;
  const auto hip = interpolate_hip(camera_track_in_nav(track, pose), imu_times(imu));
  return run_filter(Variant::Fused, imu, segment_observations(track), hip, e);
}

// ---------------------------------------------------------------------------
// Evaluation

struct TruthRow {
  double t = 0.0;
  JointPositions joints;
};

inline std::vector<TruthRow> truth_rows(const std::vector<TruthSample>& truth) {
  std::vector<TruthRow> out;
  out.reserve(truth.size());
  for (const auto& s : truth) out.push_back({s.t, s.joints});
  return out;
}

inline std::vector<Vec3> truth_hip(const std::vector<TruthRow>& truth) {
  std::vector<Vec3> hip;
  hip.reserve(truth.size());
  for (const auto& r : truth) hip.push_back(r.joints.hip);
  return hip;
}

struct JointRmse {
  Vec3 axis_cm = Vec3::Zero();
  double euclid_cm = 0.0;
};

struct RmseReport {
  std::array<JointRmse, 3> joints;
  double overall_cm = 0.0;  ///< mean of the knee and ankle Euclidean RMSE
  std::size_t samples = 0;
  std::optional<double> change_vs_imu_pct;
  std::optional<double> change_vs_camera_pct;
};

struct EvaluateOptions {
  double max_skew = 0.005;         ///< s; half the IMU period
  double max_mismatch_frac = 0.01;
  double t_begin = -1e300;         ///< restrict to t in [t_begin, t_end]
  double t_end = 1e300;
};

/// Nearest-step alignment of each estimate row to the truth track (both in
/// nav). Fails when more than 1% of rows lack a truth sample within
/// max_skew or when the two spans differ by more than 1%.
inline RmseReport evaluate(const std::vector<TrackRow>& est, const std::vector<TruthRow>& truth,
                           const EvaluateOptions& opts = {}) {
  if (est.empty() || truth.empty()) throw InvalidArgument("evaluate: empty track");
  const double span_est = est.back().t - est.front().t;
  const double span_truth = truth.back().t - truth.front().t;
  if (std::abs(span_est - span_truth) > opts.max_mismatch_frac * std::max(span_truth, 1e-9) + 2.0 * opts.max_skew) {
    throw InvalidArgument("evaluate: estimate and truth spans differ by more than 1%");
  }
  std::array<Vec3, 3> sq{Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
  std::size_t n = 0, unmatched = 0, i = 0;
  for (const TrackRow& r : est) {
    if (r.t < opts.t_begin || r.t > opts.t_end) continue;
    while (i + 1 < truth.size() && std::abs(truth[i + 1].t - r.t) <= std::abs(truth[i].t - r.t)) ++i;
    if (std::abs(truth[i].t - r.t) > opts.max_skew + 1e-9) {
      ++unmatched;
      continue;
    }
    for (int j = 0; j < 3; ++j) sq[j] += (r.joints[j] - truth[i].joints[j]).cwiseAbs2();
    ++n;
  }
  if (n == 0 || static_cast<double>(unmatched) > opts.max_mismatch_frac * static_cast<double>(n + unmatched)) {
    throw InvalidArgument("evaluate: estimate rows do not align with the truth track");
  }
  RmseReport rep;
  rep.samples = n;
  for (int j = 0; j < 3; ++j) {
    const Vec3 ms = sq[j] / static_cast<double>(n);
    rep.joints[j].axis_cm = 100.0 * ms.cwiseSqrt();
    rep.joints[j].euclid_cm = 100.0 * std::sqrt(ms.sum());
  }
  rep.overall_cm = 0.5 * (rep.joints[1].euclid_cm + rep.joints[2].euclid_cm);
  return rep;
}

inline double percent_change(double value, double reference) { return 100.0 * (value - reference) / reference; }

struct VariantReports {
  RmseReport imu_only;
  RmseReport camera_only;
  RmseReport fused;
};

/// All three variants on identical input streams.
struct VariantRuns {
  EstimateTrack imu_only;
  EstimateTrack camera_only;
  EstimateTrack fused;
  std::vector<CameraSample> camera_track;
};

inline VariantRuns run_all_variants(const ImuStreams& imu, const std::vector<FrameObservations>& markers,
                                    const std::vector<TruthRow>& truth, const Scenario& sc,
                                    const PipelineOptions& opts) {
  VariantRuns v;
  v.camera_track = build_camera_track(markers, sc.camera, sc.leg, opts.depth);
  v.imu_only = run_imu_only(imu, truth_hip(truth), opts);
  v.camera_only = run_camera_only(v.camera_track, sc.pose, opts);
  v.fused = run_fused(imu, v.camera_track, sc.pose, opts);
  return v;
}

inline VariantReports evaluate_variants(const VariantRuns& runs, const std::vector<TruthRow>& truth,
                                        const EvaluateOptions& eo = {}) {
  VariantReports r;
  r.imu_only = evaluate(runs.imu_only.rows, truth, eo);
  r.camera_only = evaluate(runs.camera_only.rows, truth, eo);
  r.fused = evaluate(runs.fused.rows, truth, eo);
  r.fused.change_vs_imu_pct = percent_change(r.fused.overall_cm, r.imu_only.overall_cm);
  r.fused.change_vs_camera_pct = percent_change(r.fused.overall_cm, r.camera_only.overall_cm);
  r.camera_only.change_vs_imu_pct = percent_change(r.camera_only.overall_cm, r.imu_only.overall_cm);
  return r;
}

/// Filter options matching a scenario (leg, fields, bias model, camera).
inline PipelineOptions pipeline_options_for(const Scenario& sc) {
  PipelineOptions p;
  p.ekf.leg = sc.leg;
  p.ekf.fields = sc.fields;
  p.ekf.bias_u.tau = p.ekf.bias_l.tau = Vec3::Constant(sc.noise.bias_tau);
  p.ekf.camera_from_nav = sc.pose.camera_from_nav;
  p.ekf.velocity_reset_period = 1.0 / sc.camera_rate;
  p.depth.min_area = 9.0;
  return p;
}

}  // namespace legfusion
