#pragma once

// Two-segment hybrid EKF: continuous-time prediction of
//   x = {omega_u, b_u, q_u, omega_l, b_l, q_l}   (20 scalars)
// followed by discrete updates from
//   1. gyro + gradient-descent orientation (gated on specific force),
//   2. the knee velocity constraint between the two segments,
//   3. camera hip->knee and knee->ankle vectors.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "legfusion/errors.hpp"
#include "legfusion/imu_orientation.hpp"
#include "legfusion/quat.hpp"

namespace legfusion {

inline constexpr int kStateDim = 20;
using StateVec = Eigen::Matrix<double, kStateDim, 1>;
using StateMat = Eigen::Matrix<double, kStateDim, kStateDim>;

/// Offsets of each block inside the state vector.
namespace idx {
inline constexpr int omega_u = 0;
inline constexpr int bias_u = 3;
inline constexpr int q_u = 6;
inline constexpr int omega_l = 10;
inline constexpr int bias_l = 13;
inline constexpr int q_l = 16;
inline constexpr int segment_stride = 10;
}  // namespace idx

struct SegmentState {
  Vec3 omega = Vec3::Zero();
  Vec3 bias = Vec3::Zero();
  Quaternion q = Quaternion::identity();
};

struct FusionState {
  SegmentState upper;
  SegmentState lower;

  SegmentState& segment(int s) { return s == 0 ? upper : lower; }
  const SegmentState& segment(int s) const { return s == 0 ? upper : lower; }

  StateVec to_vector() const {
    StateVec v;
    for (int s = 0; s < 2; ++s) {
      const int o = s * idx::segment_stride;
      v.segment<3>(o) = segment(s).omega;
      v.segment<3>(o + 3) = segment(s).bias;
      v.segment<4>(o + 6) = segment(s).q.coeffs();
    }
    return v;
  }

  static FusionState from_vector(const StateVec& v) {
    FusionState x;
    for (int s = 0; s < 2; ++s) {
      const int o = s * idx::segment_stride;
      x.segment(s).omega = v.segment<3>(o);
      x.segment(s).bias = v.segment<3>(o + 3);
      x.segment(s).q = Quaternion::from_coeffs(v.segment<4>(o + 6));
    }
    return x;
  }
};

/// Filter noise. Diagonals only; defaults are the reference tuning with the
/// 0.045 spectral density placed on the angular-rate rows.
struct NoiseConfig {
  StateVec q_diag = default_q();
  Eigen::Matrix<double, 14, 1> r1_diag = default_r1();
  Vec3 r2_diag = Vec3::Constant(1e-4);
  Eigen::Matrix<double, 6, 1> r3_diag = Eigen::Matrix<double, 6, 1>::Constant(1e-8);
  double accel_threshold = 0.2;  ///< m/s^2

  static StateVec default_q() {
    StateVec q = StateVec::Zero();
    q.segment<3>(idx::omega_u).setConstant(0.045);
    q.segment<3>(idx::omega_l).setConstant(0.045);
    return q;
  }

  static Eigen::Matrix<double, 14, 1> default_r1() {
    Eigen::Matrix<double, 14, 1> r;
    r << 0.134, 0.167, 0.035, 0.005, 0.007, 0.002, 0.019, 0.185, 0.029, 0.057, 0.014, 0.004, 0.014, 0.004;
    return 1e-3 * r;
  }

  void validate() const {
    if ((q_diag.array() < 0.0).any() || (r1_diag.array() < 0.0).any() || (r2_diag.array() < 0.0).any() ||
        (r3_diag.array() < 0.0).any()) {
      throw InvalidArgument("NoiseConfig: covariance diagonals must be >= 0");
    }
    if (!(accel_threshold >= 0.0)) throw InvalidArgument("NoiseConfig: accel_threshold must be >= 0");
  }
};

/// Segment lengths and IMU positions. Each sensor's +x axis runs along its
/// segment towards the proximal joint, so the hip->knee vector is
/// q_u (-l_u, 0, 0) q_u* and the knee->ankle vector q_l (-l_l, 0, 0) q_l*.
/// r_u and r_l are the distances from each IMU to the knee, so the upper
/// IMU sits r_u above the knee and the lower one r_l below it.
struct LegModel {
  double l_u = 0.40;
  double l_l = 0.40;
  double r_u = 0.20;
  double r_l = 0.20;

  /// Sensor-frame vector from the upper IMU to the knee.
  Vec3 lever_upper() const { return {-r_u, 0.0, 0.0}; }
  /// Sensor-frame vector from the lower IMU to the knee.
  Vec3 lever_lower() const { return {r_l, 0.0, 0.0}; }

  void validate() const {
    if (!(l_u > 0.0 && l_l > 0.0 && r_u > 0.0 && r_l > 0.0)) throw InvalidArgument("LegModel: lengths must be > 0");
    if (r_u > l_u || r_l > l_l) throw InvalidArgument("LegModel: IMU offset exceeds its segment length");
  }
};

struct JointPositions {
  Vec3 hip = Vec3::Zero();
  Vec3 knee = Vec3::Zero();
  Vec3 ankle = Vec3::Zero();

  const Vec3& operator[](int j) const { return j == 0 ? hip : (j == 1 ? knee : ankle); }
  Vec3& operator[](int j) { return j == 0 ? hip : (j == 1 ? knee : ankle); }
};

/// Knee and ankle hung from a hip position through the segment quaternions.
inline JointPositions forward_kinematics(const Vec3& hip, const Quaternion& q_u, const Quaternion& q_l,
                                         const LegModel& leg) {
  JointPositions p;
  p.hip = hip;
  p.knee = hip + rotate_vector(q_u, Vec3(-leg.l_u, 0.0, 0.0));
  p.ankle = p.knee + rotate_vector(q_l, Vec3(-leg.l_l, 0.0, 0.0));
  return p;
}

// ---------------------------------------------------------------------------
// Process model

/// x' = f(x, w): omega' = w_omega, b' = -T b + T w_b, q' = 1/2 q (0, omega) + w_q.
inline StateVec process_derivative(const StateVec& x, const GyroBiasModel& bias_u, const GyroBiasModel& bias_l,
                                   const StateVec& noise = StateVec::Zero()) {
  StateVec d;
  for (int s = 0; s < 2; ++s) {
    const int o = s * idx::segment_stride;
    const GyroBiasModel& bm = s == 0 ? bias_u : bias_l;
    const Mat3 t = bm.rate_matrix();
    d.segment<3>(o) = noise.segment<3>(o);
    d.segment<3>(o + 3) = -t * x.segment<3>(o + 3) + t * noise.segment<3>(o + 3);
    const Quaternion q = Quaternion::from_coeffs(x.segment<4>(o + 6));
    d.segment<4>(o + 6) = quat_rate_from_gyro(q, x.segment<3>(o)).coeffs() + noise.segment<4>(o + 6);
  }
  return d;
}

/// Analytic df/dx.
inline StateMat process_jacobian(const StateVec& x, const GyroBiasModel& bias_u, const GyroBiasModel& bias_l) {
  StateMat f = StateMat::Zero();
  for (int s = 0; s < 2; ++s) {
    const int o = s * idx::segment_stride;
    const GyroBiasModel& bm = s == 0 ? bias_u : bias_l;
    f.block<3, 3>(o + 3, o + 3) = -bm.rate_matrix();
    const Quaternion q = Quaternion::from_coeffs(x.segment<4>(o + 6));
    f.block<4, 3>(o + 6, o) = 0.5 * left_matrix(q).rightCols<3>();
    f.block<4, 4>(o + 6, o + 6) = 0.5 * right_matrix(Quaternion::pure(x.segment<3>(o)));
  }
  return f;
}

/// Analytic df/dw.
inline StateMat noise_jacobian(const GyroBiasModel& bias_u, const GyroBiasModel& bias_l) {
  StateMat l = StateMat::Identity();
  l.block<3, 3>(idx::bias_u, idx::bias_u) = bias_u.rate_matrix();
  l.block<3, 3>(idx::bias_l, idx::bias_l) = bias_l.rate_matrix();
  return l;
}

/// IMU velocity in nav: V += (q a_m q* - gravity) dt.
inline Vec3 propagate_imu_velocity(const Vec3& v_prev, const Quaternion& q, const Vec3& accel, double dt,
                                   const Vec3& gravity = Vec3(0.0, 0.0, kStandardGravity)) {
  return v_prev + (rotate_vector(q, accel) - gravity) * dt;
}

// ---------------------------------------------------------------------------
// Measurement models

using Meas1Vec = Eigen::Matrix<double, 14, 1>;

/// h1 = {omega_u + s b_u; q_u; omega_l + s b_l; q_l}, s = bias_sign.
inline Meas1Vec measurement1(const StateVec& x, double bias_sign = 1.0) {
  Meas1Vec h;
  for (int s = 0; s < 2; ++s) {
    const int o = s * idx::segment_stride;
    h.segment<3>(7 * s) = x.segment<3>(o) + bias_sign * x.segment<3>(o + 3);
    h.segment<4>(7 * s + 3) = x.segment<4>(o + 6);
  }
  return h;
}

inline Eigen::Matrix<double, 14, kStateDim> measurement1_jacobian(double bias_sign = 1.0) {
  Eigen::Matrix<double, 14, kStateDim> h = Eigen::Matrix<double, 14, kStateDim>::Zero();
  for (int s = 0; s < 2; ++s) {
    const int o = s * idx::segment_stride;
    h.block<3, 3>(7 * s, o) = Mat3::Identity();
    h.block<3, 3>(7 * s, o + 3) = bias_sign * Mat3::Identity();
    h.block<4, 4>(7 * s + 3, o + 6) = Eigen::Matrix4d::Identity();
  }
  return h;
}

/// Measurement vector y1 with each orientation measurement sign-aligned to
/// the state quaternion it is compared against.
inline Meas1Vec measurement1_observation(const StateVec& x, const Vec3& gyro_u, const Quaternion& qgrad_u,
                                         const Vec3& gyro_l, const Quaternion& qgrad_l) {
  const Quaternion qu = Quaternion::from_coeffs(x.segment<4>(idx::q_u));
  const Quaternion ql = Quaternion::from_coeffs(x.segment<4>(idx::q_l));
  Meas1Vec y;
  y << gyro_u, align_sign(qgrad_u, qu).coeffs(), gyro_l, align_sign(qgrad_l, ql).coeffs();
  return y;
}

/// Rotation by q / ||q||. The measurement models depend on the direction
/// of the state quaternion only, so its norm never looks observable.
inline Vec3 unit_rotate(const Quaternion& q, const Vec3& v) { return sandwich(q, v) / q.squared_norm(); }

/// Knee velocity through the lower segment minus knee velocity through the
/// upper segment. Zero for a consistent rigid chain.
inline Vec3 measurement2(const StateVec& x, const Vec3& v_u, const Vec3& v_l, const LegModel& leg) {
  const Quaternion qu = Quaternion::from_coeffs(x.segment<4>(idx::q_u));
  const Quaternion ql = Quaternion::from_coeffs(x.segment<4>(idx::q_l));
  const Vec3 knee_u = v_u + unit_rotate(qu, x.segment<3>(idx::omega_u).cross(leg.lever_upper()));
  const Vec3 knee_l = v_l + unit_rotate(ql, x.segment<3>(idx::omega_l).cross(leg.lever_lower()));
  return knee_l - knee_u;
}

using Meas3Vec = Eigen::Matrix<double, 6, 1>;

/// Hip->knee and knee->ankle vectors predicted in the camera frame.
inline Meas3Vec measurement3(const StateVec& x, const Quaternion& camera_from_nav, const LegModel& leg) {
  const Quaternion qu = Quaternion::from_coeffs(x.segment<4>(idx::q_u));
  const Quaternion ql = Quaternion::from_coeffs(x.segment<4>(idx::q_l));
  Meas3Vec h;
  h.head<3>() = unit_rotate(quat_multiply(camera_from_nav, qu), Vec3(-leg.l_u, 0.0, 0.0));
  h.tail<3>() = unit_rotate(quat_multiply(camera_from_nav, ql), Vec3(-leg.l_l, 0.0, 0.0));
  return h;
}

inline constexpr double kJacobianStep = 1e-6;

/// Central finite-difference Jacobian of a measurement function over the state.
template <int Rows>
Eigen::Matrix<double, Rows, kStateDim> numeric_jacobian(
    const std::function<Eigen::Matrix<double, Rows, 1>(const StateVec&)>& h, const StateVec& x,
    double step = kJacobianStep) {
  Eigen::Matrix<double, Rows, kStateDim> j;
  for (int i = 0; i < kStateDim; ++i) {
    StateVec xp = x, xm = x;
    xp[i] += step;
    xm[i] -= step;
    j.col(i) = (h(xp) - h(xm)) / (2.0 * step);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Filter

/// Camera-derived segment vectors in the camera frame.
struct SegmentObservation {
  double t = 0.0;
  Vec3 upper = Vec3::Zero();  ///< knee - hip
  Vec3 lower = Vec3::Zero();  ///< ankle - knee
  bool upper_valid = false;
  bool lower_valid = false;
};

enum class GateMode {
  Orientation,  ///< a closed gate drops that segment's four orientation rows
  Segment,      ///< a closed gate drops the segment's whole seven-row block
};

struct EkfOptions {
  NoiseConfig noise;
  LegModel leg;
  GyroBiasModel bias_u;
  GyroBiasModel bias_l;
  EarthFields fields;
  double alpha = 5.0;
  double bias_sign = 1.0;
  GateMode gate_mode = GateMode::Orientation;
  bool use_gyro_rows = true;
  bool use_orientation_rows = true;
  bool use_constraint = true;
  bool use_camera = true;
  bool camera_before_constraint = false;
  Quaternion camera_from_nav = Quaternion::identity();
  double velocity_reset_period = 1.0 / 30.0;
  double max_stream_gap = 0.5;
  double max_predict_dt = 0.05;
  /// R entries at or above this are treated as infinite and their rows dropped.
  double infinite_variance = 1e6;
  bool drop_infinite_rows = true;
  double max_condition = 1e12;
  double psd_floor = -1e-6;

  void validate() const {
    noise.validate();
    leg.validate();
    bias_u.validate();
    bias_l.validate();
    fields.validate();
    if (!(alpha > 1.0)) throw InvalidArgument("EkfOptions: alpha must be > 1");
    if (bias_sign != 1.0 && bias_sign != -1.0) throw InvalidArgument("EkfOptions: bias_sign must be +1 or -1");
    if (!(velocity_reset_period > 0.0)) throw InvalidArgument("EkfOptions: velocity_reset_period must be > 0");
    if (!(max_predict_dt > 0.0 && max_predict_dt <= 0.05)) {
      throw InvalidArgument("EkfOptions: max_predict_dt must be in (0, 0.05]");
    }
  }
};

enum class UpdateOutcome { Applied, Gated, IllConditioned };

struct UpdateReport {
  UpdateOutcome outcome = UpdateOutcome::Gated;
  int rows = 0;
  double trace_before = 0.0;
  double trace_after = 0.0;
  double condition = 0.0;
};

/// Running hygiene record, updated after every exposed step.
struct FilterDiagnostics {
  double worst_norm_error = 0.0;  ///< max | ||q|| - 1 |
  double min_eigenvalue = std::numeric_limits<double>::infinity();
  double worst_asymmetry = 0.0;
  long ungated_updates = 0;
  long trace_increases = 0;
  long ill_conditioned = 0;
  long gated_updates = 0;
};

/// Returns the unit quaternion with the same sign (no w >= 0 canonicalisation,
/// so the covariance stays consistent with the state).
inline Quaternion rescale_unit(const Quaternion& q) {
  const double n = q.norm();
  if (!(n > kDegenerateNorm) || !std::isfinite(n)) throw DivergenceError("state quaternion norm degenerate");
  return (1.0 / n) * q;
}

class HybridEkf {
 public:
  explicit HybridEkf(EkfOptions opts) : opts_(std::move(opts)) { opts_.validate(); }

  /// x0 = {gyro, 0, q_grad} per segment; P0 from R1 on the rate and
  /// orientation rows and 1e-4 on the bias rows.
  void initialize(const Vec3& gyro_u, const Quaternion& qgrad_u, const Vec3& gyro_l, const Quaternion& qgrad_l) {
    FusionState s;
    s.upper = {gyro_u, Vec3::Zero(), rescale_unit(qgrad_u)};
    s.lower = {gyro_l, Vec3::Zero(), rescale_unit(qgrad_l)};
    x_ = s.to_vector();
    StateVec p0;
    const auto& r1 = opts_.noise.r1_diag;
    p0 << r1.segment<3>(0), Vec3::Constant(1e-4), r1.segment<4>(3), r1.segment<3>(7), Vec3::Constant(1e-4),
        r1.segment<4>(10);
    p_ = p0.asDiagonal();
    v_u_.setZero();
    v_l_.setZero();
    initialized_ = true;
    record();
  }

  void set_state(const StateVec& x, const StateMat& p) {
    x_ = x;
    p_ = p;
    initialized_ = true;
  }

  /// RK4 on the state and on P' = F P + P F^T + L Q L^T, with F and L taken at
  /// the start of the step. Longer intervals are split into equal substeps.
  void predict(double dt) {
    if (!(dt > 0.0)) throw InvalidArgument("predict: dt must be > 0");
    const int n = static_cast<int>(std::ceil(dt / opts_.max_predict_dt - 1e-9));
    const double h = dt / n;
    for (int k = 0; k < n; ++k) predict_step(h);
    record();
  }

  UpdateReport update_measurement1(const Vec3& gyro_u, const Quaternion& qgrad_u, bool gate_u, const Vec3& gyro_l,
                                   const Quaternion& qgrad_l, bool gate_l) {
    const Meas1Vec y = measurement1_observation(x_, gyro_u, qgrad_u, gyro_l, qgrad_l);
    const Meas1Vec r = y - measurement1(x_, opts_.bias_sign);
    std::vector<bool> active(14, true);
    for (int s = 0; s < 2; ++s) {
      const bool gated = s == 0 ? gate_u : gate_l;
      for (int k = 0; k < 3; ++k) active[7 * s + k] = opts_.use_gyro_rows && !(gated && opts_.gate_mode == GateMode::Segment);
      for (int k = 3; k < 7; ++k) active[7 * s + k] = opts_.use_orientation_rows && !gated;
    }
    const Eigen::MatrixXd h = measurement1_jacobian(opts_.bias_sign);
    return apply(r, h, opts_.noise.r1_diag, active);
  }

  /// Integrates both IMU velocities with the current orientation estimates.
  void propagate_velocities(const Vec3& accel_u, const Vec3& accel_l, double dt) {
    const FusionState s = state();
    v_u_ = propagate_imu_velocity(v_u_, s.upper.q, accel_u, dt, opts_.fields.gravity);
    v_l_ = propagate_imu_velocity(v_l_, s.lower.q, accel_l, dt, opts_.fields.gravity);
  }

  UpdateReport update_measurement2() {
    const Vec3 vu = v_u_, vl = v_l_;
    const LegModel leg = opts_.leg;
    const std::function<Vec3(const StateVec&)> h2 = [&](const StateVec& x) { return measurement2(x, vu, vl, leg); };
    const Vec3 r = -h2(x_);
    const Eigen::MatrixXd h = numeric_jacobian<3>(h2, x_);
    return apply(r, h, opts_.noise.r2_diag, std::vector<bool>(3, true));
  }

  UpdateReport update_measurement3(const SegmentObservation& obs) {
    const Quaternion qcn = opts_.camera_from_nav;
    const LegModel leg = opts_.leg;
    const std::function<Meas3Vec(const StateVec&)> h3 = [&](const StateVec& x) { return measurement3(x, qcn, leg); };
    Meas3Vec y;
    y << obs.upper, obs.lower;
    const Meas3Vec r = y - h3(x_);
    std::vector<bool> active(6, false);
    for (int k = 0; k < 3; ++k) {
      active[k] = obs.upper_valid;
      active[3 + k] = obs.lower_valid;
    }
    const Eigen::MatrixXd h = numeric_jacobian<6>(h3, x_);
    return apply(r, h, opts_.noise.r3_diag, active);
  }

  /// Re-anchors both auxiliary IMU velocities on a common knee velocity. The
  /// knee velocity itself cancels in the constraint residual, which is zero
  /// right after the reset.
  void reset_velocities(const std::optional<Vec3>& knee_velocity = std::nullopt) {
    const FusionState s = state();
    const Vec3 rel_u = rotate_vector(s.upper.q, s.upper.omega.cross(opts_.leg.lever_upper()));
    const Vec3 rel_l = rotate_vector(s.lower.q, s.lower.omega.cross(opts_.leg.lever_lower()));
    const Vec3 ref = knee_velocity ? *knee_velocity : Vec3(0.5 * ((v_u_ + rel_u) + (v_l_ + rel_l)));
    v_u_ = ref - rel_u;
    v_l_ = ref - rel_l;
  }

  FusionState state() const { return FusionState::from_vector(x_); }
  const StateVec& state_vector() const { return x_; }
  const StateMat& covariance() const { return p_; }
  const Vec3& velocity_upper() const { return v_u_; }
  const Vec3& velocity_lower() const { return v_l_; }
  void set_velocities(const Vec3& vu, const Vec3& vl) {
    v_u_ = vu;
    v_l_ = vl;
  }
  const FilterDiagnostics& diagnostics() const { return diag_; }
  const EkfOptions& options() const { return opts_; }
  bool initialized() const { return initialized_; }

  /// Generic sequential update on the selected rows. Rows whose variance is
  /// at or above infinite_variance are dropped when drop_infinite_rows is set,
  /// the exact zero-gain limit of R -> infinity.
  UpdateReport apply(const Eigen::VectorXd& residual, const Eigen::MatrixXd& h_full, const Eigen::VectorXd& r_diag,
                     const std::vector<bool>& active) {
    UpdateReport rep;
    rep.trace_before = rep.trace_after = p_.trace();
    std::vector<int> rows;
    for (int i = 0; i < residual.size(); ++i) {
      if (!active[static_cast<std::size_t>(i)]) continue;
      if (opts_.drop_infinite_rows && r_diag[i] >= opts_.infinite_variance) continue;
      rows.push_back(i);
    }
    rep.rows = static_cast<int>(rows.size());
    if (rows.empty()) {
      ++diag_.gated_updates;
      return rep;
    }
    const int m = rep.rows;
    Eigen::MatrixXd h(m, kStateDim);
    Eigen::VectorXd r(m), rd(m);
    for (int k = 0; k < m; ++k) {
      h.row(k) = h_full.row(rows[k]);
      r[k] = residual[rows[k]];
      rd[k] = r_diag[rows[k]];
    }
    const Eigen::MatrixXd pht = p_ * h.transpose();
    Eigen::MatrixXd s = h * pht;
    s.diagonal() += rd;
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(s);
    const auto& sv = svd.singularValues();
    rep.condition = sv[m - 1] > 0.0 ? sv[0] / sv[m - 1] : std::numeric_limits<double>::infinity();
    if (!(rep.condition <= opts_.max_condition)) {
      rep.outcome = UpdateOutcome::IllConditioned;
      ++diag_.ill_conditioned;
      return rep;
    }
    const Eigen::MatrixXd k = s.ldlt().solve(pht.transpose()).transpose();
    x_ += k * r;
    // Joseph form: algebraically (I - KH) P, but keeps P positive
    // semi-definite when R is tiny compared with H P H^T.
    const StateMat ikh = StateMat::Identity() - k * h;
    p_ = (ikh * p_ * ikh.transpose() + k * rd.asDiagonal() * k.transpose()).eval();
    p_ = 0.5 * (p_ + p_.transpose()).eval();
    renormalize();
    rep.outcome = UpdateOutcome::Applied;
    rep.trace_after = p_.trace();
    ++diag_.ungated_updates;
    if (rep.trace_after > rep.trace_before * (1.0 + 1e-12) + 1e-15) ++diag_.trace_increases;
    record();
    return rep;
  }

 private:
  void predict_step(double h) {
    const GyroBiasModel& bu = opts_.bias_u;
    const GyroBiasModel& bl = opts_.bias_l;
    const StateMat f = process_jacobian(x_, bu, bl);
    const StateMat l = noise_jacobian(bu, bl);
    const StateMat lql = l * opts_.noise.q_diag.asDiagonal() * l.transpose();
    auto fx = [&](const StateVec& x) { return process_derivative(x, bu, bl); };
    auto fp = [&](const StateMat& p) -> StateMat { return f * p + p * f.transpose() + lql; };

    const StateVec k1 = fx(x_);
    const StateVec k2 = fx(x_ + 0.5 * h * k1);
    const StateVec k3 = fx(x_ + 0.5 * h * k2);
    const StateVec k4 = fx(x_ + h * k3);
    x_ += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

    const StateMat m1 = fp(p_);
    const StateMat m2 = fp(p_ + 0.5 * h * m1);
    const StateMat m3 = fp(p_ + 0.5 * h * m2);
    const StateMat m4 = fp(p_ + h * m3);
    p_ += h / 6.0 * (m1 + 2.0 * m2 + 2.0 * m3 + m4);
    p_ = 0.5 * (p_ + p_.transpose()).eval();
    renormalize();
  }

  void renormalize() {
    if (!x_.allFinite() || !p_.allFinite()) throw DivergenceError("non-finite filter state");
    for (int o : {idx::q_u, idx::q_l}) {
      x_.segment<4>(o) = rescale_unit(Quaternion::from_coeffs(x_.segment<4>(o))).coeffs();
    }
  }

  void record() {
    for (int o : {idx::q_u, idx::q_l}) {
      diag_.worst_norm_error = std::max(diag_.worst_norm_error, std::abs(x_.segment<4>(o).norm() - 1.0));
    }
    diag_.worst_asymmetry = std::max(diag_.worst_asymmetry, (p_ - p_.transpose()).cwiseAbs().maxCoeff());
    const double e = Eigen::SelfAdjointEigenSolver<StateMat>(p_, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
    diag_.min_eigenvalue = std::min(diag_.min_eigenvalue, e);
    if (e < opts_.psd_floor) {
      throw DivergenceError("covariance lost positive semi-definiteness (eigenvalue " + std::to_string(e) + ")");
    }
  }

  EkfOptions opts_;
  StateVec x_ = StateVec::Zero();
  StateMat p_ = StateMat::Identity();
  Vec3 v_u_ = Vec3::Zero();
  Vec3 v_l_ = Vec3::Zero();
  FilterDiagnostics diag_;
  bool initialized_ = false;
};

// ---------------------------------------------------------------------------
// Batch run

struct EkfStep {
  double t = 0.0;
  FusionState state;
  Quaternion qgrad_u;
  Quaternion qgrad_l;
  bool gate_u = false;  ///< true when the upper orientation measurement was suppressed
  bool gate_l = false;
  bool camera_update = false;
};

struct EkfRun {
  std::vector<EkfStep> steps;
  FilterDiagnostics diagnostics;
};

/// Runs the filter over two synchronous IMU streams and an optional camera
/// segment stream. Camera samples are applied at the IMU step nearest in
/// time. Each IMU gets its own gradient-descent tracker, initialised by
/// convergence on the first sample.
inline EkfRun ekf_run(const std::vector<ImuSample>& imu_u, const std::vector<ImuSample>& imu_l,
                      const std::vector<SegmentObservation>& camera, const EkfOptions& opts,
                      const std::function<void(const HybridEkf&, const EkfStep&)>& observer = {}) {
  if (imu_u.size() != imu_l.size() || imu_u.empty()) {
    throw InvalidArgument("ekf_run: IMU streams must be non-empty and equally long");
  }
  HybridEkf ekf(opts);
  GradientDescentTracker gd_u(opts.fields, opts.alpha), gd_l(opts.fields, opts.alpha);
  const double g = opts.fields.g();
  const double thr = opts.noise.accel_threshold;

  EkfRun run;
  run.steps.reserve(imu_u.size());
  std::size_t cam = 0;
  double next_reset = imu_u.front().t + opts.velocity_reset_period;
  for (std::size_t k = 0; k < imu_u.size(); ++k) {
    const ImuSample& su = imu_u[k];
    const ImuSample& sl = imu_l[k];
    if (std::abs(su.t - sl.t) > 1e-9) throw InvalidArgument("ekf_run: IMU streams are not synchronous");
    EkfStep step;
    step.t = su.t;
    double dt = 0.0;
    if (k == 0) {
      step.qgrad_u = gd_u.initialize(su);
      step.qgrad_l = gd_l.initialize(sl);
      ekf.initialize(su.gyro, step.qgrad_u, sl.gyro, step.qgrad_l);
    } else {
      dt = su.t - imu_u[k - 1].t;
      if (!(dt > 0.0)) throw InvalidArgument("ekf_run: IMU timestamps must increase");
      if (dt > opts.max_stream_gap) {
        throw StreamDiscontinuity("IMU stream gap of " + std::to_string(dt) + " s at t = " + std::to_string(su.t));
      }
      ekf.predict(dt);
      step.qgrad_u = gd_u.update(su, dt);
      step.qgrad_l = gd_l.update(sl, dt);
      step.gate_u = acceleration_gate(su, g, thr) || !opts.use_orientation_rows;
      step.gate_l = acceleration_gate(sl, g, thr) || !opts.use_orientation_rows;
      ekf.update_measurement1(su.gyro, step.qgrad_u, step.gate_u, sl.gyro, step.qgrad_l, step.gate_l);
      ekf.propagate_velocities(su.accel, sl.accel, dt);
    }

    // Camera samples whose nearest IMU step is this one.
    const double half = 0.5 * (k + 1 < imu_u.size() ? imu_u[k + 1].t - su.t : dt);
    std::vector<const SegmentObservation*> pending;
    while (cam < camera.size() && camera[cam].t < su.t + half) {
      if (camera[cam].t >= su.t - half || k == 0) pending.push_back(&camera[cam]);
      ++cam;
    }
    const bool camera_now = opts.use_camera && !pending.empty();
    if (k > 0) {
      if (camera_now && opts.camera_before_constraint) {
        for (const auto* c : pending) step.camera_update |= ekf.update_measurement3(*c).outcome == UpdateOutcome::Applied;
      }
      if (opts.use_constraint) ekf.update_measurement2();
      if (camera_now && !opts.camera_before_constraint) {
        for (const auto* c : pending) step.camera_update |= ekf.update_measurement3(*c).outcome == UpdateOutcome::Applied;
      }
    }
    if (su.t + 1e-9 >= next_reset) {
      ekf.reset_velocities();
      while (next_reset <= su.t + 1e-9) next_reset += opts.velocity_reset_period;
    }
    step.state = ekf.state();
    if (observer) observer(ekf, step);
    run.steps.push_back(step);
  }
  run.diagnostics = ekf.diagnostics();
  return run;
}

}  // namespace legfusion
