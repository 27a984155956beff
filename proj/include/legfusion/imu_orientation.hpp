#pragma once

// Standalone IMU orientation machinery: gyro quaternion kinematics, the
// first-order gyro bias model, and the gradient-descent accelerometer /
// magnetometer orientation estimate that feeds the fusion filter.

#include <Eigen/Dense>

#include <cmath>
#include <optional>

#include "legfusion/errors.hpp"
#include "legfusion/quat.hpp"

namespace legfusion {

inline constexpr double kStandardGravity = 9.81;

struct ImuSample {
  double t = 0.0;
  Vec3 gyro = Vec3::Zero();   ///< rad/s, sensor frame
  Vec3 accel = Vec3::Zero();  ///< m/s^2 specific force, sensor frame
  Vec3 mag = Vec3::Zero();    ///< normalized field, sensor frame
};

/// First-order Gauss-Markov gyro bias:  db/dt = -T b + T w,  T = diag(1/tau).
struct GyroBiasModel {
  Vec3 tau = Vec3::Constant(100.0);  ///< seconds
  Mat3 w_cov = Mat3::Zero();

  Mat3 rate_matrix() const { return tau.cwiseInverse().asDiagonal(); }

  void validate() const {
    if (!(tau.array() > 0.0).all()) throw InvalidArgument("GyroBiasModel: every tau must be > 0");
    if (!(w_cov - w_cov.transpose()).isZero(1e-12)) {
      throw InvalidArgument("GyroBiasModel: w_cov must be symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Mat3> es(w_cov);
    if (es.eigenvalues().minCoeff() < -1e-12) throw InvalidArgument("GyroBiasModel: w_cov must be PSD");
  }
};

/// Reference fields in the navigation frame.
struct EarthFields {
  Vec3 gravity{0.0, 0.0, kStandardGravity};  ///< resting accelerometer reading, m/s^2
  Vec3 mag_field{0.5, 0.0, -std::sqrt(3.0) / 2.0};  ///< unit vector, 60 deg dip
  /// Replace the magnetic reference by the (horizontal, 0, vertical) form of
  /// the measured field rotated into nav, removing declination sensitivity.
  bool reduce_magnetic = true;

  /// Field with the given dip angle below the horizon, pointing along +x.
  static EarthFields with_dip(double dip_rad, double g = kStandardGravity) {
    EarthFields f;
    f.gravity = {0.0, 0.0, g};
    f.mag_field = {std::cos(dip_rad), 0.0, -std::sin(dip_rad)};
    return f;
  }

  double g() const { return gravity.norm(); }

  void validate() const {
    if (std::abs(mag_field.norm() - 1.0) > 1e-9) throw InvalidArgument("EarthFields: mag_field must be unit");
    if (!(gravity.norm() > 0.0)) throw InvalidArgument("EarthFields: gravity must be non-zero");
    if (gravity.normalized().cross(mag_field).norm() < 1e-6) {
      throw InvalidArgument("EarthFields: gravity and mag_field are parallel");
    }
  }
};

/// dq/dt = 1/2 q ⊗ (0, omega), omega in the sensor frame.
inline Quaternion quat_rate_from_gyro(const Quaternion& q, const Vec3& omega) {
  return 0.5 * quat_multiply(q, Quaternion::pure(omega));
}

/// db/dt = -T b + T w.
inline Vec3 bias_rate(const Vec3& b, const GyroBiasModel& model, const Vec3& w) {
  return model.rate_matrix() * (w - b);
}

/// True when the gate is CLOSED, i.e. the orientation measurement must be
/// suppressed:  ||accel|| - g > threshold. The comparison is signed, so free
/// fall (||accel|| ~ 0) does not close the gate.
inline bool acceleration_gate(const ImuSample& sample, double g, double threshold) {
  return sample.accel.norm() - g > threshold;
}

// ---------------------------------------------------------------------------
// Gradient-descent orientation

namespace detail {

/// Jacobian of u(q) = q* ⊗ (0,d) ⊗ q (vector part) with respect to the raw
/// quaternion coefficients (w, x, y, z). u(q) = R(q)^T d with R quadratic in q.
inline Eigen::Matrix<double, 3, 4> inverse_sandwich_jacobian(const Quaternion& q, const Vec3& d) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 dw, dx, dy, dz;
  dw << w, -z, y, z, w, -x, -y, x, w;
  dx << x, y, z, y, -x, -w, z, w, -x;
  dy << -y, x, w, x, y, z, -w, z, -y;
  dz << -z, -w, x, w, -z, y, x, y, z;
  Eigen::Matrix<double, 3, 4> j;
  j.col(0) = 2.0 * dw.transpose() * d;
  j.col(1) = 2.0 * dx.transpose() * d;
  j.col(2) = 2.0 * dy.transpose() * d;
  j.col(3) = 2.0 * dz.transpose() * d;
  return j;
}

}  // namespace detail

/// Reference magnetic direction used by the objective for a given estimate.
inline Vec3 magnetic_reference(const Quaternion& q, const Vec3& mag_hat, const EarthFields& fields) {
  if (!fields.reduce_magnetic) return fields.mag_field;
  const Vec3 h = sandwich(q, mag_hat);
  return {std::hypot(h.x(), h.y()), 0.0, h.z()};
}

/// Stacked alignment objective f = [q* g q - a; q* b q - m] for normalized
/// accelerometer a and magnetometer m (6 rows; 3 when use_mag is false).
inline Eigen::VectorXd orientation_objective(const Quaternion& q, const Vec3& accel_hat, const Vec3& mag_hat,
                                             const EarthFields& fields, bool use_mag = true) {
  const Vec3 g_ref = fields.gravity.normalized();
  Eigen::VectorXd f(use_mag ? 6 : 3);
  f.head<3>() = sandwich(q.conjugate(), g_ref) - accel_hat;
  if (use_mag) {
    const Vec3 b_ref = magnetic_reference(q, mag_hat, fields);
    f.tail<3>() = sandwich(q.conjugate(), b_ref) - mag_hat;
  }
  return f;
}

/// Gradient J^T f of 1/2 ||f||^2 with respect to the quaternion coefficients.
/// The magnetic reference is held fixed at its value for q.
inline Vec4 orientation_gradient(const Quaternion& q, const Vec3& accel_hat, const Vec3& mag_hat,
                                 const EarthFields& fields, bool use_mag = true) {
  const Vec3 g_ref = fields.gravity.normalized();
  const Vec3 f_g = sandwich(q.conjugate(), g_ref) - accel_hat;
  Vec4 grad = detail::inverse_sandwich_jacobian(q, g_ref).transpose() * f_g;
  if (use_mag) {
    const Vec3 b_ref = magnetic_reference(q, mag_hat, fields);
    const Vec3 f_b = sandwich(q.conjugate(), b_ref) - mag_hat;
    grad += detail::inverse_sandwich_jacobian(q, b_ref).transpose() * f_b;
  }
  return grad;
}

struct GradientStepOptions {
  bool use_mag = true;
  double min_gradient_norm = 1e-12;
};

/// One normalized gradient step of size `mu` from q_prev; result normalized.
/// A vanishing gradient returns q_prev unchanged.
inline Quaternion gradient_step(const Quaternion& q_prev, const ImuSample& sample, const EarthFields& fields,
                                double mu, const GradientStepOptions& opts = {}) {
  const double an = sample.accel.norm();
  const double mn = sample.mag.norm();
  if (!(an > 0.0) || (opts.use_mag && !(mn > 0.0))) {
    throw InvalidArgument("gradient_step: accelerometer and magnetometer must be non-zero");
  }
  const Vec3 a_hat = sample.accel / an;
  const Vec3 m_hat = opts.use_mag ? Vec3(sample.mag / mn) : Vec3::Zero();
  const Vec4 grad = orientation_gradient(q_prev, a_hat, m_hat, fields, opts.use_mag);
  const double gn = grad.norm();
  if (gn < opts.min_gradient_norm) return q_prev;
  return normalize(Quaternion::from_coeffs(q_prev.coeffs() - mu * grad / gn));
}

/// Gradient-descent orientation update with the rate-limited step
/// mu = alpha * gyro_rate_norm * dt, where gyro_rate_norm is ||dq/dt|| from
/// the gyroscope. alpha must exceed 1.
inline Quaternion gradient_descent_orientation(const Quaternion& q_prev, const ImuSample& sample,
                                               const EarthFields& fields, double gyro_rate_norm, double dt,
                                               double alpha, const GradientStepOptions& opts = {}) {
  if (!(alpha > 1.0)) throw InvalidArgument("gradient_descent_orientation: alpha must be > 1");
  return gradient_step(q_prev, sample, fields, alpha * gyro_rate_norm * dt, opts);
}

struct ConvergeOptions {
  int max_iterations = 500;
  double initial_step = 0.05;
  double min_step = 1e-10;
  bool use_mag = true;
};

struct ConvergeResult {
  Quaternion q;
  int iterations = 0;
  double cost = 0.0;
};

/// Iterates normalized gradient steps on a single sample until the step size
/// collapses. The step is halved whenever a trial step fails to lower the
/// objective, so the iteration settles instead of oscillating at +-mu.
inline ConvergeResult converge_orientation(const ImuSample& sample, const EarthFields& fields,
                                           const Quaternion& q0, const ConvergeOptions& opts = {}) {
  const Vec3 a_hat = sample.accel.normalized();
  const Vec3 m_hat = opts.use_mag ? Vec3(sample.mag.normalized()) : Vec3::Zero();
  GradientStepOptions step_opts;
  step_opts.use_mag = opts.use_mag;

  ConvergeResult r{normalize(q0), 0, 0.0};
  double mu = opts.initial_step;
  while (r.iterations < opts.max_iterations && mu > opts.min_step) {
    ++r.iterations;
    // The reduced magnetic reference depends on q; freeze it for the trial so
    // the acceptance test compares costs of one objective.
    EarthFields frozen = fields;
    if (opts.use_mag) frozen.mag_field = magnetic_reference(r.q, m_hat, fields);
    frozen.reduce_magnetic = false;
    auto cost = [&](const Quaternion& q) {
      return orientation_objective(q, a_hat, m_hat, frozen, opts.use_mag).squaredNorm();
    };
    const Quaternion trial = gradient_step(r.q, sample, frozen, mu, step_opts);
    if (cost(trial) < cost(r.q)) {
      r.q = trial;
    } else {
      mu *= 0.5;
    }
  }
  r.cost = orientation_objective(r.q, a_hat, m_hat, fields, opts.use_mag).squaredNorm();
  return r;
}

/// Accelerometer/magnetometer orientation chain for one IMU. Each update
/// starts from the tracker's own previous estimate, so its output is
/// independent of any filter that consumes it.
class GradientDescentTracker {
 public:
  GradientDescentTracker(EarthFields fields, double alpha) : fields_(std::move(fields)), alpha_(alpha) {
    if (!(alpha_ > 1.0)) throw InvalidArgument("GradientDescentTracker: alpha must be > 1");
  }

  /// Converges on a single (ideally static) sample.
  const Quaternion& initialize(const ImuSample& sample, const Quaternion& guess = Quaternion::identity()) {
    q_ = converge_orientation(sample, fields_, guess).q;
    initialized_ = true;
    return q_;
  }

  const Quaternion& update(const ImuSample& sample, double dt) {
    if (!initialized_) return initialize(sample);
    const double rate = quat_rate_from_gyro(q_, sample.gyro).norm();
    q_ = gradient_descent_orientation(q_, sample, fields_, rate, dt, alpha_);
    return q_;
  }

  bool initialized() const { return initialized_; }
  const Quaternion& orientation() const { return q_; }

 private:
  EarthFields fields_;
  double alpha_;
  Quaternion q_ = Quaternion::identity();
  bool initialized_ = false;
};

}  // namespace legfusion
