#pragma once

// Synthetic two-link leg: closed-form sagittal joint angles with exact first
// and second time derivatives, forward kinematics, IMU signal synthesis and
// camera marker synthesis (labeled blobs or rendered frames).

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "legfusion/depth_estimation.hpp"
#include "legfusion/errors.hpp"
#include "legfusion/fusion_ekf.hpp"
#include "legfusion/imu_orientation.hpp"
#include "legfusion/marker_vision.hpp"
#include "legfusion/quat.hpp"
#include "legfusion/random.hpp"

namespace legfusion {

// ---------------------------------------------------------------------------
// Value + first + second derivative arithmetic

struct Jet {
  double v = 0.0;
  double d = 0.0;
  double dd = 0.0;

  static Jet constant(double c) { return {c, 0.0, 0.0}; }
  static Jet variable(double t) { return {t, 1.0, 0.0}; }

  friend Jet operator+(const Jet& a, const Jet& b) { return {a.v + b.v, a.d + b.d, a.dd + b.dd}; }
  friend Jet operator-(const Jet& a, const Jet& b) { return {a.v - b.v, a.d - b.d, a.dd - b.dd}; }
  friend Jet operator*(const Jet& a, const Jet& b) {
    return {a.v * b.v, a.d * b.v + a.v * b.d, a.dd * b.v + 2.0 * a.d * b.d + a.v * b.dd};
  }
  friend Jet operator*(double s, const Jet& a) { return {s * a.v, s * a.d, s * a.dd}; }
  friend Jet operator+(double s, const Jet& a) { return {s + a.v, a.d, a.dd}; }
};

inline Jet sin(const Jet& a) {
  const double s = std::sin(a.v), c = std::cos(a.v);
  return {s, c * a.d, -s * a.d * a.d + c * a.dd};
}

inline Jet cos(const Jet& a) {
  const double s = std::sin(a.v), c = std::cos(a.v);
  return {c, -s * a.d, -c * a.d * a.d - s * a.dd};
}

struct Vec3Jet {
  Vec3 v = Vec3::Zero();
  Vec3 d = Vec3::Zero();
  Vec3 dd = Vec3::Zero();

  friend Vec3Jet operator+(const Vec3Jet& a, const Vec3Jet& b) { return {a.v + b.v, a.d + b.d, a.dd + b.dd}; }
};

/// Rotation matrix with its first two time derivatives.
struct RotJet {
  Mat3 r = Mat3::Identity();
  Mat3 d = Mat3::Zero();
  Mat3 dd = Mat3::Zero();

  friend RotJet operator*(const RotJet& a, const RotJet& b) {
    return {a.r * b.r, a.d * b.r + a.r * b.d, a.dd * b.r + 2.0 * a.d * b.d + a.r * b.dd};
  }

  /// Time derivatives of R * c for a constant body vector c.
  Vec3Jet apply(const Vec3& c) const { return {r * c, d * c, dd * c}; }
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

/// Elementary rotation about a unit axis by a time-varying angle.
inline RotJet axis_rotation(const Vec3& axis, const Jet& angle) {
  const Mat3 k = skew(axis);
  const Mat3 r = Mat3::Identity() + std::sin(angle.v) * k + (1.0 - std::cos(angle.v)) * k * k;
  return {r, angle.d * k * r, angle.dd * k * r + angle.d * angle.d * k * k * r};
}

// ---------------------------------------------------------------------------
// Gait profiles

enum class GaitKind { Walk, RunInPlace, Static };

inline const char* gait_kind_name(GaitKind k) {
  switch (k) {
    case GaitKind::Walk: return "walk";
    case GaitKind::RunInPlace: return "run_in_place";
    case GaitKind::Static: return "static";
  }
  return "?";
}

inline GaitKind parse_gait_kind(const std::string& s) {
  for (GaitKind k : {GaitKind::Walk, GaitKind::RunInPlace, GaitKind::Static}) {
    if (s == gait_kind_name(k)) return k;
  }
  throw InvalidArgument("unknown gait kind '" + s + "'");
}

/// Raised-cosine sagittal gait. Angles in degrees, lengths in metres. The
/// motion starts after a static lead-in and its amplitude ramps up smoothly.
struct GaitProfile {
  GaitKind kind = GaitKind::Walk;
  double duration = 60.0;      ///< s
  double cadence = 0.5;        ///< stride frequency, Hz
  double hip_amplitude = 12.0;  ///< +- deg about hip_offset
  double hip_offset = 0.0;
  double knee_min = 0.0;  ///< flexion, deg
  double knee_max = 25.0;
  double knee_phase = 1.2;       ///< rad, knee lead relative to hip
  double pelvis_travel = 0.6;    ///< m, amplitude of the back-and-forth walk along x
  double pelvis_period = 20.0;   ///< s per back-and-forth cycle
  double vertical_bounce = 0.005;  ///< m, pelvis bob at twice the stride frequency
  double out_of_plane_sway = 3.0;  ///< deg about the walking axis
  double lead_in = 2.0;            ///< s standing still
  double ramp = 2.0;               ///< s amplitude ramp after the lead-in
  double hyperextension_limit = 5.0;  ///< deg of allowed negative flexion

  static GaitProfile walk() { return {}; }

  static GaitProfile run_in_place() {
    GaitProfile p;
    p.kind = GaitKind::RunInPlace;
    p.duration = 25.0;
    p.cadence = 2.5;
    p.hip_amplitude = 20.0;
    p.hip_offset = 10.0;
    p.knee_min = 0.0;
    p.knee_max = 80.0;
    p.pelvis_travel = 0.0;
    p.vertical_bounce = 0.06;
    p.ramp = 1.0;
    return p;
  }

  static GaitProfile standing(double duration = 10.0) {
    GaitProfile p;
    p.kind = GaitKind::Static;
    p.duration = duration;
    p.hip_amplitude = 0.0;
    p.knee_max = 0.0;
    p.pelvis_travel = 0.0;
    p.vertical_bounce = 0.0;
    p.out_of_plane_sway = 0.0;
    return p;
  }

  void validate() const {
    if (!(cadence > 0.0)) throw InvalidArgument("GaitProfile: cadence must be > 0");
    if (!(duration > 0.0)) throw InvalidArgument("GaitProfile: duration must be > 0");
    if (knee_max < knee_min) throw InvalidArgument("GaitProfile: knee_max < knee_min");
    if (knee_min < -hyperextension_limit) throw InvalidArgument("GaitProfile: knee hyperextension beyond limit");
    if (!(pelvis_period > 0.0) || lead_in < 0.0 || ramp < 0.0) {
      throw InvalidArgument("GaitProfile: pelvis_period must be > 0, lead_in and ramp >= 0");
    }
  }
};

struct TruthSample {
  double t = 0.0;
  JointPositions joints;
  Quaternion q_u;  ///< nav <- upper sensor
  Quaternion q_l;
  Vec3 omega_u = Vec3::Zero();  ///< sensor frame, rad/s
  Vec3 omega_l = Vec3::Zero();
  Vec3 imu_pos_u = Vec3::Zero();  ///< nav, m
  Vec3 imu_pos_l = Vec3::Zero();
  Vec3 imu_vel_u = Vec3::Zero();  ///< nav, m/s
  Vec3 imu_vel_l = Vec3::Zero();
  Vec3 imu_acc_u = Vec3::Zero();  ///< nav, m/s^2
  Vec3 imu_acc_l = Vec3::Zero();
  Vec3 bias_u = Vec3::Zero();  ///< gyro bias, filled by IMU synthesis
  Vec3 bias_l = Vec3::Zero();
  double hip_angle = 0.0;   ///< rad
  double knee_angle = 0.0;  ///< rad, flexion
};

inline Vec3 vee(const Mat3& s) { return {s(2, 1), s(0, 2), s(1, 0)}; }

/// Analytic evaluation of the gait at any time.
class GaitModel {
 public:
  GaitModel(GaitProfile profile, LegModel leg) : p_(std::move(profile)), leg_(leg) {
    p_.validate();
    leg_.validate();
  }

  TruthSample evaluate(double t) const {
    const double deg = M_PI / 180.0;
    const Jet env = envelope(t);
    const Jet tp = Jet::variable(t - p_.lead_in);
    const double w = 2.0 * M_PI * p_.cadence;

    const Jet hip = p_.hip_offset * deg * env + p_.hip_amplitude * deg * env * sin(w * tp);
    const Jet knee = Jet::constant(p_.knee_min * deg) +
                     0.5 * (p_.knee_max - p_.knee_min) * deg * env * (1.0 + (-1.0) * cos(w * tp + Jet::constant(p_.knee_phase)));
    const Jet sway = p_.out_of_plane_sway * deg * env * sin(w * tp);

    Vec3Jet pelvis;
    const Jet px = p_.pelvis_travel * env * sin((2.0 * M_PI / p_.pelvis_period) * tp);
    const Jet pz = Jet::constant(leg_.l_u + leg_.l_l) +
                   0.5 * p_.vertical_bounce * env * (1.0 + (-1.0) * cos(2.0 * w * tp));
    pelvis.v = {px.v, 0.0, pz.v};
    pelvis.d = {px.d, 0.0, pz.d};
    pelvis.dd = {px.dd, 0.0, pz.dd};

    // Segment orientation: R_x(sway) R_y(-pitch) R0, R0 points sensor +x up.
    const RotJet r0{standing_rotation(), Mat3::Zero(), Mat3::Zero()};
    const RotJet sway_rot = axis_rotation(Vec3::UnitX(), sway);
    const RotJet ru = sway_rot * axis_rotation(Vec3::UnitY(), -1.0 * hip) * r0;
    const RotJet rl = sway_rot * axis_rotation(Vec3::UnitY(), -1.0 * (hip - knee)) * r0;

    const Vec3Jet knee_p = pelvis + ru.apply(Vec3(-leg_.l_u, 0, 0));
    const Vec3Jet ankle_p = knee_p + rl.apply(Vec3(-leg_.l_l, 0, 0));
    const Vec3Jet imu_u = knee_p + ru.apply(Vec3(leg_.r_u, 0, 0));
    const Vec3Jet imu_l = knee_p + rl.apply(Vec3(-leg_.r_l, 0, 0));

    TruthSample s;
    s.t = t;
    s.joints = {pelvis.v, knee_p.v, ankle_p.v};
    const Quaternion q0 = standing_quaternion();
    const Quaternion qs = Quaternion::from_axis_angle(Vec3::UnitX(), sway.v);
    s.q_u = normalize(qs * Quaternion::from_axis_angle(Vec3::UnitY(), -hip.v) * q0);
    s.q_l = normalize(qs * Quaternion::from_axis_angle(Vec3::UnitY(), -(hip.v - knee.v)) * q0);
    s.omega_u = vee(ru.r.transpose() * ru.d);
    s.omega_l = vee(rl.r.transpose() * rl.d);
    s.imu_pos_u = imu_u.v;
    s.imu_pos_l = imu_l.v;
    s.imu_vel_u = imu_u.d;
    s.imu_vel_l = imu_l.d;
    s.imu_acc_u = imu_u.dd;
    s.imu_acc_l = imu_l.dd;
    s.hip_angle = hip.v;
    s.knee_angle = knee.v;
    return s;
  }

  /// Standing orientation: sensor +x up, +y lateral.
  static Mat3 standing_rotation() { return to_rotation_matrix(standing_quaternion()); }
  static Quaternion standing_quaternion() { return Quaternion::from_axis_angle(Vec3::UnitY(), -M_PI / 2.0); }

  const GaitProfile& profile() const { return p_; }
  const LegModel& leg() const { return leg_; }

 private:
  /// 0 during the lead-in, quintic smootherstep to 1 over the ramp.
  Jet envelope(double t) const {
    if (t <= p_.lead_in) return Jet::constant(0.0);
    if (p_.ramp <= 0.0 || t >= p_.lead_in + p_.ramp) return Jet::constant(1.0);
    const Jet s{(t - p_.lead_in) / p_.ramp, 1.0 / p_.ramp, 0.0};
    const Jet s3 = s * s * s;
    return s3 * (10.0 + (-15.0) * s + 6.0 * s * s);
  }

  GaitProfile p_;
  LegModel leg_;
};

/// Samples the gait at `rate` Hz over the profile's duration.
inline std::vector<TruthSample> generate_truth(const GaitProfile& profile, double rate, const LegModel& leg) {
  if (!(rate >= 2.0 * profile.cadence * 10.0)) {
    throw InvalidArgument("generate_truth: rate must be at least 20 x cadence");
  }
  const GaitModel model(profile, leg);
  const long n = std::lround(profile.duration * rate);
  std::vector<TruthSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (long k = 0; k < n; ++k) out.push_back(model.evaluate(static_cast<double>(k) / rate));
  return out;
}

// ---------------------------------------------------------------------------
// Sensor synthesis

struct SensorNoiseSpec {
  double gyro_sigma = 0.01;    ///< rad/s
  double accel_sigma = 0.05;   ///< m/s^2
  double mag_sigma = 0.01;     ///< unit field
  double bias_init = 0.02;     ///< rad/s per axis, random sign
  double bias_tau = 100.0;     ///< s
  double bias_walk = 0.0;      ///< driving noise density of the bias, rad/s/sqrt(s)
  double marker_dropout_prob = 0.02;
  double pixel_jitter_sigma = 0.25;  ///< px
  double area_sigma_rel = 0.02;      ///< relative marker-area noise

  static SensorNoiseSpec noise_free() {
    SensorNoiseSpec n;
    n.gyro_sigma = n.accel_sigma = n.mag_sigma = n.bias_init = 0.0;
    n.marker_dropout_prob = n.pixel_jitter_sigma = n.area_sigma_rel = 0.0;
    return n;
  }

  void validate() const {
    if (gyro_sigma < 0 || accel_sigma < 0 || mag_sigma < 0 || bias_init < 0 || bias_walk < 0 ||
        pixel_jitter_sigma < 0 || area_sigma_rel < 0) {
      throw InvalidArgument("SensorNoiseSpec: sigmas must be >= 0");
    }
    if (!(bias_tau > 0.0)) throw InvalidArgument("SensorNoiseSpec: bias_tau must be > 0");
    if (!(marker_dropout_prob >= 0.0 && marker_dropout_prob <= 1.0)) {
      throw InvalidArgument("SensorNoiseSpec: dropout probability must lie in [0, 1]");
    }
  }
};

/// Random-stream identifiers; each sensor draws from its own stream.
enum class NoiseStream : std::uint64_t { ImuUpper = 1, ImuLower = 2, Camera = 3 };

struct ImuStreams {
  std::vector<ImuSample> upper;
  std::vector<ImuSample> lower;
};

/// Gyro = omega + b + n, accel = R^T (a + gravity) + n, mag = R^T m + n.
/// The bias follows b' = -b / tau + w, sampled exactly between steps. Bias
/// values are written back into `truth`.
inline ImuStreams synthesize_imu(std::vector<TruthSample>& truth, const SensorNoiseSpec& noise,
                                 const EarthFields& fields, std::uint64_t seed) {
  noise.validate();
  ImuStreams out;
  for (int s = 0; s < 2; ++s) {
    Rng rng(seed, static_cast<std::uint64_t>(s == 0 ? NoiseStream::ImuUpper : NoiseStream::ImuLower));
    Vec3 b;
    for (int i = 0; i < 3; ++i) b[i] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * noise.bias_init;
    auto& stream = s == 0 ? out.upper : out.lower;
    stream.reserve(truth.size());
    for (std::size_t k = 0; k < truth.size(); ++k) {
      TruthSample& ts = truth[k];
      if (k > 0) {
        const double dt = ts.t - truth[k - 1].t;
        const double decay = std::exp(-dt / noise.bias_tau);
        const double walk = noise.bias_walk * std::sqrt(0.5 * noise.bias_tau * (1.0 - decay * decay));
        for (int i = 0; i < 3; ++i) b[i] = decay * b[i] + walk * rng.normal();
      }
      const Quaternion& q = s == 0 ? ts.q_u : ts.q_l;
      const Vec3& omega = s == 0 ? ts.omega_u : ts.omega_l;
      const Vec3& acc = s == 0 ? ts.imu_acc_u : ts.imu_acc_l;
      (s == 0 ? ts.bias_u : ts.bias_l) = b;
      ImuSample m;
      m.t = ts.t;
      const Quaternion qi = q.conjugate();
      m.gyro = omega + b + Vec3(rng.normal(noise.gyro_sigma), rng.normal(noise.gyro_sigma), rng.normal(noise.gyro_sigma));
      m.accel = rotate_vector(qi, acc + fields.gravity) +
                Vec3(rng.normal(noise.accel_sigma), rng.normal(noise.accel_sigma), rng.normal(noise.accel_sigma));
      m.mag = rotate_vector(qi, fields.mag_field) +
              Vec3(rng.normal(noise.mag_sigma), rng.normal(noise.mag_sigma), rng.normal(noise.mag_sigma));
      stream.push_back(m);
    }
  }
  return out;
}

/// Rigid camera placement: p_cam = q_cn (p_nav - position) q_cn*.
struct CameraPose {
  Quaternion camera_from_nav = Quaternion::from_axis_angle(Vec3::UnitX(), M_PI / 2.0);
  Vec3 position = Vec3(0.0, -2.5, 0.5);  ///< nav, m

  Vec3 to_camera(const Vec3& p_nav) const { return rotate_vector(camera_from_nav, p_nav - position); }
  Vec3 to_nav(const Vec3& p_cam) const { return rotate_vector(camera_from_nav.conjugate(), p_cam) + position; }
  FrameRotation rotation() const { return {Frame::Nav, Frame::Camera, camera_from_nav}; }
};

struct CameraFrameTruth {
  double t = 0.0;
  std::array<Vec3, 3> joints_cam;   ///< true camera-frame joint positions
  std::array<Vec2, 3> pixels;       ///< true projections
  std::array<Vec2, 3> marker_centers;  ///< jittered centres actually used
  std::array<double, 3> side_px{};     ///< rendered marker side
  std::array<bool, 3> visible{};
};

struct MarkerStream {
  std::vector<FrameObservations> observations;  ///< labeled blob-mode output
  std::vector<CameraFrameTruth> truth;
};

inline std::vector<double> camera_times(double duration, double rate) {
  std::vector<double> t;
  const long n = static_cast<long>(std::floor(duration * rate - 1e-9)) + 1;
  for (long k = 0; k < n; ++k) t.push_back(static_cast<double>(k) / rate);
  return t;
}

/// Blob-mode marker synthesis at the camera rate: projection plus pixel
/// jitter, area from depth with relative noise, independent per-joint dropout.
inline MarkerStream synthesize_markers(const GaitModel& model, const CameraModel& cam, const CameraPose& pose,
                                       const SensorNoiseSpec& noise, double camera_rate, std::uint64_t seed) {
  noise.validate();
  cam.validate();
  Rng rng(seed, static_cast<std::uint64_t>(NoiseStream::Camera));
  MarkerStream out;
  for (double t : camera_times(model.profile().duration, camera_rate)) {
    const TruthSample ts = model.evaluate(t);
    CameraFrameTruth ft;
    ft.t = t;
    FrameObservations obs;
    for (int j = 0; j < 3; ++j) {
      const Vec3 pc = pose.to_camera(ts.joints[j]);
      if (!(pc.z() > 0.5)) throw InvalidArgument("synthesize_markers: joint behind or too close to the camera");
      ft.joints_cam[j] = pc;
      ft.pixels[j] = project(pc, cam);
      const Vec2 jitter(rng.normal(noise.pixel_jitter_sigma), rng.normal(noise.pixel_jitter_sigma));
      const double area_noise = rng.normal(noise.area_sigma_rel);
      const bool dropped = rng.bernoulli(noise.marker_dropout_prob);
      ft.marker_centers[j] = ft.pixels[j] + jitter;
      ft.side_px[j] = cam.focal_px * cam.marker_side_m / pc.z();
      ft.visible[j] = !dropped;
      obs[j].t = t;
      obs[j].joint = static_cast<Joint>(j);
      obs[j].pixel = ft.marker_centers[j];
      obs[j].area_px = projected_marker_area(pc.z(), cam) * std::max(0.0, 1.0 + area_noise);
      obs[j].valid = !dropped;
    }
    out.observations.push_back(obs);
    out.truth.push_back(ft);
  }
  return out;
}

/// Fraction of pixel [x-0.5, x+0.5] x [y-0.5, y+0.5] covered by the square.
inline double square_coverage(int x, int y, const Vec2& center, double side) {
  const double h = 0.5 * side;
  const double ox = std::max(0.0, std::min(x + 0.5, center.x() + h) - std::max(x - 0.5, center.x() - h));
  const double oy = std::max(0.0, std::min(y + 0.5, center.y() + h) - std::max(y - 0.5, center.y() - h));
  return ox * oy;
}

/// Draws an axis-aligned square with exact area-coverage antialiasing.
inline void draw_marker(RasterImage& img, const Vec2& center, double side, Rgb8 color = kMarkerGreen) {
  const double h = 0.5 * side;
  const int x0 = std::max(0, static_cast<int>(std::floor(center.x() - h - 0.5)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(center.x() + h + 0.5)));
  const int y0 = std::max(0, static_cast<int>(std::floor(center.y() - h - 0.5)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(center.y() + h + 0.5)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double c = square_coverage(x, y, center, side);
      if (c <= 0.0) continue;
      const Rgb8 bg = img.at(x, y);
      auto mix = [c](std::uint8_t a, std::uint8_t b) {
        return static_cast<std::uint8_t>(std::lround((1.0 - c) * a + c * b));
      };
      img.set(x, y, {mix(bg.r, color.r), mix(bg.g, color.g), mix(bg.b, color.b)});
    }
  }
}

/// Frame-mode rendering of one camera frame: visible markers as green
/// squares on a uniform gray background.
inline RasterImage render_frame(const CameraFrameTruth& ft, const CameraModel& cam) {
  RasterImage img(cam.width, cam.height, kBackgroundGray);
  for (int j = 0; j < 3; ++j) {
    if (ft.visible[j]) draw_marker(img, ft.marker_centers[j], ft.side_px[j]);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Scenario

struct Scenario {
  GaitProfile profile = GaitProfile::walk();
  LegModel leg;
  CameraModel camera;
  CameraPose pose;
  SensorNoiseSpec noise;
  EarthFields fields = EarthFields::with_dip(60.0 * M_PI / 180.0);
  double imu_rate = 100.0;
  double camera_rate = 30.0;

  static Scenario walking() { return {}; }
  static Scenario running() {
    Scenario s;
    s.profile = GaitProfile::run_in_place();
    return s;
  }

  void validate() const {
    profile.validate();
    leg.validate();
    camera.validate();
    noise.validate();
    fields.validate();
    if (!(imu_rate > 0.0 && camera_rate > 0.0)) throw InvalidArgument("Scenario: rates must be > 0");
  }
};

struct SimulationData {
  std::vector<TruthSample> truth;  ///< at the IMU rate
  ImuStreams imu;
  MarkerStream markers;
};

inline SimulationData simulate(const Scenario& sc, std::uint64_t seed) {
  sc.validate();
  SimulationData d;
  d.truth = generate_truth(sc.profile, sc.imu_rate, sc.leg);
  d.imu = synthesize_imu(d.truth, sc.noise, sc.fields, seed);
  d.markers = synthesize_markers(GaitModel(sc.profile, sc.leg), sc.camera, sc.pose, sc.noise, sc.camera_rate, seed);
  return d;
}

}  // namespace legfusion
