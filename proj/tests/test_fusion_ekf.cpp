#include <gtest/gtest.h>

#include <random>

#include "legfusion/fusion_ekf.hpp"
#include "legfusion/gait_simulator.hpp"
#include "legfusion/pipeline.hpp"
#include "oracles.hpp"

using namespace legfusion;

namespace {

Eigen::Vector4d random_unit4(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Vector4d v(n(rng), n(rng), n(rng), n(rng));
  return v.normalized();
}

StateVec random_state(std::mt19937_64& rng) {
  StateVec x;
  for (int o : {0, idx::segment_stride}) {
    x.segment<3>(o) = oracle::random_vec(rng, 2.0);
    x.segment<3>(o + 3) = oracle::random_vec(rng, 0.05);
    x.segment<4>(o + 6) = random_unit4(rng);
  }
  return x;
}

GyroBiasModel random_bias_model(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(5.0, 500.0);
  GyroBiasModel m;
  m.tau = Vec3(u(rng), u(rng), u(rng));
  return m;
}

double max_rel_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max(1.0, numeric.cwiseAbs().maxCoeff());
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

/// Rotation matrix from w-first coefficients, written out by hand.
oracle::Mat3 matrix_of(const Eigen::Vector4d& c) {
  const Eigen::Vector4d q = c.normalized();
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  oracle::Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

EkfOptions quiet_options() {
  EkfOptions o;
  o.noise.q_diag.setZero();
  return o;
}

StateMat diag_cov(double v) { return StateMat::Identity() * v; }

StateVec truth_state(const TruthSample& s) {
  FusionState f;
  f.upper = {s.omega_u, s.bias_u, s.q_u};
  f.lower = {s.omega_l, s.bias_l, s.q_l};
  return f.to_vector();
}

}  // namespace

// ---------------------------------------------------------------------------
// Jacobians against central differences

TEST(Jacobians, ProcessJacobianMatchesFiniteDifference) {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const StateVec x = random_state(rng);
    const GyroBiasModel bu = random_bias_model(rng), bl = random_bias_model(rng);
    const Eigen::MatrixXd num = oracle::finite_difference(
        [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return process_derivative(StateVec(v), bu, bl); }, x);
    worst = std::max(worst, max_rel_error(process_jacobian(x, bu, bl), num));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Jacobians, NoiseJacobianMatchesFiniteDifference) {
  std::mt19937_64 rng(102);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const StateVec x = random_state(rng);
    const GyroBiasModel bu = random_bias_model(rng), bl = random_bias_model(rng);
    const StateVec w0 = StateVec::Random() * 0.1;
    const Eigen::MatrixXd num = oracle::finite_difference(
        [&](const Eigen::VectorXd& w) -> Eigen::VectorXd { return process_derivative(x, bu, bl, StateVec(w)); }, w0);
    worst = std::max(worst, max_rel_error(noise_jacobian(bu, bl), num));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Jacobians, Measurement1JacobianMatchesFiniteDifference) {
  std::mt19937_64 rng(103);
  for (double sign : {1.0, -1.0}) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const StateVec x = random_state(rng);
      const Eigen::MatrixXd num = oracle::finite_difference(
          [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return measurement1(StateVec(v), sign); }, x);
      worst = std::max(worst, max_rel_error(measurement1_jacobian(sign), num));
    }
    EXPECT_LT(worst, 1e-5) << "bias sign " << sign;
  }
}

TEST(Jacobians, NumericJacobiansAgreeAcrossStepSizes) {
  // h2 and h3 use the library's central differences; a second step size
  // computed by the oracle should agree closely.
  std::mt19937_64 rng(104);
  const LegModel leg;
  const Quaternion qcn = Quaternion::from_axis_angle(Vec3::UnitX(), M_PI / 2.0);
  double worst2 = 0.0, worst3 = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const StateVec x = random_state(rng);
    const Vec3 vu = oracle::random_vec(rng), vl = oracle::random_vec(rng);
    const std::function<Vec3(const StateVec&)> h2 = [&](const StateVec& s) { return measurement2(s, vu, vl, leg); };
    const std::function<Meas3Vec(const StateVec&)> h3 = [&](const StateVec& s) { return measurement3(s, qcn, leg); };
    const Eigen::MatrixXd n2 = oracle::finite_difference(
        [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return h2(StateVec(v)); }, x, 1e-5);
    const Eigen::MatrixXd n3 = oracle::finite_difference(
        [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return h3(StateVec(v)); }, x, 1e-5);
    worst2 = std::max(worst2, max_rel_error(numeric_jacobian<3>(h2, x), n2));
    worst3 = std::max(worst3, max_rel_error(numeric_jacobian<6>(h3, x), n3));
  }
  EXPECT_LT(worst2, 1e-5);
  EXPECT_LT(worst3, 1e-5);
}

TEST(Measurements, ConstraintAndCameraDependOnQuaternionDirectionOnly) {
  std::mt19937_64 rng(105);
  const LegModel leg;
  const Quaternion qcn = Quaternion::from_axis_angle(Vec3(1, 2, 3), 0.7);
  for (int trial = 0; trial < 20; ++trial) {
    const StateVec x = random_state(rng);
    StateVec xs = x;
    xs.segment<4>(idx::q_u) *= 2.5;
    xs.segment<4>(idx::q_l) *= 0.3;
    const Vec3 vu = oracle::random_vec(rng), vl = oracle::random_vec(rng);
    EXPECT_LT((measurement2(x, vu, vl, leg) - measurement2(xs, vu, vl, leg)).norm(), 1e-12);
    EXPECT_LT((measurement3(x, qcn, leg) - measurement3(xs, qcn, leg)).norm(), 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Noise-free truth consistency

TEST(Measurements, ConstraintResidualVanishesOnNoiseFreeTruth) {
  for (const Scenario& base : {Scenario::walking(), Scenario::running()}) {
    Scenario sc = base;
    sc.noise = SensorNoiseSpec::noise_free();
    auto truth = generate_truth(sc.profile, sc.imu_rate, sc.leg);
    double worst = 0.0;
    for (const TruthSample& s : truth) {
      worst = std::max(worst, measurement2(truth_state(s), s.imu_vel_u, s.imu_vel_l, sc.leg).norm());
    }
    EXPECT_LT(worst, 1e-6);
  }
}

TEST(Measurements, CameraModelMatchesTruthSegments) {
  Scenario sc = Scenario::running();
  const auto truth = generate_truth(sc.profile, sc.imu_rate, sc.leg);
  double worst = 0.0;
  for (std::size_t k = 0; k < truth.size(); k += 7) {
    const TruthSample& s = truth[k];
    const Meas3Vec h = measurement3(truth_state(s), sc.pose.camera_from_nav, sc.leg);
    const Vec3 hip = sc.pose.to_camera(s.joints.hip), knee = sc.pose.to_camera(s.joints.knee),
               ankle = sc.pose.to_camera(s.joints.ankle);
    worst = std::max(worst, (h.head<3>() - (knee - hip)).norm());
    worst = std::max(worst, (h.tail<3>() - (ankle - knee)).norm());
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Measurements, ForwardKinematicsReproducesTruthJoints) {
  const Scenario sc = Scenario::walking();
  const auto truth = generate_truth(sc.profile, sc.imu_rate, sc.leg);
  double worst = 0.0;
  for (std::size_t k = 0; k < truth.size(); k += 11) {
    const TruthSample& s = truth[k];
    const JointPositions p = forward_kinematics(s.joints.hip, s.q_u, s.q_l, sc.leg);
    worst = std::max({worst, (p.knee - s.joints.knee).norm(), (p.ankle - s.joints.ankle).norm()});
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Measurements, OrientationObservationIsSignAligned) {
  std::mt19937_64 rng(106);
  const StateVec x = random_state(rng);
  const Quaternion qu = Quaternion::from_coeffs(random_unit4(rng));
  const Quaternion ql = Quaternion::from_coeffs(random_unit4(rng));
  const Vec3 g(0.1, 0.2, 0.3);
  const Meas1Vec a = measurement1_observation(x, g, qu, g, ql);
  const Meas1Vec b = measurement1_observation(x, g, -qu, g, -ql);
  EXPECT_LT((a - b).norm(), 1e-15);
  EXPECT_GE(a.segment<4>(3).dot(x.segment<4>(idx::q_u)), 0.0);
  EXPECT_GE(a.segment<4>(10).dot(x.segment<4>(idx::q_l)), 0.0);
}

// ---------------------------------------------------------------------------
// Prediction

TEST(Predict, ConstantRateIntegratesToAxisAngleRotation) {
  std::mt19937_64 rng(107);
  for (int trial = 0; trial < 10; ++trial) {
    const Vec3 wu = oracle::random_vec(rng, 1.5), wl = oracle::random_vec(rng, 1.5);
    const Eigen::Vector4d qu0 = random_unit4(rng), ql0 = random_unit4(rng);
    StateVec x = StateVec::Zero();
    x.segment<3>(idx::omega_u) = wu;
    x.segment<3>(idx::omega_l) = wl;
    x.segment<4>(idx::q_u) = qu0;
    x.segment<4>(idx::q_l) = ql0;
    HybridEkf ekf(quiet_options());
    ekf.set_state(x, diag_cov(1e-4));
    const double t = 1.0;
    for (int k = 0; k < 100; ++k) ekf.predict(t / 100);
    const StateVec xe = ekf.state_vector();
    // Body rates: R(t) = R0 exp(t [omega]x).
    const oracle::Mat3 ru = matrix_of(qu0) * oracle::axis_angle_matrix(wu, wu.norm() * t);
    const oracle::Mat3 rl = matrix_of(ql0) * oracle::axis_angle_matrix(wl, wl.norm() * t);
    EXPECT_LT(oracle::matrix_angle(matrix_of(xe.segment<4>(idx::q_u)), ru), 1e-7);
    EXPECT_LT(oracle::matrix_angle(matrix_of(xe.segment<4>(idx::q_l)), rl), 1e-7);
    EXPECT_LT((xe.segment<3>(idx::omega_u) - wu).norm(), 1e-15);
  }
}

TEST(Predict, BiasDecaysWithItsTimeConstant) {
  EkfOptions o = quiet_options();
  o.bias_u.tau = Vec3(10.0, 20.0, 40.0);
  HybridEkf ekf(o);
  StateVec x = StateVec::Zero();
  x[idx::q_u] = x[idx::q_l] = 1.0;
  x.segment<3>(idx::bias_u) = Vec3(0.1, -0.2, 0.3);
  ekf.set_state(x, diag_cov(1e-4));
  ekf.predict(2.0);
  const Vec3 b = ekf.state_vector().segment<3>(idx::bias_u);
  EXPECT_NEAR(b.x(), 0.1 * std::exp(-0.2), 1e-9);
  EXPECT_NEAR(b.y(), -0.2 * std::exp(-0.1), 1e-9);
  EXPECT_NEAR(b.z(), 0.3 * std::exp(-0.05), 1e-9);
}

TEST(Predict, ProcessNoiseGrowsRateVarianceLinearly) {
  // omega' = w with zero coupling into anything that feeds back: the
  // rate variance grows by q t exactly.
  EkfOptions o;
  HybridEkf ekf(o);
  StateVec x = StateVec::Zero();
  x[idx::q_u] = x[idx::q_l] = 1.0;
  ekf.set_state(x, diag_cov(1e-3));
  ekf.predict(0.5);
  EXPECT_NEAR(ekf.covariance()(idx::omega_u, idx::omega_u), 1e-3 + 0.045 * 0.5, 1e-12);
  EXPECT_NEAR(ekf.covariance()(idx::omega_l + 2, idx::omega_l + 2), 1e-3 + 0.045 * 0.5, 1e-12);
}

TEST(Predict, RejectsNonPositiveStep) {
  HybridEkf ekf(EkfOptions{});
  StateVec x = StateVec::Zero();
  x[idx::q_u] = x[idx::q_l] = 1.0;
  ekf.set_state(x, diag_cov(1e-4));
  EXPECT_THROW(ekf.predict(0.0), InvalidArgument);
  EXPECT_THROW(ekf.predict(-0.01), InvalidArgument);
}

TEST(Predict, NonFiniteStateRaisesDivergence) {
  HybridEkf ekf(EkfOptions{});
  StateVec x = StateVec::Zero();
  x[idx::q_u] = x[idx::q_l] = 1.0;
  x[idx::omega_u] = std::numeric_limits<double>::quiet_NaN();
  ekf.set_state(x, diag_cov(1e-4));
  EXPECT_THROW(ekf.predict(0.01), DivergenceError);
}

TEST(Predict, DegenerateQuaternionRaisesDivergence) {
  HybridEkf ekf(EkfOptions{});
  StateVec x = StateVec::Zero();
  x[idx::q_l] = 1.0;
  ekf.set_state(x, diag_cov(1e-4));
  EXPECT_THROW(ekf.predict(0.01), DivergenceError);
}

// ---------------------------------------------------------------------------
// Updates

TEST(Update, ScalarRowMatchesTextbookKalmanStep) {
  std::mt19937_64 rng(108);
  std::uniform_real_distribution<double> u(1e-4, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    StateVec x = random_state(rng);
    StateVec pd;
    for (int i = 0; i < kStateDim; ++i) pd[i] = u(rng);
    HybridEkf ekf(EkfOptions{});
    ekf.set_state(x, pd.asDiagonal());
    const int i = trial % 3 + (trial % 2 ? idx::omega_l : idx::omega_u);
    const double y = x[i] + u(rng) - 0.5, r = u(rng);
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(1, kStateDim);
    h(0, i) = 1.0;
    ekf.apply(Eigen::VectorXd::Constant(1, y - x[i]), h, Eigen::VectorXd::Constant(1, r), {true});
    const double k = pd[i] / (pd[i] + r);
    EXPECT_NEAR(ekf.state_vector()[i], x[i] + k * (y - x[i]), 1e-12);
    EXPECT_NEAR(ekf.covariance()(i, i), pd[i] * r / (pd[i] + r), 1e-12);
    // Uncorrelated states are untouched.
    StateVec other = ekf.state_vector() - x;
    other[i] = 0.0;
    EXPECT_LT(other.cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Update, InfiniteVarianceIsAnExactNoOp) {
  std::mt19937_64 rng(109);
  const StateVec x = random_state(rng);
  HybridEkf ekf(EkfOptions{});
  ekf.set_state(x, diag_cov(1e-2));
  Eigen::VectorXd r = Eigen::VectorXd::Constant(14, 1e6);
  const Meas1Vec resid = Meas1Vec::Constant(0.7);
  const UpdateReport rep = ekf.apply(resid, measurement1_jacobian(), r, std::vector<bool>(14, true));
  EXPECT_EQ(rep.rows, 0);
  EXPECT_EQ(rep.outcome, UpdateOutcome::Gated);
  EXPECT_EQ((ekf.state_vector() - x).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ((ekf.covariance() - diag_cov(1e-2)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Update, HugeVarianceWithoutDroppingLeavesStateUnchanged) {
  std::mt19937_64 rng(110);
  EkfOptions o;
  o.drop_infinite_rows = false;
  o.max_condition = 1e30;
  for (int trial = 0; trial < 20; ++trial) {
    const StateVec x = random_state(rng);
    HybridEkf ekf(o);
    ekf.set_state(x, diag_cov(1e-2));
    const Meas1Vec resid = Meas1Vec::Constant(1.0);
    ekf.apply(resid, measurement1_jacobian(), Eigen::VectorXd::Constant(14, 1e12), std::vector<bool>(14, true));
    EXPECT_LT((ekf.state_vector() - x).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Update, ClosedGatesSuppressOrientationRows) {
  std::mt19937_64 rng(111);
  const StateVec x = random_state(rng);
  EkfOptions o;
  o.use_gyro_rows = false;
  HybridEkf ekf(o);
  ekf.set_state(x, diag_cov(1e-2));
  const Quaternion far = Quaternion::from_axis_angle(Vec3::UnitZ(), 1.0);
  const UpdateReport rep = ekf.update_measurement1(Vec3(1, 1, 1), far, true, Vec3(1, 1, 1), far, true);
  EXPECT_EQ(rep.rows, 0);
  EXPECT_EQ((ekf.state_vector() - x).cwiseAbs().maxCoeff(), 0.0);

  // Orientation mode keeps the gyro rows of a gated segment.
  HybridEkf ekf2(EkfOptions{});
  ekf2.set_state(x, diag_cov(1e-2));
  EXPECT_EQ(ekf2.update_measurement1(Vec3(1, 1, 1), far, true, Vec3(1, 1, 1), far, false).rows, 3 + 7);
  EkfOptions seg;
  seg.gate_mode = GateMode::Segment;
  HybridEkf ekf3(seg);
  ekf3.set_state(x, diag_cov(1e-2));
  EXPECT_EQ(ekf3.update_measurement1(Vec3(1, 1, 1), far, true, Vec3(1, 1, 1), far, false).rows, 7);
}

TEST(Update, TraceNeverIncreasesOnRandomUpdates) {
  std::mt19937_64 rng(112);
  const LegModel leg;
  const Quaternion qcn = Quaternion::from_axis_angle(Vec3::UnitX(), M_PI / 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    const StateVec x = random_state(rng);
    Eigen::Matrix<double, kStateDim, kStateDim> a = Eigen::Matrix<double, kStateDim, kStateDim>::Random();
    HybridEkf ekf(EkfOptions{});
    ekf.set_state(x, 1e-3 * a * a.transpose() + diag_cov(1e-6));
    ekf.set_velocities(oracle::random_vec(rng), oracle::random_vec(rng));
    const double t0 = ekf.covariance().trace();
    const UpdateReport r1 = ekf.update_measurement1(oracle::random_vec(rng), Quaternion::from_coeffs(random_unit4(rng)),
                                                    false, oracle::random_vec(rng),
                                                    Quaternion::from_coeffs(random_unit4(rng)), false);
    const UpdateReport r2 = ekf.update_measurement2();
    SegmentObservation obs;
    obs.upper = measurement3(random_state(rng), qcn, leg).head<3>();
    obs.lower = measurement3(random_state(rng), qcn, leg).tail<3>();
    obs.upper_valid = obs.lower_valid = true;
    const UpdateReport r3 = ekf.update_measurement3(obs);
    for (const UpdateReport& r : {r1, r2, r3}) EXPECT_LE(r.trace_after, r.trace_before * (1.0 + 1e-12) + 1e-15);
    EXPECT_LE(ekf.covariance().trace(), t0);
    EXPECT_EQ(ekf.diagnostics().trace_increases, 0);
  }
}

TEST(Update, VelocityResetZeroesConstraintResidual) {
  std::mt19937_64 rng(113);
  const LegModel leg;
  for (int trial = 0; trial < 20; ++trial) {
    HybridEkf ekf(EkfOptions{});
    ekf.set_state(random_state(rng), diag_cov(1e-3));
    ekf.set_velocities(oracle::random_vec(rng), oracle::random_vec(rng));
    ekf.reset_velocities();
    EXPECT_LT(measurement2(ekf.state_vector(), ekf.velocity_upper(), ekf.velocity_lower(), leg).norm(), 1e-12);
  }
}

TEST(Options, ValidationRejectsBadSettings) {
  EkfOptions o;
  o.alpha = 1.0;
  EXPECT_THROW(HybridEkf{o}, InvalidArgument);
  o = EkfOptions{};
  o.bias_sign = 0.5;
  EXPECT_THROW(HybridEkf{o}, InvalidArgument);
  o = EkfOptions{};
  o.max_predict_dt = 0.1;
  EXPECT_THROW(HybridEkf{o}, InvalidArgument);
  o = EkfOptions{};
  o.noise.r2_diag[1] = -1.0;
  EXPECT_THROW(HybridEkf{o}, InvalidArgument);
}

// ---------------------------------------------------------------------------
// Whole runs: numerical hygiene

namespace {

void expect_hygienic(const FilterDiagnostics& d) {
  EXPECT_LT(d.worst_norm_error, 1e-6);
  EXPECT_GE(d.min_eigenvalue, -1e-9);
  EXPECT_LT(d.worst_asymmetry, 1e-12);
  EXPECT_EQ(d.trace_increases, 0);
  EXPECT_EQ(d.ill_conditioned, 0);
  EXPECT_GT(d.ungated_updates, 0);
}

}  // namespace

TEST(FullRun, WalkingFusedRunIsNumericallyClean) {
  const Scenario sc = Scenario::walking();
  const SimulationData d = simulate(sc, 3);
  const PipelineOptions opts = pipeline_options_for(sc);
  const auto track = build_camera_track(d.markers.observations, sc.camera, sc.leg, opts.depth);
  const EstimateTrack est = run_fused(d.imu, track, sc.pose, opts);
  expect_hygienic(est.diagnostics);
}

TEST(FullRun, RunningAllUpdatesIsNumericallyClean) {
  const Scenario sc = Scenario::running();
  const SimulationData d = simulate(sc, 4);
  const PipelineOptions opts = pipeline_options_for(sc);
  const auto track = build_camera_track(d.markers.observations, sc.camera, sc.leg, opts.depth);
  const EstimateTrack est = run_fused(d.imu, track, sc.pose, opts);
  expect_hygienic(est.diagnostics);
}

TEST(FullRun, StandingStillTracksTruthOrientation) {
  Scenario sc;
  sc.profile = GaitProfile::standing(10.0);
  const SimulationData d = simulate(sc, 5);
  const PipelineOptions opts = pipeline_options_for(sc);
  const EstimateTrack est = run_imu_only(d.imu, truth_hip(truth_rows(d.truth)), opts);
  expect_hygienic(est.diagnostics);
  const TruthSample& last = d.truth.back();
  EXPECT_LT(angle_between(est.rows.back().q_u, last.q_u), 0.02);
  EXPECT_LT(angle_between(est.rows.back().q_l, last.q_l), 0.02);
}

TEST(FullRun, StreamGapRaisesDiscontinuity) {
  Scenario sc;
  sc.profile = GaitProfile::standing(3.0);
  SimulationData d = simulate(sc, 6);
  for (std::size_t k = 150; k < d.imu.upper.size(); ++k) {
    d.imu.upper[k].t += 1.0;
    d.imu.lower[k].t += 1.0;
  }
  EXPECT_THROW(ekf_run(d.imu.upper, d.imu.lower, {}, pipeline_options_for(sc).ekf), StreamDiscontinuity);
}
