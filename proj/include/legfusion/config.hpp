#pragma once

// Run configuration: one JSON file, every key optional, unknown keys
// rejected. "scenario" picks the preset (walk or run) the other sections
// override. serialize_config writes the complete effective configuration.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"

#include "legfusion/depth_estimation.hpp"
#include "legfusion/errors.hpp"
#include "legfusion/fusion_ekf.hpp"
#include "legfusion/gait_simulator.hpp"
#include "legfusion/pipeline.hpp"

namespace legfusion {

enum class VisionMode { Blobs, Frames };

inline const char* vision_mode_name(VisionMode m) { return m == VisionMode::Blobs ? "blobs" : "frames"; }

struct VisionConfig {
  VisionMode mode = VisionMode::Blobs;
  int binarize_threshold = 40;
  int min_area = 9;
  bool subpixel = true;
  bool dump_masks = false;  ///< PGM mask per frame next to the PPM frames
  double max_jump_px = 80.0;
};

struct FilterConfig {
  NoiseConfig noise;
  double alpha = 5.0;
  double bias_sign = 1.0;
  Vec3 bias_tau = Vec3::Constant(100.0);
  GateMode gate_mode = GateMode::Orientation;
  bool use_orientation_rows = true;
  bool use_constraint = true;
  bool camera_before_constraint = false;
  std::optional<double> velocity_reset_period;  ///< default: one camera period
  double max_predict_dt = 0.05;
  double max_stream_gap = 0.5;
};

struct EarthConfig {
  double gravity = kStandardGravity;
  double mag_dip_deg = 60.0;

  EarthFields fields() const { return EarthFields::with_dip(mag_dip_deg * M_PI / 180.0, gravity); }
};

struct RunConfig {
  std::string scenario = "walk";
  std::string input_dir;  ///< streams to track; empty means output_dir
  std::string output_dir = "out";
  /// Directory relative paths are resolved against: the config file's
  /// directory when loaded from a file. Not serialized.
  std::string base_dir;
  std::uint64_t seed = 1;
  Scenario sim = Scenario::walking();  ///< sim.fields follows `earth`
  EarthConfig earth;
  FilterConfig filter;
  DepthFilterOptions depth;
  VisionConfig vision;
  MissingPolicy missing = MissingPolicy::Sagittal;

  std::string resolve(const std::string& p) const {
    const std::filesystem::path path(p);
    if (path.is_absolute() || base_dir.empty()) return path.lexically_normal().string();
    return (std::filesystem::path(base_dir) / path).lexically_normal().string();
  }

  std::string streams_dir() const { return resolve(input_dir.empty() ? output_dir : input_dir); }
};

namespace config_detail {

using nlohmann::json;

/// Reads keys from one JSON object and reports leftovers as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  const json* find(const std::string& key) {
    const auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    used_.insert(key);
    return &*it;
  }

  void get(const std::string& key, double& dst) {
    if (const json* v = find(key)) dst = number(*v, key);
  }

  void get(const std::string& key, int& dst) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(path(key) + ": expected an integer");
      dst = v->get<int>();
    }
  }

  void get(const std::string& key, std::uint64_t& dst) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(path(key) + ": expected a non-negative integer");
      dst = v->get<std::uint64_t>();
    }
  }

  void get(const std::string& key, bool& dst) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(path(key) + ": expected true or false");
      dst = v->get<bool>();
    }
  }

  void get(const std::string& key, std::string& dst) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(path(key) + ": expected a string");
      dst = v->get<std::string>();
    }
  }

  template <int N>
  void get(const std::string& key, Eigen::Matrix<double, N, 1>& dst) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_array() || v->size() != static_cast<std::size_t>(N)) {
      throw ConfigError(path(key) + ": expected an array of " + std::to_string(N) + " numbers");
    }
    for (int i = 0; i < N; ++i) dst[i] = number((*v)[static_cast<std::size_t>(i)], key);
  }

  void get(const std::string& key, Quaternion& dst) {
    Eigen::Vector4d c(dst.w, dst.x, dst.y, dst.z);
    get<4>(key, c);
    dst = {c[0], c[1], c[2], c[3]};
  }

  ObjectReader child(const std::string& key) {
    const json* v = find(key);
    static const json empty = json::object();
    return ObjectReader(v ? *v : empty, path(key));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw ConfigError("unknown key '" + path(k) + "'");
    }
  }

  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

 private:
  double number(const json& v, const std::string& key) const {
    if (!v.is_number()) throw ConfigError(path(key) + ": expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError(path(key) + ": must be finite");
    return d;
  }

  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

template <int N>
json array(const Eigen::Matrix<double, N, 1>& v) {
  json a = json::array();
  for (int i = 0; i < N; ++i) a.push_back(v[i]);
  return a;
}

inline json array(const Quaternion& q) { return json::array({q.w, q.x, q.y, q.z}); }

template <class Parse>
auto parse_enum(ObjectReader& r, const std::string& key, const char* current_name, Parse parse) {
  std::string s = current_name;
  r.get(key, s);
  try {
    return parse(s);
  } catch (const InvalidArgument& e) {
    throw ConfigError(r.path(key) + ": " + e.what());
  }
}

inline GateMode parse_gate_mode(const std::string& s) {
  if (s == "orientation") return GateMode::Orientation;
  if (s == "segment") return GateMode::Segment;
  throw InvalidArgument("unknown gate mode '" + s + "'");
}

inline const char* gate_mode_name(GateMode m) { return m == GateMode::Orientation ? "orientation" : "segment"; }

inline VisionMode parse_vision_mode(const std::string& s) {
  if (s == "blobs") return VisionMode::Blobs;
  if (s == "frames") return VisionMode::Frames;
  throw InvalidArgument("unknown vision mode '" + s + "'");
}

}  // namespace config_detail

/// Filter, depth and interpolation options for a configuration.
inline PipelineOptions pipeline_options(const RunConfig& c) {
  PipelineOptions p = pipeline_options_for(c.sim);
  const FilterConfig& f = c.filter;
  p.ekf.noise = f.noise;
  p.ekf.alpha = f.alpha;
  p.ekf.bias_sign = f.bias_sign;
  p.ekf.bias_u.tau = p.ekf.bias_l.tau = f.bias_tau;
  p.ekf.gate_mode = f.gate_mode;
  p.ekf.use_orientation_rows = f.use_orientation_rows;
  p.ekf.use_constraint = f.use_constraint;
  p.ekf.camera_before_constraint = f.camera_before_constraint;
  p.ekf.velocity_reset_period = f.velocity_reset_period.value_or(1.0 / c.sim.camera_rate);
  p.ekf.max_predict_dt = f.max_predict_dt;
  p.ekf.max_stream_gap = f.max_stream_gap;
  p.depth = c.depth;
  p.missing = c.missing;
  return p;
}

inline DetectOptions detect_options(const RunConfig& c) {
  DetectOptions d;
  d.mask.binarize_threshold = c.vision.binarize_threshold;
  d.min_area = c.vision.min_area;
  d.subpixel = c.vision.subpixel;
  return d;
}

inline Scenario scenario_preset(const std::string& name) {
  if (name == "walk") return Scenario::walking();
  if (name == "run") return Scenario::running();
  throw ConfigError("scenario: expected 'walk' or 'run', got '" + name + "'");
}

inline RunConfig parse_config(const nlohmann::json& j) {
  using namespace config_detail;
  ObjectReader root(j, "");
  RunConfig c;
  root.get("scenario", c.scenario);
  c.sim = scenario_preset(c.scenario);
  root.get("input_dir", c.input_dir);
  root.get("output_dir", c.output_dir);
  root.get("seed", c.seed);

  {
    ObjectReader r = root.child("gait");
    GaitProfile& p = c.sim.profile;
    p.kind = parse_enum(r, "kind", gait_kind_name(p.kind), parse_gait_kind);
    r.get("duration", p.duration);
    r.get("cadence", p.cadence);
    r.get("hip_amplitude_deg", p.hip_amplitude);
    r.get("hip_offset_deg", p.hip_offset);
    r.get("knee_min_deg", p.knee_min);
    r.get("knee_max_deg", p.knee_max);
    r.get("knee_phase", p.knee_phase);
    r.get("pelvis_travel", p.pelvis_travel);
    r.get("pelvis_period", p.pelvis_period);
    r.get("vertical_bounce", p.vertical_bounce);
    r.get("out_of_plane_sway_deg", p.out_of_plane_sway);
    r.get("lead_in", p.lead_in);
    r.get("ramp", p.ramp);
    r.get("hyperextension_limit_deg", p.hyperextension_limit);
    r.finish();
  }
  {
    ObjectReader r = root.child("leg");
    r.get("l_u", c.sim.leg.l_u);
    r.get("l_l", c.sim.leg.l_l);
    r.get("r_u", c.sim.leg.r_u);
    r.get("r_l", c.sim.leg.r_l);
    r.finish();
  }
  {
    ObjectReader r = root.child("camera");
    CameraModel& m = c.sim.camera;
    r.get("focal_px", m.focal_px);
    r.get("width", m.width);
    r.get("height", m.height);
    r.get("cx", m.cx);
    r.get("cy", m.cy);
    r.get("marker_side_m", m.marker_side_m);
    r.finish();
  }
  {
    ObjectReader r = root.child("camera_pose");
    r.get("camera_from_nav", c.sim.pose.camera_from_nav);
    r.get<3>("position", c.sim.pose.position);
    r.finish();
    if (!is_unit(c.sim.pose.camera_from_nav, 1e-6)) throw ConfigError("camera_pose.camera_from_nav: must be a unit quaternion");
  }
  {
    ObjectReader r = root.child("sensor_noise");
    SensorNoiseSpec& n = c.sim.noise;
    r.get("gyro_sigma", n.gyro_sigma);
    r.get("accel_sigma", n.accel_sigma);
    r.get("mag_sigma", n.mag_sigma);
    r.get("bias_init", n.bias_init);
    r.get("bias_tau", n.bias_tau);
    r.get("bias_walk", n.bias_walk);
    r.get("marker_dropout_prob", n.marker_dropout_prob);
    r.get("pixel_jitter_sigma", n.pixel_jitter_sigma);
    r.get("area_sigma_rel", n.area_sigma_rel);
    r.finish();
  }
  {
    ObjectReader r = root.child("earth");
    r.get("gravity", c.earth.gravity);
    r.get("mag_dip_deg", c.earth.mag_dip_deg);
    r.finish();
    if (!(c.earth.gravity > 0.0)) throw ConfigError("earth.gravity: must be > 0");
    if (!(std::abs(c.earth.mag_dip_deg) < 89.0)) throw ConfigError("earth.mag_dip_deg: must lie in (-89, 89)");
    c.sim.fields = c.earth.fields();
  }
  {
    ObjectReader r = root.child("rates");
    r.get("imu_hz", c.sim.imu_rate);
    r.get("camera_hz", c.sim.camera_rate);
    r.finish();
  }
  {
    ObjectReader r = root.child("filter");
    FilterConfig& f = c.filter;
    r.get<kStateDim>("q_diag", f.noise.q_diag);
    r.get<14>("r1_diag", f.noise.r1_diag);
    r.get<3>("r2_diag", f.noise.r2_diag);
    r.get<6>("r3_diag", f.noise.r3_diag);
    r.get("accel_threshold", f.noise.accel_threshold);
    r.get("alpha", f.alpha);
    r.get("bias_sign", f.bias_sign);
    r.get<3>("bias_tau", f.bias_tau);
    f.gate_mode = parse_enum(r, "gate_mode", gate_mode_name(f.gate_mode), parse_gate_mode);
    r.get("use_orientation_rows", f.use_orientation_rows);
    r.get("use_constraint", f.use_constraint);
    r.get("camera_before_constraint", f.camera_before_constraint);
    if (r.find("velocity_reset_period")) {
      double reset = 0.0;
      r.get("velocity_reset_period", reset);
      f.velocity_reset_period = reset;
    }
    r.get("max_predict_dt", f.max_predict_dt);
    r.get("max_stream_gap", f.max_stream_gap);
    r.finish();
  }
  {
    ObjectReader r = root.child("depth");
    r.get("process_var", c.depth.process_var);
    r.get("min_area", c.depth.min_area);
    r.finish();
  }
  {
    ObjectReader r = root.child("vision");
    c.vision.mode = parse_enum(r, "mode", vision_mode_name(c.vision.mode), parse_vision_mode);
    r.get("binarize_threshold", c.vision.binarize_threshold);
    r.get("min_area", c.vision.min_area);
    r.get("subpixel", c.vision.subpixel);
    r.get("dump_masks", c.vision.dump_masks);
    r.get("max_jump_px", c.vision.max_jump_px);
    r.finish();
  }
  c.missing = parse_enum(root, "missing_marker_policy", missing_policy_name(c.missing),
                         parse_missing_policy);
  root.finish();

  if (c.output_dir.empty()) throw ConfigError("output_dir: must not be empty");
  if (!c.filter.velocity_reset_period) c.filter.velocity_reset_period = 1.0 / c.sim.camera_rate;
  try {
    c.sim.validate();
    if (c.vision.binarize_threshold < 0 || c.vision.binarize_threshold > 255) {
      throw InvalidArgument("vision.binarize_threshold must lie in [0, 255]");
    }
    if (c.vision.min_area < 1) throw InvalidArgument("vision.min_area must be >= 1");
    if (!(c.depth.process_var >= 0.0)) throw InvalidArgument("depth.process_var must be >= 0");
    if (c.sim.imu_rate < 20.0 * c.sim.profile.cadence) {
      throw InvalidArgument("rates.imu_hz must be at least 20 x gait.cadence");
    }
    pipeline_options(c).ekf.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline nlohmann::json serialize_config(const RunConfig& c) {
  using namespace config_detail;
  using nlohmann::json;
  const GaitProfile& p = c.sim.profile;
  const CameraModel& m = c.sim.camera;
  const SensorNoiseSpec& n = c.sim.noise;
  const FilterConfig& f = c.filter;
  json j;
  j["scenario"] = c.scenario;
  j["input_dir"] = c.input_dir;
  j["output_dir"] = c.output_dir;
  j["seed"] = c.seed;
  j["gait"] = {{"kind", gait_kind_name(p.kind)},
               {"duration", p.duration},
               {"cadence", p.cadence},
               {"hip_amplitude_deg", p.hip_amplitude},
               {"hip_offset_deg", p.hip_offset},
               {"knee_min_deg", p.knee_min},
               {"knee_max_deg", p.knee_max},
               {"knee_phase", p.knee_phase},
               {"pelvis_travel", p.pelvis_travel},
               {"pelvis_period", p.pelvis_period},
               {"vertical_bounce", p.vertical_bounce},
               {"out_of_plane_sway_deg", p.out_of_plane_sway},
               {"lead_in", p.lead_in},
               {"ramp", p.ramp},
               {"hyperextension_limit_deg", p.hyperextension_limit}};
  j["leg"] = {{"l_u", c.sim.leg.l_u}, {"l_l", c.sim.leg.l_l}, {"r_u", c.sim.leg.r_u}, {"r_l", c.sim.leg.r_l}};
  j["camera"] = {{"focal_px", m.focal_px}, {"width", m.width}, {"height", m.height},
                 {"cx", m.cx},             {"cy", m.cy},       {"marker_side_m", m.marker_side_m}};
  j["camera_pose"] = {{"camera_from_nav", array(c.sim.pose.camera_from_nav)},
                      {"position", array<3>(c.sim.pose.position)}};
  j["sensor_noise"] = {{"gyro_sigma", n.gyro_sigma},
                       {"accel_sigma", n.accel_sigma},
                       {"mag_sigma", n.mag_sigma},
                       {"bias_init", n.bias_init},
                       {"bias_tau", n.bias_tau},
                       {"bias_walk", n.bias_walk},
                       {"marker_dropout_prob", n.marker_dropout_prob},
                       {"pixel_jitter_sigma", n.pixel_jitter_sigma},
                       {"area_sigma_rel", n.area_sigma_rel}};
  j["earth"] = {{"gravity", c.earth.gravity}, {"mag_dip_deg", c.earth.mag_dip_deg}};
  j["rates"] = {{"imu_hz", c.sim.imu_rate}, {"camera_hz", c.sim.camera_rate}};
  j["filter"] = {{"q_diag", array<kStateDim>(f.noise.q_diag)},
                 {"r1_diag", array<14>(f.noise.r1_diag)},
                 {"r2_diag", array<3>(f.noise.r2_diag)},
                 {"r3_diag", array<6>(f.noise.r3_diag)},
                 {"accel_threshold", f.noise.accel_threshold},
                 {"alpha", f.alpha},
                 {"bias_sign", f.bias_sign},
                 {"bias_tau", array<3>(f.bias_tau)},
                 {"gate_mode", gate_mode_name(f.gate_mode)},
                 {"use_orientation_rows", f.use_orientation_rows},
                 {"use_constraint", f.use_constraint},
                 {"camera_before_constraint", f.camera_before_constraint},
                 {"velocity_reset_period", f.velocity_reset_period.value_or(1.0 / c.sim.camera_rate)},
                 {"max_predict_dt", f.max_predict_dt},
                 {"max_stream_gap", f.max_stream_gap}};
  j["depth"] = {{"process_var", c.depth.process_var}, {"min_area", c.depth.min_area}};
  j["vision"] = {{"mode", vision_mode_name(c.vision.mode)},
                 {"binarize_threshold", c.vision.binarize_threshold},
                 {"min_area", c.vision.min_area},
                 {"subpixel", c.vision.subpixel},
                 {"dump_masks", c.vision.dump_masks},
                 {"max_jump_px", c.vision.max_jump_px}};
  j["missing_marker_policy"] = missing_policy_name(c.missing);
  return j;
}

inline RunConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  return parse_config(j);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  RunConfig c;
  try {
    c = parse_config_text(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  c.base_dir = std::filesystem::path(path).parent_path().string();
  if (c.base_dir.empty()) c.base_dir = ".";
  return c;
}

inline std::string config_to_string(const RunConfig& c) { return serialize_config(c).dump(2) + "\n"; }

}  // namespace legfusion
