// legfusion: simulate, track, evaluate, demo.
// Exit codes: 0 ok, 2 configuration or usage, 3 input/output, 4 filter divergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "legfusion/config.hpp"
#include "legfusion/csv.hpp"
#include "legfusion/pipeline.hpp"

namespace fs = std::filesystem;
using namespace legfusion;

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kConfig = 2, kIo = 3, kDivergence = 4 };

constexpr const char* kImuUpper = "imu_upper.csv";
constexpr const char* kImuLower = "imu_lower.csv";
constexpr const char* kMarkers = "markers.csv";
constexpr const char* kTruth = "truth.csv";
constexpr const char* kFrames = "frames";
constexpr const char* kJoints3d = "joints3d.csv";

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void write_simulation(const RunConfig& cfg, const SimulationData& d, const fs::path& dir) {
  ensure_dir(dir);
  RunConfig eff = cfg;
  eff.output_dir = ".";  // relative to config.json, so the tree can move
  eff.input_dir.clear();
  write_text(dir / "config.json", config_to_string(eff));
  write_imu_csv((dir / kImuUpper).string(), d.imu.upper);
  write_imu_csv((dir / kImuLower).string(), d.imu.lower);
  write_markers_csv((dir / kMarkers).string(), d.markers.observations);
  write_truth_csv((dir / kTruth).string(), d.truth);
  if (cfg.vision.mode != VisionMode::Frames) return;
  const fs::path frames = dir / kFrames;
  ensure_dir(frames);
  const DetectOptions det = detect_options(cfg);
  for (std::size_t i = 0; i < d.markers.truth.size(); ++i) {
    const RasterImage img = render_frame(d.markers.truth[i], cfg.sim.camera);
    write_ppm((frames / frame_filename(static_cast<int>(i))).string(), img);
    if (cfg.vision.dump_masks) {
      char name[32];
      std::snprintf(name, sizeof name, "mask_%06d.pgm", static_cast<int>(i));
      write_pgm((frames / name).string(), marker_mask(img, det.marker_color, det.mask));
    }
  }
}

/// Marker observations recovered from a directory of rendered frames.
std::vector<FrameObservations> markers_from_frames(const RunConfig& cfg, const fs::path& frames) {
  const DetectOptions det = detect_options(cfg);
  LabelerOptions lo;
  lo.max_jump_px = cfg.vision.max_jump_px;
  JointLabeler labeler(lo);
  std::vector<FrameObservations> out;
  for (int i = 0;; ++i) {
    const fs::path p = frames / frame_filename(i);
    if (!fs::exists(p)) break;
    const RasterImage img = read_ppm(p.string());
    const double t = static_cast<double>(i) / cfg.sim.camera_rate;
    out.push_back(labeler.assign(detect_markers(img, det), t));
  }
  if (out.empty()) throw IoError("no frames found in '" + frames.string() + "'");
  return out;
}

struct Inputs {
  ImuStreams imu;
  std::vector<FrameObservations> markers;
  std::optional<std::vector<TruthRow>> truth;
};

Inputs load_inputs(const RunConfig& cfg, const fs::path& dir) {
  Inputs in;
  in.imu.upper = read_imu_csv((dir / kImuUpper).string());
  in.imu.lower = read_imu_csv((dir / kImuLower).string());
  if (cfg.vision.mode == VisionMode::Frames) {
    in.markers = markers_from_frames(cfg, dir / kFrames);
  } else {
    in.markers = read_markers_csv((dir / kMarkers).string());
  }
  if (fs::exists(dir / kTruth)) in.truth = read_truth_csv((dir / kTruth).string());
  return in;
}

EstimateTrack run_variant(Variant v, const RunConfig& cfg, const Inputs& in, const std::vector<CameraSample>& track) {
  const PipelineOptions opts = pipeline_options(cfg);
  switch (v) {
    case Variant::CameraOnly:
      return run_camera_only(track, cfg.sim.pose, opts);
    case Variant::Fused:
      return run_fused(in.imu, track, cfg.sim.pose, opts);
    case Variant::ImuOnly:
      break;
  }
  std::vector<Vec3> hip;
  if (in.truth && in.truth->size() == in.imu.upper.size()) {
    hip = truth_hip(*in.truth);
  } else {
    std::cerr << "legfusion: no matching truth.csv, anchoring the IMU-only hip to the camera hip\n";
    hip = interpolate_hip(camera_track_in_nav(track, cfg.sim.pose), imu_times(in.imu));
  }
  return run_imu_only(in.imu, hip, opts);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width) { return s.size() >= width ? s : s + std::string(width - s.size(), ' '); }

std::string report_table(const RmseReport& rep, const std::string& title) {
  std::string s = title + "\n";
  s += "RMSE (centimeter)        X        Y        Z  Euclidean\n";
  for (Joint j : kJoints) {
    const JointRmse& r = rep.joints[static_cast<int>(j)];
    s += pad(joint_name(j), 14) + fmt("%11.3f", r.axis_cm.x()) + fmt("%9.3f", r.axis_cm.y()) +
         fmt("%9.3f", r.axis_cm.z()) + fmt("%11.3f", r.euclid_cm) + "\n";
  }
  s += pad("overall (knee, ankle)", 41) + fmt("%11.3f", rep.overall_cm) + "\n";
  if (rep.change_vs_imu_pct) s += "Error change relative to IMU:    " + fmt("%+.1f%%", *rep.change_vs_imu_pct) + "\n";
  if (rep.change_vs_camera_pct) {
    s += "Error change relative to camera: " + fmt("%+.1f%%", *rep.change_vs_camera_pct) + "\n";
  }
  s += "samples: " + std::to_string(rep.samples) + "\n";
  return s;
}

fs::path estimate_path(const fs::path& dir, Variant v) {
  return dir / (std::string("estimate_") + variant_name(v) + ".csv");
}

fs::path rmse_path_for(const fs::path& est) {
  fs::path p = est;
  p.replace_filename(est.stem().string() + "_rmse.csv");
  return p;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_simulate(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed) {
  RunConfig cfg = load_config(config_path);
  if (seed) cfg.seed = *seed;
  const SimulationData d = simulate(cfg.sim, cfg.seed);
  write_simulation(cfg, d, out);
  std::cout << "wrote " << d.imu.upper.size() << " IMU steps and " << d.markers.observations.size()
            << " camera frames to " << out << "\n";
  return kOk;
}

int cmd_track(const std::string& config_path, Variant v, const std::string& in_dir, const std::string& out) {
  RunConfig cfg = load_config(config_path);
  const fs::path dir = in_dir.empty() ? fs::path(cfg.streams_dir()) : fs::path(in_dir);
  const Inputs in = load_inputs(cfg, dir);
  const auto track = build_camera_track(in.markers, cfg.sim.camera, cfg.sim.leg, cfg.depth);
  const EstimateTrack est = run_variant(v, cfg, in, track);
  const fs::path out_path = out.empty() ? estimate_path(dir, v) : fs::path(out);
  if (out_path.has_parent_path()) ensure_dir(out_path.parent_path());
  write_estimate_csv(out_path.string(), est);
  if (v != Variant::ImuOnly) write_joints3d_csv((out_path.parent_path() / kJoints3d).string(), track);
  std::cout << "wrote " << est.rows.size() << " " << variant_name(v) << " rows to " << out_path.string() << "\n";
  return kOk;
}

int cmd_evaluate(const std::string& est_path, const std::string& truth_path, const std::string& imu_ref,
                 const std::string& camera_ref, const std::string& out, double t_begin, double t_end) {
  const EstimateTrack est = read_estimate_csv(est_path);
  const auto truth = read_truth_csv(truth_path);
  EvaluateOptions eo;
  eo.t_begin = t_begin;
  eo.t_end = t_end;
  RmseReport rep = evaluate(est.rows, truth, eo);
  if (!imu_ref.empty()) {
    const RmseReport ref = evaluate(read_estimate_csv(imu_ref).rows, truth, eo);
    rep.change_vs_imu_pct = percent_change(rep.overall_cm, ref.overall_cm);
  }
  if (!camera_ref.empty()) {
    const RmseReport ref = evaluate(read_estimate_csv(camera_ref).rows, truth, eo);
    rep.change_vs_camera_pct = percent_change(rep.overall_cm, ref.overall_cm);
  }
  const fs::path out_path = out.empty() ? rmse_path_for(est_path) : fs::path(out);
  write_rmse_csv(out_path.string(), rep, variant_name(est.variant));
  std::cout << report_table(rep, fs::path(est_path).filename().string() + " (" + variant_name(est.variant) + ")");
  return kOk;
}

/// Simulate, track all three variants from the written files, evaluate.
std::string demo_scenario(const std::string& name, std::uint64_t seed, const fs::path& root) {
  RunConfig cfg = parse_config_text("{\"scenario\": \"" + name + "\"}");
  cfg.seed = seed;
  const fs::path dir = root / name;
  write_simulation(cfg, simulate(cfg.sim, cfg.seed), dir);

  const Inputs in = load_inputs(cfg, dir);
  const auto track = build_camera_track(in.markers, cfg.sim.camera, cfg.sim.leg, cfg.depth);
  write_joints3d_csv((dir / kJoints3d).string(), track);
  VariantRuns runs;
  runs.imu_only = run_variant(Variant::ImuOnly, cfg, in, track);
  runs.camera_only = run_variant(Variant::CameraOnly, cfg, in, track);
  runs.fused = run_variant(Variant::Fused, cfg, in, track);
  for (const EstimateTrack* e : {&runs.imu_only, &runs.camera_only, &runs.fused}) {
    write_estimate_csv(estimate_path(dir, e->variant).string(), *e);
  }
  // Evaluate from the files, exactly as the evaluate subcommand would.
  const auto truth = read_truth_csv((dir / kTruth).string());
  VariantRuns loaded;
  loaded.imu_only = read_estimate_csv(estimate_path(dir, Variant::ImuOnly).string());
  loaded.camera_only = read_estimate_csv(estimate_path(dir, Variant::CameraOnly).string());
  loaded.fused = read_estimate_csv(estimate_path(dir, Variant::Fused).string());
  const VariantReports rep = evaluate_variants(loaded, truth);

  std::string summary = "scenario " + name + ", seed " + std::to_string(seed) + "\n\n";
  const std::pair<const RmseReport*, Variant> parts[] = {
      {&rep.imu_only, Variant::ImuOnly}, {&rep.camera_only, Variant::CameraOnly}, {&rep.fused, Variant::Fused}};
  for (const auto& [r, v] : parts) {
    write_rmse_csv(rmse_path_for(estimate_path(dir, v)).string(), *r, variant_name(v));
    summary += report_table(*r, variant_name(v)) + "\n";
  }
  write_text(dir / "summary.txt", summary);
  return summary;
}

int cmd_demo(std::uint64_t seed, const std::string& out) {
  const fs::path root(out);
  ensure_dir(root);
  for (const char* name : {"walk", "run"}) std::cout << demo_scenario(name, seed, root);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Leg joint tracking by IMU and monocular marker fusion"};
  app.require_subcommand(1);

  std::string config_path, out, in_dir, est, truth, imu_ref, camera_ref;
  std::uint64_t seed_value = 0;
  double t_begin = -1e300, t_end = 1e300;

  auto* sim = app.add_subcommand("simulate", "Generate synthetic IMU, marker and truth streams");
  sim->add_option("--config", config_path, "Run configuration (JSON)")->required();
  sim->add_option("--out", out, "Output directory")->required();
  auto* sim_seed = sim->add_option("--seed", seed_value, "Override the configured seed");

  auto* trk = app.add_subcommand("track", "Run one estimator variant on recorded streams");
  trk->add_option("--config", config_path, "Run configuration (JSON)")->required();
  trk->add_option("--in", in_dir, "Stream directory (default: input_dir or output_dir from the config)");
  trk->add_option("--out", out, "Estimate CSV path (default: <streams>/estimate_<variant>.csv)");
  bool imu_only = false, camera_only = false, fused = false;
  auto* f1 = trk->add_flag("--imu-only", imu_only, "IMU-only estimate, hip from truth");
  auto* f2 = trk->add_flag("--camera-only", camera_only, "Camera-only estimate");
  auto* f3 = trk->add_flag("--fused", fused, "IMU and camera fused");
  f1->excludes(f2)->excludes(f3);
  f2->excludes(f3);

  auto* ev = app.add_subcommand("evaluate", "RMSE of an estimate against truth");
  ev->add_option("--est", est, "Estimate CSV")->required();
  ev->add_option("--truth", truth, "Truth CSV")->required();
  ev->add_option("--imu-ref", imu_ref, "IMU-only estimate for the relative change");
  ev->add_option("--camera-ref", camera_ref, "Camera-only estimate for the relative change");
  ev->add_option("--out", out, "Report CSV (default: <est>_rmse.csv)");
  ev->add_option("--t-begin", t_begin, "Ignore rows before this time");
  ev->add_option("--t-end", t_end, "Ignore rows after this time");

  auto* demo = app.add_subcommand("demo", "Simulate, track and evaluate the walking and running scenarios");
  demo->add_option("--seed", seed_value, "Random seed")->required();
  std::string demo_out = "demo_out";
  demo->add_option("--out", demo_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*sim) {
      return cmd_simulate(config_path, out, sim_seed->count() ? std::optional<std::uint64_t>(seed_value) : std::nullopt);
    }
    if (*trk) {
      if (!imu_only && !camera_only && !fused) {
        std::cerr << "legfusion: config error: track needs one of --imu-only, --camera-only, --fused\n";
        return kConfig;
      }
      const Variant v = imu_only ? Variant::ImuOnly : (camera_only ? Variant::CameraOnly : Variant::Fused);
      return cmd_track(config_path, v, in_dir, out);
    }
    if (*ev) return cmd_evaluate(est, truth, imu_ref, camera_ref, out, t_begin, t_end);
    if (*demo) return cmd_demo(seed_value, demo_out);
  } catch (const ConfigError& e) {
    std::cerr << "legfusion: config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "legfusion: filter divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const Error& e) {
    // I/O failures, malformed or inconsistent input streams.
    std::cerr << "legfusion: I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "legfusion: internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}
