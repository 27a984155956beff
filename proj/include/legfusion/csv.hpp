#pragma once

// Versioned CSV schemas for every stream the pipeline reads or writes.
// Line 1 is "# legfusion <kind> v<version>[ key=value ...]", line 2 the
// column names. Numbers use the shortest text that reads back bit-exact.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "legfusion/errors.hpp"
#include "legfusion/gait_simulator.hpp"
#include "legfusion/marker_vision.hpp"
#include "legfusion/pipeline.hpp"

namespace legfusion {

inline constexpr int kCsvVersion = 1;

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0) return "0";  // folds -0
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct CsvTable {
  std::string kind;
  int version = 0;
  std::map<std::string, std::string> attributes;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  std::string path;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (columns[i] == name) return i;
    }
    throw IoError(path + ": missing column '" + name + "'");
  }

  double number(std::size_t row, std::size_t col) const {
    const std::string& s = rows[row][col];
    if (s == "nan") return std::nan("");
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) {
      throw IoError(path + ": row " + std::to_string(row + 1) + ": '" + s + "' is not a number");
    }
    return v;
  }
};

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& kind, const std::vector<std::string>& columns,
            const std::map<std::string, std::string>& attributes = {})
      : path_(path), width_(columns.size()) {
    buf_ = "# legfusion " + kind + " v" + std::to_string(kCsvVersion);
    for (const auto& [k, v] : attributes) buf_ += " " + k + "=" + v;
    buf_ += '\n';
    append_row(columns);
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != width_) throw InvalidArgument("CsvWriter: row width mismatch for " + path_);
    append_row(cells);
  }

  void close() {
    std::ofstream out(path_, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path_ + "' for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw IoError("write failed for '" + path_ + "'");
  }

 private:
  void append_row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) buf_ += ',';
      buf_ += cells[i];
    }
    buf_ += '\n';
  }

  std::string path_;
  std::size_t width_;
  std::string buf_;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

/// Reads a table and checks its kind, version and exact column list.
inline CsvTable read_csv(const std::string& path, const std::string& kind,
                         const std::vector<std::string>& expected_columns) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  CsvTable t;
  t.path = path;
  std::string line;
  if (!std::getline(in, line)) throw IoError(path + ": empty file");
  {
    std::istringstream hs(line);
    std::string hash, tag, k, ver;
    hs >> hash >> tag >> k >> ver;
    if (hash != "#" || tag != "legfusion" || ver.size() < 2 || ver[0] != 'v') {
      throw IoError(path + ": missing '# legfusion <kind> v<N>' header line");
    }
    t.kind = k;
    t.version = std::atoi(ver.c_str() + 1);
    std::string kv;
    while (hs >> kv) {
      const auto eq = kv.find('=');
      if (eq != std::string::npos) t.attributes[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
  }
  if (t.kind != kind) throw IoError(path + ": expected a '" + kind + "' table, found '" + t.kind + "'");
  if (t.version != kCsvVersion) {
    throw IoError(path + ": unsupported " + kind + " schema version " + std::to_string(t.version));
  }
  if (!std::getline(in, line)) throw IoError(path + ": missing column header");
  t.columns = split_csv_line(line);
  if (t.columns != expected_columns) throw IoError(path + ": unexpected columns for a '" + kind + "' table");
  std::size_t lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto cells = split_csv_line(line);
    if (cells.size() != t.columns.size()) {
      throw IoError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.columns.size()) +
                    " fields, got " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

namespace csv_detail {

inline std::vector<std::string> with_axes(const std::string& prefix, const char* axes) {
  std::vector<std::string> out;
  for (const char* a = axes; *a; ++a) out.push_back(prefix + "_" + *a);
  return out;
}

inline void append(std::vector<std::string>& dst, const std::vector<std::string>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

inline void put(std::vector<std::string>& row, const Vec3& v) {
  for (int i = 0; i < 3; ++i) row.push_back(format_number(v[i]));
}

inline void put(std::vector<std::string>& row, const Quaternion& q) {
  for (double c : {q.w, q.x, q.y, q.z}) row.push_back(format_number(c));
}

inline Vec3 vec3(const CsvTable& t, std::size_t r, std::size_t c) {
  return {t.number(r, c), t.number(r, c + 1), t.number(r, c + 2)};
}

inline Quaternion quat(const CsvTable& t, std::size_t r, std::size_t c) {
  return {t.number(r, c), t.number(r, c + 1), t.number(r, c + 2), t.number(r, c + 3)};
}

inline bool flag(const CsvTable& t, std::size_t r, std::size_t c) {
  const std::string& s = t.rows[r][c];
  if (s == "1") return true;
  if (s == "0") return false;
  throw IoError(t.path + ": row " + std::to_string(r + 1) + ": flag must be 0 or 1, got '" + s + "'");
}

inline std::vector<std::string> joint_columns() {
  std::vector<std::string> c;
  for (Joint j : kJoints) append(c, with_axes(joint_name(j), "xyz"));
  return c;
}

}  // namespace csv_detail

// ---------------------------------------------------------------------------
// IMU: t, gx, gy, gz, ax, ay, az, mx, my, mz (sensor frame)

inline std::vector<std::string> imu_columns() { return {"t", "gx", "gy", "gz", "ax", "ay", "az", "mx", "my", "mz"}; }

inline void write_imu_csv(const std::string& path, const std::vector<ImuSample>& samples) {
  CsvWriter w(path, "imu", imu_columns());
  for (const ImuSample& s : samples) {
    std::vector<std::string> r{format_number(s.t)};
    csv_detail::put(r, s.gyro);
    csv_detail::put(r, s.accel);
    csv_detail::put(r, s.mag);
    w.row(r);
  }
  w.close();
}

inline std::vector<ImuSample> read_imu_csv(const std::string& path) {
  const CsvTable t = read_csv(path, "imu", imu_columns());
  std::vector<ImuSample> out(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out[r].t = t.number(r, 0);
    out[r].gyro = csv_detail::vec3(t, r, 1);
    out[r].accel = csv_detail::vec3(t, r, 4);
    out[r].mag = csv_detail::vec3(t, r, 7);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Markers: t, joint, u, v, area_px, valid; three rows per frame

inline std::vector<std::string> marker_columns() { return {"t", "joint", "u", "v", "area_px", "valid"}; }

inline void write_markers_csv(const std::string& path, const std::vector<FrameObservations>& frames) {
  CsvWriter w(path, "markers", marker_columns());
  for (const FrameObservations& f : frames) {
    for (const MarkerObservation& o : f) {
      w.row({format_number(o.t), joint_name(o.joint), format_number(o.valid ? o.pixel.x() : std::nan("")),
             format_number(o.valid ? o.pixel.y() : std::nan("")), format_number(o.valid ? o.area_px : 0.0),
             o.valid ? "1" : "0"});
    }
  }
  w.close();
}

/// Rows sharing a timestamp form one frame; each joint at most once per frame.
inline std::vector<FrameObservations> read_markers_csv(const std::string& path) {
  const CsvTable t = read_csv(path, "markers", marker_columns());
  std::vector<FrameObservations> out;
  std::array<bool, 3> seen{};
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const double time = t.number(r, 0);
    if (out.empty() || time != out.back()[0].t) {
      if (!out.empty() && time < out.back()[0].t) throw IoError(path + ": timestamps must not decrease");
      FrameObservations f;
      for (Joint j : kJoints) {
        f[static_cast<int>(j)].t = time;
        f[static_cast<int>(j)].joint = j;
      }
      out.push_back(f);
      seen = {};
    }
    Joint j;
    try {
      j = parse_joint(t.rows[r][1]);
    } catch (const InvalidArgument& e) {
      throw IoError(path + ": " + e.what());
    }
    const int k = static_cast<int>(j);
    if (seen[k]) throw IoError(path + ": joint '" + t.rows[r][1] + "' repeated at t = " + t.rows[r][0]);
    seen[k] = true;
    MarkerObservation& o = out.back()[k];
    o.valid = csv_detail::flag(t, r, 5);
    if (o.valid) {
      o.pixel = {t.number(r, 2), t.number(r, 3)};
      o.area_px = t.number(r, 4);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Camera-frame joints: t, joint, X, Y, Z, valid

inline std::vector<std::string> joints3d_columns() { return {"t", "joint", "X", "Y", "Z", "valid"}; }

inline void write_joints3d_csv(const std::string& path, const std::vector<CameraSample>& track) {
  CsvWriter w(path, "joints3d", joints3d_columns());
  for (const CameraSample& s : track) {
    for (Joint j : kJoints) {
      const int k = static_cast<int>(j);
      const Vec3 p = s.valid[k] ? s.joints_cam[k] : Vec3::Constant(std::nan(""));
      w.row({format_number(s.t), joint_name(j), format_number(p.x()), format_number(p.y()), format_number(p.z()),
             s.valid[k] ? "1" : "0"});
    }
  }
  w.close();
}

// ---------------------------------------------------------------------------
// Truth: t, joints (nav), q_u, q_l, omega_u, omega_l, b_u, b_l

inline std::vector<std::string> truth_columns() {
  using namespace csv_detail;
  std::vector<std::string> c{"t"};
  append(c, joint_columns());
  append(c, with_axes("qu", "wxyz"));
  append(c, with_axes("ql", "wxyz"));
  append(c, with_axes("wu", "xyz"));
  append(c, with_axes("wl", "xyz"));
  append(c, with_axes("bu", "xyz"));
  append(c, with_axes("bl", "xyz"));
  return c;
}

inline void write_truth_csv(const std::string& path, const std::vector<TruthSample>& truth) {
  CsvWriter w(path, "truth", truth_columns());
  for (const TruthSample& s : truth) {
    std::vector<std::string> r{format_number(s.t)};
    for (int j = 0; j < 3; ++j) csv_detail::put(r, s.joints[j]);
    csv_detail::put(r, s.q_u);
    csv_detail::put(r, s.q_l);
    csv_detail::put(r, s.omega_u);
    csv_detail::put(r, s.omega_l);
    csv_detail::put(r, s.bias_u);
    csv_detail::put(r, s.bias_l);
    w.row(r);
  }
  w.close();
}

inline std::vector<TruthRow> read_truth_csv(const std::string& path) {
  const CsvTable t = read_csv(path, "truth", truth_columns());
  std::vector<TruthRow> out(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out[r].t = t.number(r, 0);
    out[r].joints.hip = csv_detail::vec3(t, r, 1);
    out[r].joints.knee = csv_detail::vec3(t, r, 4);
    out[r].joints.ankle = csv_detail::vec3(t, r, 7);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Estimate: t, q_u, q_l, b_u, b_l, joints (nav), gate flags. State columns
// are nan for the camera-only variant.

inline std::vector<std::string> estimate_columns() {
  using namespace csv_detail;
  std::vector<std::string> c{"t"};
  append(c, with_axes("qu", "wxyz"));
  append(c, with_axes("ql", "wxyz"));
  append(c, with_axes("bu", "xyz"));
  append(c, with_axes("bl", "xyz"));
  append(c, joint_columns());
  c.push_back("gate_u");
  c.push_back("gate_l");
  return c;
}

inline void write_estimate_csv(const std::string& path, const EstimateTrack& est) {
  CsvWriter w(path, "estimate", estimate_columns(), {{"variant", variant_name(est.variant)}});
  const double nan = std::nan("");
  for (const TrackRow& row : est.rows) {
    std::vector<std::string> r{format_number(row.t)};
    if (row.has_state) {
      csv_detail::put(r, row.q_u);
      csv_detail::put(r, row.q_l);
      csv_detail::put(r, row.b_u);
      csv_detail::put(r, row.b_l);
    } else {
      for (int i = 0; i < 14; ++i) r.push_back(format_number(nan));
    }
    for (int j = 0; j < 3; ++j) csv_detail::put(r, row.joints[j]);
    r.push_back(row.gate_u ? "1" : "0");
    r.push_back(row.gate_l ? "1" : "0");
    w.row(r);
  }
  w.close();
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::ImuOnly, Variant::CameraOnly, Variant::Fused}) {
    if (s == variant_name(v)) return v;
  }
  throw InvalidArgument("unknown variant '" + s + "'");
}

inline EstimateTrack read_estimate_csv(const std::string& path) {
  const CsvTable t = read_csv(path, "estimate", estimate_columns());
  EstimateTrack est;
  const auto it = t.attributes.find("variant");
  if (it != t.attributes.end()) {
    try {
      est.variant = parse_variant(it->second);
    } catch (const InvalidArgument& e) {
      throw IoError(path + ": " + e.what());
    }
  }
  est.rows.resize(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    TrackRow& row = est.rows[r];
    row.t = t.number(r, 0);
    row.q_u = csv_detail::quat(t, r, 1);
    row.has_state = !std::isnan(row.q_u.w);
    if (row.has_state) {
      row.q_l = csv_detail::quat(t, r, 5);
      row.b_u = csv_detail::vec3(t, r, 9);
      row.b_l = csv_detail::vec3(t, r, 12);
    } else {
      row.q_u = Quaternion::identity();
    }
    row.joints.hip = csv_detail::vec3(t, r, 15);
    row.joints.knee = csv_detail::vec3(t, r, 18);
    row.joints.ankle = csv_detail::vec3(t, r, 21);
    row.gate_u = csv_detail::flag(t, r, 24);
    row.gate_l = csv_detail::flag(t, r, 25);
  }
  return est;
}

// ---------------------------------------------------------------------------
// RMSE report: one row per joint plus the overall row, centimetres

inline std::vector<std::string> rmse_columns() {
  return {"joint", "x_cm", "y_cm", "z_cm", "euclid_cm", "change_vs_imu_pct", "change_vs_camera_pct"};
}

inline void write_rmse_csv(const std::string& path, const RmseReport& rep, const std::string& label) {
  CsvWriter w(path, "rmse", rmse_columns(), {{"estimate", label}, {"samples", std::to_string(rep.samples)}});
  const std::string none = format_number(std::nan(""));
  for (Joint j : kJoints) {
    const JointRmse& jr = rep.joints[static_cast<int>(j)];
    w.row({joint_name(j), format_number(jr.axis_cm.x()), format_number(jr.axis_cm.y()),
           format_number(jr.axis_cm.z()), format_number(jr.euclid_cm), none, none});
  }
  w.row({"overall", none, none, none, format_number(rep.overall_cm),
         rep.change_vs_imu_pct ? format_number(*rep.change_vs_imu_pct) : none,
         rep.change_vs_camera_pct ? format_number(*rep.change_vs_camera_pct) : none});
  w.close();
}

}  // namespace legfusion
