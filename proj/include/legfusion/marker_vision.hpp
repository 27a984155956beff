#pragma once

// Colored-marker detection: grayscale subtraction mask, 8-connected component
// labeling, blob centroids/areas and the hip/knee/ankle association.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "legfusion/errors.hpp"

namespace legfusion {

using Vec2 = Eigen::Vector2d;

struct Rgb8 {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb8&, const Rgb8&) = default;
};

inline constexpr Rgb8 kMarkerGreen{0, 255, 0};
inline constexpr Rgb8 kBackgroundGray{128, 128, 128};

struct RasterImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  ///< row-major RGB triplets

  RasterImage() = default;
  RasterImage(int w, int h, Rgb8 fill = {}) : width(w), height(h) {
    if (w < 1 || h < 1) throw InvalidArgument("RasterImage: dimensions must be >= 1");
    pixels.resize(static_cast<std::size_t>(w) * h * 3);
    for (std::size_t i = 0; i < pixels.size(); i += 3) {
      pixels[i] = fill.r;
      pixels[i + 1] = fill.g;
      pixels[i + 2] = fill.b;
    }
  }

  void validate() const {
    if (width < 1 || height < 1) throw InvalidArgument("RasterImage: dimensions must be >= 1");
    if (pixels.size() != static_cast<std::size_t>(width) * height * 3) {
      throw InvalidArgument("RasterImage: pixel buffer size does not match dimensions");
    }
  }

  Rgb8 at(int x, int y) const {
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    return {pixels[i], pixels[i + 1], pixels[i + 2]};
  }
  void set(int x, int y, Rgb8 c) {
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    pixels[i] = c.r;
    pixels[i + 1] = c.g;
    pixels[i + 2] = c.b;
  }
};

struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;  ///< row-major, 0 or 1

  BinaryMask() = default;
  BinaryMask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}

  bool at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v) { bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
};

// ---------------------------------------------------------------------------
// Netpbm I/O

namespace detail {

inline void skip_pnm_space(std::istream& in) {
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      in.get();
    } else {
      return;
    }
  }
}

inline int read_pnm_int(std::istream& in, const std::string& path) {
  skip_pnm_space(in);
  int v = -1;
  if (!(in >> v) || v < 0) throw IoError("malformed netpbm header in " + path);
  return v;
}

/// Reads magic, width, height, maxval and the single whitespace byte.
inline std::array<int, 3> read_pnm_header(std::istream& in, const std::string& path, const char* magic) {
  char m[2] = {0, 0};
  in.read(m, 2);
  if (!in || m[0] != magic[0] || m[1] != magic[1]) {
    throw IoError(path + ": expected " + std::string(magic, 2) + " netpbm file");
  }
  const int w = read_pnm_int(in, path);
  const int h = read_pnm_int(in, path);
  const int maxval = read_pnm_int(in, path);
  if (w < 1 || h < 1 || maxval != 255) throw IoError(path + ": unsupported netpbm dimensions or maxval");
  in.get();
  return {w, h, maxval};
}

}  // namespace detail

inline RasterImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const auto [w, h, maxval] = detail::read_pnm_header(in, path, "P6");
  (void)maxval;
  RasterImage img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw IoError(path + ": truncated pixel data");
  return img;
}

inline void write_ppm(const std::string& path, const RasterImage& img) {
  img.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write failed for " + path);
}

/// Mask dump: true pixels as 255.
inline void write_pgm(const std::string& path, const BinaryMask& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "P5\n" << mask.width << ' ' << mask.height << "\n255\n";
  std::vector<char> row(mask.bits.size());
  std::transform(mask.bits.begin(), mask.bits.end(), row.begin(), [](std::uint8_t b) { return b ? char(255) : 0; });
  out.write(row.data(), static_cast<std::streamsize>(row.size()));
  if (!out) throw IoError("write failed for " + path);
}

/// Reads a P5 file back as a mask (any non-zero gray is true).
inline BinaryMask read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const auto [w, h, maxval] = detail::read_pnm_header(in, path, "P5");
  (void)maxval;
  BinaryMask mask(w, h);
  std::vector<char> raw(mask.bits.size());
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw IoError(path + ": truncated pixel data");
  for (std::size_t i = 0; i < raw.size(); ++i) mask.bits[i] = raw[i] != 0 ? 1 : 0;
  return mask;
}

inline std::string frame_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%06d.ppm", index);
  return buf;
}

// ---------------------------------------------------------------------------
// Mask

inline double luma(Rgb8 c) { return 0.299 * c.r + 0.587 * c.g + 0.114 * c.b; }

/// Index (0=R, 1=G, 2=B) of the marker colour's dominant channel.
inline int marker_channel(Rgb8 c) {
  if (c.g >= c.r && c.g >= c.b) return 1;
  return c.r >= c.b ? 0 : 2;
}

inline double channel_value(Rgb8 c, int ch) { return ch == 0 ? c.r : (ch == 1 ? c.g : c.b); }

/// Subtraction signal clamp(C_channel - gray, 0, 255).
inline double marker_signal(Rgb8 px, int ch) { return std::clamp(channel_value(px, ch) - luma(px), 0.0, 255.0); }

struct MaskOptions {
  double binarize_threshold = 40.0;
};

inline BinaryMask marker_mask(const RasterImage& frame, Rgb8 marker_color, const MaskOptions& opts = {}) {
  frame.validate();
  const int ch = marker_channel(marker_color);
  BinaryMask mask(frame.width, frame.height);
  for (int y = 0; y < frame.height; ++y) {
    for (int x = 0; x < frame.width; ++x) {
      mask.set(x, y, marker_signal(frame.at(x, y), ch) > opts.binarize_threshold);
    }
  }
  return mask;
}

/// Paints a mask back into an image: true pixels in `fg`, the rest in `bg`.
inline RasterImage mask_to_image(const BinaryMask& mask, Rgb8 fg = kMarkerGreen, Rgb8 bg = kBackgroundGray) {
  RasterImage img(mask.width, mask.height, bg);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(x, y)) img.set(x, y, fg);
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Connected components

struct Component {
  int label = 0;
  long area = 0;
  double sum_u = 0.0;
  double sum_v = 0.0;
  int min_u = 0, max_u = 0, min_v = 0, max_v = 0;
};

struct ComponentMap {
  int width = 0;
  int height = 0;
  std::vector<int> labels;  ///< 0 = background or discarded
  std::vector<Component> components;  ///< ordered by label, labels 1..n
};

/// Two-pass union-find labeling with 8-connectivity. Labels are renumbered
/// in raster order of each component's first pixel after small components
/// (area < min_area) are dropped.
inline ComponentMap connected_components(const BinaryMask& mask, int min_area = 9) {
  const int w = mask.width, h = mask.height;
  std::vector<int> provisional(mask.bits.size(), 0);
  std::vector<int> parent{0};
  auto find = [&](int a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  };
  auto unite = [&](int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  };

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(x, y)) continue;
      int current = 0;
      // Already-visited neighbours: W, NW, N, NE.
      const int nx[4] = {x - 1, x - 1, x, x + 1};
      const int ny[4] = {y, y - 1, y - 1, y - 1};
      for (int k = 0; k < 4; ++k) {
        if (nx[k] < 0 || ny[k] < 0 || nx[k] >= w) continue;
        const int l = provisional[static_cast<std::size_t>(ny[k]) * w + nx[k]];
        if (l == 0) continue;
        if (current == 0) {
          current = l;
        } else {
          unite(current, l);
        }
      }
      if (current == 0) {
        current = static_cast<int>(parent.size());
        parent.push_back(current);
      }
      provisional[static_cast<std::size_t>(y) * w + x] = current;
    }
  }

  ComponentMap out;
  out.width = w;
  out.height = h;
  out.labels.assign(mask.bits.size(), 0);
  std::vector<int> root_index(parent.size(), -1);
  std::vector<Component> comps;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (provisional[i] == 0) continue;
      const int root = find(provisional[i]);
      if (root_index[root] < 0) {
        root_index[root] = static_cast<int>(comps.size());
        Component c;
        c.min_u = c.max_u = x;
        c.min_v = c.max_v = y;
        comps.push_back(c);
      }
      Component& c = comps[root_index[root]];
      ++c.area;
      c.sum_u += x;
      c.sum_v += y;
      c.min_u = std::min(c.min_u, x);
      c.max_u = std::max(c.max_u, x);
      c.min_v = std::min(c.min_v, y);
      c.max_v = std::max(c.max_v, y);
    }
  }

  std::vector<int> final_label(comps.size(), 0);
  for (std::size_t k = 0; k < comps.size(); ++k) {
    if (comps[k].area < min_area) continue;
    comps[k].label = static_cast<int>(out.components.size()) + 1;
    final_label[k] = comps[k].label;
    out.components.push_back(comps[k]);
  }
  for (std::size_t i = 0; i < provisional.size(); ++i) {
    if (provisional[i] != 0) out.labels[i] = final_label[root_index[find(provisional[i])]];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Blobs

struct MarkerBlob {
  Vec2 centroid = Vec2::Zero();  ///< (u, v) pixels, pixel centres at integer coordinates
  double area = 0.0;             ///< pixels
  int label = 0;
};

/// Keeps the `expected_count` largest components (ties: lower label) and
/// returns them in label order with pixel-mean centroids and pixel-count areas.
inline std::vector<MarkerBlob> extract_markers(const ComponentMap& map, int expected_count) {
  std::vector<const Component*> order;
  for (const auto& c : map.components) order.push_back(&c);
  std::stable_sort(order.begin(), order.end(), [](const Component* a, const Component* b) { return a->area > b->area; });
  if (static_cast<int>(order.size()) > expected_count) order.resize(std::max(0, expected_count));
  std::sort(order.begin(), order.end(), [](const Component* a, const Component* b) { return a->label < b->label; });
  std::vector<MarkerBlob> blobs;
  for (const Component* c : order) {
    const double n = static_cast<double>(c->area);
    blobs.push_back({Vec2(c->sum_u / n, c->sum_v / n), n, c->label});
  }
  return blobs;
}

struct RefineOptions {
  int margin = 2;               ///< px searched around the component's bounding box
  double signal_floor = 4.0;    ///< subtraction signal treated as empty background
};

/// Coverage-weighted centroid and area. Edge pixels of an antialiased marker
/// carry a subtraction signal proportional to the covered fraction, so
/// coverage = signal / signal(marker colour). Only pixels not claimed by a
/// different component are used.
inline MarkerBlob refine_blob(const RasterImage& frame, const ComponentMap& map, const MarkerBlob& blob,
                              Rgb8 marker_color, const RefineOptions& opts = {}) {
  const Component& c = map.components.at(static_cast<std::size_t>(blob.label - 1));
  const int ch = marker_channel(marker_color);
  const double full = marker_signal(marker_color, ch);
  if (!(full > 0.0)) throw InvalidArgument("refine_blob: marker colour has no subtraction signal");
  double sw = 0.0, su = 0.0, sv = 0.0;
  for (int y = std::max(0, c.min_v - opts.margin); y <= std::min(frame.height - 1, c.max_v + opts.margin); ++y) {
    for (int x = std::max(0, c.min_u - opts.margin); x <= std::min(frame.width - 1, c.max_u + opts.margin); ++x) {
      const int l = map.labels[static_cast<std::size_t>(y) * frame.width + x];
      if (l != 0 && l != blob.label) continue;
      const double s = marker_signal(frame.at(x, y), ch);
      if (s <= opts.signal_floor) continue;
      const double cov = std::min(1.0, s / full);
      sw += cov;
      su += cov * x;
      sv += cov * y;
    }
  }
  if (!(sw > 0.0)) return blob;
  return {Vec2(su / sw, sv / sw), sw, blob.label};
}

struct DetectOptions {
  Rgb8 marker_color = kMarkerGreen;
  MaskOptions mask;
  int min_area = 9;
  int expected_count = 3;
  bool subpixel = true;
};

/// Full per-frame chain: mask, label, keep the largest blobs, refine.
inline std::vector<MarkerBlob> detect_markers(const RasterImage& frame, const DetectOptions& opts = {}) {
  const BinaryMask mask = marker_mask(frame, opts.marker_color, opts.mask);
  const ComponentMap map = connected_components(mask, opts.min_area);
  std::vector<MarkerBlob> blobs = extract_markers(map, opts.expected_count);
  if (opts.subpixel) {
    for (auto& b : blobs) b = refine_blob(frame, map, b, opts.marker_color);
  }
  return blobs;
}

// ---------------------------------------------------------------------------
// Joint association

enum class Joint { Hip = 0, Knee = 1, Ankle = 2 };
inline constexpr std::array<Joint, 3> kJoints{Joint::Hip, Joint::Knee, Joint::Ankle};

inline const char* joint_name(Joint j) {
  switch (j) {
    case Joint::Hip: return "hip";
    case Joint::Knee: return "knee";
    case Joint::Ankle: return "ankle";
  }
  return "?";
}

inline Joint parse_joint(const std::string& s) {
  for (Joint j : kJoints) {
    if (s == joint_name(j)) return j;
  }
  throw InvalidArgument("unknown joint '" + s + "'");
}

struct MarkerObservation {
  double t = 0.0;
  Joint joint = Joint::Hip;
  Vec2 pixel = Vec2::Zero();
  double area_px = 0.0;
  bool valid = false;
};

using FrameObservations = std::array<MarkerObservation, 3>;

struct LabelerOptions {
  double max_jump_px = 80.0;
  double tie_px = 1.0;
};

/// Sequential hip/knee/ankle labeler. The first frame with three blobs is
/// labeled by image height; later frames match blobs to constant-velocity
/// predictions of each joint, limited to max_jump_px.
class JointLabeler {
 public:
  explicit JointLabeler(LabelerOptions opts = {}) : opts_(opts) {}

  FrameObservations assign(const std::vector<MarkerBlob>& blobs, double t) {
    if (blobs.size() > 3) throw InvalidArgument("assign_joint_labels: more than three blobs");
    FrameObservations out;
    for (Joint j : kJoints) {
      out[static_cast<int>(j)].t = t;
      out[static_cast<int>(j)].joint = j;
    }
    std::array<int, 3> pick{-1, -1, -1};
    const bool complete = std::all_of(tracks_.begin(), tracks_.end(), [](const Track& tr) { return tr.seen; });
    if (!any_track() || (!complete && blobs.size() == 3)) {
      pick = by_height(blobs);
    } else {
      pick = by_proximity(blobs, t);
    }
    for (int k = 0; k < 3; ++k) {
      Track& tr = tracks_[k];
      if (pick[k] < 0) {
        // A joint missing for more than one frame loses its velocity.
        if (tr.seen && t - tr.t > tr.gap_reset) tr.vel = Vec2::Zero();
        continue;
      }
      const MarkerBlob& b = blobs[static_cast<std::size_t>(pick[k])];
      out[k].pixel = b.centroid;
      out[k].area_px = b.area;
      out[k].valid = true;
      if (tr.seen && t > tr.t) {
        tr.vel = (b.centroid - tr.pos) / (t - tr.t);
        tr.gap_reset = 1.5 * (t - tr.t);
      }
      tr.pos = b.centroid;
      tr.t = t;
      tr.seen = true;
    }
    return out;
  }

  void reset() { tracks_ = {}; }

 private:
  struct Track {
    bool seen = false;
    Vec2 pos = Vec2::Zero();
    Vec2 vel = Vec2::Zero();
    double t = 0.0;
    double gap_reset = 1e9;
  };

  bool any_track() const {
    return std::any_of(tracks_.begin(), tracks_.end(), [](const Track& t) { return t.seen; });
  }

  /// Initial labeling; needs all three joints to be unambiguous, except that
  /// two blobs are taken as hip (upper) and ankle (lower).
  static std::array<int, 3> by_height(const std::vector<MarkerBlob>& blobs) {
    std::array<int, 3> pick{-1, -1, -1};
    std::vector<int> idx(blobs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      if (blobs[a].centroid.y() != blobs[b].centroid.y()) return blobs[a].centroid.y() < blobs[b].centroid.y();
      return blobs[a].centroid.x() < blobs[b].centroid.x();
    });
    if (idx.size() == 3) {
      pick = {idx[0], idx[1], idx[2]};
    } else if (idx.size() == 2) {
      pick = {idx[0], -1, idx[1]};
    }
    return pick;
  }

  /// Exhaustive search over partial assignments (at most 4^3 candidates):
  /// most matches first, then least total distance; assignments whose total
  /// distance differs by less than tie_px prefer the smaller-u blob for the
  /// earlier joint.
  std::array<int, 3> by_proximity(const std::vector<MarkerBlob>& blobs, double t) const {
    const int n = static_cast<int>(blobs.size());
    std::array<Vec2, 3> pred;
    for (int k = 0; k < 3; ++k) pred[k] = tracks_[k].pos + tracks_[k].vel * (t - tracks_[k].t);

    std::array<int, 3> best{-1, -1, -1};
    int best_matches = -1;
    double best_cost = 0.0;
    std::array<int, 3> cand{};
    for (cand[0] = -1; cand[0] < n; ++cand[0]) {
      for (cand[1] = -1; cand[1] < n; ++cand[1]) {
        for (cand[2] = -1; cand[2] < n; ++cand[2]) {
          int matches = 0;
          double cost = 0.0;
          bool ok = true;
          for (int k = 0; k < 3 && ok; ++k) {
            if (cand[k] < 0) continue;
            for (int m = 0; m < k; ++m) ok = ok && cand[m] != cand[k];
            if (!tracks_[k].seen) {
              ok = false;
              break;
            }
            const double d = (blobs[cand[k]].centroid - pred[k]).norm();
            ok = ok && d <= opts_.max_jump_px;
            cost += d;
            ++matches;
          }
          if (!ok) continue;
          bool better = false;
          if (matches != best_matches) {
            better = matches > best_matches;
          } else if (std::abs(cost - best_cost) >= opts_.tie_px) {
            better = cost < best_cost;
          } else {
            better = u_key(blobs, cand) < u_key(blobs, best);
          }
          if (better) {
            best = cand;
            best_matches = matches;
            best_cost = cost;
          }
        }
      }
    }
    return best;
  }

  static std::array<double, 3> u_key(const std::vector<MarkerBlob>& blobs, const std::array<int, 3>& pick) {
    std::array<double, 3> key;
    for (int k = 0; k < 3; ++k) key[k] = pick[k] < 0 ? 1e300 : blobs[pick[k]].centroid.x();
    return key;
  }

  LabelerOptions opts_;
  std::array<Track, 3> tracks_{};
};

}  // namespace legfusion
