#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <map>
#include <random>

#include "legfusion/gait_simulator.hpp"
#include "legfusion/marker_vision.hpp"
#include "oracles.hpp"

using namespace legfusion;

namespace {

RasterImage gray_frame(int w = 64, int h = 48) { return RasterImage(w, h, kBackgroundGray); }

void fill_rect(RasterImage& img, int x0, int y0, int w, int h, Rgb8 c = kMarkerGreen) {
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x) img.set(x, y, c);
}

void fill_rect(BinaryMask& m, int x0, int y0, int w, int h) {
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x) m.set(x, y, true);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("legfusion_test_" + name)).string();
}

/// Partitions are equal when the label maps are related by a bijection.
bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<int, int> ab, ba;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((a[i] == 0) != (b[i] == 0)) return false;
    if (a[i] == 0) continue;
    auto [it1, new1] = ab.emplace(a[i], b[i]);
    auto [it2, new2] = ba.emplace(b[i], a[i]);
    if (it1->second != b[i] || it2->second != a[i]) return false;
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Raster I/O

TEST(Netpbm, PpmRoundTrip) {
  RasterImage img(7, 5);
  std::mt19937 rng(3);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() & 0xff);
  const std::string path = temp_path("rt.ppm");
  write_ppm(path, img);
  const RasterImage back = read_ppm(path);
  EXPECT_EQ(back.width, 7);
  EXPECT_EQ(back.height, 5);
  EXPECT_EQ(back.pixels, img.pixels);
  std::filesystem::remove(path);
}

TEST(Netpbm, PgmRoundTrip) {
  BinaryMask m(9, 4);
  m.set(0, 0, true);
  m.set(8, 3, true);
  m.set(4, 2, true);
  const std::string path = temp_path("rt.pgm");
  write_pgm(path, m);
  const BinaryMask back = read_pgm(path);
  EXPECT_EQ(back.width, 9);
  EXPECT_EQ(back.bits, m.bits);
  std::filesystem::remove(path);
}

TEST(Netpbm, ReadsHeaderComments) {
  const std::string path = temp_path("comment.ppm");
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("P6\n# made by hand\n2 1\n255\n", f);
    const unsigned char px[6] = {1, 2, 3, 4, 5, 6};
    std::fwrite(px, 1, 6, f);
    std::fclose(f);
  }
  const RasterImage img = read_ppm(path);
  EXPECT_EQ(img.at(1, 0), (Rgb8{4, 5, 6}));
  std::filesystem::remove(path);
}

TEST(Netpbm, RejectsBadFiles) {
  EXPECT_THROW(read_ppm(temp_path("does_not_exist.ppm")), IoError);
  const std::string path = temp_path("bad.ppm");
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("P3\n2 2\n255\n", f);
    std::fclose(f);
  }
  EXPECT_THROW(read_ppm(path), IoError);
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("P6\n4 4\n255\nabc", f);  // truncated payload
    std::fclose(f);
  }
  EXPECT_THROW(read_ppm(path), IoError);
  std::filesystem::remove(path);
}

TEST(Netpbm, FrameFilename) {
  EXPECT_EQ(frame_filename(0), "frame_000000.ppm");
  EXPECT_EQ(frame_filename(1234), "frame_001234.ppm");
}

TEST(RasterImage, Invariants) {
  EXPECT_THROW(RasterImage(0, 4), InvalidArgument);
  RasterImage img(3, 3);
  img.pixels.pop_back();
  EXPECT_THROW(img.validate(), InvalidArgument);
}

// ---------------------------------------------------------------------------
// Mask

TEST(MarkerMask, GreenPatchOnGray) {
  RasterImage img = gray_frame();
  fill_rect(img, 20, 10, 10, 10);
  const BinaryMask m = marker_mask(img, kMarkerGreen);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const bool inside = x >= 20 && x < 30 && y >= 10 && y < 20;
      ASSERT_EQ(m.at(x, y), inside) << x << "," << y;
    }
}

TEST(MarkerMask, AllGrayIsEmpty) {
  EXPECT_EQ(marker_mask(gray_frame(), kMarkerGreen).count(), 0u);
}

TEST(MarkerMask, ThresholdIsStrict) {
  // A pixel with green excess s over its luma: g - (0.299 r + 0.587 g + 0.114 b).
  RasterImage img(2, 1, {100, 100, 100});
  // r = b = 100, g = 100 + d: excess = 0.413 d. Pick d giving excess just
  // below and just above 40.
  img.set(0, 0, {100, 196, 100});  // 0.413 * 96 = 39.6
  img.set(1, 0, {100, 197, 100});  // 0.413 * 97 = 40.06
  const BinaryMask m = marker_mask(img, kMarkerGreen);
  EXPECT_FALSE(m.at(0, 0));
  EXPECT_TRUE(m.at(1, 0));
}

TEST(MarkerMask, IdempotentOnItsOwnOutput) {
  std::mt19937_64 rng(5);
  std::bernoulli_distribution coin(0.3);
  BinaryMask m(40, 30);
  for (auto& b : m.bits) b = coin(rng);
  const BinaryMask again = marker_mask(mask_to_image(m), kMarkerGreen);
  EXPECT_EQ(again.bits, m.bits);
}

TEST(MarkerMask, RenderedFootprintJaccard) {
  // Footprint from the renderer's analytic pixel coverage. A pixel blended
  // with coverage c between gray and green carries a green-minus-luma signal
  // of c * (255 - 0.587 * 255), so the mask should hold exactly the pixels
  // whose coverage exceeds 40 / that.
  const double c_min = 40.0 / (255.0 - 0.587 * 255.0);
  Scenario sc = Scenario::walking();
  sc.noise = SensorNoiseSpec::noise_free();
  sc.profile.duration = 20.0;
  const GaitModel model(sc.profile, sc.leg);
  const MarkerStream ms = synthesize_markers(model, sc.camera, sc.pose, sc.noise, sc.camera_rate, 1);
  double worst = 1.0;
  for (std::size_t i = 0; i < ms.truth.size(); i += 4) {
    const CameraFrameTruth& ft = ms.truth[i];
    const BinaryMask m = marker_mask(render_frame(ft, sc.camera), kMarkerGreen);
    long inter = 0, uni = 0;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) {
        double cov = 0.0;
        for (int j = 0; j < 3; ++j) cov = std::max(cov, square_coverage(x, y, ft.marker_centers[j], ft.side_px[j]));
        const bool truth = cov > c_min;
        inter += truth && m.at(x, y);
        uni += truth || m.at(x, y);
      }
    worst = std::min(worst, static_cast<double>(inter) / static_cast<double>(uni));
  }
  EXPECT_GE(worst, 0.95);
}

// ---------------------------------------------------------------------------
// Connected components

TEST(ConnectedComponents, FilledRectangle) {
  BinaryMask m(30, 20);
  fill_rect(m, 3, 4, 7, 5);
  const ComponentMap cm = connected_components(m, 1);
  ASSERT_EQ(cm.components.size(), 1u);
  EXPECT_EQ(cm.components[0].area, 35);
}

TEST(ConnectedComponents, CornerTouchJoinsUnder8Connectivity) {
  BinaryMask m(20, 20);
  fill_rect(m, 2, 2, 4, 4);
  fill_rect(m, 6, 6, 4, 4);  // touches (5,5) only diagonally
  const ComponentMap cm = connected_components(m, 1);
  ASSERT_EQ(cm.components.size(), 1u);
  EXPECT_EQ(cm.components[0].area, 32);
}

TEST(ConnectedComponents, UShapeMergesProvisionalLabels) {
  BinaryMask m(10, 10);
  for (int y = 0; y < 6; ++y) {
    m.set(1, y, true);
    m.set(7, y, true);
  }
  for (int x = 1; x <= 7; ++x) m.set(x, 6, true);
  const ComponentMap cm = connected_components(m, 1);
  ASSERT_EQ(cm.components.size(), 1u);
  EXPECT_EQ(cm.components[0].area, 19);
}

TEST(ConnectedComponents, SmallComponentsDiscarded) {
  BinaryMask m(20, 20);
  fill_rect(m, 0, 0, 2, 2);    // area 4
  fill_rect(m, 10, 10, 3, 3);  // area 9
  const ComponentMap cm = connected_components(m, 9);
  ASSERT_EQ(cm.components.size(), 1u);
  EXPECT_EQ(cm.components[0].label, 1);
  EXPECT_EQ(cm.labels[0], 0);
  EXPECT_EQ(cm.labels[10 * 20 + 10], 1);
}

TEST(ConnectedComponents, LabelsInRasterOrderOfFirstPixel) {
  BinaryMask m(20, 20);
  fill_rect(m, 15, 2, 2, 2);  // first pixel (15, 2)
  fill_rect(m, 1, 3, 2, 2);   // first pixel (1, 3)
  fill_rect(m, 8, 2, 2, 2);   // first pixel (8, 2)
  const ComponentMap cm = connected_components(m, 1);
  EXPECT_EQ(cm.labels[2 * 20 + 8], 1);
  EXPECT_EQ(cm.labels[2 * 20 + 15], 2);
  EXPECT_EQ(cm.labels[3 * 20 + 1], 3);
}

TEST(ConnectedComponents, MatchesFloodFillOn500RandomMasks) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> density(0.2, 0.65);
  for (int n = 0; n < 500; ++n) {
    std::bernoulli_distribution coin(density(rng));
    BinaryMask m(64, 64);
    std::vector<bool> bits(64 * 64);
    for (std::size_t i = 0; i < bits.size(); ++i) {
      bits[i] = coin(rng);
      m.bits[i] = bits[i];
    }
    const std::vector<int> ref = oracle::flood_fill_labels(bits, 64, 64);
    const ComponentMap cm = connected_components(m, 1);
    ASSERT_TRUE(same_partition(cm.labels, ref)) << "mask " << n;
    // Both number components in raster order, so the labels agree exactly.
    ASSERT_EQ(cm.labels, ref) << "mask " << n;
    const int count = *std::max_element(ref.begin(), ref.end());
    ASSERT_EQ(static_cast<int>(cm.components.size()), count);
    long total = 0;
    for (const auto& c : cm.components) total += c.area;
    ASSERT_EQ(static_cast<std::size_t>(total), m.count());
  }
}

// ---------------------------------------------------------------------------
// Blob extraction

TEST(ExtractMarkers, ThreeByThreeSquare) {
  BinaryMask m(40, 40);
  fill_rect(m, 10, 20, 3, 3);
  const auto blobs = extract_markers(connected_components(m), 3);
  ASSERT_EQ(blobs.size(), 1u);
  EXPECT_DOUBLE_EQ(blobs[0].centroid.x(), 11.0);
  EXPECT_DOUBLE_EQ(blobs[0].centroid.y(), 21.0);
  EXPECT_DOUBLE_EQ(blobs[0].area, 9.0);
}

TEST(ExtractMarkers, EmptyMask) { EXPECT_TRUE(extract_markers(connected_components(BinaryMask(16, 16)), 3).empty()); }

TEST(ExtractMarkers, KeepsLargestInLabelOrder) {
  BinaryMask m(60, 60);
  fill_rect(m, 1, 1, 4, 4);     // 16, label 1
  fill_rect(m, 20, 1, 6, 6);    // 36, label 2
  fill_rect(m, 40, 1, 3, 3);    // 9, label 3
  fill_rect(m, 1, 30, 5, 5);    // 25, label 4
  const auto blobs = extract_markers(connected_components(m), 3);
  ASSERT_EQ(blobs.size(), 3u);
  EXPECT_EQ(blobs[0].label, 1);
  EXPECT_EQ(blobs[1].label, 2);
  EXPECT_EQ(blobs[2].label, 4);
}

TEST(ExtractMarkers, CentroidInsideBoundingBox) {
  std::mt19937_64 rng(17);
  std::bernoulli_distribution coin(0.45);
  for (int n = 0; n < 100; ++n) {
    BinaryMask m(48, 48);
    for (auto& b : m.bits) b = coin(rng);
    const ComponentMap cm = connected_components(m);
    for (const auto& b : extract_markers(cm, 100)) {
      const Component& c = cm.components[b.label - 1];
      EXPECT_GE(b.centroid.x(), c.min_u);
      EXPECT_LE(b.centroid.x(), c.max_u);
      EXPECT_GE(b.centroid.y(), c.min_v);
      EXPECT_LE(b.centroid.y(), c.max_v);
      EXPECT_GE(b.area, 9.0);
    }
  }
}

TEST(DetectMarkers, Rendered15PxMarkerCentroid) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> pos(30.0, 90.0);
  for (int n = 0; n < 200; ++n) {
    RasterImage img(128, 128, kBackgroundGray);
    const Vec2 c(pos(rng), pos(rng));
    draw_marker(img, c, 15.0);
    DetectOptions plain;
    plain.subpixel = false;
    const auto coarse = detect_markers(img, plain);
    const auto fine = detect_markers(img);
    ASSERT_EQ(coarse.size(), 1u);
    ASSERT_EQ(fine.size(), 1u);
    EXPECT_LT((coarse[0].centroid - c).norm(), 0.5);
    EXPECT_LT((fine[0].centroid - c).norm(), 0.05);
    EXPECT_NEAR(fine[0].area, 225.0, 2.0);
  }
}

TEST(DetectMarkers, SimulatorFramesWithinHalfPixel) {
  // Noise-free simulator frames: every joint visible, every centroid within
  // 0.5 px of the true projection.
  Scenario sc = Scenario::walking();
  sc.noise = SensorNoiseSpec::noise_free();
  sc.profile.duration = 12.0;
  const GaitModel model(sc.profile, sc.leg);
  const MarkerStream ms = synthesize_markers(model, sc.camera, sc.pose, sc.noise, sc.camera_rate, 1);
  JointLabeler labeler;
  double worst = 0.0;
  for (std::size_t i = 0; i < ms.truth.size(); i += 3) {
    const RasterImage img = render_frame(ms.truth[i], sc.camera);
    const FrameObservations obs = labeler.assign(detect_markers(img), ms.truth[i].t);
    for (int j = 0; j < 3; ++j) {
      ASSERT_TRUE(obs[j].valid) << "frame " << i << " joint " << j;
      worst = std::max(worst, (obs[j].pixel - ms.truth[i].pixels[j]).norm());
    }
  }
  EXPECT_LT(worst, 0.5);
}

// ---------------------------------------------------------------------------
// Joint labeling

namespace {
MarkerBlob blob(double u, double v, int label = 0) { return {Vec2(u, v), 50.0, label}; }
}  // namespace

TEST(JointLabeler, FirstFrameByHeight) {
  JointLabeler l;
  const auto obs = l.assign({blob(300, 400), blob(310, 100), blob(305, 250)}, 0.0);
  EXPECT_DOUBLE_EQ(obs[0].pixel.y(), 100.0);
  EXPECT_DOUBLE_EQ(obs[1].pixel.y(), 250.0);
  EXPECT_DOUBLE_EQ(obs[2].pixel.y(), 400.0);
  for (const auto& o : obs) EXPECT_TRUE(o.valid);
  EXPECT_EQ(obs[0].joint, Joint::Hip);
  EXPECT_EQ(obs[2].joint, Joint::Ankle);
}

TEST(JointLabeler, MissingKneeIsInvalid) {
  JointLabeler l;
  l.assign({blob(300, 100), blob(300, 250), blob(300, 400)}, 0.0);
  const auto obs = l.assign({blob(302, 101), blob(299, 402)}, 1.0 / 30);
  EXPECT_TRUE(obs[0].valid);
  EXPECT_FALSE(obs[1].valid);
  EXPECT_TRUE(obs[2].valid);
  EXPECT_DOUBLE_EQ(obs[2].pixel.y(), 402.0);
}

TEST(JointLabeler, FollowsMarkersThatCrossInHeight) {
  // Knee and ankle swap vertical order; proximity keeps the identities.
  JointLabeler l;
  double t = 0.0;
  Vec2 hip(300, 100), knee(300, 250), ankle(200, 300);
  l.assign({blob(hip.x(), hip.y()), blob(knee.x(), knee.y()), blob(ankle.x(), ankle.y())}, t);
  for (int k = 0; k < 20; ++k) {
    t += 1.0 / 30;
    ankle += Vec2(5, -6);
    const auto obs = l.assign({blob(ankle.x(), ankle.y()), blob(hip.x(), hip.y()), blob(knee.x(), knee.y())}, t);
    ASSERT_TRUE(obs[2].valid);
    EXPECT_EQ(obs[2].pixel, ankle);
    EXPECT_EQ(obs[1].pixel, knee);
  }
  EXPECT_LT(ankle.y(), knee.y());
}

TEST(JointLabeler, JumpBeyondRadiusIsUnmatched) {
  JointLabeler l;
  l.assign({blob(300, 100), blob(300, 250), blob(300, 400)}, 0.0);
  const auto obs = l.assign({blob(300, 100), blob(300, 250), blob(500, 400)}, 1.0 / 30);
  EXPECT_FALSE(obs[2].valid);
}

TEST(JointLabeler, TieGoesToSmallerU) {
  // Knee and ankle tracks sit on top of each other; the two blobs are
  // equidistant from both predictions.
  JointLabeler l;
  l.assign({blob(300, 100), blob(300, 300), blob(300, 400)}, 0.0);
  // Move knee and ankle to the same place over one frame.
  l.assign({blob(300, 100), blob(300, 350), blob(300, 350.5)}, 1.0);
  l.assign({blob(300, 100), blob(300, 350), blob(300, 350.5)}, 2.0);
  const auto obs = l.assign({blob(300, 100), blob(310, 350.2), blob(290, 350.2)}, 3.0);
  ASSERT_TRUE(obs[1].valid && obs[2].valid);
  EXPECT_DOUBLE_EQ(obs[1].pixel.x(), 290.0);
  EXPECT_DOUBLE_EQ(obs[2].pixel.x(), 310.0);
}

TEST(JointLabeler, RejectsMoreThanThreeBlobs) {
  JointLabeler l;
  EXPECT_THROW(l.assign({blob(1, 1), blob(2, 2), blob(3, 3), blob(4, 4)}, 0.0), InvalidArgument);
}

TEST(JointLabeler, WalkWithDropoutFullAccuracy) {
  // 60 s walk, 5% dropout, rendered frames: every valid observation carries
  // the right joint, and validity matches marker visibility.
  Scenario sc = Scenario::walking();
  sc.noise.marker_dropout_prob = 0.05;
  const GaitModel model(sc.profile, sc.leg);
  const MarkerStream ms = synthesize_markers(model, sc.camera, sc.pose, sc.noise, sc.camera_rate, 5);
  JointLabeler labeler;
  int wrong = 0, dropped = 0, frames_with_all = 0;
  for (const CameraFrameTruth& ft : ms.truth) {
    const FrameObservations obs = labeler.assign(detect_markers(render_frame(ft, sc.camera)), ft.t);
    bool all = true;
    for (int j = 0; j < 3; ++j) {
      all = all && ft.visible[j];
      dropped += !ft.visible[j];
      if (obs[j].valid != ft.visible[j]) {
        ++wrong;
      } else if (obs[j].valid && (obs[j].pixel - ft.marker_centers[j]).norm() > 1.0) {
        ++wrong;
      }
    }
    frames_with_all += all;
  }
  EXPECT_GT(dropped, 100);
  EXPECT_EQ(wrong, 0);
  EXPECT_GT(frames_with_all, 1400);
}
