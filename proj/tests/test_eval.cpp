#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "projforge/eval.hpp"
#include "projforge/fixtures.hpp"
#include "projforge/image_io.hpp"
#include "test_util.hpp"

using namespace projforge;

namespace {

const ToyDetector& fixture_detector() {
  static const ToyDetector det = load_detector(test::fixture_dir() / "detector.txt");
  return det;
}

struct LabeledFrames {
  FrameSet set;
  std::vector<bool> occluded;
};

LabeledFrames omdr_fixture() {
  const auto dir = test::fixture_dir() / "omdr10";
  std::ifstream in(dir / "labels.txt");
  LabeledFrames out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string name;
    int present = 0, occluded = 0;
    ss >> name >> present >> occluded;
    out.set.frames.push_back(load_image(dir / name));
    out.set.labels.push_back(present == 1);
    out.occluded.push_back(occluded == 1);
  }
  return out;
}

FrameSet subset(const LabeledFrames& f, bool occluded) {
  FrameSet s;
  for (std::size_t i = 0; i < f.occluded.size(); ++i)
    if (f.occluded[i] == occluded) {
      s.frames.push_back(f.set.frames[i]);
      s.labels.push_back(true);
    }
  return s;
}

std::vector<SweepView> fixture_views(int count) {
  std::vector<SweepView> views;
  const auto bundles = fixtures::load_bundles(test::fixture_dir());
  for (int i = 0; i < count; ++i) views.push_back({bundles[i].view, bundles[i].attack_view, bundles[i].backgrounds});
  return views;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SweepCell cell(const std::string& d, const std::string& a, const std::string& amb, std::size_t mis_attack,
               std::size_t mis_benign, std::size_t total) {
  SweepCell c{d, a, amb, {}, {}};
  c.attack.total = c.benign.total = total;
  c.attack.misdetected = mis_attack;
  c.benign.misdetected = mis_benign;
  c.attack.omdr = double(mis_attack) / total;
  c.benign.omdr = double(mis_benign) / total;
  return c;
}

}  // namespace

TEST(ComputeOmdr, AllDetectedIsZeroNoneDetectedIsOne) {
  const LabeledFrames f = omdr_fixture();
  const OmdrReport all = compute_omdr(subset(f, false), fixture_detector(), {});
  EXPECT_EQ(all.omdr, 0.0);
  EXPECT_EQ(all.misdetected, 0u);
  const OmdrReport none = compute_omdr(subset(f, true), fixture_detector(), {});
  EXPECT_EQ(none.omdr, 1.0);
  EXPECT_EQ(none.misdetected, none.total);
}

TEST(ComputeOmdr, TenFrameFixtureMatchesManualCount) {
  const LabeledFrames f = omdr_fixture();
  ASSERT_EQ(f.set.frames.size(), 10u);
  const auto manual = std::count(f.occluded.begin(), f.occluded.end(), true);
  EXPECT_EQ(manual, 4);
  const OmdrReport r = compute_omdr(f.set, fixture_detector(), DetectorThreshold{0.6, "car"});
  EXPECT_EQ(r.total, 10u);
  EXPECT_EQ(r.misdetected, static_cast<std::size_t>(manual));
  EXPECT_EQ(r.omdr, 0.4);
}

TEST(ComputeOmdr, ThresholdMonotone) {
  LabeledFrames f = omdr_fixture();
  const auto bundles = fixtures::load_bundles(test::fixture_dir());
  Rng rng(4);
  for (const auto& b : bundles) {
    for (const auto& bg : b.backgrounds) {
      PlacementTransform t = TransformRange{0.6, 1.0, 0.1, 10, 0.1, 0.02}.sample(rng, 32, 32);
      f.set.frames.push_back(render_placement(plan_placement(b.attack_view.scene(bg), t), b.attack_view.object_img));
      f.set.labels.push_back(true);
    }
  }
  double previous = -1.0;
  for (double thr : {0.05, 0.2, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99}) {
    const double omdr = compute_omdr(f.set, fixture_detector(), {thr, "car"}).omdr;
    EXPECT_GE(omdr, previous) << "threshold " << thr;
    EXPECT_GE(omdr, 0.0);
    EXPECT_LE(omdr, 1.0);
    previous = omdr;
  }
}

TEST(ComputeOmdr, Errors) {
  FrameSet empty;
  EXPECT_THROW(compute_omdr(empty, fixture_detector(), {}), InputError);
  FrameSet unlabeled{{ImageBuffer(32, 32, 0.5)}, {}, "", "", ""};
  EXPECT_THROW(compute_omdr(unlabeled, fixture_detector(), {}), InputError);
  FrameSet wrong{{ImageBuffer(30, 32, 0.5)}, {true}, "", "", ""};
  EXPECT_THROW(compute_omdr(wrong, fixture_detector(), {}), InputError);
}

TEST(OmdrReport, MergeKeepsBreakdownConsistent) {
  const LabeledFrames f = omdr_fixture();
  FrameSet a = subset(f, false), b = subset(f, true);
  a.angle = "0";
  b.angle = "15";
  OmdrReport r = compute_omdr(a, fixture_detector(), {});
  r.merge(compute_omdr(b, fixture_detector(), {}));
  EXPECT_EQ(r.total, 10u);
  EXPECT_EQ(r.misdetected, 4u);
  EXPECT_EQ(r.omdr, 0.4);
  std::size_t total = 0, mis = 0;
  for (const auto& [key, count] : r.breakdown) total += count.total, mis += count.misdetected;
  EXPECT_EQ(total, r.total);
  EXPECT_EQ(mis, r.misdetected);
  EXPECT_EQ(r.breakdown.size(), 2u);
}

TEST(RunSweep, ZeroFootprintAttackEqualsBenign) {
  auto views = fixture_views(2);
  for (auto& v : views) v.view.ops.patch_shape = ImageBuffer(20, 20, 0.0);
  SweepConfig cfg;
  cfg.frames_per_cell = 4;
  Rng rng(5);
  std::vector<double> noise(20 * 20 * 3);
  for (double& x : noise) x = rng.uniform();
  const ColorModel m = load_color_model(test::fixture_dir() / "color_500lux.txt");
  const SweepGrid g = run_sweep(views, ImageBuffer(20, 20, noise), fixture_detector(), {{"500lux", m}}, {}, cfg);
  ASSERT_EQ(g.cells.size(), 6u);
  for (const auto& c : g.cells) {
    EXPECT_EQ(c.attack.misdetected, c.benign.misdetected);
    EXPECT_EQ(c.attack.omdr, c.benign.omdr);
  }
}

TEST(RunSweep, GridOrderAndDeterminism) {
  const auto views = fixture_views(2);
  SweepConfig cfg;
  cfg.frames_per_cell = 2;
  cfg.distances = {{"near", 1.0}, {"far", 0.6}};
  const std::vector<SweepAmbient> ambients{{"100lux", load_color_model(test::fixture_dir() / "color_100lux.txt")},
                                           {"500lux", load_color_model(test::fixture_dir() / "color_500lux.txt")}};
  const ImageBuffer patch(20, 20, 0.3);
  const SweepGrid a = run_sweep(views, patch, fixture_detector(), ambients, {}, cfg);
  cfg.threads = 3;
  const SweepGrid b = run_sweep(views, patch, fixture_detector(), ambients, {}, cfg);
  ASSERT_EQ(a.cells.size(), 8u);
  EXPECT_EQ(a.cells[0].ambient, "100lux");
  EXPECT_EQ(a.cells[0].distance, "near");
  EXPECT_EQ(a.cells[1].angle, views[1].angle);
  EXPECT_EQ(a.cells[2].distance, "far");
  EXPECT_EQ(a.cells[4].ambient, "500lux");
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    EXPECT_EQ(a.cells[i].attack.misdetected, b.cells[i].attack.misdetected);
    EXPECT_EQ(a.cells[i].benign.misdetected, b.cells[i].benign.misdetected);
    EXPECT_EQ(a.cells[i].attack.total, 2u);
  }
}

TEST(RunSweep, Errors) {
  auto views = fixture_views(1);
  const ColorModel m = load_color_model(test::fixture_dir() / "color_100lux.txt");
  EXPECT_THROW(run_sweep({}, ImageBuffer(20, 20, 0.5), fixture_detector(), {{"a", m}}, {}, {}), InputError);
  EXPECT_THROW(run_sweep(views, ImageBuffer(20, 20, 0.5), fixture_detector(), {}, {}, {}), InputError);
  SweepConfig cfg;
  cfg.distances.clear();
  EXPECT_THROW(run_sweep(views, ImageBuffer(20, 20, 0.5), fixture_detector(), {{"a", m}}, {}, cfg), InputError);
  views[0].backgrounds.clear();
  EXPECT_THROW(run_sweep(views, ImageBuffer(20, 20, 0.5), fixture_detector(), {{"a", m}}, {}, {}), InputError);
}

TEST(EmitReport, SingleCellCsv) {
  test::TempDir tmp;
  SweepGrid g;
  g.cells.push_back(cell("1.5m", "0", "100lux", 3, 1, 8));
  emit_report(g, tmp.path());
  EXPECT_EQ(slurp(tmp / "sweep.csv"), "distance,angle,ambient,omdr_attack,omdr_benign\n1.5m,0,100lux,0.3750,0.1250\n");
  const std::string svg = slurp(tmp / "heatmap_100lux.svg");
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("A 0.3750"), std::string::npos);
  EXPECT_NE(svg.find("B 0.1250"), std::string::npos);
}

TEST(EmitReport, RowPerCellAndByteIdenticalRerun) {
  test::TempDir tmp;
  SweepGrid g;
  for (const char* amb : {"100lux", "500 lux/x"})
    for (const char* d : {"1.5m", "2.5m"})
      for (const char* a : {"-15", "0", "15"}) g.cells.push_back(cell(d, a, amb, 2, 0, 4));
  emit_report(g, tmp / "a");
  emit_report(g, tmp / "b");
  const std::string csv = slurp(tmp / "a" / "sweep.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 13);
  EXPECT_EQ(csv, slurp(tmp / "b" / "sweep.csv"));
  EXPECT_TRUE(std::filesystem::exists(tmp / "a" / "heatmap_100lux.svg"));
  EXPECT_TRUE(std::filesystem::exists(tmp / "a" / "heatmap_500_lux_x.svg"));
  EXPECT_THROW(emit_report(SweepGrid{}, tmp.path()), InputError);
}
