#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "projforge/image.hpp"
#include "projforge/image_io.hpp"
#include "projforge/rng.hpp"
#include "test_util.hpp"

using namespace projforge;

namespace {

void write_raw(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

// Independent bilinear evaluation straight from the textbook formula.
double bilinear_reference(const ImageBuffer& img, double x, double y, int c) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  auto px = [&](int yy, int xx) {
    xx = std::min(xx, img.width() - 1);
    yy = std::min(yy, img.height() - 1);
    return img.at(yy, xx, c);
  };
  const double top = px(y0, x0) + fx * (px(y0, x0 + 1) - px(y0, x0));
  const double bottom = px(y0 + 1, x0) + fx * (px(y0 + 1, x0 + 1) - px(y0 + 1, x0));
  return top + fy * (bottom - top);
}

}  // namespace

TEST(ImageBuffer, RejectsOutOfRangeAndBadShapes) {
  EXPECT_THROW(ImageBuffer(0, 3), InputError);
  EXPECT_THROW(ImageBuffer(2, 2, 1.5), InputError);
  EXPECT_THROW(ImageBuffer(1, 1, std::vector<double>{0.1, 0.2}), InputError);
  EXPECT_THROW(ImageBuffer(1, 1, std::vector<double>{0.1, -0.2, 0.3}), InputError);
  ImageBuffer img(2, 3);
  EXPECT_EQ(img.data().size(), 18u);
  EXPECT_THROW(img.set(0, 0, 0, 2.0), InputError);
}

TEST(ImageIo, LoadsBlackAndWhite) {
  test::TempDir dir;
  write_raw(dir / "black.ppm", std::string("P6\n2 2\n255\n") + std::string(12, '\0'));
  const ImageBuffer black = load_image(dir / "black.ppm");
  EXPECT_EQ(black.pixel_count(), 4u);
  for (double v : black.data()) EXPECT_EQ(v, 0.0);

  write_raw(dir / "white.ppm", std::string("P6\n# comment\n1 1\n255\n") + std::string(3, '\xff'));
  const ImageBuffer white = load_image(dir / "white.ppm");
  EXPECT_EQ(white.pixel(0, 0), (Rgb{1.0, 1.0, 1.0}));
}

TEST(ImageIo, DistinctErrors) {
  test::TempDir dir;
  auto kind_of = [](const std::filesystem::path& p) {
    try {
      load_image(p);
    } catch (const ImageIoError& e) {
      EXPECT_NE(std::string(e.what()).find(p.string()), std::string::npos);
      return e.kind();
    }
    ADD_FAILURE() << "no error for " << p;
    return ImageIoError::Kind::kUnwritable;
  };
  EXPECT_EQ(kind_of(dir / "nope.ppm"), ImageIoError::Kind::kMissingFile);
  write_raw(dir / "p3.ppm", "P3\n1 1\n255\n0 0 0\n");
  EXPECT_EQ(kind_of(dir / "p3.ppm"), ImageIoError::Kind::kMalformedHeader);
  write_raw(dir / "wide.ppm", std::string("P6\n1 1\n65535\n") + std::string(6, '\0'));
  EXPECT_EQ(kind_of(dir / "wide.ppm"), ImageIoError::Kind::kUnsupportedDepth);
  write_raw(dir / "short.ppm", std::string("P6\n2 2\n255\n") + std::string(5, '\0'));
  EXPECT_EQ(kind_of(dir / "short.ppm"), ImageIoError::Kind::kTruncated);
  EXPECT_THROW(save_image(ImageBuffer(1, 1), dir / "missing_dir" / "x.ppm"), ImageIoError);
}

TEST(ImageIo, QuantizesRoundHalfUp) {
  test::TempDir dir;
  save_image(ImageBuffer(1, 1, 0.5), dir / "half.ppm");
  const ImageBuffer half = load_image(dir / "half.ppm");
  for (double v : half.data()) EXPECT_DOUBLE_EQ(v, 128.0 / 255.0);

  save_image(ImageBuffer(1, 1, 1.0), dir / "one.ppm");
  std::ifstream in(dir / "one.ppm", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(static_cast<unsigned char>(bytes.back()), 255);
}

TEST(ImageIo, RoundTripWithinOneLevel) {
  test::TempDir dir;
  Rng rng(11);
  std::vector<double> values(16 * 16 * 3);
  for (double& v : values) v = rng.uniform();
  const ImageBuffer img(16, 16, values);
  save_image(img, dir / "rt.ppm");
  const ImageBuffer back = load_image(dir / "rt.ppm");
  ASSERT_TRUE(back.same_shape(img));
  for (std::size_t i = 0; i < values.size(); ++i) {
    EXPECT_LE(std::abs(back.data()[i] - values[i]), 1.0 / 255.0);
  }
  // Already-quantized content survives exactly.
  save_image(back, dir / "rt2.ppm");
  EXPECT_EQ(load_image(dir / "rt2.ppm"), back);
}

TEST(Bilinear, ExactOnPixelsAndMidpoints) {
  ImageBuffer img(5, 5);
  img.set_pixel(3, 2, {0.1, 0.6, 0.9});
  EXPECT_EQ(sample_bilinear(img, {2.0, 3.0}), (Rgb{0.1, 0.6, 0.9}));

  ImageBuffer row(1, 2);
  row.set_pixel(0, 1, {1.0, 1.0, 1.0});
  const Rgb mid = sample_bilinear(row, {0.5, 0.0});
  for (double v : mid) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Bilinear, OutOfBoundsUsesFill) {
  const ImageBuffer img(4, 4, 0.7);
  EXPECT_EQ(sample_bilinear(img, {-0.01, 1.0}), (Rgb{0, 0, 0}));
  EXPECT_EQ(sample_bilinear(img, {1.0, 3.01}), (Rgb{0, 0, 0}));
  EXPECT_EQ(sample_bilinear(img, {5.0, 1.0}, {0.2, 0.2, 0.2}), (Rgb{0.2, 0.2, 0.2}));
  EXPECT_DOUBLE_EQ(sample_bilinear(img, {3.0, 3.0})[0], 0.7);
}

TEST(Bilinear, MatchesDirectFormula) {
  Rng rng(3);
  std::vector<double> values(8 * 8 * 3);
  for (double& v : values) v = rng.uniform();
  const ImageBuffer img(8, 8, values);
  for (int i = 0; i < 100; ++i) {
    const double x = rng.uniform(0.0, 7.0), y = rng.uniform(0.0, 7.0);
    const Rgb got = sample_bilinear(img, {x, y});
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(got[c], bilinear_reference(img, x, y, c), 1e-12);
  }
}

TEST(Bilinear, WithinNeighborRangeAndLinear) {
  Rng rng(5);
  std::vector<double> a(6 * 7 * 3), b(6 * 7 * 3);
  for (double& v : a) v = rng.uniform();
  for (double& v : b) v = rng.uniform();
  const ImageBuffer img(6, 7, a);
  const double alpha = 2.5, beta = -1.75;
  std::vector<double> combo(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) combo[i] = alpha * a[i] + beta * b[i];

  for (int i = 0; i < 200; ++i) {
    const Point2 p{rng.uniform(0.0, 6.0), rng.uniform(0.0, 5.0)};
    const Rgb s = sample_bilinear(img, p);
    const int x0 = static_cast<int>(p.x), y0 = static_cast<int>(p.y);
    for (int c = 0; c < 3; ++c) {
      double lo = 1, hi = 0;
      for (int dy = 0; dy <= 1; ++dy)
        for (int dx = 0; dx <= 1; ++dx) {
          const double v = img.at(std::min(y0 + dy, 5), std::min(x0 + dx, 6), c);
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      EXPECT_GE(s[c], lo - 1e-15);
      EXPECT_LE(s[c], hi + 1e-15);
    }
    const auto sa = sample_bilinear(a, 6, 7, 3, p);
    const auto sb = sample_bilinear(b, 6, 7, 3, p);
    const auto sc = sample_bilinear(combo, 6, 7, 3, p);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(sc[c], alpha * sa[c] + beta * sb[c], 1e-12);
  }
}

TEST(PixelMap, TransposeIsAdjoint) {
  Rng rng(9);
  PixelMap map(5, 4, 3, 6);
  for (std::size_t p = 0; p < map.out_pixels(); ++p) {
    map.set_taps(p, bilinear_taps(5, 4, {rng.uniform(-0.5, 3.5), rng.uniform(-0.5, 4.5)}));
  }
  std::vector<double> x(5 * 4 * 3), g(3 * 6 * 3);
  for (double& v : x) v = rng.uniform(-1, 1);
  for (double& v : g) v = rng.uniform(-1, 1);
  const auto ax = map.apply(x, 3);
  std::vector<double> atg(x.size(), 0.0);
  map.apply_transpose_add(g, atg, 3);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < g.size(); ++i) lhs += ax[i] * g[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * atg[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}
