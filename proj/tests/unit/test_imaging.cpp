#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "softseg/imaging.hpp"
#include "softseg/random.hpp"

using namespace softseg;

namespace {

// Exact integer Otsu search over every threshold 0..255.
int otsu_oracle(const std::array<std::uint64_t, 256>& h) {
  using i128 = __int128;
  i128 total = 0, weighted = 0;
  for (int b = 0; b < 256; ++b) total += h[b], weighted += i128(h[b]) * b;
  int best = -1;
  i128 best_num = 0, best_den = 1;
  i128 n0 = 0, s0 = 0;
  int first = 0;
  while (h[first] == 0) ++first;
  for (int t = 0; t < 256; ++t) {
    n0 += h[t];
    s0 += i128(h[t]) * t;
    if (t < first) continue;
    const i128 n1 = total - n0, s1 = weighted - s0;
    i128 num = 0, den = 1;
    if (n0 > 0 && n1 > 0) {
      const i128 d = s0 * n1 - s1 * n0;
      num = d * d;
      den = n0 * n1;
    }
    if (best < 0 || num * best_den > best_num * den) best = t, best_num = num, best_den = den;
  }
  return best;
}

Mask morph_oracle(const Mask& in, int r, bool dil) {
  Mask out(in.height(), in.width(), 0);
  for (int y = 0; y < in.height(); ++y)
    for (int x = 0; x < in.width(); ++x) {
      bool v = !dil;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          if (dx * dx + dy * dy > r * r) continue;
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= in.height() || xx >= in.width()) continue;
          if (dil && in(yy, xx)) v = true;
          if (!dil && !in(yy, xx)) v = false;
        }
      out(y, x) = v;
    }
  return out;
}

RasterImage disk_image(int n, double cy, double cx, double rad, double inside = 0.3) {
  RasterImage img(n, n, 1.0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      if ((r - cy) * (r - cy) + (c - cx) * (c - cx) <= rad * rad)
        for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = inside;
  return img;
}

SoftLabelMap random_labels(int h, int w, int classes, Rng& rng) {
  SoftLabelMap s{DistributionMap(h, w, classes), Mask(h, w, 1), Mask(h, w, 0), Level::explanation, 3};
  for (std::size_t i = 0; i < s.probs.pixels(); ++i) {
    double sum = 0;
    for (auto& v : s.probs.pixel(i)) sum += (v = rng.uniform());
    for (auto& v : s.probs.pixel(i)) v /= sum;
    s.foreground[i] = rng.uniform() < 0.8;
  }
  return s;
}

Grid<int> rot90(const Grid<int>& a) {
  Grid<int> b(a.width(), a.height());
  for (int i = 0; i < b.height(); ++i)
    for (int j = 0; j < b.width(); ++j) b(i, j) = a(j, a.width() - 1 - i);
  return b;
}

}  // namespace

TEST(Otsu, TwoSpikesPicksSmallest) {
  std::array<std::uint64_t, 256> h{};
  h[0] = h[255] = 50;
  EXPECT_EQ(otsu_threshold(h), 0);
}

TEST(Otsu, SingleBinReturnsThatBin) {
  std::array<std::uint64_t, 256> h{};
  h[117] = 9;
  EXPECT_EQ(otsu_threshold(h), 117);
}

TEST(Otsu, EmptyHistogramRejected) {
  std::array<std::uint64_t, 256> h{};
  EXPECT_THROW(otsu_threshold(h), Error);
}

TEST(Otsu, MatchesExhaustiveSearch) {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    std::array<std::uint64_t, 256> h{};
    const int filled = 1 + rng.below(60);
    for (int k = 0; k < filled; ++k) h[rng.below(256)] += 1 + rng.below(100);
    EXPECT_EQ(otsu_threshold(h), otsu_oracle(h)) << trial;
  }
}

TEST(Foreground, WhiteImageIsEmpty) {
  const auto fm = foreground_mask(RasterImage(32, 32, 1.0));
  for (auto v : fm.mask.values()) EXPECT_EQ(v, 0);
}

TEST(Foreground, DiskRecoveredAndSpecklesRemoved) {
  auto img = disk_image(64, 32, 32, 18);
  img.at(3, 3, 0) = img.at(3, 3, 1) = img.at(3, 3, 2) = 0.3;
  img.at(60, 5, 0) = img.at(60, 5, 1) = img.at(60, 5, 2) = 0.3;
  const auto fm = foreground_mask(img, 3);
  EXPECT_FALSE(fm.mask(3, 3));
  EXPECT_FALSE(fm.mask(60, 5));
  EXPECT_TRUE(fm.mask(32, 32));
  int mismatch = 0;
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c)
      mismatch += fm.mask(r, c) != ((r - 32) * (r - 32) + (c - 32) * (c - 32) <= 18 * 18);
  EXPECT_LE(mismatch, 8);
}

TEST(Foreground, PinholesClosedAndMatchesScalarMorphology) {
  auto img = disk_image(80, 40, 40, 30);
  for (auto [y, x] : {std::pair{30, 30}, std::pair{45, 50}, std::pair{40, 25}})
    for (int dy = 0; dy < 3; ++dy)
      for (int dx = 0; dx < 3; ++dx)
        for (int ch = 0; ch < 3; ++ch) img.at(y + dy, x + dx, ch) = 1.0;
  const auto fm = foreground_mask(img, 5);
  EXPECT_TRUE(fm.mask(31, 31));
  EXPECT_TRUE(fm.mask(46, 51));
  const auto bins = luminance_bins(img);
  Mask raw(80, 80, 0);
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = bins[i] <= fm.threshold;
  const auto closed = morph_oracle(morph_oracle(raw, 5, true), 5, false);
  const auto expect = morph_oracle(morph_oracle(closed, 5, false), 5, true);
  EXPECT_EQ(fm.mask, expect);
}

TEST(Morphology, MatchesNaiveOracleOnRandomMasks) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Mask m(23, 31, 0);
    for (auto& v : m.values()) v = rng.uniform() < 0.5;
    const int r = 1 + rng.below(4);
    EXPECT_EQ(dilate(m, r), morph_oracle(m, r, true));
    EXPECT_EQ(erode(m, r), morph_oracle(m, r, false));
  }
}

TEST(Morphology, CleanMaskIdempotent) {
  Rng rng(4);
  Mask m(40, 40, 0);
  for (auto& v : m.values()) v = rng.uniform() < 0.6;
  const auto once = clean_mask(m, 2);
  EXPECT_EQ(clean_mask(once, 2), once);
}

TEST(Resample, SameSpacingIsIdentity) {
  Rng rng(1);
  RasterImage img(7, 9, 0.0, 1.392);
  for (auto& v : img.pixels) v = rng.uniform();
  EXPECT_EQ(resample_bicubic(img, 1.392), img);
}

TEST(Resample, ConstantPreserved) {
  for (double s : {0.25, 0.5455, 2.0, 3.1}) {
    const auto out = resample_bicubic(RasterImage(20, 13, 0.37, s), 1.392);
    for (double v : out.pixels) EXPECT_NEAR(v, 0.37, 1e-12);
    EXPECT_EQ(out.height, static_cast<int>(std::lround(20 * s / 1.392)));
  }
}

TEST(Resample, KernelPartitionOfUnity) {
  Rng rng(10);
  for (int i = 0; i < 1000; ++i) {
    const double phase = rng.uniform();
    double s = 0;
    for (int t = -1; t <= 2; ++t) s += cubic_kernel(phase - t);
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Resample, RampDownscaleMatchesKernelSum) {
  RasterImage img(16, 16, 0.0, 1.0);
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c)
      for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = (0.5 * r + c + ch) / 40.0;
  const auto out = resample_bicubic(img, 2.0);
  ASSERT_EQ(out.height, 8);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        const double sy = (r + 0.5) * 2.0 - 0.5, sx = (c + 0.5) * 2.0 - 0.5;
        double acc = 0;
        for (int i = -4; i < 20; ++i)
          for (int j = -4; j < 20; ++j)
            acc += cubic_kernel(sy - i) * cubic_kernel(sx - j) *
                   img.at(std::clamp(i, 0, 15), std::clamp(j, 0, 15), ch);
        EXPECT_NEAR(out.at(r, c, ch), std::clamp(acc, 0.0, 1.0), 1e-6);
      }
}

TEST(Resample, BadSpacingRejected) {
  EXPECT_THROW(resample_bicubic(RasterImage(4, 4), 0.0), Error);
}

TEST(Patches, AllForegroundFirstSampleAccepted) {
  Rng rng(5);
  RasterImage img(40, 40, 0.5);
  auto labels = random_labels(40, 40, 3, rng);
  for (auto& v : labels.foreground.values()) v = 1;
  Rng a(9), b(9);
  const auto p = sample_patch(img, labels, 16, a);
  const int top = b.below(25), left = b.below(25);
  EXPECT_EQ(p.top, top);
  EXPECT_EQ(p.left, left);
}

TEST(Patches, CornerForegroundIntersected) {
  RasterImage img(64, 64, 0.5);
  SoftLabelMap labels{DistributionMap(64, 64, 2), Mask(64, 64, 0), Mask(64, 64, 0), Level::pattern, 1};
  for (int r = 56; r < 64; ++r)
    for (int c = 56; c < 64; ++c) labels.foreground(r, c) = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto p = sample_patch(img, labels, 16, rng);
    int fg = 0;
    for (auto v : p.labels.foreground.values()) fg += v;
    EXPECT_GT(fg, 0);
  }
}

TEST(Patches, SeededRunsIdentical) {
  Rng g(2);
  RasterImage img(50, 50);
  for (auto& v : img.pixels) v = g.uniform();
  const auto labels = random_labels(50, 50, 4, g);
  Rng a(11), b(11);
  const auto p = sample_patch(img, labels, 20, a);
  const auto q = sample_patch(img, labels, 20, b);
  EXPECT_EQ(p.image, q.image);
  EXPECT_TRUE(std::ranges::equal(p.labels.probs.values(), q.labels.probs.values()));
}

TEST(Patches, SmallImageReflectPadded) {
  Rng g(3);
  RasterImage img(5, 5);
  for (auto& v : img.pixels) v = g.uniform();
  const auto labels = random_labels(5, 5, 2, g);
  Rng rng(1);
  const auto p = sample_patch(img, labels, 8, rng);
  EXPECT_EQ(p.image.height, 8);
  EXPECT_EQ(p.image.at(0, 6, 1), img.at(0, 2, 1));
  EXPECT_EQ(reflect_index(-1, 5), 1);
  EXPECT_EQ(reflect_index(5, 5), 3);
}

TEST(Patches, CentralOffsets) {
  EXPECT_EQ(central_offset(512, 512, 512), (std::pair{0, 0}));
  EXPECT_EQ(central_offset(1024, 1024, 512), (std::pair{256, 256}));
  EXPECT_EQ(central_offset(513, 513, 512), (std::pair{0, 0}));
}

TEST(Augment, IdentityDrawUnchanged) {
  Rng g(4);
  RasterImage img(6, 9);
  for (auto& v : img.pixels) v = g.uniform();
  Patch p{img, random_labels(6, 9, 3, g), 0, 0};
  const auto out = apply_augment(p, AugmentDraw{});
  EXPECT_EQ(out.image, p.image);
  EXPECT_TRUE(std::ranges::equal(out.labels.probs.values(), p.labels.probs.values()));
}

TEST(Augment, RotationMatchesBruteForce) {
  Rng g(6);
  const int h = 5, w = 8;
  RasterImage img(h, w);
  SoftLabelMap labels{DistributionMap(h, w, 1), Mask(h, w, 1), Mask(h, w, 0), Level::pattern, 1};
  Grid<int> idx(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      idx(r, c) = r * w + c;
      img.at(r, c, 0) = idx(r, c) / 64.0;
    }
  for (int fh = 0; fh < 2; ++fh)
    for (int fv = 0; fv < 2; ++fv)
      for (int k = 0; k < 4; ++k) {
        AugmentDraw d;
        d.flip_horizontal = fh;
        d.flip_vertical = fv;
        d.rotations = k;
        Grid<int> expect = idx;
        if (fv) {
          Grid<int> t(h, w);
          for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) t(r, c) = expect(h - 1 - r, c);
          expect = t;
        }
        if (fh) {
          Grid<int> t(h, w);
          for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) t(r, c) = expect(r, w - 1 - c);
          expect = t;
        }
        for (int i = 0; i < k; ++i) expect = rot90(expect);
        const auto out = apply_augment(Patch{img, labels, 0, 0}, d);
        ASSERT_EQ(out.image.height, expect.height());
        for (int r = 0; r < expect.height(); ++r)
          for (int c = 0; c < expect.width(); ++c)
            EXPECT_NEAR(out.image.at(r, c, 0) * 64.0, expect(r, c), 1e-9) << fh << fv << k;
      }
}

TEST(Augment, FourQuarterTurnsComposeToIdentity) {
  Rng g(7);
  RasterImage img(6, 10);
  for (auto& v : img.pixels) v = g.uniform();
  Patch p{img, random_labels(6, 10, 3, g), 0, 0};
  AugmentDraw d;
  d.rotations = 1;
  auto q = p;
  for (int i = 0; i < 4; ++i) q = apply_augment(q, d);
  EXPECT_EQ(q.image, p.image);
  EXPECT_TRUE(std::ranges::equal(q.labels.probs.values(), p.labels.probs.values()));
  EXPECT_EQ(q.labels.foreground, p.labels.foreground);
}

TEST(Augment, GeometryConservesClassMassAndJitterStaysInRange) {
  Rng g(8);
  RasterImage img(12, 12);
  for (auto& v : img.pixels) v = g.uniform();
  Patch p{img, random_labels(12, 12, 4, g), 0, 0};
  std::vector<double> before(4, 0.0);
  for (std::size_t i = 0; i < p.labels.probs.pixels(); ++i)
    for (int c = 0; c < 4; ++c) before[c] += p.labels.probs.pixel(i)[c];
  for (int t = 0; t < 20; ++t) {
    const auto out = augment_light(p, g);
    std::vector<double> after(4, 0.0);
    for (std::size_t i = 0; i < out.labels.probs.pixels(); ++i)
      for (int c = 0; c < 4; ++c) after[c] += out.labels.probs.pixel(i)[c];
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(after[c], before[c], 1e-12);
    for (double v : out.image.pixels) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}
