#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "softseg/inference.hpp"
#include "softseg/parallel.hpp"
#include "softseg/random.hpp"

using namespace softseg;

namespace {

const Ontology& onto() {
  static const Ontology o = Ontology::load_default();
  return o;
}

RasterImage random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  RasterImage img(h, w);
  for (auto& v : img.pixels) v = rng.uniform();
  return img;
}

TilePredictor constant_predictor(std::vector<double> dist) {
  return [dist](const RasterImage& tile) {
    DistributionMap out(tile.height, tile.width, static_cast<int>(dist.size()));
    for (std::size_t i = 0; i < out.pixels(); ++i) std::copy(dist.begin(), dist.end(), out.pixel(i).begin());
    return out;
  };
}

// Two classes; p1 = red channel of the pixel, so each tile sees the true value.
TilePredictor red_predictor() {
  return [](const RasterImage& tile) {
    DistributionMap out(tile.height, tile.width, 2);
    for (int r = 0; r < tile.height; ++r)
      for (int c = 0; c < tile.width; ++c) {
        out.at(r, c)[1] = tile.at(r, c, 0);
        out.at(r, c)[0] = 1.0 - tile.at(r, c, 0);
      }
    return out;
  };
}

// Tile-dependent output: p1 = top / 100 everywhere in the tile.
TilePredictor position_predictor(const RasterImage& whole) {
  return [&whole](const RasterImage& tile) {
    int top = -1;
    for (int t = 0; t + tile.height <= whole.height && top < 0; ++t)
      for (int l = 0; l + tile.width <= whole.width; ++l)
        if (whole.at(t, l, 0) == tile.at(0, 0, 0) && whole.at(t, l, 1) == tile.at(0, 0, 1)) {
          top = t;
          break;
        }
    DistributionMap out(tile.height, tile.width, 2);
    for (std::size_t i = 0; i < out.pixels(); ++i) {
      out.pixel(i)[1] = top / 100.0;
      out.pixel(i)[0] = 1.0 - top / 100.0;
    }
    return out;
  };
}

}  // namespace

TEST(TileStarts, CoverAndEndFlush) {
  EXPECT_EQ(tile_starts(512, 512, 0.5), (std::vector<int>{0}));
  EXPECT_EQ(tile_starts(1024, 512, 0.5), (std::vector<int>{0, 256, 512}));
  EXPECT_EQ(tile_starts(1000, 512, 0.5), (std::vector<int>{0, 256, 488}));
  EXPECT_EQ(tile_starts(100, 32, 0.0), (std::vector<int>{0, 32, 64, 68}));
  EXPECT_THROW(tile_starts(10, 32, 0.5), Error);
  for (int extent = 16; extent < 200; extent += 7)
    for (double overlap : {0.0, 0.25, 0.5, 0.75}) {
      const auto s = tile_starts(extent, 16, overlap);
      EXPECT_EQ(s.front(), 0);
      EXPECT_EQ(s.back(), extent - 16);
      for (std::size_t k = 1; k < s.size(); ++k) {
        EXPECT_GT(s[k], s[k - 1]);
        EXPECT_LE(s[k] - s[k - 1], 16);
      }
    }
}

TEST(GaussianWeights, PeakAtCentreSymmetricAndFloored) {
  const int w = 16;
  const auto g = gaussian_tile_weights(w, 0.125, 1e-3);
  const double sigma = 2.0, centre = 7.5;
  for (int r = 0; r < w; ++r)
    for (int c = 0; c < w; ++c) {
      const double expect = std::max(std::exp(-((r - centre) * (r - centre) + (c - centre) * (c - centre)) / (2 * sigma * sigma)), 1e-3);
      EXPECT_NEAR(g[r * w + c], expect, 1e-15);
      EXPECT_EQ(g[r * w + c], g[(w - 1 - r) * w + c]);
      EXPECT_EQ(g[r * w + c], g[c * w + r]);
      EXPECT_GE(g[r * w + c], 1e-3);
    }
  EXPECT_EQ(g[0], 1e-3);
}

TEST(SlidingWindow, ConstantPredictorGivesConstantMap) {
  const auto img = random_image(50, 70, 1);
  const std::vector<double> dist{0.1, 0.2, 0.3, 0.4};
  const auto out = sliding_window(img, constant_predictor(dist), {16, 0.5});
  ASSERT_EQ(out.height(), 50);
  ASSERT_EQ(out.width(), 70);
  for (std::size_t i = 0; i < out.pixels(); ++i)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(out.pixel(i)[c], dist[c], 1e-12);
}

TEST(SlidingWindow, SingleTileIsIdentity) {
  const auto img = random_image(32, 32, 2);
  const auto out = sliding_window(img, red_predictor(), {32, 0.5});
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) EXPECT_NEAR(out.at(r, c)[1], img.at(r, c, 0), 1e-12);
}

TEST(SlidingWindow, PixelwiseModelIsReproducedExactly) {
  const auto img = random_image(45, 61, 3);
  const auto out = sliding_window(img, red_predictor(), {16, 0.5});
  for (int r = 0; r < 45; ++r)
    for (int c = 0; c < 61; ++c) EXPECT_NEAR(out.at(r, c)[1], img.at(r, c, 0), 1e-12);
}

TEST(SlidingWindow, SmallImageIsReflectPadded) {
  const auto img = random_image(10, 12, 4);
  const auto out = sliding_window(img, red_predictor(), {16, 0.5});
  ASSERT_EQ(out.height(), 10);
  ASSERT_EQ(out.width(), 12);
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 12; ++c) EXPECT_NEAR(out.at(r, c)[1], img.at(r, c, 0), 1e-12);
}

TEST(SlidingWindow, BlendMatchesWeightedAverageOracle) {
  const int h = 40, w = 16, win = 16;
  const auto img = random_image(h, w, 5);
  const SlidingWindowOptions opt{win, 0.5, 0.125, 1e-3};
  const auto out = sliding_window(img, position_predictor(img), opt);
  const auto tops = tile_starts(h, win, 0.5);
  const double sigma = 0.125 * win, centre = (win - 1) / 2.0;
  auto weight = [&](int r, int c) {
    return std::max(std::exp(-(r - centre) * (r - centre) / (2 * sigma * sigma)) *
                        std::exp(-(c - centre) * (c - centre) / (2 * sigma * sigma)),
                    1e-3);
  };
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double num = 0, den = 0;
      for (int t : tops)
        if (r >= t && r < t + win) {
          num += weight(r - t, c) * t / 100.0;
          den += weight(r - t, c);
        }
      EXPECT_NEAR(out.at(r, c)[1], num / den, 1e-12) << r << "," << c;
    }
}

TEST(SlidingWindow, RowsStaySimplex) {
  const auto img = random_image(37, 53, 6);
  const TilePredictor noisy = [](const RasterImage& tile) {
    DistributionMap out(tile.height, tile.width, 3);
    for (int r = 0; r < tile.height; ++r)
      for (int c = 0; c < tile.width; ++c) {
        const double a = tile.at(r, c, 0), b = tile.at(r, c, 1);
        out.at(r, c)[0] = a * 0.5;
        out.at(r, c)[1] = b * 0.5;
        out.at(r, c)[2] = 1.0 - a * 0.5 - b * 0.5;
      }
    return out;
  };
  const auto out = sliding_window(img, noisy, {16, 0.25});
  for (std::size_t i = 0; i < out.pixels(); ++i) {
    double s = 0;
    for (double v : out.pixel(i)) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(SlidingWindow, ModelPredictionDeterministicAcrossThreads) {
  MiniUNet<float> m(onto().class_count(Level::pattern), 3);
  const auto img = random_image(48, 40, 8);
  set_thread_count(1);
  const auto a = sliding_window_predict(m, img, Level::pattern, {16, 0.5});
  set_thread_count(4);
  const auto b = sliding_window_predict(m, img, Level::pattern, {16, 0.5});
  set_thread_count(0);
  EXPECT_TRUE(std::ranges::equal(a.probs.values(), b.probs.values()));
  for (std::size_t i = 0; i < a.probs.pixels(); ++i) {
    double s = 0;
    for (double v : a.probs.pixel(i)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(SlidingWindow, RejectsBadOptions) {
  const auto img = random_image(32, 32, 9);
  EXPECT_THROW(sliding_window(img, red_predictor(), {15, 0.5}), Error);
  EXPECT_THROW(sliding_window(img, red_predictor(), {16, 1.0}), Error);
  EXPECT_THROW(sliding_window(img, red_predictor(), {16, -0.1}), Error);
}

TEST(Overlay, BenignAndBackgroundKeepImage) {
  const int classes = onto().class_count(Level::pattern);
  RasterImage img(4, 4, 0.5);
  DistributionMap probs(4, 4, classes);
  Mask fg(4, 4, 1);
  for (int i = 0; i < 16; ++i) probs.pixel(i)[i % classes] = 1.0;
  fg[5] = 0;
  const auto out = render_overlay(img, probs, fg, onto(), Level::pattern, 0.5);
  for (int i = 0; i < 16; ++i) {
    const int c = i % classes;
    for (int ch = 0; ch < 3; ++ch) {
      const double v = out.pixels[i * 3 + ch];
      if (c == 0 || i == 5) {
        EXPECT_EQ(v, 0.5);
      } else {
        const auto col = onto().node(Level::pattern, c).display_color;
        const double rgb[3] = {col.r / 255.0, col.g / 255.0, col.b / 255.0};
        EXPECT_NEAR(v, 0.25 + 0.5 * rgb[ch], 1e-12);
      }
    }
  }
  EXPECT_THROW(render_overlay(img, DistributionMap(4, 4, classes + 1), fg, onto(), Level::pattern), Error);
  EXPECT_THROW(render_overlay(RasterImage(3, 4), probs, fg, onto(), Level::pattern), Error);
}

TEST(Prediction, SaveLoadRoundTripAndRemap) {
  const int classes = onto().class_count(Level::explanation);
  Rng rng(10);
  DistributionMap probs(6, 5, classes);
  for (std::size_t i = 0; i < probs.pixels(); ++i) {
    double s = 0;
    for (auto& v : probs.pixel(i)) s += v = rng.uniform();
    for (auto& v : probs.pixel(i)) v /= s;
  }
  Mask fg(6, 5, 1);
  fg[3] = 0;
  const PredictiveMap pred{probs, Level::explanation, fg};
  const auto path = std::filesystem::temp_directory_path() / "softseg_pred_roundtrip.slt";
  save_prediction(path, pred);
  const auto back = load_prediction(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.level, Level::explanation);
  ASSERT_EQ(back.probs.values().size(), probs.values().size());
  for (std::size_t i = 0; i < probs.values().size(); ++i)
    EXPECT_EQ(back.probs.values()[i], static_cast<double>(static_cast<float>(probs.values()[i])));
  EXPECT_EQ(back.foreground, fg);

  const auto coarse = predict_remapped(pred, onto(), Level::pattern);
  const auto& parent = onto().parent_map(Level::explanation);
  for (std::size_t i = 0; i < probs.pixels(); ++i) {
    std::vector<double> expect(onto().class_count(Level::pattern), 0.0);
    for (int c = 0; c < classes; ++c) expect[parent[c]] += probs.pixel(i)[c];
    for (std::size_t p = 0; p < expect.size(); ++p) EXPECT_NEAR(coarse.probs.pixel(i)[p], expect[p], 1e-12);
  }
}
