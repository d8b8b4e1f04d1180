#pragma once

// Whole-image prediction by Gaussian-weighted sliding windows and argmax
// overlays for visual inspection.

#include <cmath>
#include <functional>
#include <vector>

#include "softseg/imaging.hpp"
#include "softseg/model.hpp"
#include "softseg/objectives.hpp"
#include "softseg/predictive.hpp"
#include "softseg/trainer.hpp"

namespace softseg {

struct SlidingWindowOptions {
  int window = 512;
  double overlap = 0.5;
  double sigma_frac = 0.125;
  double weight_floor = 1e-3;
};

/// Start offsets along one axis: stride window·(1-overlap), last tile flush with the edge.
inline std::vector<int> tile_starts(int extent, int window, double overlap) {
  if (window <= 0 || extent < window) throw Error("tile_starts: window larger than extent");
  const int stride = std::max(1, static_cast<int>(std::lround(window * (1.0 - overlap))));
  std::vector<int> out;
  for (int s = 0;; s += stride) {
    if (s + window >= extent) {
      out.push_back(extent - window);
      break;
    }
    out.push_back(s);
  }
  return out;
}

/// window×window weights exp(-d²/(2σ²)) about the tile centre, floored.
inline std::vector<double> gaussian_tile_weights(int window, double sigma_frac, double floor) {
  const double sigma = sigma_frac * window;
  const double centre = (window - 1) / 2.0;
  std::vector<double> axis(window);
  for (int i = 0; i < window; ++i) axis[i] = std::exp(-(i - centre) * (i - centre) / (2.0 * sigma * sigma));
  std::vector<double> w(static_cast<std::size_t>(window) * window);
  for (int r = 0; r < window; ++r)
    for (int c = 0; c < window; ++c) w[static_cast<std::size_t>(r) * window + c] = std::max(axis[r] * axis[c], floor);
  return w;
}

/// Maps a window×window RGB tile to per-pixel probabilities (window×window×C).
using TilePredictor = std::function<DistributionMap(const RasterImage&)>;

namespace detail {
inline RasterImage reflect_pad(const RasterImage& image, int h, int w) {
  RasterImage out(h, w, 0.0, image.spacing);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const int sr = reflect_index(r, image.height), sc = reflect_index(c, image.width);
      for (int ch = 0; ch < 3; ++ch) out.pixels[(static_cast<std::size_t>(r) * w + c) * 3 + ch] = image.at(sr, sc, ch);
    }
  return out;
}
}  // namespace detail

/// Σ w·p / Σ w over tiles; tiles are evaluated in parallel and blended in raster order.
inline DistributionMap sliding_window(const RasterImage& image, const TilePredictor& predict,
                                      const SlidingWindowOptions& opt = {}) {
  if (opt.window <= 0 || opt.window % 2) throw Error("sliding_window: window must be positive and even");
  if (!(opt.overlap >= 0.0 && opt.overlap < 1.0)) throw Error("sliding_window: overlap must lie in [0, 1)");
  const int h = image.height, w = image.width;
  if (h < opt.window || w < opt.window) {
    const auto padded = detail::reflect_pad(image, std::max(h, opt.window), std::max(w, opt.window));
    return crop(sliding_window(padded, predict, opt), 0, 0, h, w);
  }
  const auto rows = tile_starts(h, opt.window, opt.overlap);
  const auto cols = tile_starts(w, opt.window, opt.overlap);
  const auto weights = gaussian_tile_weights(opt.window, opt.sigma_frac, opt.weight_floor);
  std::vector<std::pair<int, int>> tiles;
  for (int r : rows)
    for (int c : cols) tiles.emplace_back(r, c);

  DistributionMap acc;
  std::vector<double> wsum(static_cast<std::size_t>(h) * w, 0.0);
  const std::size_t group = static_cast<std::size_t>(std::max(1, thread_count()));
  for (std::size_t g = 0; g < tiles.size(); g += group) {
    const std::size_t count = std::min(group, tiles.size() - g);
    std::vector<DistributionMap> outs(count);
    parallel_for(count, [&](std::size_t k) {
      const auto [top, left] = tiles[g + k];
      outs[k] = predict(crop(image, top, left, opt.window, opt.window));
    });
    for (std::size_t k = 0; k < count; ++k) {
      const auto [top, left] = tiles[g + k];
      const auto& out = outs[k];
      if (out.height() != opt.window || out.width() != opt.window) throw Error("sliding_window: tile output size mismatch");
      if (acc.classes() == 0) acc = DistributionMap(h, w, out.classes());
      for (int r = 0; r < opt.window; ++r)
        for (int c = 0; c < opt.window; ++c) {
          const double wt = weights[static_cast<std::size_t>(r) * opt.window + c];
          const std::size_t i = static_cast<std::size_t>(top + r) * w + left + c;
          wsum[i] += wt;
          auto dst = acc.pixel(i);
          const auto src = out.at(r, c);
          for (std::size_t q = 0; q < dst.size(); ++q) dst[q] += wt * src[q];
        }
    }
  }
  for (std::size_t i = 0; i < acc.pixels(); ++i)
    for (double& v : acc.pixel(i)) v /= wsum[i];
  return acc;
}

/// Per-pixel softmax of a MiniUNet forward pass on one tile.
inline TilePredictor model_predictor(const MiniUNet<float>& model) {
  return [&model](const RasterImage& tile) {
    std::vector<float> input;
    append_input(tile, input);
    typename MiniUNet<float>::Cache cache;
    model.forward(input.data(), tile.height, tile.width, cache);
    const int classes = model.classes();
    const int pixels = tile.height * tile.width;
    BatchTensor logits(1, classes, pixels);
    for (std::size_t i = 0; i < cache.logits.size(); ++i) logits.values[i] = cache.logits[i];
    const auto p = softmax(logits);
    DistributionMap out(tile.height, tile.width, classes);
    for (int i = 0; i < pixels; ++i)
      for (int c = 0; c < classes; ++c) out.pixel(i)[c] = p.at(0, c, i);
    return out;
  };
}

inline PredictiveMap sliding_window_predict(const MiniUNet<float>& model, const RasterImage& image, Level level,
                                            const SlidingWindowOptions& opt = {}, const Mask& foreground = {}) {
  return {sliding_window(image, model_predictor(model), opt), level, foreground};
}

/// Argmax colours blended at alpha over foreground; benign and background pixels keep the image.
inline RasterImage render_overlay(const RasterImage& image, const DistributionMap& probs, const Mask& foreground,
                                  const Ontology& ontology, Level level, double alpha = 0.5) {
  if (probs.height() != image.height || probs.width() != image.width)
    throw Error("render_overlay: map and image differ in size");
  if (probs.classes() != ontology.class_count(level))
    throw Error("render_overlay: map has " + std::to_string(probs.classes()) + " classes, level " +
                std::string(to_string(level)) + " has " + std::to_string(ontology.class_count(level)));
  if (!foreground.empty() && !probs.same_extent(foreground)) throw Error("render_overlay: mask size mismatch");
  RasterImage out = image;
  for (std::size_t i = 0; i < probs.pixels(); ++i) {
    if (!foreground.empty() && !foreground[i]) continue;
    const int c = argmax(probs.pixel(i));
    if (c == kBenign) continue;
    const auto color = ontology.node(level, c).display_color;
    const double rgb[3] = {color.r / 255.0, color.g / 255.0, color.b / 255.0};
    for (int ch = 0; ch < 3; ++ch) out.pixels[i * 3 + ch] = (1.0 - alpha) * image.pixels[i * 3 + ch] + alpha * rgb[ch];
  }
  return out;
}

}  // namespace softseg
