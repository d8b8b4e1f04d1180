#pragma once

// Image-side preprocessing: Otsu + morphology foreground masks, Catmull-Rom
// resampling to a physical pixel spacing, patch sampling and light
// augmentation applied jointly to images and soft labels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "softseg/core.hpp"
#include "softseg/fusion.hpp"
#include "softseg/random.hpp"

namespace softseg {

inline constexpr double kWorkingSpacing = 1.392;  // µm/px

/// H×W×3 RGB in [0, 1] with isotropic pixel spacing in µm/px.
struct RasterImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;  // [row][col][channel]
  double spacing = 1.0;

  RasterImage() = default;
  RasterImage(int h, int w, double fill = 0.0, double pixel_spacing = 1.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill), spacing(pixel_spacing) {}

  double& at(int r, int c, int ch) { return pixels[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
  double at(int r, int c, int ch) const { return pixels[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }

  bool operator==(const RasterImage&) const = default;
};

struct ForegroundMask {
  Mask mask;
  int threshold = 0;
};

// ---------------------------------------------------------------------------
// Otsu

/// Threshold t maximizing between-class variance for class0 = bins <= t and
/// class1 = bins > t; the smallest maximizer wins. Candidate thresholds span
/// the occupied range, so a single occupied bin returns that bin.
inline int otsu_threshold(std::span<const std::uint64_t> histogram) {
  if (histogram.empty()) throw Error("otsu_threshold: empty histogram");
  int first = -1, last = -1;
  std::uint64_t total = 0, weighted = 0;
  for (std::size_t b = 0; b < histogram.size(); ++b) {
    if (histogram[b] == 0) continue;
    if (first < 0) first = static_cast<int>(b);
    last = static_cast<int>(b);
    total += histogram[b];
    weighted += histogram[b] * b;
  }
  if (total == 0) throw Error("otsu_threshold: histogram has no samples");
  int best_t = first;
  double best = -1.0;
  std::uint64_t n0 = 0, s0 = 0;
  for (int t = 0; t <= last; ++t) {
    n0 += histogram[t];
    s0 += histogram[t] * static_cast<std::uint64_t>(t);
    if (t < first) continue;
    const std::uint64_t n1 = total - n0;
    double var = 0.0;
    if (n0 > 0 && n1 > 0) {
      // (s0 n1 - s1 n0)^2 / (n0 n1) is proportional to the between-class variance.
      const double s1 = static_cast<double>(weighted - s0);
      const double d = static_cast<double>(s0) * static_cast<double>(n1) - s1 * static_cast<double>(n0);
      var = d * d / (static_cast<double>(n0) * static_cast<double>(n1));
    }
    if (var > best) {
      best = var;
      best_t = t;
    }
  }
  return best_t;
}

// ---------------------------------------------------------------------------
// Binary morphology with a disk structuring element. Neighbours outside the
// image are ignored by both erosion and dilation.

inline std::vector<int> disk_half_widths(int radius) {
  std::vector<int> hw(2 * radius + 1);
  for (int dy = -radius; dy <= radius; ++dy)
    hw[dy + radius] = static_cast<int>(std::floor(std::sqrt(static_cast<double>(radius * radius - dy * dy)) + 1e-12));
  return hw;
}

namespace detail {
inline Mask morph(const Mask& in, int radius, bool dilate) {
  if (radius < 0) throw Error("morphology: negative radius");
  const int h = in.height(), w = in.width();
  if (radius == 0) return in;
  // Row prefix counts of set pixels.
  std::vector<int> prefix(static_cast<std::size_t>(h) * (w + 1), 0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      prefix[static_cast<std::size_t>(r) * (w + 1) + c + 1] = prefix[static_cast<std::size_t>(r) * (w + 1) + c] + (in(r, c) ? 1 : 0);
  const auto hw = disk_half_widths(radius);
  Mask out(h, w, 0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      bool hit = !dilate;
      for (int dy = -radius; dy <= radius && hit != dilate; ++dy) {
        const int rr = r + dy;
        if (rr < 0 || rr >= h) continue;
        const int c0 = std::max(0, c - hw[dy + radius]);
        const int c1 = std::min(w - 1, c + hw[dy + radius]);
        const std::size_t base = static_cast<std::size_t>(rr) * (w + 1);
        const int ones = prefix[base + c1 + 1] - prefix[base + c0];
        if (dilate && ones > 0) hit = true;
        if (!dilate && ones < c1 - c0 + 1) hit = false;
      }
      out(r, c) = hit ? 1 : 0;
    }
  }
  return out;
}
}  // namespace detail

inline Mask dilate(const Mask& in, int radius) { return detail::morph(in, radius, true); }
inline Mask erode(const Mask& in, int radius) { return detail::morph(in, radius, false); }
inline Mask closing(const Mask& in, int radius) { return erode(dilate(in, radius), radius); }
inline Mask opening(const Mask& in, int radius) { return dilate(erode(in, radius), radius); }

/// Closing followed by opening.
inline Mask clean_mask(const Mask& in, int radius) { return opening(closing(in, radius), radius); }

inline double luminance(double r, double g, double b) { return 0.2126 * r + 0.7152 * g + 0.0722 * b; }

inline Grid<std::uint8_t> luminance_bins(const RasterImage& image) {
  Grid<std::uint8_t> bins(image.height, image.width);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) {
      const double l = std::clamp(luminance(image.at(r, c, 0), image.at(r, c, 1), image.at(r, c, 2)), 0.0, 1.0);
      bins(r, c) = static_cast<std::uint8_t>(std::lround(l * 255.0));
    }
  return bins;
}

inline constexpr int kDefaultMorphRadius = 5;

/// Tissue = luminance bin <= Otsu threshold (or > threshold when
/// `tissue_darker` is false), then closing and opening with a disk. An image
/// with a single luminance level has no separable tissue and yields an empty mask.
inline ForegroundMask foreground_mask(const RasterImage& image, int radius = kDefaultMorphRadius,
                                      bool tissue_darker = true) {
  const auto bins = luminance_bins(image);
  std::array<std::uint64_t, 256> hist{};
  for (auto b : bins.values()) ++hist[b];
  ForegroundMask fm{Mask(image.height, image.width, 0), 0};
  if (bins.empty()) return fm;
  fm.threshold = otsu_threshold(hist);
  const auto occupied = std::count_if(hist.begin(), hist.end(), [](auto v) { return v > 0; });
  if (occupied < 2) return fm;
  Mask raw(image.height, image.width, 0);
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = tissue_darker ? (bins[i] <= fm.threshold) : (bins[i] > fm.threshold);
  fm.mask = clean_mask(raw, radius);
  return fm;
}

// ---------------------------------------------------------------------------
// Catmull-Rom resampling

inline double cubic_kernel(double x, double a = -0.5) {
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

namespace detail {
struct Taps {
  std::array<int, 4> index;
  std::array<double, 4> weight;
};

inline std::vector<Taps> resample_taps(int in_size, int out_size, double ratio) {
  std::vector<Taps> taps(out_size);
  for (int o = 0; o < out_size; ++o) {
    const double src = (o + 0.5) * ratio - 0.5;
    const int base = static_cast<int>(std::floor(src));
    for (int t = 0; t < 4; ++t) {
      const int i = base - 1 + t;
      taps[o].index[t] = std::clamp(i, 0, in_size - 1);
      taps[o].weight[t] = cubic_kernel(src - i);
    }
  }
  return taps;
}
}  // namespace detail

/// Output size round(H * s_in / s_out); edge-clamped separable Catmull-Rom.
inline RasterImage resample_bicubic(const RasterImage& image, double target_spacing = kWorkingSpacing) {
  if (!(target_spacing > 0.0)) throw Error("resample_bicubic: target spacing must be positive");
  if (!(image.spacing > 0.0)) throw Error("resample_bicubic: source spacing must be positive");
  if (target_spacing == image.spacing) return image;
  const double ratio = target_spacing / image.spacing;
  const int out_h = std::max(1, static_cast<int>(std::lround(image.height / ratio)));
  const int out_w = std::max(1, static_cast<int>(std::lround(image.width / ratio)));
  const auto tx = detail::resample_taps(image.width, out_w, ratio);
  const auto ty = detail::resample_taps(image.height, out_h, ratio);

  std::vector<double> horiz(static_cast<std::size_t>(image.height) * out_w * 3, 0.0);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < out_w; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.0;
        for (int t = 0; t < 4; ++t) acc += tx[c].weight[t] * image.at(r, tx[c].index[t], ch);
        horiz[(static_cast<std::size_t>(r) * out_w + c) * 3 + ch] = acc;
      }
  RasterImage out(out_h, out_w, 0.0, target_spacing);
  for (int r = 0; r < out_h; ++r)
    for (int c = 0; c < out_w; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.0;
        for (int t = 0; t < 4; ++t) acc += ty[r].weight[t] * horiz[(static_cast<std::size_t>(ty[r].index[t]) * out_w + c) * 3 + ch];
        out.at(r, c, ch) = std::clamp(acc, 0.0, 1.0);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Cropping with reflect padding

inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

inline RasterImage crop(const RasterImage& image, int top, int left, int h, int w) {
  RasterImage out(h, w, 0.0, image.spacing);
  for (int r = 0; r < h; ++r) {
    const int sr = reflect_index(top + r, image.height);
    for (int c = 0; c < w; ++c) {
      const int sc = reflect_index(left + c, image.width);
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = image.at(sr, sc, ch);
    }
  }
  return out;
}

template <typename T>
Grid<T> crop(const Grid<T>& g, int top, int left, int h, int w) {
  Grid<T> out(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) out(r, c) = g(reflect_index(top + r, g.height()), reflect_index(left + c, g.width()));
  return out;
}

inline DistributionMap crop(const DistributionMap& d, int top, int left, int h, int w) {
  DistributionMap out(h, w, d.classes());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const auto src = d.at(reflect_index(top + r, d.height()), reflect_index(left + c, d.width()));
      std::copy(src.begin(), src.end(), out.at(r, c).begin());
    }
  return out;
}

inline SoftLabelMap crop(const SoftLabelMap& s, int top, int left, int h, int w) {
  return {crop(s.probs, top, left, h, w), crop(s.foreground, top, left, h, w), crop(s.ambiguous, top, left, h, w),
          s.level, s.annotator_count};
}

struct Patch {
  RasterImage image;
  SoftLabelMap labels;
  int top = 0;
  int left = 0;
};

/// Uniform random patch, resampled up to 100 times until it holds foreground;
/// then a patch around a random foreground pixel, if there is one. Smaller images are reflect-padded.
inline Patch sample_patch(const RasterImage& image, const SoftLabelMap& labels, int size, Rng& rng,
                          int max_attempts = 100) {
  if (image.height != labels.height() || image.width != labels.width())
    throw Error("sample_patch: image and label size differ");
  const int max_top = std::max(0, image.height - size);
  const int max_left = std::max(0, image.width - size);
  int best_top = 0, best_left = 0;
  long best_count = -1;
  for (int a = 0; a < max_attempts; ++a) {
    const int top = rng.below(max_top + 1);
    const int left = rng.below(max_left + 1);
    long count = 0;
    for (int r = top; r < std::min(image.height, top + size); ++r)
      for (int c = left; c < std::min(image.width, left + size); ++c) count += labels.foreground(r, c) ? 1 : 0;
    if (count > best_count) {
      best_count = count;
      best_top = top;
      best_left = left;
    }
    if (count > 0) break;
  }
  if (best_count == 0) {
    std::vector<std::size_t> fg;
    const auto& values = labels.foreground.values();
    for (std::size_t i = 0; i < values.size(); ++i)
      if (values[i]) fg.push_back(i);
    if (!fg.empty()) {
      const std::size_t pick = fg[rng.below(fg.size())];
      const int r = static_cast<int>(pick / image.width);
      const int c = static_cast<int>(pick % image.width);
      best_top = std::clamp(r - size / 2, 0, max_top);
      best_left = std::clamp(c - size / 2, 0, max_left);
    }
  }
  return {crop(image, best_top, best_left, size, size), crop(labels, best_top, best_left, size, size), best_top,
          best_left};
}

inline std::pair<int, int> central_offset(int height, int width, int size) {
  return {std::max(0, (height - size) / 2), std::max(0, (width - size) / 2)};
}

inline RasterImage central_patch(const RasterImage& image, int size) {
  const auto [top, left] = central_offset(image.height, image.width, size);
  return crop(image, top, left, size, size);
}

inline Patch central_patch(const RasterImage& image, const SoftLabelMap& labels, int size) {
  const auto [top, left] = central_offset(image.height, image.width, size);
  return {crop(image, top, left, size, size), crop(labels, top, left, size, size), top, left};
}

// ---------------------------------------------------------------------------
// Light augmentation

struct AugmentDraw {
  bool flip_horizontal = false;
  bool flip_vertical = false;
  int rotations = 0;  // counter-clockwise quarter turns
  std::array<double, 3> scale{1.0, 1.0, 1.0};
  std::array<double, 3> offset{0.0, 0.0, 0.0};

  static AugmentDraw sample(Rng& rng) {
    AugmentDraw d;
    d.flip_horizontal = rng.bernoulli(0.5);
    d.flip_vertical = rng.bernoulli(0.5);
    d.rotations = rng.below(4);
    for (int ch = 0; ch < 3; ++ch) {
      d.scale[ch] = rng.uniform(0.9, 1.1);
      d.offset[ch] = rng.uniform(-0.05, 0.05);
    }
    return d;
  }
};

namespace detail {
// Source coordinate for an output pixel under flips then rotations.
struct GeometricMap {
  int in_h, in_w, out_h, out_w;
  const AugmentDraw& d;

  GeometricMap(int h, int w, const AugmentDraw& draw) : in_h(h), in_w(w), d(draw) {
    const bool swap = (draw.rotations & 1) != 0;
    out_h = swap ? w : h;
    out_w = swap ? h : w;
  }

  std::pair<int, int> source(int r, int c) const {
    // Undo rotations: a CCW quarter turn B = rot90(A) has B[i][j] = A[j][B.height-1-i].
    int h = out_h, w = out_w;
    for (int k = 0; k < (d.rotations & 3); ++k) {
      const int pr = c, pc = h - 1 - r;
      r = pr;
      c = pc;
      std::swap(h, w);
    }
    if (d.flip_vertical) r = in_h - 1 - r;
    if (d.flip_horizontal) c = in_w - 1 - c;
    return {r, c};
  }
};
}  // namespace detail

inline Patch apply_augment(const Patch& in, const AugmentDraw& d) {
  const detail::GeometricMap map(in.image.height, in.image.width, d);
  Patch out;
  out.top = in.top;
  out.left = in.left;
  out.image = RasterImage(map.out_h, map.out_w, 0.0, in.image.spacing);
  out.labels = SoftLabelMap{DistributionMap(map.out_h, map.out_w, in.labels.classes()), Mask(map.out_h, map.out_w),
                            Mask(map.out_h, map.out_w), in.labels.level, in.labels.annotator_count};
  for (int r = 0; r < map.out_h; ++r)
    for (int c = 0; c < map.out_w; ++c) {
      const auto [sr, sc] = map.source(r, c);
      for (int ch = 0; ch < 3; ++ch)
        out.image.at(r, c, ch) = std::clamp(in.image.at(sr, sc, ch) * d.scale[ch] + d.offset[ch], 0.0, 1.0);
      const auto src = in.labels.probs.at(sr, sc);
      std::copy(src.begin(), src.end(), out.labels.probs.at(r, c).begin());
      out.labels.foreground(r, c) = in.labels.foreground(sr, sc);
      out.labels.ambiguous(r, c) = in.labels.ambiguous(sr, sc);
    }
  return out;
}

/// Random flips, quarter turns and per-channel affine colour jitter.
inline Patch augment_light(const Patch& in, Rng& rng) { return apply_augment(in, AugmentDraw::sample(rng)); }

}  // namespace softseg
