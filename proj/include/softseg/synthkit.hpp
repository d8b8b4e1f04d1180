#pragma once

// Synthetic tissue cores: a dark textured disk on a white slide, split into
// Voronoi regions with one class each, plus simulated annotators who relabel
// whole regions through a per-rater confusion matrix and perturb region borders.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "softseg/annotations.hpp"
#include "softseg/imaging.hpp"
#include "softseg/random.hpp"

namespace softseg {

struct ClassTexture {
  double rgb[3] = {0.5, 0.5, 0.5};
  double stripe_amplitude = 0.06;
  double stripe_frequency = 0.25;  // cycles per pixel
  double stripe_angle = 0.0;       // radians
  double noise = 0.04;
};

using ConfusionRows = std::vector<std::vector<double>>;

struct SynthConfig {
  int height = 64;
  int width = 64;
  double core_radius = 28.0;
  int regions = 10;
  std::vector<double> prior;           // class prior for region labels, sums to 1
  std::vector<ClassTexture> palette;   // one per class
  std::vector<ConfusionRows> raters;   // per-rater row-stochastic confusion
  double jitter = 0.0;                 // boundary jitter radius in pixels
  Level level = Level::explanation;
  std::uint64_t seed = 0;

  int classes() const { return static_cast<int>(prior.size()); }
  int rater_count() const { return static_cast<int>(raters.size()); }

  void validate() const {
    const int c = classes();
    if (c < 1) throw Error("SynthConfig: empty class prior");
    if (height < 4 || width < 4 || regions < 1 || core_radius <= 0) throw Error("SynthConfig: bad geometry");
    if (!(jitter >= 0.0)) throw Error("SynthConfig: jitter must be non-negative");
    auto check_simplex = [](const std::vector<double>& v, const std::string& what) {
      double s = 0.0;
      for (double x : v) {
        if (!(x >= 0.0)) throw Error("SynthConfig: negative entry in " + what);
        s += x;
      }
      if (std::abs(s - 1.0) > 1e-9) throw Error("SynthConfig: " + what + " does not sum to 1");
    };
    check_simplex(prior, "class prior");
    if (static_cast<int>(palette.size()) != c) throw Error("SynthConfig: palette size differs from class count");
    for (std::size_t k = 0; k < raters.size(); ++k) {
      if (static_cast<int>(raters[k].size()) != c) throw Error("SynthConfig: confusion matrix has wrong row count");
      for (const auto& row : raters[k]) {
        if (static_cast<int>(row.size()) != c) throw Error("SynthConfig: confusion matrix has wrong column count");
        check_simplex(row, "confusion row of rater " + std::to_string(k));
      }
    }
  }
};

/// Evenly spread hues at moderate value so every class reads as tissue.
inline std::vector<ClassTexture> default_palette(int classes) {
  std::vector<ClassTexture> out(classes);
  for (int c = 0; c < classes; ++c) {
    const double hue = 6.0 * c / classes;
    const double v = 0.62, s = 0.55;
    const double chroma = v * s, x = chroma * (1.0 - std::abs(std::fmod(hue, 2.0) - 1.0)), m = v - chroma;
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(hue)) {
      case 0: r = chroma, g = x; break;
      case 1: r = x, g = chroma; break;
      case 2: g = chroma, b = x; break;
      case 3: g = x, b = chroma; break;
      case 4: r = x, b = chroma; break;
      default: r = chroma, b = x; break;
    }
    out[c].rgb[0] = r + m;
    out[c].rgb[1] = g + m;
    out[c].rgb[2] = b + m;
    out[c].stripe_frequency = 0.12 + 0.05 * (c % 4);
    out[c].stripe_angle = 0.6 * c;
  }
  return out;
}

inline ConfusionRows identity_confusion(int classes) {
  ConfusionRows rows(classes, std::vector<double>(classes, 0.0));
  for (int c = 0; c < classes; ++c) rows[c][c] = 1.0;
  return rows;
}

inline ConfusionRows uniform_confusion(int classes) {
  return ConfusionRows(classes, std::vector<double>(classes, 1.0 / classes));
}

/// Rater `k` of a panel that agrees on the parent class but favours its own
/// child: with probability `d` the true class becomes its sibling shifted by k
/// places (or, with share `cross` of that mass, a non-benign class under another
/// parent). Rater 0 keeps the true class on the sibling branch.
inline ConfusionRows sibling_shift_confusion(const Ontology& ontology, Level level, int k, double d, double cross) {
  if (level == Level::pattern) throw Error("sibling_shift_confusion: level must have a parent level");
  const int c = ontology.class_count(level);
  const auto& parent = ontology.parent_map(level);
  ConfusionRows rows(c, std::vector<double>(c, 0.0));
  for (int t = 0; t < c; ++t) {
    if (t == kBenign) {
      rows[t][t] = 1.0;
      continue;
    }
    std::vector<int> siblings, others;
    for (int u = 0; u < c; ++u) {
      if (u == kBenign) continue;
      (parent[u] == parent[t] ? siblings : others).push_back(u);
    }
    const int pos = static_cast<int>(std::find(siblings.begin(), siblings.end(), t) - siblings.begin());
    const int shifted = siblings[(pos + k) % siblings.size()];
    const double cross_mass = others.empty() ? 0.0 : d * cross;
    rows[t][t] += 1.0 - d;
    rows[t][shifted] += d - cross_mass;
    for (int u : others) rows[t][u] += cross_mass / others.size();
  }
  return rows;
}

struct Scene {
  RasterImage image;
  LabelGrid truth;   // class per pixel, benign outside the core
  Mask core;         // tissue disk
  LabelGrid region;  // Voronoi cell per pixel, -1 outside the core
  std::vector<Point> seeds;
  std::vector<int> region_labels;
  std::uint64_t seed = 0;
};

/// Scene `index` of the corpus described by `cfg`.
inline Scene generate_scene(const SynthConfig& cfg, std::uint64_t index = 0) {
  cfg.validate();
  Scene s;
  s.seed = derive_seed(cfg.seed, index);
  Rng rng(s.seed);
  const int h = cfg.height, w = cfg.width;
  const double cy = h / 2.0, cx = w / 2.0;
  for (int k = 0; k < cfg.regions; ++k) {
    const double rad = cfg.core_radius * std::sqrt(rng.uniform());
    const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
    s.seeds.push_back({cx + rad * std::cos(ang), cy + rad * std::sin(ang)});
    s.region_labels.push_back(rng.categorical(cfg.prior));
  }
  s.image = RasterImage(h, w, 0.0, kWorkingSpacing);
  s.truth = LabelGrid(h, w, kBenign);
  s.core = Mask(h, w, 0);
  s.region = LabelGrid(h, w, -1);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double py = r + 0.5, px = c + 0.5;
      const bool inside = (py - cy) * (py - cy) + (px - cx) * (px - cx) <= cfg.core_radius * cfg.core_radius;
      if (!inside) {
        for (int ch = 0; ch < 3; ++ch) s.image.at(r, c, ch) = std::clamp(0.96 + 0.01 * rng.normal(), 0.0, 1.0);
        continue;
      }
      int best = 0;
      double best_d = 1e300;
      for (int k = 0; k < cfg.regions; ++k) {
        const double d = std::hypot(px - s.seeds[k].x, py - s.seeds[k].y);
        if (d < best_d) best_d = d, best = k;
      }
      const int cls = s.region_labels[best];
      s.core(r, c) = 1;
      s.region(r, c) = best;
      s.truth(r, c) = cls;
      const auto& tex = cfg.palette[cls];
      const double phase = 2.0 * std::numbers::pi * tex.stripe_frequency *
                           (px * std::cos(tex.stripe_angle) + py * std::sin(tex.stripe_angle));
      const double stripe = tex.stripe_amplitude * std::sin(phase);
      for (int ch = 0; ch < 3; ++ch)
        s.image.at(r, c, ch) = std::clamp(tex.rgb[ch] + stripe + tex.noise * rng.normal(), 0.0, 1.0);
    }
  return s;
}

/// One annotator: region labels drawn from `confusion[true]`, borders moved by a
/// per-region radius in [-j, j]. Benign regions and background stay unannotated.
inline AnnotatorMask simulate_rater(const Scene& scene, const ConfusionRows& confusion, double jitter,
                                    std::uint64_t seed, Level level = Level::explanation) {
  Rng rng(seed);
  const std::size_t n = scene.seeds.size();
  std::vector<int> labels(n);
  std::vector<double> grow(n);
  for (std::size_t k = 0; k < n; ++k) {
    const int t = scene.region_labels[k];
    if (t < 0 || t >= static_cast<int>(confusion.size())) throw Error("simulate_rater: class outside confusion matrix");
    labels[k] = rng.categorical(confusion[t]);
    grow[k] = jitter > 0.0 ? rng.uniform(-jitter, jitter) : 0.0;
  }
  const int h = scene.truth.height(), w = scene.truth.width();
  AnnotatorMask mask(h, w, level);
  std::vector<int> group(confusion.size(), -1);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!scene.core(r, c)) continue;
      int best = scene.region(r, c);
      if (jitter > 0.0) {
        // Additively weighted Voronoi: a border between cells a and b moves by grow[a] - grow[b].
        double best_d = 1e300;
        for (std::size_t k = 0; k < n; ++k) {
          const double d = std::hypot(c + 0.5 - scene.seeds[k].x, r + 0.5 - scene.seeds[k].y) - 2.0 * grow[k];
          if (d < best_d) best_d = d, best = static_cast<int>(k);
        }
      }
      const int cls = labels[best];
      if (cls == kBenign) continue;
      if (group[cls] < 0) group[cls] = mask.add_class(cls);
      mask.set(r, c, group[cls]);
    }
  return mask;
}

/// Polygons reproducing `mask` exactly: one rectangle per run of equal labels in a row.
inline AnnotationSet export_rater(const AnnotatorMask& mask, const std::string& image_id,
                                  const std::string& annotator_id) {
  AnnotationSet set{image_id, annotator_id, {}, mask.height(), mask.width(), mask.level()};
  std::int64_t seq = 0;
  for (int r = 0; r < mask.height(); ++r) {
    int c = 0;
    while (c < mask.width()) {
      const int g = mask.group_at(r, c);
      int e = c + 1;
      while (e < mask.width() && mask.group_at(r, e) == g) ++e;
      if (g >= 0) {
        PolygonRecord p;
        p.vertices = {{double(c), double(r)}, {double(e), double(r)}, {double(e), double(r + 1)}, {double(c), double(r + 1)}};
        const auto cls = mask.groups()[g];
        p.class_ids.assign(cls.begin(), cls.end());
        p.created_seq = seq++;
        set.polygons.push_back(std::move(p));
      }
      c = e;
    }
  }
  return set;
}

}  // namespace softseg
