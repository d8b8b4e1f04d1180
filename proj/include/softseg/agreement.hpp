#pragma once

// Inter-rater agreement: Fleiss' kappa on binarized image-level label usage,
// bootstrap confidence intervals, presence heatmaps, pixel-level agreement
// and the given-grade vs annotated-pattern confusion table.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "softseg/annotations.hpp"
#include "softseg/core.hpp"
#include "softseg/fusion.hpp"
#include "softseg/ontology.hpp"
#include "softseg/parallel.hpp"
#include "softseg/random.hpp"

namespace softseg {

// ---------------------------------------------------------------------------
// Fleiss' kappa

/// Fleiss' kappa over N items × k categories of vote counts with a common
/// rater count n >= 2. Returns nullopt when expected agreement is 1 (a single
/// category received every vote).
inline std::optional<double> fleiss_kappa(const std::vector<std::vector<int>>& items) {
  if (items.empty()) throw Error("fleiss_kappa: no items");
  const std::size_t k = items.front().size();
  std::int64_t n = -1;
  std::vector<std::int64_t> totals(k, 0);
  std::int64_t sum_sq = 0;
  for (const auto& row : items) {
    if (row.size() != k) throw Error("fleiss_kappa: items have different category counts");
    std::int64_t raters = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (row[j] < 0) throw Error("fleiss_kappa: negative count");
      raters += row[j];
      totals[j] += row[j];
      sum_sq += static_cast<std::int64_t>(row[j]) * row[j];
    }
    if (n < 0) n = raters;
    if (raters != n) throw Error("fleiss_kappa: unequal rater counts across items");
  }
  if (n < 2) throw Error("fleiss_kappa: need at least two raters per item");
  const auto big_n = static_cast<std::int64_t>(items.size());
  const std::int64_t votes = big_n * n;
  std::int64_t q = 0;
  for (auto t : totals) {
    if (t == votes) return std::nullopt;
    q += t * t;
  }
  // kappa = [(S - Nn) Nn - Q (n-1)] / [(n-1) ((Nn)^2 - Q)], evaluated in exact integers.
  const long double num = static_cast<long double>(sum_sq - votes) * votes - static_cast<long double>(q) * (n - 1);
  const long double den = static_cast<long double>(n - 1) * (static_cast<long double>(votes) * votes - q);
  return static_cast<double>(num / den);
}

/// Binary items given as yes-counts out of n raters.
inline std::optional<double> fleiss_kappa_binary(std::span<const int> yes_counts, int raters) {
  std::vector<std::vector<int>> items;
  items.reserve(yes_counts.size());
  for (int y : yes_counts) items.push_back({y, raters - y});
  return fleiss_kappa(items);
}

inline std::string landis_koch(std::optional<double> kappa) {
  if (!kappa) return "undefined";
  const double k = *kappa;
  if (k < 0.0) return "poor";
  if (k <= 0.20) return "slight";
  if (k <= 0.40) return "fair";
  if (k <= 0.60) return "moderate";
  if (k <= 0.80) return "substantial";
  return "almost perfect";
}

// ---------------------------------------------------------------------------
// Presence tables

struct ImagePresence {
  std::string image_id;
  std::string group;
  std::vector<std::string> annotators;
  std::vector<std::vector<std::uint8_t>> used;  // [annotator][label index]
};

/// Per (image, annotator, label): label used at least once. Benign is not a label.
struct PresenceTable {
  Level level = Level::explanation;
  std::vector<int> labels;  // ontology class ids, one per label index
  std::vector<std::string> label_names;
  std::vector<ImagePresence> images;

  int label_index(int class_id) const {
    const auto it = std::find(labels.begin(), labels.end(), class_id);
    if (it == labels.end()) throw Error("label " + std::to_string(class_id) + " absent from presence table");
    return static_cast<int>(it - labels.begin());
  }
  int yes_count(std::size_t image, int label_idx) const {
    int y = 0;
    for (const auto& row : images[image].used) y += row[label_idx] ? 1 : 0;
    return y;
  }
  int raters(std::size_t image) const { return static_cast<int>(images[image].used.size()); }
};

inline PresenceTable make_presence_table(const Ontology& ontology, Level level) {
  PresenceTable t;
  t.level = level;
  for (const auto& n : ontology.nodes(level)) {
    if (n.id == kBenign) continue;
    t.labels.push_back(n.id);
    t.label_names.push_back(n.short_name);
  }
  return t;
}

/// Adds one image from polygon annotations (after free-text resolution and
/// fill-forward); labels are remapped to the table's level.
inline void add_presence(PresenceTable& table, const ImageAnnotations& manifest, const Ontology& ontology,
                         const SynonymTable& synonyms, const std::string& group = {}) {
  ImagePresence img{manifest.image_id, group, {}, {}};
  for (const auto& set : manifest.annotators) {
    auto polygons = set.polygons;
    resolve_free_text(polygons, ontology, synonyms, set.level);
    const auto filled = fill_forward_labels(std::move(polygons));
    const auto map = ontology.ancestor_map(set.level, table.level);
    std::vector<std::uint8_t> used(table.labels.size(), 0);
    for (const auto& p : filled.polygons)
      for (int c : p.class_ids) {
        const int mapped = map.at(c);
        if (mapped == kBenign) continue;
        used[table.label_index(mapped)] = 1;
      }
    img.annotators.push_back(set.annotator_id);
    img.used.push_back(std::move(used));
  }
  table.images.push_back(std::move(img));
}

/// Adds one image from rasterized masks: a label counts as used if it covers at least one pixel.
inline void add_presence(PresenceTable& table, const std::string& image_id, std::span<const AnnotatorMask> masks,
                         const Ontology& ontology, const std::string& group = {}) {
  ImagePresence img{image_id, group, {}, {}};
  int a = 0;
  for (const auto& m : masks) {
    const auto remapped = m.remapped(ontology, table.level);
    std::vector<std::uint8_t> used(table.labels.size(), 0);
    const std::size_t n = static_cast<std::size_t>(m.height()) * m.width();
    std::vector<std::uint8_t> group_seen(remapped.groups().size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const int g = remapped.group_at(i);
      if (g >= 0) group_seen[g] = 1;
    }
    for (std::size_t g = 0; g < group_seen.size(); ++g)
      if (group_seen[g])
        for (int c : remapped.groups()[g])
          if (c != kBenign) used[table.label_index(c)] = 1;
    img.annotators.push_back("rater" + std::to_string(a++));
    img.used.push_back(std::move(used));
  }
  table.images.push_back(std::move(img));
}

// ---------------------------------------------------------------------------
// Kappa reports

struct KappaScope {
  std::optional<std::string> group;  // nullopt: all images
  static KappaScope global() { return {}; }
  static KappaScope of_group(std::string g) { return {std::move(g)}; }
  bool contains(const ImagePresence& img) const { return !group || img.group == *group; }
  std::string name() const { return group ? *group : "all"; }
};

struct KappaReport {
  std::string label;
  std::string group;
  std::optional<double> kappa;
  std::optional<double> ci_low;
  std::optional<double> ci_high;
  int resamples_used = 0;
  int resamples_degenerate = 0;
  std::string landis_koch;
};

namespace detail {
inline std::vector<std::size_t> images_in_scope(const PresenceTable& t, const KappaScope& scope) {
  std::vector<std::size_t> idx;
  int n = -1;
  for (std::size_t i = 0; i < t.images.size(); ++i) {
    if (!scope.contains(t.images[i])) continue;
    if (n < 0) n = t.raters(i);
    if (t.raters(i) != n)
      throw Error("presence table: image " + t.images[i].image_id + " has " + std::to_string(t.raters(i)) +
                  " raters, expected " + std::to_string(n));
    idx.push_back(i);
  }
  if (idx.empty()) throw Error("presence table: no images in scope " + scope.name());
  return idx;
}
}  // namespace detail

/// Binary Fleiss' kappa for one label over the images in scope.
inline KappaReport kappa_per_label(const PresenceTable& t, const KappaScope& scope, int label) {
  const int li = t.label_index(label);
  const auto idx = detail::images_in_scope(t, scope);
  std::vector<int> yes;
  for (auto i : idx) yes.push_back(t.yes_count(i, li));
  KappaReport r;
  r.label = t.label_names[li];
  r.group = scope.name();
  r.kappa = fleiss_kappa_binary(yes, t.raters(idx.front()));
  r.landis_koch = landis_koch(r.kappa);
  return r;
}

/// One kappa over all (image, label) decisions in scope.
inline std::optional<double> kappa_pooled(const PresenceTable& t, const KappaScope& scope) {
  const auto idx = detail::images_in_scope(t, scope);
  std::vector<int> yes;
  for (auto i : idx)
    for (std::size_t l = 0; l < t.labels.size(); ++l) yes.push_back(t.yes_count(i, static_cast<int>(l)));
  return fleiss_kappa_binary(yes, t.raters(idx.front()));
}

/// Mean of the defined per-label kappas in scope.
inline std::optional<double> kappa_label_average(const PresenceTable& t, const KappaScope& scope) {
  double sum = 0.0;
  int count = 0;
  for (int label : t.labels)
    if (auto k = kappa_per_label(t, scope, label).kappa) {
      sum += *k;
      ++count;
    }
  if (count == 0) return std::nullopt;
  return sum / count;
}

/// Linear-interpolated percentile of sorted values, q in [0, 1].
inline double percentile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error("percentile of empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

struct BootstrapInterval {
  double low = 0.0;
  double high = 0.0;
  int used = 0;
  int degenerate = 0;
};

/// Image-level percentile bootstrap (2.5 / 97.5) of a label's kappa. Each
/// resample draws from its own seed stream, so results ignore thread count.
inline BootstrapInterval bootstrap_ci(const PresenceTable& t, int label, int resamples = 10000,
                                      std::uint64_t seed = 0, const KappaScope& scope = KappaScope::global()) {
  const int li = t.label_index(label);
  const auto idx = detail::images_in_scope(t, scope);
  if (idx.size() < 2) throw Error("bootstrap_ci: need at least two images");
  if (resamples < 1) throw Error("bootstrap_ci: resamples must be positive");
  const int raters = t.raters(idx.front());
  std::vector<int> yes;
  for (auto i : idx) yes.push_back(t.yes_count(i, li));

  std::vector<std::optional<double>> kappas(resamples);
  parallel_for(static_cast<std::size_t>(resamples), [&](std::size_t r) {
    Rng rng(derive_seed(seed, r));
    std::vector<int> sample(yes.size());
    for (auto& s : sample) s = yes[rng.below(static_cast<std::uint64_t>(yes.size()))];
    kappas[r] = fleiss_kappa_binary(sample, raters);
  });
  std::vector<double> valid;
  BootstrapInterval out;
  for (const auto& k : kappas) {
    if (k)
      valid.push_back(*k);
    else
      ++out.degenerate;
  }
  if (valid.empty()) throw Error("bootstrap_ci: all resamples degenerate");
  std::sort(valid.begin(), valid.end());
  out.low = percentile_sorted(valid, 0.025);
  out.high = percentile_sorted(valid, 0.975);
  out.used = static_cast<int>(valid.size());
  return out;
}

/// kappa_per_label plus its bootstrap interval (skipped when kappa is undefined).
inline KappaReport kappa_report(const PresenceTable& t, const KappaScope& scope, int label, int resamples,
                                std::uint64_t seed) {
  auto r = kappa_per_label(t, scope, label);
  if (!r.kappa || resamples <= 0) return r;
  try {
    const auto ci = bootstrap_ci(t, label, resamples, seed, scope);
    r.ci_low = ci.low;
    r.ci_high = ci.high;
    r.resamples_used = ci.used;
    r.resamples_degenerate = ci.degenerate;
  } catch (const Error&) {
    // Fewer than two images or all resamples degenerate: report kappa without an interval.
  }
  return r;
}

inline nlohmann::json to_json(const KappaReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"label", r.label},       {"group", r.group},         {"kappa", opt(r.kappa)},
          {"ci_low", opt(r.ci_low)}, {"ci_high", opt(r.ci_high)}, {"resamples_used", r.resamples_used},
          {"band", r.landis_koch}};
}

inline std::string kappa_csv(const std::vector<KappaReport>& reports) {
  std::ostringstream out;
  out.precision(17);
  out << "label,group,kappa,ci_low,ci_high,resamples_used,band\n";
  auto opt = [&](const std::optional<double>& v) {
    if (v) out << *v;
    else out << "NA";
  };
  for (const auto& r : reports) {
    out << '"' << r.label << "\"," << r.group << ',';
    opt(r.kappa);
    out << ',';
    opt(r.ci_low);
    out << ',';
    opt(r.ci_high);
    out << ',' << r.resamples_used << ',' << r.landis_koch << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Heatmap: images with exactly k of n annotators marking each label.

struct PresenceHeatmap {
  int raters = 0;
  std::vector<std::string> label_names;
  std::vector<std::vector<int>> counts;  // [label][k], k = 0..raters
};

inline PresenceHeatmap presence_heatmap(const PresenceTable& t, const KappaScope& scope = KappaScope::global()) {
  const auto idx = detail::images_in_scope(t, scope);
  PresenceHeatmap h;
  h.raters = t.raters(idx.front());
  h.label_names = t.label_names;
  h.counts.assign(t.labels.size(), std::vector<int>(h.raters + 1, 0));
  for (auto i : idx)
    for (std::size_t l = 0; l < t.labels.size(); ++l) ++h.counts[l][t.yes_count(i, static_cast<int>(l))];
  return h;
}

// ---------------------------------------------------------------------------
// Pixel-level agreement from quantized soft labels.

struct PixelAgreementStats {
  int raters = 0;
  std::uint64_t foreground_pixels = 0;
  std::vector<std::uint64_t> class_pixels;         // pixels with >= 1 vote for the class
  std::vector<std::vector<double>> class_share;    // [class][k-1]: share with exactly k votes
  double unique_majority_share = 0.0;              // of foreground
  std::vector<double> majority_votes_share;        // [k-1]: foreground share whose unique majority has k votes
};

inline PixelAgreementStats pixel_agreement_stats(std::span<const SoftLabelMap> maps, double quant_tol = 1e-9) {
  if (maps.empty()) throw Error("pixel_agreement_stats: no maps");
  PixelAgreementStats s;
  s.raters = maps.front().annotator_count;
  const int classes = maps.front().classes();
  if (s.raters < 1) throw Error("pixel_agreement_stats: annotator count unknown");
  std::vector<std::vector<std::uint64_t>> counts(classes, std::vector<std::uint64_t>(s.raters, 0));
  std::vector<std::uint64_t> majority(s.raters, 0);
  std::uint64_t unique = 0;
  for (const auto& m : maps) {
    if (m.annotator_count != s.raters || m.classes() != classes)
      throw Error("pixel_agreement_stats: maps differ in rater or class count");
    for (std::size_t i = 0; i < m.probs.pixels(); ++i) {
      if (!m.foreground[i]) continue;
      ++s.foreground_pixels;
      const auto y = m.probs.pixel(i);
      int best_votes = -1, best_count = 0;
      for (int c = 0; c < classes; ++c) {
        const double v = y[c] * s.raters;
        const double rounded = std::round(v);
        if (std::abs(v - rounded) > quant_tol * s.raters)
          throw Error("pixel_agreement_stats: probabilities are not multiples of 1/K");
        const int votes = static_cast<int>(rounded);
        if (votes > 0) ++counts[c][votes - 1];
        if (votes > best_votes) {
          best_votes = votes;
          best_count = 1;
        } else if (votes == best_votes) {
          ++best_count;
        }
      }
      if (best_count == 1 && best_votes > 0) {
        ++unique;
        ++majority[best_votes - 1];
      }
    }
  }
  s.class_pixels.assign(classes, 0);
  s.class_share.assign(classes, std::vector<double>(s.raters, 0.0));
  for (int c = 0; c < classes; ++c) {
    for (auto v : counts[c]) s.class_pixels[c] += v;
    if (s.class_pixels[c] == 0) continue;
    for (int k = 0; k < s.raters; ++k)
      s.class_share[c][k] = static_cast<double>(counts[c][k]) / static_cast<double>(s.class_pixels[c]);
  }
  if (s.foreground_pixels) {
    s.unique_majority_share = static_cast<double>(unique) / static_cast<double>(s.foreground_pixels);
    for (auto v : majority)
      s.majority_votes_share.push_back(static_cast<double>(v) / static_cast<double>(s.foreground_pixels));
  } else {
    s.majority_votes_share.assign(s.raters, 0.0);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Given Gleason score vs annotated patterns.

struct GleasonScore {
  int primary = 0;    // pattern-level class id
  int secondary = 0;
  std::string label(const Ontology& ontology) const {
    return ontology.node(Level::pattern, primary).short_name + "+" + ontology.node(Level::pattern, secondary).short_name;
  }
};

struct GradeConfusion {
  std::vector<std::string> row_labels;  // given scores
  std::vector<std::string> col_labels;  // annotated patterns (non-benign)
  std::vector<int> col_ids;
  std::vector<std::vector<int>> counts;
  std::vector<std::string> skipped;     // images without grade metadata
};

/// Patterns used by any annotator of an image (each counted once).
inline std::set<int> annotated_patterns(const ImageAnnotations& manifest, const Ontology& ontology,
                                        const SynonymTable& synonyms) {
  std::set<int> out;
  for (const auto& set : manifest.annotators) {
    auto polygons = set.polygons;
    resolve_free_text(polygons, ontology, synonyms, set.level);
    const auto filled = fill_forward_labels(std::move(polygons));
    const auto map = ontology.ancestor_map(set.level, Level::pattern);
    for (const auto& p : filled.polygons)
      for (int c : p.class_ids)
        if (map.at(c) != kBenign) out.insert(map.at(c));
  }
  return out;
}

inline GradeConfusion grade_annotation_confusion(const std::map<std::string, GleasonScore>& given,
                                                 const std::map<std::string, std::set<int>>& annotated,
                                                 const Ontology& ontology) {
  GradeConfusion g;
  for (const auto& n : ontology.nodes(Level::pattern)) {
    if (n.id == kBenign) continue;
    g.col_ids.push_back(n.id);
    g.col_labels.push_back(n.short_name);
  }
  std::map<std::pair<int, int>, std::vector<int>> rows;
  for (const auto& [image, patterns] : annotated) {
    const auto it = given.find(image);
    if (it == given.end()) {
      g.skipped.push_back(image);
      continue;
    }
    auto& row = rows[{it->second.primary, it->second.secondary}];
    row.resize(g.col_ids.size(), 0);
    for (int p : patterns) {
      const auto col = std::find(g.col_ids.begin(), g.col_ids.end(), p);
      if (col != g.col_ids.end()) ++row[col - g.col_ids.begin()];
    }
  }
  for (const auto& [key, row] : rows) {
    g.row_labels.push_back(GleasonScore{key.first, key.second}.label(ontology));
    g.counts.push_back(row);
  }
  return g;
}

}  // namespace softseg
