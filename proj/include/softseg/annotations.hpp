#pragma once

// Raw polygon annotations: free-text normalization, fill-forward of missing
// explanations, multi-label duplication and painter-order rasterization into
// per-annotator label masks.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "softseg/core.hpp"
#include "softseg/ontology.hpp"

namespace softseg {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

struct PolygonRecord {
  std::vector<Point> vertices;
  std::optional<std::string> raw_label;
  std::vector<int> class_ids;
  std::int64_t created_seq = 0;
  int source_grade = 0;  // pattern-level id of the single-grade image
  int group = -1;        // shared by copies made from one multi-label polygon
  bool unmapped = false; // free text present but not resolvable
};

struct AnnotationSet {
  std::string image_id;
  std::string annotator_id;
  std::vector<PolygonRecord> polygons;
  int height = 0;
  int width = 0;
  Level level = Level::sub_explanation;
};

/// Per-pixel weighted class votes of one annotator. Each annotated pixel points
/// at a label group; every class in the group carries weight 1/|group|.
class AnnotatorMask {
 public:
  AnnotatorMask() = default;
  AnnotatorMask(int height, int width, Level level)
      : entries_(height, width, -1), level_(level) {}

  int height() const noexcept { return entries_.height(); }
  int width() const noexcept { return entries_.width(); }
  Level level() const noexcept { return level_; }

  /// Registers (or reuses) a class group and returns its index.
  int add_group(std::vector<int> classes) {
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    if (classes.empty()) throw Error("AnnotatorMask: empty label group");
    for (std::size_t g = 0; g < groups_.size(); ++g)
      if (groups_[g] == classes) return static_cast<int>(g);
    groups_.push_back(std::move(classes));
    return static_cast<int>(groups_.size() - 1);
  }
  int add_class(int cls) { return add_group({cls}); }

  void set(int row, int col, int group) { entries_(row, col) = group; }
  void clear(int row, int col) { entries_(row, col) = -1; }

  bool annotated(int row, int col) const { return entries_(row, col) >= 0; }
  int group_at(int row, int col) const { return entries_(row, col); }
  int group_at(std::size_t i) const { return entries_[i]; }

  /// Classes voted at a pixel (empty when unannotated); each has weight 1/size.
  std::span<const int> classes_at(int row, int col) const {
    const int g = entries_(row, col);
    if (g < 0) return {};
    return groups_[g];
  }
  std::span<const int> classes_at(std::size_t i) const {
    const int g = entries_[i];
    if (g < 0) return {};
    return groups_[g];
  }

  double weight(int row, int col, int cls) const {
    const auto c = classes_at(row, col);
    if (std::find(c.begin(), c.end(), cls) == c.end()) return 0.0;
    return 1.0 / static_cast<double>(c.size());
  }

  const std::vector<std::vector<int>>& groups() const noexcept { return groups_; }
  const Grid<std::int32_t>& entries() const noexcept { return entries_; }

  /// Sole class per pixel; -1 when unannotated, -2 for a split vote.
  LabelGrid hard_labels() const {
    LabelGrid out(height(), width(), -1);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const auto c = classes_at(i);
      out[i] = c.empty() ? -1 : (c.size() == 1 ? c[0] : -2);
    }
    return out;
  }

  /// Same votes expressed one level up.
  AnnotatorMask remapped(const Ontology& ontology, Level to) const {
    if (to == level_) return *this;
    const auto map = ontology.ancestor_map(level_, to);
    AnnotatorMask out(height(), width(), to);
    // A group {a,b} of children can collapse onto one parent; keep multiplicity
    // by expanding weights through the group table.
    std::vector<std::vector<int>> parent_groups(groups_.size());
    for (std::size_t g = 0; g < groups_.size(); ++g)
      for (int c : groups_[g]) parent_groups[g].push_back(map.at(c));
    out.weighted_groups_.resize(groups_.size());
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      std::map<int, double> w;
      for (int c : parent_groups[g]) w[c] += 1.0 / static_cast<double>(parent_groups[g].size());
      out.weighted_groups_[g] = {w.begin(), w.end()};
      std::vector<int> cls;
      for (const auto& [c, _] : w) cls.push_back(c);
      out.groups_.push_back(std::move(cls));
    }
    out.entries_ = entries_;
    return out;
  }

  /// (class, weight) votes at pixel i; weights sum to 1 on annotated pixels.
  std::vector<std::pair<int, double>> votes(std::size_t i) const {
    const int g = entries_[i];
    if (g < 0) return {};
    if (!weighted_groups_.empty()) return weighted_groups_[g];
    std::vector<std::pair<int, double>> out;
    const double w = 1.0 / static_cast<double>(groups_[g].size());
    for (int c : groups_[g]) out.emplace_back(c, w);
    return out;
  }

  bool operator==(const AnnotatorMask&) const = default;

 private:
  Grid<std::int32_t> entries_;
  std::vector<std::vector<int>> groups_;
  std::vector<std::vector<std::pair<int, double>>> weighted_groups_;
  Level level_ = Level::sub_explanation;
};

// ---------------------------------------------------------------------------
// Free-text normalization

inline std::string normalize_text(std::string_view raw) {
  std::string out;
  bool space = false;
  for (char ch : raw) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

/// Curated raw-text -> class mapping. Lines are `text<TAB>target`, where target
/// is a numeric id or a short name/name at the table's level; '#' starts a comment.
class SynonymTable {
 public:
  SynonymTable() = default;

  void add(std::string_view text, int id) { entries_[normalize_text(text)] = id; }

  static SynonymTable parse(std::istream& in, const Ontology& ontology,
                            Level level = Level::sub_explanation) {
    SynonymTable table;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw Error("synonym table line " + std::to_string(line_no) + ": expected text<TAB>target");
      const std::string text = line.substr(0, tab);
      std::string target = line.substr(tab + 1);
      while (!target.empty() && std::isspace(static_cast<unsigned char>(target.back()))) target.pop_back();
      // Targets name finest-level classes (or `level` classes); ids are lifted to `level`.
      const Level finest = ontology.finest_level();
      int id = -1;
      if (!target.empty() && std::all_of(target.begin(), target.end(),
                                         [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
        id = std::stoi(target);
        ontology.node(level, id);
      } else if (auto found = ontology.find(finest, target)) {
        id = ontology.ancestor(finest, *found, level);
      } else if (auto coarse = ontology.find(level, target)) {
        id = *coarse;
      } else {
        throw Error("synonym table line " + std::to_string(line_no) + ": unknown target '" + target + "'");
      }
      table.add(text, id);
    }
    return table;
  }

  static SynonymTable load(const std::filesystem::path& path, const Ontology& ontology,
                           Level level = Level::sub_explanation) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open synonym table " + path.string());
    return parse(in, ontology, level);
  }

  std::optional<int> lookup(std::string_view raw) const {
    const auto it = entries_.find(normalize_text(raw));
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::unordered_map<std::string, int> entries_;
};

/// Maps free text to a class id at `level`: ontology names first (case and
/// whitespace insensitive), then the synonym table. nullopt marks "unmapped".
inline std::optional<int> normalize_free_text(std::string_view raw, const Ontology& ontology,
                                              const SynonymTable& synonyms,
                                              Level level = Level::sub_explanation) {
  const std::string key = normalize_text(raw);
  if (key.empty()) return std::nullopt;
  for (const auto& n : ontology.nodes(level))
    if (normalize_text(n.name) == key || normalize_text(n.short_name) == key) return n.id;
  return synonyms.lookup(key);
}

/// Resolves raw_label on every polygon; unresolved ones are flagged `unmapped`.
inline int resolve_free_text(std::vector<PolygonRecord>& polygons, const Ontology& ontology,
                             const SynonymTable& synonyms, Level level = Level::sub_explanation) {
  int unmapped = 0;
  for (auto& p : polygons) {
    if (!p.raw_label || normalize_text(*p.raw_label).empty()) continue;
    if (auto id = normalize_free_text(*p.raw_label, ontology, synonyms, level)) {
      if (std::find(p.class_ids.begin(), p.class_ids.end(), *id) == p.class_ids.end())
        p.class_ids.push_back(*id);
      p.unmapped = false;
    } else if (p.class_ids.empty()) {
      p.unmapped = true;
      ++unmapped;
    }
  }
  return unmapped;
}

// ---------------------------------------------------------------------------
// Cleaning rules

struct FillForwardResult {
  std::vector<PolygonRecord> polygons;  // sorted by created_seq
  int dropped = 0;                      // trailing unlabeled polygons
  int seq_ties = 0;                     // duplicate created_seq values seen
};

/// Unlabeled polygons inherit the labels of the next labeled polygon in
/// creation order; unlabeled polygons without a successor are dropped.
inline FillForwardResult fill_forward_labels(std::vector<PolygonRecord> polygons) {
  FillForwardResult result;
  std::stable_sort(polygons.begin(), polygons.end(),
                   [](const PolygonRecord& a, const PolygonRecord& b) { return a.created_seq < b.created_seq; });
  for (std::size_t i = 1; i < polygons.size(); ++i)
    if (polygons[i].created_seq == polygons[i - 1].created_seq) ++result.seq_ties;

  const std::vector<int>* next_labels = nullptr;
  std::vector<bool> keep(polygons.size(), true);
  for (std::size_t i = polygons.size(); i-- > 0;) {
    auto& p = polygons[i];
    if (p.unmapped) continue;
    if (!p.class_ids.empty()) {
      next_labels = &p.class_ids;
    } else if (next_labels) {
      p.class_ids = *next_labels;
    } else {
      keep[i] = false;
      ++result.dropped;
    }
  }
  for (std::size_t i = 0; i < polygons.size(); ++i)
    if (keep[i]) result.polygons.push_back(std::move(polygons[i]));
  return result;
}

/// One copy per class id; copies share created_seq and a fresh group id.
inline std::vector<PolygonRecord> duplicate_multilabel(const std::vector<PolygonRecord>& polygons) {
  std::vector<PolygonRecord> out;
  int next_group = 0;
  for (const auto& p : polygons) {
    if (p.class_ids.empty() && !p.unmapped)
      throw Error("duplicate_multilabel: polygon " + std::to_string(p.created_seq) + " has no label");
    const int group = next_group++;
    if (p.unmapped) {
      PolygonRecord copy = p;
      copy.group = group;
      out.push_back(std::move(copy));
      continue;
    }
    for (int id : p.class_ids) {
      PolygonRecord copy = p;
      copy.class_ids = {id};
      copy.group = group;
      out.push_back(std::move(copy));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rasterization

/// Even-odd coverage of pixel centers (col + 0.5, row + 0.5).
inline Mask polygon_coverage(std::span<const Point> vertices, int height, int width) {
  Mask out(height, width, 0);
  const std::size_t n = vertices.size();
  if (n < 3) return out;
  std::vector<double> xs;
  for (int row = 0; row < height; ++row) {
    const double y = row + 0.5;
    xs.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const Point a = vertices[i];
      const Point b = vertices[(i + 1) % n];
      if ((a.y <= y && y < b.y) || (b.y <= y && y < a.y)) {
        const double t = (y - a.y) / (b.y - a.y);
        xs.push_back(a.x + t * (b.x - a.x));
      }
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      // Pixel centers with x0 <= c + 0.5 < x1.
      const int c0 = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5)));
      const int c1 = std::min(width, static_cast<int>(std::ceil(xs[k + 1] - 0.5)));
      for (int c = c0; c < c1; ++c) out(row, c) = 1;
    }
  }
  return out;
}

struct RasterizeResult {
  AnnotatorMask mask;
  std::vector<std::string> warnings;
};

/// Paints polygons in (source_grade, created_seq) order; later paint
/// overwrites earlier paint, group-linked copies paint together with weight
/// 1/k per class.
inline RasterizeResult rasterize(const AnnotationSet& set, const Ontology& ontology) {
  if (set.height <= 0 || set.width <= 0) throw Error("rasterize: image size unknown for " + set.image_id);
  RasterizeResult result{AnnotatorMask(set.height, set.width, set.level), {}};
  const int classes = ontology.class_count(set.level);

  std::vector<std::size_t> order(set.polygons.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = set.polygons[a];
    const auto& pb = set.polygons[b];
    if (pa.source_grade != pb.source_grade) return pa.source_grade < pb.source_grade;
    if (pa.created_seq != pb.created_seq) return pa.created_seq < pb.created_seq;
    return a < b;
  });

  std::size_t i = 0;
  while (i < order.size()) {
    const auto& first = set.polygons[order[i]];
    std::vector<int> classes_in_group;
    std::size_t j = i;
    while (j < order.size()) {
      const auto& p = set.polygons[order[j]];
      const bool same_group = first.group >= 0 ? p.group == first.group : j == i;
      if (!same_group || p.created_seq != first.created_seq || p.source_grade != first.source_grade) break;
      if (p.unmapped)
        throw Error("rasterize: unmapped label '" + p.raw_label.value_or("") + "' in " + set.image_id +
                    "/" + set.annotator_id);
      if (p.class_ids.empty())
        throw Error("rasterize: unlabeled polygon " + std::to_string(p.created_seq) + " in " + set.image_id);
      for (int c : p.class_ids) {
        if (c < 0 || c >= classes)
          throw Error("rasterize: unmapped class id " + std::to_string(c) + " in " + set.image_id);
        classes_in_group.push_back(c);
      }
      ++j;
    }
    i = j;

    if (first.vertices.size() < 3) {
      result.warnings.push_back("polygon " + std::to_string(first.created_seq) + " has fewer than 3 vertices; skipped");
      continue;
    }
    double xmin = first.vertices[0].x, xmax = xmin, ymin = first.vertices[0].y, ymax = ymin;
    for (const auto& v : first.vertices) {
      xmin = std::min(xmin, v.x), xmax = std::max(xmax, v.x);
      ymin = std::min(ymin, v.y), ymax = std::max(ymax, v.y);
    }
    if (xmax <= 0.0 || ymax <= 0.0 || xmin >= set.width || ymin >= set.height) {
      result.warnings.push_back("polygon " + std::to_string(first.created_seq) + " lies outside " +
                                set.image_id + "; skipped");
      continue;
    }
    std::vector<Point> clamped = first.vertices;
    for (auto& v : clamped) {
      v.x = std::clamp(v.x, 0.0, static_cast<double>(set.width));
      v.y = std::clamp(v.y, 0.0, static_cast<double>(set.height));
    }
    const Mask cover = polygon_coverage(clamped, set.height, set.width);
    const int group = result.mask.add_group(classes_in_group);
    for (int r = 0; r < set.height; ++r)
      for (int c = 0; c < set.width; ++c)
        if (cover(r, c)) result.mask.set(r, c, group);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Annotation manifest (one file per image)

struct ImageAnnotations {
  std::string image_id;
  std::string image_path;
  int height = 0;
  int width = 0;
  Level level = Level::sub_explanation;
  std::vector<AnnotationSet> annotators;
};

inline ImageAnnotations parse_annotation_manifest(const nlohmann::json& doc) {
  try {
    ImageAnnotations m;
    m.image_id = doc.at("image_id").get<std::string>();
    m.image_path = doc.value("image_path", std::string{});
    const auto& size = doc.at("size");
    m.height = size.at(0).get<int>();
    m.width = size.at(1).get<int>();
    if (doc.contains("level")) m.level = parse_level(doc.at("level").get<std::string>());
    std::map<std::string, int> seen;
    for (const auto& ja : doc.at("annotators")) {
      AnnotationSet set;
      set.image_id = m.image_id;
      set.annotator_id = ja.at("annotator_id").get<std::string>();
      if (seen[set.annotator_id]++)
        throw Error("manifest " + m.image_id + ": duplicate annotator " + set.annotator_id);
      set.height = m.height;
      set.width = m.width;
      set.level = m.level;
      for (const auto& jp : ja.at("polygons")) {
        PolygonRecord p;
        for (const auto& v : jp.at("vertices")) p.vertices.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
        if (jp.contains("labels"))
          for (const auto& l : jp.at("labels")) p.class_ids.push_back(l.get<int>());
        if (jp.contains("raw_label") && !jp.at("raw_label").is_null())
          p.raw_label = jp.at("raw_label").get<std::string>();
        p.created_seq = jp.at("created_seq").get<std::int64_t>();
        p.source_grade = jp.value("source_grade", 0);
        set.polygons.push_back(std::move(p));
      }
      m.annotators.push_back(std::move(set));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("annotation manifest: ") + e.what());
  }
}

inline ImageAnnotations load_annotation_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open annotation manifest " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error("annotation manifest " + path.string() + ": " + e.what());
  }
  return parse_annotation_manifest(doc);
}

inline nlohmann::json to_json(const ImageAnnotations& m) {
  nlohmann::json doc;
  doc["image_id"] = m.image_id;
  doc["image_path"] = m.image_path;
  doc["size"] = {m.height, m.width};
  doc["level"] = std::string(to_string(m.level));
  doc["annotators"] = nlohmann::json::array();
  for (const auto& set : m.annotators) {
    nlohmann::json ja;
    ja["annotator_id"] = set.annotator_id;
    ja["polygons"] = nlohmann::json::array();
    for (const auto& p : set.polygons) {
      nlohmann::json jp;
      jp["vertices"] = nlohmann::json::array();
      for (const auto& v : p.vertices) jp["vertices"].push_back({v.x, v.y});
      jp["labels"] = p.class_ids;
      jp["raw_label"] = p.raw_label ? nlohmann::json(*p.raw_label) : nlohmann::json(nullptr);
      jp["created_seq"] = p.created_seq;
      jp["source_grade"] = p.source_grade;
      ja["polygons"].push_back(std::move(jp));
    }
    doc["annotators"].push_back(std::move(ja));
  }
  return doc;
}

struct CleanedAnnotations {
  std::vector<AnnotatorMask> masks;  // one per annotator, manifest order
  std::vector<std::string> annotator_ids;
  int dropped_polygons = 0;
  std::vector<std::string> warnings;
};

/// Full cleaning pipeline for one image: free text, fill-forward, duplication, rasterization.
inline CleanedAnnotations clean_and_rasterize(const ImageAnnotations& manifest, const Ontology& ontology,
                                              const SynonymTable& synonyms) {
  CleanedAnnotations out;
  for (const auto& set : manifest.annotators) {
    AnnotationSet work = set;
    resolve_free_text(work.polygons, ontology, synonyms, work.level);
    auto filled = fill_forward_labels(std::move(work.polygons));
    out.dropped_polygons += filled.dropped;
    if (filled.dropped)
      out.warnings.push_back(set.image_id + "/" + set.annotator_id + ": dropped " +
                             std::to_string(filled.dropped) + " trailing unlabeled polygon(s)");
    if (filled.seq_ties)
      out.warnings.push_back(set.image_id + "/" + set.annotator_id + ": " + std::to_string(filled.seq_ties) +
                             " created_seq tie(s), broken by polygon index");
    work.polygons = duplicate_multilabel(filled.polygons);
    auto raster = rasterize(work, ontology);
    for (auto& w : raster.warnings) out.warnings.push_back(std::move(w));
    out.masks.push_back(std::move(raster.mask));
    out.annotator_ids.push_back(set.annotator_id);
  }
  return out;
}

}  // namespace softseg
