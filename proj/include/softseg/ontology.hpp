#pragma once

// Three-level explanatory label hierarchy (patterns -> explanations ->
// sub-explanations) and probability-conserving upward remapping.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "softseg/core.hpp"

#ifndef SOFTSEG_DATA_DIR
#define SOFTSEG_DATA_DIR "data"
#endif

namespace softseg {

enum class Level : std::uint8_t { pattern = 0, explanation = 1, sub_explanation = 2 };

inline constexpr std::array<std::string_view, 3> kLevelNames = {"pattern", "explanation",
                                                                 "sub_explanation"};

inline std::string_view to_string(Level level) { return kLevelNames.at(static_cast<int>(level)); }

inline Level parse_level(std::string_view text) {
  for (int i = 0; i < 3; ++i)
    if (kLevelNames[i] == text) return static_cast<Level>(i);
  if (text == "patterns") return Level::pattern;
  if (text == "explanations") return Level::explanation;
  if (text == "sub-explanation" || text == "sub_explanations" || text == "sub-explanations")
    return Level::sub_explanation;
  throw Error("unknown ontology level '" + std::string(text) + "'");
}

inline constexpr int kBenign = 0;

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

struct OntologyNode {
  int id = 0;
  std::string name;
  std::string short_name;
  Level level = Level::pattern;
  std::optional<int> parent_id;
  Rgb display_color;
};

class Ontology {
 public:
  Ontology() = default;

  /// Validates and builds from per-level node lists (index 0 = pattern level).
  explicit Ontology(std::vector<std::vector<OntologyNode>> levels) : levels_(std::move(levels)) {
    validate();
  }

  static Ontology from_json(const nlohmann::json& doc);
  static Ontology load(const std::filesystem::path& path);
  static std::filesystem::path default_path() {
    return std::filesystem::path(SOFTSEG_DATA_DIR) / "gleason_ontology.json";
  }
  static Ontology load_default() { return load(default_path()); }

  nlohmann::json to_json() const;

  int level_count() const noexcept { return static_cast<int>(levels_.size()); }
  Level finest_level() const noexcept { return static_cast<Level>(level_count() - 1); }
  bool has_level(Level level) const noexcept { return static_cast<int>(level) < level_count(); }

  int class_count(Level level) const { return static_cast<int>(nodes(level).size()); }
  std::vector<int> level_sizes() const {
    std::vector<int> out;
    for (const auto& l : levels_) out.push_back(static_cast<int>(l.size()));
    return out;
  }

  const std::vector<OntologyNode>& nodes(Level level) const {
    if (!has_level(level)) throw Error("ontology has no level '" + std::string(to_string(level)) + "'");
    return levels_[static_cast<int>(level)];
  }
  const OntologyNode& node(Level level, int id) const {
    const auto& n = nodes(level);
    if (id < 0 || id >= static_cast<int>(n.size()))
      throw Error("class id " + std::to_string(id) + " not in level " + std::string(to_string(level)));
    return n[id];
  }

  /// φ: child index -> parent index for a non-pattern level.
  const std::vector<int>& parent_map(Level level) const {
    if (level == Level::pattern) throw Error("pattern level has no parent map");
    nodes(level);
    return parents_[static_cast<int>(level)];
  }

  /// Composite child -> ancestor index map from `from` up to `to` (identity when equal).
  std::vector<int> ancestor_map(Level from, Level to) const {
    if (static_cast<int>(to) > static_cast<int>(from))
      throw Error("level mismatch: " + std::string(to_string(to)) + " is not above " +
                  std::string(to_string(from)));
    std::vector<int> map(class_count(from));
    for (int i = 0; i < static_cast<int>(map.size()); ++i) map[i] = i;
    for (int l = static_cast<int>(from); l > static_cast<int>(to); --l) {
      const auto& phi = parents_[l];
      for (int& m : map) m = phi[m];
    }
    return map;
  }

  int ancestor(Level from, int id, Level to) const { return ancestor_map(from, to).at(id); }

  /// Lookup by exact short name or name; nullopt if absent.
  std::optional<int> find(Level level, std::string_view text) const {
    for (const auto& n : nodes(level))
      if (n.short_name == text || n.name == text) return n.id;
    return std::nullopt;
  }

 private:
  void validate();

  std::vector<std::vector<OntologyNode>> levels_;
  std::vector<std::vector<int>> parents_;
};

inline void Ontology::validate() {
  if (levels_.empty() || levels_.size() > 3) throw Error("ontology: expected 1 to 3 levels");
  parents_.assign(levels_.size(), {});
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    auto& level_nodes = levels_[l];
    const auto level = static_cast<Level>(l);
    const std::string lname(to_string(level));
    if (level_nodes.empty()) throw Error("ontology: level " + lname + " has no classes");
    // Place nodes at their id; reject duplicates and gaps.
    std::vector<std::optional<OntologyNode>> slots(level_nodes.size());
    for (auto& n : level_nodes) {
      if (n.level != level)
        throw Error("ontology: node " + std::to_string(n.id) + " listed under level " + lname);
      if (n.id < 0 || n.id >= static_cast<int>(slots.size()))
        throw Error("ontology: non-dense id " + std::to_string(n.id) + " in level " + lname);
      if (slots[n.id]) throw Error("ontology: duplicate id " + std::to_string(n.id) + " in level " + lname);
      slots[n.id] = n;
    }
    for (std::size_t i = 0; i < slots.size(); ++i) level_nodes[i] = *slots[i];

    if (l == 0) {
      for (const auto& n : level_nodes)
        if (n.parent_id)
          throw Error("ontology: orphan node " + std::to_string(n.id) +
                      " (pattern-level nodes have no parent)");
      continue;
    }
    auto& phi = parents_[l];
    phi.resize(level_nodes.size());
    const int parent_count = static_cast<int>(levels_[l - 1].size());
    for (const auto& n : level_nodes) {
      if (!n.parent_id || *n.parent_id < 0 || *n.parent_id >= parent_count)
        throw Error("ontology: orphan node " + std::to_string(n.id) + " in level " + lname);
      phi[n.id] = *n.parent_id;
    }
    if (phi[kBenign] != kBenign)
      throw Error("ontology: benign class of level " + lname + " must have benign parent");
  }
}

namespace detail {
inline Rgb parse_color(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw Error("ontology: color must be [r,g,b]");
  auto c = [&](int i) {
    const int v = j.at(i).get<int>();
    if (v < 0 || v > 255) throw Error("ontology: color component out of range");
    return static_cast<std::uint8_t>(v);
  };
  return {c(0), c(1), c(2)};
}
}  // namespace detail

inline Ontology Ontology::from_json(const nlohmann::json& doc) {
  try {
    if (!doc.is_object() || !doc.contains("levels")) throw Error("ontology: missing 'levels'");
    if (doc.value("version", 0) != 1)
      throw Error("ontology: unsupported version " + doc.value("version", nlohmann::json(0)).dump());
    std::vector<std::vector<OntologyNode>> levels;
    const auto& jl = doc.at("levels");
    if (!jl.is_array()) throw Error("ontology: 'levels' must be an array");
    for (std::size_t l = 0; l < jl.size(); ++l) {
      if (l >= 3) throw Error("ontology: at most three levels");
      const auto level = static_cast<Level>(l);
      const auto name = jl[l].at("name").get<std::string>();
      if (parse_level(name) != level)
        throw Error("ontology: level " + std::to_string(l) + " must be '" +
                    std::string(to_string(level)) + "', got '" + name + "'");
      std::vector<OntologyNode> nodes;
      for (const auto& jc : jl[l].at("classes")) {
        OntologyNode n;
        n.id = jc.at("id").get<int>();
        n.name = jc.at("name").get<std::string>();
        n.short_name = jc.value("short_name", n.name);
        n.level = level;
        if (jc.contains("parent_id") && !jc.at("parent_id").is_null()) {
          n.parent_id = jc.at("parent_id").get<int>();
          if (jc.contains("parent_level") && l > 0 &&
              parse_level(jc.at("parent_level").get<std::string>()) != static_cast<Level>(l - 1))
            throw Error("ontology: orphan node " + std::to_string(n.id) + " in level " + name +
                        " (parent not exactly one level up)");
        }
        if (jc.contains("color")) n.display_color = detail::parse_color(jc.at("color"));
        nodes.push_back(std::move(n));
      }
      levels.push_back(std::move(nodes));
    }
    return Ontology(std::move(levels));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("ontology: schema violation: ") + e.what());
  }
}

inline Ontology Ontology::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("ontology: cannot open " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error("ontology: parse error in " + path.string() + ": " + e.what());
  }
  return from_json(doc);
}

inline nlohmann::json Ontology::to_json() const {
  nlohmann::json doc;
  doc["version"] = 1;
  doc["levels"] = nlohmann::json::array();
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    nlohmann::json jl;
    jl["name"] = std::string(to_string(static_cast<Level>(l)));
    jl["classes"] = nlohmann::json::array();
    for (const auto& n : levels_[l]) {
      nlohmann::json jc{{"id", n.id},
                        {"name", n.name},
                        {"short_name", n.short_name},
                        {"color", {n.display_color.r, n.display_color.g, n.display_color.b}}};
      if (n.parent_id) jc["parent_id"] = *n.parent_id;
      jl["classes"].push_back(std::move(jc));
    }
    doc["levels"].push_back(std::move(jl));
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Upward remapping: out_k = sum over children i with ancestor(i) = k of in_i.

/// Remaps one distribution with a precomputed child -> ancestor map.
inline void remap_distribution(std::span<const double> in, std::span<const int> map,
                               std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < in.size(); ++i) out[map[i]] += in[i];
}

/// Remaps a whole per-pixel map from `from` to the strict ancestor level `to`.
inline DistributionMap remap_up(const DistributionMap& dist, const Ontology& ontology, Level from,
                                Level to) {
  if (static_cast<int>(to) >= static_cast<int>(from))
    throw Error("remap_up: target level " + std::string(to_string(to)) + " is not above " +
                std::string(to_string(from)));
  if (dist.classes() != ontology.class_count(from))
    throw Error("remap_up: distribution has " + std::to_string(dist.classes()) +
                " classes, level " + std::string(to_string(from)) + " has " +
                std::to_string(ontology.class_count(from)));
  const auto map = ontology.ancestor_map(from, to);
  DistributionMap out(dist.height(), dist.width(), ontology.class_count(to));
  for (std::size_t i = 0; i < dist.pixels(); ++i) remap_distribution(dist.pixel(i), map, out.pixel(i));
  return out;
}

/// Remaps a single distribution vector.
inline std::vector<double> remap_up(std::span<const double> dist, const Ontology& ontology,
                                    Level from, Level to) {
  if (static_cast<int>(to) >= static_cast<int>(from))
    throw Error("remap_up: target level is not above source level");
  if (static_cast<int>(dist.size()) != ontology.class_count(from))
    throw Error("remap_up: distribution size does not match level");
  const auto map = ontology.ancestor_map(from, to);
  std::vector<double> out(ontology.class_count(to), 0.0);
  remap_distribution(dist, map, out);
  return out;
}

}  // namespace softseg
