#pragma once

// Train/validation/test assignment that keeps the class pixel distributions of
// the three splits close in L1 distance.

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "softseg/core.hpp"
#include "softseg/fusion.hpp"
#include "softseg/parallel.hpp"
#include "softseg/random.hpp"

namespace softseg {

enum class SplitTag : std::uint8_t { train = 0, val = 1, test = 2 };

inline constexpr std::array<std::string_view, 3> kSplitNames = {"train", "val", "test"};
inline std::string_view to_string(SplitTag t) { return kSplitNames[static_cast<int>(t)]; }

inline SplitTag parse_split(std::string_view s) {
  for (int i = 0; i < 3; ++i)
    if (kSplitNames[i] == s) return static_cast<SplitTag>(i);
  throw Error("unknown split '" + std::string(s) + "'");
}

using SplitFractions = std::array<double, 3>;
inline constexpr SplitFractions kDefaultFractions = {0.70, 0.15, 0.15};

struct SplitAssignment {
  std::vector<SplitTag> tags;
  double objective = 0.0;
  std::vector<double> objective_log;  // initial value followed by every accepted improvement
  std::uint64_t seed = 0;
};

/// Largest-remainder sizes; every split is nonempty when there are at least three images.
inline std::array<int, 3> split_sizes(int n, const SplitFractions& f) {
  std::array<int, 3> sizes{};
  std::array<double, 3> rem{};
  int used = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = n * f[s];
    sizes[s] = static_cast<int>(std::floor(exact));
    rem[s] = exact - sizes[s];
    used += sizes[s];
  }
  while (used < n) {
    int best = 0;
    for (int s = 1; s < 3; ++s)
      if (rem[s] > rem[best] + 1e-9) best = s;
    ++sizes[best];
    rem[best] = -1.0;
    ++used;
  }
  if (n >= 3)
    for (int s = 0; s < 3; ++s)
      while (sizes[s] == 0) {
        int donor = 0;
        for (int t = 1; t < 3; ++t)
          if (sizes[t] > sizes[donor]) donor = t;
        --sizes[donor];
        ++sizes[s];
      }
  return sizes;
}

namespace detail {

inline double pair_l1(const std::vector<double>& a, double sa, const std::vector<double>& b, double sb) {
  double d = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) d += std::abs((sa > 0 ? a[c] / sa : 0.0) - (sb > 0 ? b[c] / sb : 0.0));
  return 0.5 * d;
}

struct SplitTotals {
  std::array<std::vector<double>, 3> mass;
  std::array<double, 3> sum{};

  SplitTotals(const std::vector<std::vector<double>>& counts, const std::vector<SplitTag>& tags) {
    const std::size_t c = counts[0].size();
    for (auto& m : mass) m.assign(c, 0.0);
    for (std::size_t i = 0; i < counts.size(); ++i) move(counts[i], static_cast<int>(tags[i]), +1.0);
  }

  void move(const std::vector<double>& row, int split, double sign) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      mass[split][c] += sign * row[c];
      sum[split] += sign * row[c];
    }
  }

  double objective() const {
    return pair_l1(mass[0], sum[0], mass[1], sum[1]) + pair_l1(mass[0], sum[0], mass[2], sum[2]) +
           pair_l1(mass[1], sum[1], mass[2], sum[2]);
  }
};

inline void check_split_inputs(const std::vector<std::vector<double>>& counts, const SplitFractions& f) {
  if (counts.size() < 3) throw Error("optimize_split: at least three images are required");
  double total = 0.0;
  for (double x : f) {
    if (!(x >= 0.0)) throw Error("optimize_split: fractions must be non-negative");
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error("optimize_split: fractions must sum to 1");
  const std::size_t c = counts[0].size();
  double mass = 0.0;
  for (const auto& row : counts) {
    if (row.size() != c) throw Error("optimize_split: inconsistent class count");
    for (double v : row) {
      if (!(v >= 0.0)) throw Error("optimize_split: negative class count");
      mass += v;
    }
  }
  if (c == 0 || mass <= 0.0) throw Error("optimize_split: empty class counts");
}

}  // namespace detail

/// Σ over split pairs of ½·L1 between class-normalized pixel distributions.
inline double split_objective(const std::vector<std::vector<double>>& counts, const std::vector<SplitTag>& tags) {
  if (counts.size() != tags.size() || counts.empty()) throw Error("split_objective: size mismatch");
  return detail::SplitTotals(counts, tags).objective();
}

/// Random size-respecting start, then hill climbing over cross-split swaps accepting strict improvements.
inline SplitAssignment optimize_split(const std::vector<std::vector<double>>& counts,
                                      const SplitFractions& fractions = kDefaultFractions, int iterations = 10000,
                                      std::uint64_t seed = 0) {
  detail::check_split_inputs(counts, fractions);
  const int n = static_cast<int>(counts.size());
  const auto sizes = split_sizes(n, fractions);
  Rng rng(seed);
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  rng.shuffle(std::span<int>(perm));
  SplitAssignment out;
  out.seed = seed;
  out.tags.assign(n, SplitTag::train);
  for (int k = 0, s = 0, filled = 0; k < n; ++k) {
    while (filled == sizes[s]) {
      ++s;
      filled = 0;
    }
    out.tags[perm[k]] = static_cast<SplitTag>(s);
    ++filled;
  }
  detail::SplitTotals totals(counts, out.tags);
  out.objective = totals.objective();
  out.objective_log.push_back(out.objective);
  for (int it = 0; it < iterations && out.objective > 0.0; ++it) {
    const int i = rng.below(n);
    const int j = rng.below(n);
    const int si = static_cast<int>(out.tags[i]), sj = static_cast<int>(out.tags[j]);
    if (si == sj) continue;
    totals.move(counts[i], si, -1.0);
    totals.move(counts[j], sj, -1.0);
    totals.move(counts[i], sj, +1.0);
    totals.move(counts[j], si, +1.0);
    const double candidate = totals.objective();
    if (candidate < out.objective - 1e-12) {
      out.objective = candidate;
      std::swap(out.tags[i], out.tags[j]);
      out.objective_log.push_back(candidate);
    } else {
      totals.move(counts[i], sj, -1.0);
      totals.move(counts[j], si, -1.0);
      totals.move(counts[i], si, +1.0);
      totals.move(counts[j], sj, +1.0);
    }
  }
  // Recompute from scratch so the reported value carries no incremental drift.
  out.objective = split_objective(counts, out.tags);
  return out;
}

/// Best of independent restarts (seeds derived from `seed`); ties keep the earliest restart.
inline SplitAssignment optimize_split_restarts(const std::vector<std::vector<double>>& counts, int restarts,
                                               const SplitFractions& fractions = kDefaultFractions,
                                               int iterations = 10000, std::uint64_t seed = 0) {
  if (restarts < 1) throw Error("optimize_split: restarts must be positive");
  std::vector<SplitAssignment> runs(restarts);
  parallel_for(static_cast<std::size_t>(restarts), [&](std::size_t r) {
    runs[r] = optimize_split(counts, fractions, iterations, derive_seed(seed, r));
  });
  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r)
    if (runs[r].objective < runs[best].objective) best = r;
  return runs[best];
}

/// Per-class soft-label mass over foreground pixels.
inline std::vector<double> class_pixel_mass(const SoftLabelMap& soft) {
  std::vector<double> out(soft.classes(), 0.0);
  for (std::size_t i = 0; i < soft.probs.pixels(); ++i) {
    if (!soft.foreground[i]) continue;
    const auto y = soft.probs.pixel(i);
    for (int c = 0; c < soft.classes(); ++c) out[c] += y[c];
  }
  return out;
}

inline nlohmann::json split_to_json(const SplitAssignment& a, const std::vector<std::string>& ids,
                                    const SplitFractions& fractions, std::string_view level) {
  if (ids.size() != a.tags.size()) throw Error("split_to_json: id count mismatch");
  nlohmann::json j{{"seed", a.seed},
                   {"objective", a.objective},
                   {"fractions", fractions},
                   {"level", std::string(level)},
                   {"accepted_improvements", a.objective_log.size() - 1}};
  nlohmann::json m = nlohmann::json::object();
  for (std::size_t i = 0; i < ids.size(); ++i) m[ids[i]] = std::string(to_string(a.tags[i]));
  j["assignments"] = std::move(m);
  return j;
}

/// image id -> split from a split file.
inline std::map<std::string, SplitTag> split_from_json(const nlohmann::json& j) {
  std::map<std::string, SplitTag> out;
  for (const auto& [id, tag] : j.at("assignments").items()) out[id] = parse_split(tag.get<std::string>());
  return out;
}

}  // namespace softseg
