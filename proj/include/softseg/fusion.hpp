#pragma once

// Multi-annotator label fusion: soft per-pixel vote distributions,
// strict-plurality majority labels, and STAPLE consensus estimation.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "softseg/annotations.hpp"
#include "softseg/core.hpp"
#include "softseg/ontology.hpp"
#include "softseg/parallel.hpp"

namespace softseg {

struct SoftLabelMap {
  DistributionMap probs;
  Mask foreground;
  Mask ambiguous;
  Level level = Level::explanation;
  int annotator_count = 0;

  int height() const noexcept { return probs.height(); }
  int width() const noexcept { return probs.width(); }
  int classes() const noexcept { return probs.classes(); }
};

struct MajorityLabelMap {
  LabelGrid labels;  // -1 where invalid
  Mask valid;        // foreground and unambiguous
};

/// Ties within this tolerance count as ambiguous (votes are multiples of 1/(K*k)).
inline constexpr double kVoteTieTolerance = 1e-9;

/// y_c = (1/K) * sum_a weight_a(c); unannotated pixels vote benign. Background is zeroed.
inline SoftLabelMap build_soft_labels(std::span<const AnnotatorMask> masks, const Mask& foreground,
                                      Level level, const Ontology& ontology) {
  if (masks.empty()) throw Error("build_soft_labels: no annotator masks (K = 0)");
  const int h = masks[0].height(), w = masks[0].width();
  for (const auto& m : masks)
    if (m.height() != h || m.width() != w) throw Error("build_soft_labels: annotator mask size mismatch");
  if (foreground.height() != h || foreground.width() != w)
    throw Error("build_soft_labels: foreground size mismatch");

  std::vector<AnnotatorMask> remapped;
  remapped.reserve(masks.size());
  for (const auto& m : masks) {
    if (static_cast<int>(m.level()) < static_cast<int>(level))
      throw Error("build_soft_labels: mask level " + std::string(to_string(m.level())) + " is above target " +
                  std::string(to_string(level)));
    remapped.push_back(m.remapped(ontology, level));
  }

  const int classes = ontology.class_count(level);
  const double inv_k = 1.0 / static_cast<double>(masks.size());
  SoftLabelMap out{DistributionMap(h, w, classes), Mask(h, w, 0), Mask(h, w, 0), level,
                   static_cast<int>(masks.size())};
  const std::size_t n = static_cast<std::size_t>(h) * w;
  const auto chunks = make_chunks(n);
  parallel_for(chunks.size(), [&](std::size_t ci) {
    for (std::size_t i = chunks[ci].begin; i < chunks[ci].end; ++i) {
      if (!foreground[i]) continue;
      out.foreground[i] = 1;
      auto y = out.probs.pixel(i);
      for (const auto& m : remapped) {
        const auto votes = m.votes(i);
        if (votes.empty()) {
          y[kBenign] += inv_k;
          continue;
        }
        for (const auto& [c, wgt] : votes) {
          if (c < 0 || c >= classes) throw Error("build_soft_labels: class id out of range");
          y[c] += wgt * inv_k;
        }
      }
      out.ambiguous[i] = strict_argmax(y, kVoteTieTolerance) < 0 ? 1 : 0;
    }
  });
  return out;
}

/// Strict-plurality argmax; tied maxima are invalid.
inline MajorityLabelMap majority_vote(const SoftLabelMap& soft) {
  const int h = soft.height(), w = soft.width();
  MajorityLabelMap out{LabelGrid(h, w, -1), Mask(h, w, 0)};
  for (std::size_t i = 0; i < soft.probs.pixels(); ++i) {
    if (!soft.foreground[i]) continue;
    const int c = strict_argmax(soft.probs.pixel(i), kVoteTieTolerance);
    if (c < 0) continue;
    out.labels[i] = c;
    out.valid[i] = 1;
  }
  return out;
}

/// Recomputes the ambiguity mask from the current probabilities.
inline void refresh_ambiguity(SoftLabelMap& soft) {
  soft.ambiguous = Mask(soft.height(), soft.width(), 0);
  for (std::size_t i = 0; i < soft.probs.pixels(); ++i)
    if (soft.foreground[i]) soft.ambiguous[i] = strict_argmax(soft.probs.pixel(i), kVoteTieTolerance) < 0;
}

/// Soft labels expressed at a coarser level (ambiguity recomputed at that level).
inline SoftLabelMap remap_soft_labels(const SoftLabelMap& soft, const Ontology& ontology, Level to) {
  if (to == soft.level) return soft;
  SoftLabelMap out{remap_up(soft.probs, ontology, soft.level, to), soft.foreground, {}, to, soft.annotator_count};
  refresh_ambiguity(out);
  return out;
}

// ---------------------------------------------------------------------------
// STAPLE (simultaneous truth and performance level estimation)

struct StapleOptions {
  double init_sensitivity = 0.99999;
  double init_specificity = 0.99999;
  double tolerance = 1e-6;
  int max_iterations = 100;
};

inline constexpr double kStapleClampLow = 1e-6;
inline constexpr double kStapleClampHigh = 1.0 - 1e-6;

struct StapleResult {
  DistributionMap posterior;  // H×W×C
  LabelGrid consensus;
  // [rater][class]; for binary runs column 1 is the foreground class and
  // column 0 mirrors it (sensitivity of background = specificity of foreground).
  std::vector<std::vector<double>> sensitivity;
  std::vector<std::vector<double>> specificity;
  int iterations = 0;
  bool converged = false;
  int ties = 0;
  std::vector<std::string> warnings;
};

namespace detail {

struct BinaryStaple {
  std::vector<double> weights;  // posterior P(truth = 1) per pixel
  std::vector<double> sens, spec;
  double prior = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<std::string> warnings;
};

// masks: K bit-planes of n pixels each.
inline BinaryStaple run_binary_staple(const std::vector<std::vector<std::uint8_t>>& masks, const StapleOptions& opt) {
  const std::size_t k = masks.size();
  const std::size_t n = masks.front().size();
  BinaryStaple s;
  s.sens.assign(k, opt.init_sensitivity);
  s.spec.assign(k, opt.init_specificity);
  s.weights.assign(n, 0.0);

  double total = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    std::size_t pos = 0;
    for (auto v : masks[j]) pos += v ? 1 : 0;
    if (pos == 0 || pos == n)
      s.warnings.push_back("rater " + std::to_string(j) + " is all-" + (pos == 0 ? "negative" : "positive") +
                           "; parameters clamped to [1e-6, 1-1e-6]");
    total += static_cast<double>(pos);
  }
  s.prior = total / (static_cast<double>(k) * static_cast<double>(n));

  const auto chunks = make_chunks(n);
  std::vector<std::vector<double>> partial(chunks.size());
  for (int it = 0; it < opt.max_iterations; ++it) {
    // E-step.
    parallel_for(chunks.size(), [&](std::size_t ci) {
      for (std::size_t i = chunks[ci].begin; i < chunks[ci].end; ++i) {
        double a = s.prior, b = 1.0 - s.prior;
        for (std::size_t j = 0; j < k; ++j) {
          if (masks[j][i]) {
            a *= s.sens[j];
            b *= 1.0 - s.spec[j];
          } else {
            a *= 1.0 - s.sens[j];
            b *= s.spec[j];
          }
        }
        s.weights[i] = (a + b) > 0.0 ? a / (a + b) : s.prior;
      }
    });
    // M-step with chunked, ordered accumulation.
    parallel_for(chunks.size(), [&](std::size_t ci) {
      std::vector<double> acc(2 * k + 2, 0.0);
      for (std::size_t i = chunks[ci].begin; i < chunks[ci].end; ++i) {
        const double wi = s.weights[i];
        acc[2 * k] += wi;
        acc[2 * k + 1] += 1.0 - wi;
        for (std::size_t j = 0; j < k; ++j) {
          if (masks[j][i])
            acc[j] += wi;
          else
            acc[k + j] += 1.0 - wi;
        }
      }
      partial[ci] = std::move(acc);
    });
    std::vector<double> sum(2 * k + 2, 0.0);
    for (const auto& p : partial)
      for (std::size_t t = 0; t < sum.size(); ++t) sum[t] += p[t];

    double change = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = sum[2 * k] > 0.0 ? sum[j] / sum[2 * k] : s.sens[j];
      const double q = sum[2 * k + 1] > 0.0 ? sum[k + j] / sum[2 * k + 1] : s.spec[j];
      const double pc = std::clamp(p, kStapleClampLow, kStapleClampHigh);
      const double qc = std::clamp(q, kStapleClampLow, kStapleClampHigh);
      change = std::max({change, std::abs(pc - s.sens[j]), std::abs(qc - s.spec[j])});
      s.sens[j] = pc;
      s.spec[j] = qc;
    }
    s.iterations = it + 1;
    if (change < opt.tolerance) {
      s.converged = true;
      break;
    }
  }
  // Final posterior under the converged parameters.
  parallel_for(chunks.size(), [&](std::size_t ci) {
    for (std::size_t i = chunks[ci].begin; i < chunks[ci].end; ++i) {
      double a = s.prior, b = 1.0 - s.prior;
      for (std::size_t j = 0; j < k; ++j) {
        a *= masks[j][i] ? s.sens[j] : 1.0 - s.sens[j];
        b *= masks[j][i] ? 1.0 - s.spec[j] : s.spec[j];
      }
      s.weights[i] = (a + b) > 0.0 ? a / (a + b) : s.prior;
    }
  });
  return s;
}

}  // namespace detail

/// Binary STAPLE over K ≥ 2 rater masks.
inline StapleResult staple(std::span<const Mask> masks, const StapleOptions& opt = {}) {
  if (masks.size() < 2) throw Error("staple: need at least two raters");
  const int h = masks[0].height(), w = masks[0].width();
  std::vector<std::vector<std::uint8_t>> planes;
  for (const auto& m : masks) {
    if (m.height() != h || m.width() != w) throw Error("staple: mask size mismatch");
    std::vector<std::uint8_t> plane(m.values().begin(), m.values().end());
    for (auto& v : plane) v = v ? 1 : 0;
    planes.push_back(std::move(plane));
  }
  auto s = detail::run_binary_staple(planes, opt);
  StapleResult r;
  r.posterior = DistributionMap(h, w, 2);
  r.consensus = LabelGrid(h, w, 0);
  for (std::size_t i = 0; i < s.weights.size(); ++i) {
    r.posterior.pixel(i)[0] = 1.0 - s.weights[i];
    r.posterior.pixel(i)[1] = s.weights[i];
    r.consensus[i] = s.weights[i] > 0.5 ? 1 : 0;
  }
  for (std::size_t j = 0; j < masks.size(); ++j) {
    r.sensitivity.push_back({s.spec[j], s.sens[j]});
    r.specificity.push_back({s.sens[j], s.spec[j]});
  }
  r.iterations = s.iterations;
  r.converged = s.converged;
  r.warnings = std::move(s.warnings);
  return r;
}

/// One-vs-rest STAPLE per class; consensus is the argmax of the per-pixel
/// renormalized posteriors, ties going to the lower class id.
inline StapleResult staple_multiclass(std::span<const LabelGrid> masks, int classes, const StapleOptions& opt = {}) {
  if (masks.size() < 2) throw Error("staple_multiclass: need at least two raters");
  if (classes < 2) throw Error("staple_multiclass: need at least two classes");
  const int h = masks[0].height(), w = masks[0].width();
  for (const auto& m : masks)
    if (m.height() != h || m.width() != w) throw Error("staple_multiclass: mask size mismatch");
  const std::size_t n = static_cast<std::size_t>(h) * w;

  StapleResult r;
  r.posterior = DistributionMap(h, w, classes);
  r.consensus = LabelGrid(h, w, 0);
  r.sensitivity.assign(masks.size(), std::vector<double>(classes, 0.0));
  r.specificity.assign(masks.size(), std::vector<double>(classes, 0.0));
  r.converged = true;
  for (int c = 0; c < classes; ++c) {
    std::vector<std::vector<std::uint8_t>> planes;
    for (const auto& m : masks) {
      std::vector<std::uint8_t> plane(n);
      for (std::size_t i = 0; i < n; ++i) plane[i] = m[i] == c ? 1 : 0;
      planes.push_back(std::move(plane));
    }
    auto s = detail::run_binary_staple(planes, opt);
    for (std::size_t i = 0; i < n; ++i) r.posterior.pixel(i)[c] = s.weights[i];
    for (std::size_t j = 0; j < masks.size(); ++j) {
      r.sensitivity[j][c] = s.sens[j];
      r.specificity[j][c] = s.spec[j];
    }
    r.iterations = std::max(r.iterations, s.iterations);
    r.converged = r.converged && s.converged;
    for (auto& wmsg : s.warnings) r.warnings.push_back("class " + std::to_string(c) + ": " + wmsg);
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto p = r.posterior.pixel(i);
    double sum = 0.0;
    for (double v : p) sum += v;
    if (sum > 0.0)
      for (double& v : p) v /= sum;
    else
      for (double& v : p) v = 1.0 / classes;
    int best = 0;
    bool tie = false;
    for (int c = 1; c < classes; ++c) {
      if (p[c] > p[best]) {
        best = c;
        tie = false;
      } else if (p[c] == p[best]) {
        tie = true;
      }
    }
    r.consensus[i] = best;
    if (tie) ++r.ties;
  }
  if (r.ties) r.warnings.push_back(std::to_string(r.ties) + " pixel tie(s) broken toward the lower class id");
  return r;
}

// ---------------------------------------------------------------------------
// ".slt" container: "SLT1", u32 H, W, C, u8 level, f32 [H][W][C], u8 fg [H][W], u8 ambiguous [H][W].
// All integers and floats little-endian.

namespace detail {
inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw Error("unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
inline void put_f32(std::ostream& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::istream& in) { return std::bit_cast<float>(get_u32(in)); }
}  // namespace detail

inline void write_slt(std::ostream& out, const SoftLabelMap& map) {
  out.write("SLT1", 4);
  detail::put_u32(out, static_cast<std::uint32_t>(map.height()));
  detail::put_u32(out, static_cast<std::uint32_t>(map.width()));
  detail::put_u32(out, static_cast<std::uint32_t>(map.classes()));
  const char level = static_cast<char>(map.level);
  out.write(&level, 1);
  for (double v : map.probs.values()) detail::put_f32(out, static_cast<float>(v));
  const auto bytes = [&](const Mask& m) {
    for (std::size_t i = 0; i < map.probs.pixels(); ++i) {
      const char b = (i < m.size() && m[i]) ? 1 : 0;
      out.write(&b, 1);
    }
  };
  bytes(map.foreground);
  bytes(map.ambiguous);
  if (!out) throw Error("write_slt: write failed");
}

inline SoftLabelMap read_slt(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "SLT1", 4) != 0) throw Error("read_slt: bad magic");
  const auto h = detail::get_u32(in), w = detail::get_u32(in), c = detail::get_u32(in);
  if (h > (1u << 16) || w > (1u << 16) || c > 4096) throw Error("read_slt: implausible dimensions");
  char level = 0;
  if (!in.read(&level, 1) || level < 0 || level > 2) throw Error("read_slt: bad level");
  SoftLabelMap map{DistributionMap(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c)),
                   Mask(static_cast<int>(h), static_cast<int>(w)), Mask(static_cast<int>(h), static_cast<int>(w)),
                   static_cast<Level>(level), 0};
  for (double& v : map.probs.values()) v = detail::get_f32(in);
  std::vector<char> buf(static_cast<std::size_t>(h) * w);
  for (Mask* m : {&map.foreground, &map.ambiguous}) {
    if (!in.read(buf.data(), static_cast<std::streamsize>(buf.size()))) throw Error("read_slt: truncated masks");
    for (std::size_t i = 0; i < buf.size(); ++i) (*m)[i] = buf[i] ? 1 : 0;
  }
  return map;
}

inline void save_slt(const std::filesystem::path& path, const SoftLabelMap& map) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_slt(out, map);
}

inline SoftLabelMap load_slt(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read_slt(in);
}

}  // namespace softseg
