#pragma once

// Losses over masked per-pixel distributions with analytic gradients with
// respect to the logits: SoftDiceLoss, TreeLoss, soft/hard cross-entropy and
// the class-averaged Dice loss on majority labels.
//
// Tensors are N×C×P (images × classes × flattened pixels). Every loss is first
// written in probability space and then chained through the softmax, which is
// what lets TreeLoss reuse the base losses on remapped distributions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "softseg/core.hpp"
#include "softseg/ontology.hpp"

namespace softseg {

struct BatchTensor {
  int batch = 0;
  int classes = 0;
  int pixels = 0;
  std::vector<double> values;

  BatchTensor() = default;
  BatchTensor(int n, int c, int p, double fill = 0.0)
      : batch(n), classes(c), pixels(p), values(static_cast<std::size_t>(n) * c * p, fill) {}

  double& at(int n, int c, int p) { return values[(static_cast<std::size_t>(n) * classes + c) * pixels + p]; }
  double at(int n, int c, int p) const { return values[(static_cast<std::size_t>(n) * classes + c) * pixels + p]; }
  bool same_shape(const BatchTensor& o) const { return batch == o.batch && classes == o.classes && pixels == o.pixels; }
};

struct HardTargets {
  int batch = 0;
  int pixels = 0;
  std::vector<int> labels;  // N×P, -1 where undefined

  int at(int n, int p) const { return labels[static_cast<std::size_t>(n) * pixels + p]; }
};

using CountMask = std::vector<std::uint8_t>;  // N×P

struct LossValueGrad {
  double value = 0.0;
  BatchTensor grad_logits;
};

enum class LossId { softdice, tree_softdice, tree_ce, ce_soft, ce_hard, dice_hard };

inline constexpr std::string_view kLossIds[] = {"softdice", "tree:softdice", "tree:ce", "ce-soft", "ce-hard", "dice-hard"};

inline std::string_view to_string(LossId id) { return kLossIds[static_cast<int>(id)]; }

inline LossId parse_loss_id(std::string_view text) {
  for (int i = 0; i < 6; ++i)
    if (kLossIds[i] == text) return static_cast<LossId>(i);
  throw Error("unknown loss id '" + std::string(text) +
              "' (expected softdice | tree:softdice | tree:ce | ce-soft | ce-hard | dice-hard)");
}

inline bool is_hard_loss(LossId id) { return id == LossId::ce_hard || id == LossId::dice_hard; }

inline constexpr double kDiceSmoothing = 1e-6;
inline constexpr double kLogClamp = 1e-12;
inline constexpr double kTreeLambda = 0.5;

inline BatchTensor softmax(const BatchTensor& logits) {
  BatchTensor p(logits.batch, logits.classes, logits.pixels);
  for (int n = 0; n < logits.batch; ++n)
    for (int i = 0; i < logits.pixels; ++i) {
      double mx = logits.at(n, 0, i);
      for (int c = 1; c < logits.classes; ++c) mx = std::max(mx, logits.at(n, c, i));
      double sum = 0.0;
      for (int c = 0; c < logits.classes; ++c) sum += (p.at(n, c, i) = std::exp(logits.at(n, c, i) - mx));
      for (int c = 0; c < logits.classes; ++c) p.at(n, c, i) /= sum;
    }
  return p;
}

/// Loss value with its gradient with respect to the probabilities.
struct ProbLoss {
  double value = 0.0;
  BatchTensor grad_probs;
};

namespace detail {

inline std::size_t count_pixels(const CountMask& mask) {
  std::size_t m = 0;
  for (auto v : mask) m += v ? 1 : 0;
  return m;
}

inline void check_inputs(const BatchTensor& p, const BatchTensor& y, const CountMask& mask, const char* who) {
  if (!p.same_shape(y)) throw Error(std::string(who) + ": prediction/target shape mismatch");
  if (mask.size() != static_cast<std::size_t>(p.batch) * p.pixels)
    throw Error(std::string(who) + ": mask size mismatch");
  if (count_pixels(mask) == 0) throw Error(std::string(who) + ": empty mask");
}

}  // namespace detail

/// 1 - (1/C) * sum_c (2 sum p*y + eps) / (sum (p + y) + eps), sums pooled over the batch.
inline ProbLoss soft_dice_prob(const BatchTensor& p, const BatchTensor& y, const CountMask& mask,
                               double eps = kDiceSmoothing) {
  detail::check_inputs(p, y, mask, "soft_dice_loss");
  const int classes = p.classes;
  std::vector<double> inter(classes, 0.0), uni(classes, 0.0);
  for (int n = 0; n < p.batch; ++n)
    for (int c = 0; c < classes; ++c)
      for (int i = 0; i < p.pixels; ++i) {
        if (!mask[static_cast<std::size_t>(n) * p.pixels + i]) continue;
        inter[c] += p.at(n, c, i) * y.at(n, c, i);
        uni[c] += p.at(n, c, i) + y.at(n, c, i);
      }
  ProbLoss out{0.0, BatchTensor(p.batch, classes, p.pixels)};
  double dice_sum = 0.0;
  for (int c = 0; c < classes; ++c) dice_sum += (2.0 * inter[c] + eps) / (uni[c] + eps);
  out.value = 1.0 - dice_sum / classes;
  for (int c = 0; c < classes; ++c) {
    const double den = uni[c] + eps;
    const double num = 2.0 * inter[c] + eps;
    for (int n = 0; n < p.batch; ++n)
      for (int i = 0; i < p.pixels; ++i) {
        if (!mask[static_cast<std::size_t>(n) * p.pixels + i]) continue;
        out.grad_probs.at(n, c, i) = -(2.0 * y.at(n, c, i) * den - num) / (den * den * classes);
      }
  }
  return out;
}

/// -(1/|mask|) * sum y log(p + 1e-12).
inline ProbLoss cross_entropy_prob(const BatchTensor& p, const BatchTensor& y, const CountMask& mask) {
  detail::check_inputs(p, y, mask, "cross_entropy");
  const double m = static_cast<double>(detail::count_pixels(mask));
  ProbLoss out{0.0, BatchTensor(p.batch, p.classes, p.pixels)};
  double acc = 0.0;
  for (int n = 0; n < p.batch; ++n)
    for (int c = 0; c < p.classes; ++c)
      for (int i = 0; i < p.pixels; ++i) {
        if (!mask[static_cast<std::size_t>(n) * p.pixels + i]) continue;
        const double yc = y.at(n, c, i);
        if (yc == 0.0) continue;
        const double pc = p.at(n, c, i) + kLogClamp;
        acc -= yc * std::log(pc);
        out.grad_probs.at(n, c, i) = -yc / (pc * m);
      }
  out.value = acc / m;
  return out;
}

/// Chains d(loss)/d(probs) through the softmax; zero outside the mask.
inline BatchTensor softmax_backward(const BatchTensor& p, const BatchTensor& grad_p, const CountMask& mask) {
  BatchTensor g(p.batch, p.classes, p.pixels);
  for (int n = 0; n < p.batch; ++n)
    for (int i = 0; i < p.pixels; ++i) {
      if (!mask[static_cast<std::size_t>(n) * p.pixels + i]) continue;
      double dot = 0.0;
      for (int c = 0; c < p.classes; ++c) dot += p.at(n, c, i) * grad_p.at(n, c, i);
      for (int c = 0; c < p.classes; ++c) g.at(n, c, i) = p.at(n, c, i) * (grad_p.at(n, c, i) - dot);
    }
  return g;
}

inline BatchTensor one_hot(const HardTargets& t, int classes) {
  BatchTensor y(t.batch, classes, t.pixels);
  for (int n = 0; n < t.batch; ++n)
    for (int i = 0; i < t.pixels; ++i) {
      const int c = t.at(n, i);
      if (c >= 0 && c < classes) y.at(n, c, i) = 1.0;
    }
  return y;
}

namespace detail {
inline CountMask hard_mask(const HardTargets& t, const CountMask& mask, int classes) {
  if (mask.size() != t.labels.size()) throw Error("hard loss: mask size mismatch");
  CountMask m(mask.size(), 0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = (mask[i] && t.labels[i] >= 0 && t.labels[i] < classes) ? 1 : 0;
  if (count_pixels(m) == 0) throw Error("hard loss: no pixels with an unambiguous majority label in mask");
  return m;
}
}  // namespace detail

inline LossValueGrad soft_dice_loss(const BatchTensor& logits, const BatchTensor& y, const CountMask& mask,
                                    double eps = kDiceSmoothing) {
  const auto p = softmax(logits);
  auto pl = soft_dice_prob(p, y, mask, eps);
  return {pl.value, softmax_backward(p, pl.grad_probs, mask)};
}

inline LossValueGrad cross_entropy_soft(const BatchTensor& logits, const BatchTensor& y, const CountMask& mask) {
  const auto p = softmax(logits);
  auto pl = cross_entropy_prob(p, y, mask);
  return {pl.value, softmax_backward(p, pl.grad_probs, mask)};
}

/// Cross-entropy on majority labels over masked pixels with a defined label.
inline LossValueGrad cross_entropy_hard(const BatchTensor& logits, const HardTargets& targets, const CountMask& mask) {
  const auto m = detail::hard_mask(targets, mask, logits.classes);
  return cross_entropy_soft(logits, one_hot(targets, logits.classes), m);
}

/// Class-averaged Dice loss on one-hot majority labels.
inline LossValueGrad dice_loss_hard(const BatchTensor& logits, const HardTargets& targets, const CountMask& mask,
                                    double eps = kDiceSmoothing) {
  const auto m = detail::hard_mask(targets, mask, logits.classes);
  return soft_dice_loss(logits, one_hot(targets, logits.classes), m, eps);
}

// ---------------------------------------------------------------------------
// TreeLoss

enum class TreeBase { softdice, ce };

namespace detail {

inline BatchTensor remap_batch(const BatchTensor& x, std::span<const int> map, int parent_classes) {
  BatchTensor out(x.batch, parent_classes, x.pixels);
  for (int n = 0; n < x.batch; ++n)
    for (int c = 0; c < x.classes; ++c) {
      const int k = map[c];
      for (int i = 0; i < x.pixels; ++i) out.at(n, k, i) += x.at(n, c, i);
    }
  return out;
}

inline ProbLoss base_prob_loss(TreeBase base, const BatchTensor& p, const BatchTensor& y, const CountMask& mask,
                               double eps) {
  return base == TreeBase::softdice ? soft_dice_prob(p, y, mask, eps) : cross_entropy_prob(p, y, mask);
}

// tree(L) = base                              at the pattern level
//         = λ base(L) + (1-λ) tree(parent)    below it
inline ProbLoss tree_prob(TreeBase base, double lambda, const BatchTensor& p, const BatchTensor& y,
                          const CountMask& mask, const Ontology& ontology, Level level, double eps) {
  auto here = base_prob_loss(base, p, y, mask, eps);
  if (level == Level::pattern) return here;
  const Level parent = static_cast<Level>(static_cast<int>(level) - 1);
  const auto& phi = ontology.parent_map(level);
  const int parent_classes = ontology.class_count(parent);
  const auto pm = remap_batch(p, phi, parent_classes);
  const auto ym = remap_batch(y, phi, parent_classes);
  const auto up = tree_prob(base, lambda, pm, ym, mask, ontology, parent, eps);
  ProbLoss out{lambda * here.value + (1.0 - lambda) * up.value, BatchTensor(p.batch, p.classes, p.pixels)};
  for (int n = 0; n < p.batch; ++n)
    for (int c = 0; c < p.classes; ++c)
      for (int i = 0; i < p.pixels; ++i)
        out.grad_probs.at(n, c, i) = lambda * here.grad_probs.at(n, c, i) + (1.0 - lambda) * up.grad_probs.at(n, phi[c], i);
  return out;
}

}  // namespace detail

/// λ·L(p, y) + (1-λ)·TreeLoss(p^map, y^map), recursing up to the pattern level.
inline LossValueGrad tree_loss(TreeBase base, double lambda, const BatchTensor& logits, const BatchTensor& y,
                               const CountMask& mask, const Ontology& ontology, Level level,
                               double eps = kDiceSmoothing) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error("tree_loss: lambda must lie in [0, 1]");
  if (level == Level::pattern) throw Error("tree_loss: level must be below the pattern level");
  if (logits.classes != ontology.class_count(level)) throw Error("tree_loss: class count does not match level");
  const auto p = softmax(logits);
  auto pl = detail::tree_prob(base, lambda, p, y, mask, ontology, level, eps);
  return {pl.value, softmax_backward(p, pl.grad_probs, mask)};
}

// ---------------------------------------------------------------------------
// Dispatch by identifier

struct LossTargets {
  BatchTensor soft;       // N×C×P soft labels
  HardTargets hard;       // majority labels, -1 where ambiguous or background
  CountMask foreground;   // N×P
};

struct LossOptions {
  double lambda = kTreeLambda;
  double eps = kDiceSmoothing;
};

inline LossValueGrad compute_loss(LossId id, const BatchTensor& logits, const LossTargets& t,
                                  const Ontology* ontology = nullptr, Level level = Level::explanation,
                                  const LossOptions& opt = {}) {
  switch (id) {
    case LossId::softdice:
      return soft_dice_loss(logits, t.soft, t.foreground, opt.eps);
    case LossId::ce_soft:
      return cross_entropy_soft(logits, t.soft, t.foreground);
    case LossId::ce_hard:
      return cross_entropy_hard(logits, t.hard, t.foreground);
    case LossId::dice_hard:
      return dice_loss_hard(logits, t.hard, t.foreground, opt.eps);
    case LossId::tree_softdice:
    case LossId::tree_ce:
      if (!ontology) throw Error("tree loss requires an ontology");
      return tree_loss(id == LossId::tree_softdice ? TreeBase::softdice : TreeBase::ce, opt.lambda, logits, t.soft,
                       t.foreground, *ontology, level, opt.eps);
  }
  throw Error("unhandled loss id");
}

}  // namespace softseg
