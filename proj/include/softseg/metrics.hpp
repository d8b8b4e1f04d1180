#pragma once

// Evaluation: Macro SoftDice, normalized L1, micro/macro Dice on majority
// labels, confusion matrices and class-mass summaries.
//
// Soft metrics count foreground pixels; hard metrics count foreground pixels
// with an unambiguous majority. Sums pool over every image handed to an
// Evaluator, so a dataset-level score is not an average of image scores.

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "softseg/fusion.hpp"
#include "softseg/predictive.hpp"

namespace softseg {

inline constexpr double kMetricSmoothing = 1e-6;

enum class L1Normalization {
  per_pixel,            // 1/(2|mask|): range [0, 1]
  per_pixel_per_class,  // 1/(2|mask|C)
};

enum class AbsentClass {
  exclude,        // classes with no support in prediction and target are left out of the mean
  epsilon_smooth  // (2TP + eps)/(|pred| + |gt| + eps), every class counted
};

struct ClassMass {
  double predicted_mass = 0.0;  // share of predicted probability mass
  double target_mass = 0.0;     // share of soft-label mass
  double argmax_share = 0.0;    // share of argmax-predicted pixels
  double majority_share = 0.0;  // share of majority-labelled pixels
};

struct ConfusionMatrix {
  std::vector<std::vector<std::uint64_t>> counts;  // [target][prediction]
  std::vector<std::vector<double>> percent;        // rows sum to 100 where nonempty
};

/// Pixel-pooled sufficient statistics for every metric.
class Evaluator {
 public:
  explicit Evaluator(int classes, double eps = kMetricSmoothing)
      : classes_(classes), eps_(eps), p_l1_(classes, 0.0), y_l1_(classes, 0.0), diff_l1_(classes, 0.0),
        confusion_(classes, std::vector<std::uint64_t>(classes, 0)), argmax_count_(classes, 0) {}

  /// Soft statistics over `mask`.
  void add_soft(const DistributionMap& p, const DistributionMap& y, const Mask& mask) {
    check(p, y);
    if (!p.same_extent(mask)) throw Error("metrics: mask size mismatch");
    for (std::size_t i = 0; i < p.pixels(); ++i) {
      if (!mask[i]) continue;
      ++soft_pixels_;
      const auto pi = p.pixel(i), yi = y.pixel(i);
      for (int c = 0; c < classes_; ++c) {
        p_l1_[c] += std::abs(pi[c]);
        y_l1_[c] += std::abs(yi[c]);
        diff_l1_[c] += std::abs(pi[c] - yi[c]);
      }
      ++argmax_count_[argmax(pi)];
    }
  }

  /// Hard statistics on pixels where `majority` is valid.
  void add_hard(const LabelGrid& pred, const MajorityLabelMap& majority) {
    if (!pred.same_shape(majority.labels) || !pred.same_shape(majority.valid))
      throw Error("metrics: label map size mismatch");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (!majority.valid[i]) continue;
      const int t = majority.labels[i], q = pred[i];
      if (t < 0 || t >= classes_ || q < 0 || q >= classes_) throw Error("metrics: label out of range");
      ++confusion_[t][q];
      ++hard_pixels_;
    }
  }

  std::size_t soft_pixels() const { return soft_pixels_; }
  std::size_t hard_pixels() const { return hard_pixels_; }

  double macro_softdice() const {
    require(soft_pixels_, "macro_softdice");
    double sum = 0.0;
    for (int c = 0; c < classes_; ++c)
      sum += (p_l1_[c] + y_l1_[c] - diff_l1_[c] + eps_) / (p_l1_[c] + y_l1_[c] + eps_);
    return sum / classes_;
  }

  double l1(L1Normalization norm = L1Normalization::per_pixel) const {
    require(soft_pixels_, "l1_metric");
    double sum = 0.0;
    for (double d : diff_l1_) sum += d;
    double denom = 2.0 * static_cast<double>(soft_pixels_);
    if (norm == L1Normalization::per_pixel_per_class) denom *= classes_;
    return sum / denom;
  }

  double dice_micro() const {
    require(hard_pixels_, "dice_micro");
    std::uint64_t tp = 0, support = 0;
    for (int c = 0; c < classes_; ++c) {
      tp += confusion_[c][c];
      support += row_total(c) + col_total(c);
    }
    return 2.0 * static_cast<double>(tp) / static_cast<double>(support);
  }

  double accuracy() const {
    require(hard_pixels_, "accuracy");
    std::uint64_t tp = 0;
    for (int c = 0; c < classes_; ++c) tp += confusion_[c][c];
    return static_cast<double>(tp) / static_cast<double>(hard_pixels_);
  }

  double dice_macro(AbsentClass absent = AbsentClass::exclude) const {
    require(hard_pixels_, "dice_macro");
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < classes_; ++c) {
      const double support = static_cast<double>(row_total(c) + col_total(c));
      const double tp2 = 2.0 * static_cast<double>(confusion_[c][c]);
      if (absent == AbsentClass::exclude) {
        if (support == 0.0) continue;
        sum += tp2 / support;
      } else {
        sum += (tp2 + eps_) / (support + eps_);
      }
      ++counted;
    }
    return counted ? sum / counted : 1.0;
  }

  ConfusionMatrix confusion() const {
    ConfusionMatrix m{confusion_, std::vector<std::vector<double>>(classes_, std::vector<double>(classes_, 0.0))};
    for (int t = 0; t < classes_; ++t) {
      const auto total = row_total(t);
      if (!total) continue;
      for (int q = 0; q < classes_; ++q)
        m.percent[t][q] = 100.0 * static_cast<double>(confusion_[t][q]) / static_cast<double>(total);
    }
    return m;
  }

  std::vector<ClassMass> class_mass() const {
    std::vector<ClassMass> out(classes_);
    double p_total = 0.0, y_total = 0.0;
    for (int c = 0; c < classes_; ++c) {
      p_total += p_l1_[c];
      y_total += y_l1_[c];
    }
    for (int c = 0; c < classes_; ++c) {
      if (p_total > 0) out[c].predicted_mass = p_l1_[c] / p_total;
      if (y_total > 0) out[c].target_mass = y_l1_[c] / y_total;
      if (soft_pixels_) out[c].argmax_share = static_cast<double>(argmax_count_[c]) / soft_pixels_;
      if (hard_pixels_) out[c].majority_share = static_cast<double>(row_total(c)) / hard_pixels_;
    }
    return out;
  }

  int classes() const { return classes_; }

 private:
  void check(const DistributionMap& p, const DistributionMap& y) const {
    if (p.classes() != classes_ || y.classes() != classes_) throw Error("metrics: class count mismatch");
    if (p.height() != y.height() || p.width() != y.width()) throw Error("metrics: prediction/target size mismatch");
  }
  static void require(std::size_t n, const char* who) {
    if (!n) throw Error(std::string(who) + ": empty mask");
  }
  std::uint64_t row_total(int c) const {
    std::uint64_t s = 0;
    for (auto v : confusion_[c]) s += v;
    return s;
  }
  std::uint64_t col_total(int c) const {
    std::uint64_t s = 0;
    for (const auto& row : confusion_) s += row[c];
    return s;
  }

  int classes_;
  double eps_;
  std::vector<double> p_l1_, y_l1_, diff_l1_;
  std::vector<std::vector<std::uint64_t>> confusion_;
  std::vector<std::uint64_t> argmax_count_;
  std::size_t soft_pixels_ = 0;
  std::size_t hard_pixels_ = 0;
};

// Single-map conveniences.

inline double macro_softdice(const DistributionMap& p, const DistributionMap& y, const Mask& mask,
                             double eps = kMetricSmoothing) {
  Evaluator e(p.classes(), eps);
  e.add_soft(p, y, mask);
  return e.macro_softdice();
}

inline double l1_metric(const DistributionMap& p, const DistributionMap& y, const Mask& mask,
                        L1Normalization norm = L1Normalization::per_pixel) {
  Evaluator e(p.classes());
  e.add_soft(p, y, mask);
  return e.l1(norm);
}

namespace detail {
inline int label_classes(const LabelGrid& pred, const MajorityLabelMap& majority) {
  int c = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    c = std::max(c, pred[i] + 1);
    if (majority.valid[i]) c = std::max(c, majority.labels[i] + 1);
  }
  return c;
}
}  // namespace detail

inline double dice_micro(const LabelGrid& pred, const MajorityLabelMap& majority) {
  Evaluator e(detail::label_classes(pred, majority));
  e.add_hard(pred, majority);
  return e.dice_micro();
}

inline double dice_macro(const LabelGrid& pred, const MajorityLabelMap& majority, int classes,
                         AbsentClass absent = AbsentClass::exclude) {
  Evaluator e(classes);
  e.add_hard(pred, majority);
  return e.dice_macro(absent);
}

inline ConfusionMatrix confusion_matrix(const LabelGrid& pred, const MajorityLabelMap& majority, int classes) {
  Evaluator e(classes);
  e.add_hard(pred, majority);
  return e.confusion();
}

/// Shares over `mask`; the majority share counts only unambiguous pixels of y.
inline std::vector<ClassMass> class_mass_summary(const DistributionMap& p, const DistributionMap& y,
                                                 const Mask& mask) {
  Evaluator e(p.classes());
  e.add_soft(p, y, mask);
  SoftLabelMap s{y, mask, {}, Level::explanation, 0};
  refresh_ambiguity(s);
  e.add_hard(argmax_labels(p), majority_vote(s));
  return e.class_mass();
}

// ---------------------------------------------------------------------------
// Dataset-level evaluation and reports

struct EvalResult {
  Level level_trained = Level::explanation;
  Level level_evaluated = Level::explanation;
  std::map<std::string, double> values;
  ConfusionMatrix confusion;
  std::vector<ClassMass> class_mass;
};

/// Accumulates (prediction, soft label) pairs at `eval_level`, remapping both when needed.
class DatasetEvaluator {
 public:
  DatasetEvaluator(const Ontology& ontology, Level trained, Level eval_level)
      : ontology_(&ontology), trained_(trained), eval_(eval_level), acc_(ontology.class_count(eval_level)) {
    if (static_cast<int>(eval_level) > static_cast<int>(trained))
      throw Error("evaluate: evaluation level " + std::string(to_string(eval_level)) + " is below trained level " +
                  std::string(to_string(trained)));
  }

  void add(const PredictiveMap& pred, const SoftLabelMap& soft) {
    if (pred.level != trained_) throw Error("evaluate: prediction level does not match trained level");
    if (static_cast<int>(soft.level) < static_cast<int>(eval_)) throw Error("evaluate: soft labels are too coarse");
    const auto p = predict_remapped(pred, *ontology_, eval_);
    const auto y = remap_soft_labels(soft, *ontology_, eval_);
    acc_.add_soft(p.probs, y.probs, y.foreground);
    acc_.add_hard(argmax_labels(p.probs), majority_vote(y));
  }

  const Evaluator& accumulator() const { return acc_; }

  EvalResult result() const {
    EvalResult r{trained_, eval_, {}, acc_.confusion(), acc_.class_mass()};
    r.values["macro_softdice"] = acc_.macro_softdice();
    r.values["l1"] = acc_.l1(L1Normalization::per_pixel);
    r.values["l1_per_class"] = acc_.l1(L1Normalization::per_pixel_per_class);
    if (acc_.hard_pixels()) {
      r.values["dice"] = acc_.dice_micro();
      r.values["macro_dice"] = acc_.dice_macro(AbsentClass::exclude);
      r.values["macro_dice_eps"] = acc_.dice_macro(AbsentClass::epsilon_smooth);
    }
    return r;
  }

 private:
  const Ontology* ontology_;
  Level trained_, eval_;
  Evaluator acc_;
};

inline EvalResult evaluate(const PredictiveMap& pred, const SoftLabelMap& soft, const Ontology& ontology,
                           Level eval_level) {
  DatasetEvaluator e(ontology, pred.level, eval_level);
  e.add(pred, soft);
  return e.result();
}

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for one run
};

struct MetricsReport {
  Level level_trained = Level::explanation;
  Level level_evaluated = Level::explanation;
  int runs = 0;
  std::map<std::string, MetricSummary> metrics;
  ConfusionMatrix confusion;         // pooled over runs
  std::vector<ClassMass> class_mass; // averaged over runs
};

inline MetricsReport summarize(const std::vector<EvalResult>& runs) {
  if (runs.empty()) throw Error("summarize: no runs");
  MetricsReport rep;
  rep.level_trained = runs[0].level_trained;
  rep.level_evaluated = runs[0].level_evaluated;
  rep.runs = static_cast<int>(runs.size());
  for (const auto& [name, _] : runs[0].values) {
    std::vector<double> v;
    for (const auto& r : runs)
      if (auto it = r.values.find(name); it != r.values.end()) v.push_back(it->second);
    MetricSummary s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - s.mean) * (x - s.mean);
      s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    rep.metrics[name] = s;
  }
  const std::size_t c = runs[0].confusion.counts.size();
  rep.confusion.counts.assign(c, std::vector<std::uint64_t>(c, 0));
  rep.confusion.percent.assign(c, std::vector<double>(c, 0.0));
  rep.class_mass.assign(runs[0].class_mass.size(), {});
  for (const auto& r : runs) {
    for (std::size_t t = 0; t < c; ++t)
      for (std::size_t q = 0; q < c; ++q) rep.confusion.counts[t][q] += r.confusion.counts[t][q];
    for (std::size_t k = 0; k < rep.class_mass.size(); ++k) {
      const double n = static_cast<double>(runs.size());
      rep.class_mass[k].predicted_mass += r.class_mass[k].predicted_mass / n;
      rep.class_mass[k].target_mass += r.class_mass[k].target_mass / n;
      rep.class_mass[k].argmax_share += r.class_mass[k].argmax_share / n;
      rep.class_mass[k].majority_share += r.class_mass[k].majority_share / n;
    }
  }
  for (std::size_t t = 0; t < c; ++t) {
    std::uint64_t total = 0;
    for (auto v : rep.confusion.counts[t]) total += v;
    if (!total) continue;
    for (std::size_t q = 0; q < c; ++q)
      rep.confusion.percent[t][q] = 100.0 * static_cast<double>(rep.confusion.counts[t][q]) / static_cast<double>(total);
  }
  return rep;
}

inline nlohmann::json to_json(const MetricsReport& r, const Ontology* ontology = nullptr) {
  nlohmann::json j;
  j["level_trained"] = std::string(to_string(r.level_trained));
  j["level_evaluated"] = std::string(to_string(r.level_evaluated));
  j["runs"] = r.runs;
  for (const auto& [name, s] : r.metrics) j["metrics"][name] = {{"mean", s.mean}, {"std", s.std}};
  j["confusion_percent"] = r.confusion.percent;
  j["confusion_counts"] = r.confusion.counts;
  nlohmann::json mass = nlohmann::json::array();
  for (std::size_t c = 0; c < r.class_mass.size(); ++c) {
    nlohmann::json e{{"class", c},
                     {"predicted_mass", r.class_mass[c].predicted_mass},
                     {"target_mass", r.class_mass[c].target_mass},
                     {"argmax_share", r.class_mass[c].argmax_share},
                     {"majority_share", r.class_mass[c].majority_share}};
    if (ontology) e["name"] = ontology->node(r.level_evaluated, static_cast<int>(c)).name;
    mass.push_back(std::move(e));
  }
  j["class_mass"] = std::move(mass);
  return j;
}

/// Row-normalized confusion matrix as CSV; first column is the target class.
inline std::string confusion_csv(const ConfusionMatrix& m, const std::vector<std::string>& names) {
  std::ostringstream out;
  out.precision(10);
  out << "target";
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  for (std::size_t t = 0; t < m.percent.size(); ++t) {
    out << names.at(t);
    for (double v : m.percent[t]) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

}  // namespace softseg
