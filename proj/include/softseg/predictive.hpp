#pragma once

// Model output at image scale; shares the ".slt" container with soft labels.

#include <filesystem>

#include "softseg/fusion.hpp"

namespace softseg {

struct PredictiveMap {
  DistributionMap probs;
  Level level = Level::explanation;
  Mask foreground;  // presentation only; probabilities are defined everywhere

  int height() const noexcept { return probs.height(); }
  int width() const noexcept { return probs.width(); }
  int classes() const noexcept { return probs.classes(); }
};

inline PredictiveMap predict_remapped(const PredictiveMap& pred, const Ontology& ontology, Level to) {
  if (to == pred.level) return pred;
  return {remap_up(pred.probs, ontology, pred.level, to), to, pred.foreground};
}

inline LabelGrid argmax_labels(const DistributionMap& d) {
  LabelGrid out(d.height(), d.width(), 0);
  for (std::size_t i = 0; i < d.pixels(); ++i) out[i] = argmax(d.pixel(i));
  return out;
}

inline SoftLabelMap as_slt(const PredictiveMap& pred) {
  SoftLabelMap s{pred.probs, pred.foreground, {}, pred.level, 0};
  if (s.foreground.empty()) s.foreground = Mask(pred.height(), pred.width(), 1);
  refresh_ambiguity(s);
  return s;
}

inline PredictiveMap from_slt(const SoftLabelMap& s) { return {s.probs, s.level, s.foreground}; }

inline void save_prediction(const std::filesystem::path& path, const PredictiveMap& pred) {
  save_slt(path, as_slt(pred));
}

inline PredictiveMap load_prediction(const std::filesystem::path& path) { return from_slt(load_slt(path)); }

}  // namespace softseg
