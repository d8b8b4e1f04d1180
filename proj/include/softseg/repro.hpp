#pragma once

// Soft-versus-hard label study on a synthetic corpus: fine-level models trained
// with SoftDiceLoss on soft labels or cross-entropy on majority labels, and a
// coarse-level model trained with hard Dice, all evaluated at the coarse level.

#include <chrono>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "softseg/fusion.hpp"
#include "softseg/inference.hpp"
#include "softseg/metrics.hpp"
#include "softseg/splitter.hpp"
#include "softseg/synthkit.hpp"
#include "softseg/trainer.hpp"

namespace softseg {

struct StudyConfig {
  int images = 200;
  int image_size = 64;
  double core_radius = 28.0;
  int regions = 10;
  int raters = 3;
  double disagreement = 0.9;  // mass moved to a rater's preferred sibling
  double cross = 0.1;         // share of that mass crossing to another parent
  double jitter = 1.5;
  std::uint64_t data_seed = 7;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  Level fine = Level::explanation;
  Level coarse = Level::pattern;
  std::vector<double> prior = {0.30, 0.15, 0.05, 0.12, 0.02, 0.18, 0.03, 0.015, 0.10, 0.035};
  TrainerConfig trainer = default_trainer();
  int window = 32;

  static TrainerConfig default_trainer() {
    TrainerConfig t;
    t.lr0 = 3e-3;
    t.epochs = 32;
    t.patch = 32;
    t.val_patch = 32;
    t.patches_per_image = 1;
    return t;
  }

  nlohmann::json to_json() const {
    return {{"images", images},         {"image_size", image_size}, {"core_radius", core_radius},
            {"regions", regions},       {"raters", raters},         {"disagreement", disagreement},
            {"cross", cross},           {"jitter", jitter},         {"data_seed", data_seed},
            {"seeds", seeds},           {"fine", std::string(to_string(fine))},
            {"coarse", std::string(to_string(coarse))},             {"prior", prior},
            {"trainer", trainer.to_json()}, {"window", window}};
  }
};

struct StudyArm {
  std::string name;
  LossId loss;
  Level level;
};

inline std::vector<StudyArm> study_arms(const StudyConfig& cfg) {
  return {{"softdice-fine", LossId::softdice, cfg.fine},
          {"ce-majority-fine", LossId::ce_hard, cfg.fine},
          {"dice-hard-coarse", LossId::dice_hard, cfg.coarse}};
}

struct StudyData {
  std::vector<TrainingSample> fine;    // soft labels at the fine level
  std::vector<TrainingSample> coarse;  // same images, labels remapped
  std::vector<SplitTag> split;
  double split_objective = 0.0;
  double imbalance = 0.0;  // largest over smallest fine-class prior
};

inline SynthConfig study_synth_config(const StudyConfig& cfg, const Ontology& ontology) {
  SynthConfig s;
  s.height = s.width = cfg.image_size;
  s.core_radius = cfg.core_radius;
  s.regions = cfg.regions;
  s.prior = cfg.prior;
  s.palette = default_palette(static_cast<int>(cfg.prior.size()));
  for (int k = 0; k < cfg.raters; ++k)
    s.raters.push_back(sibling_shift_confusion(ontology, cfg.fine, k, cfg.disagreement, cfg.cross));
  s.jitter = cfg.jitter;
  s.level = cfg.fine;
  s.seed = cfg.data_seed;
  return s;
}

inline StudyData prepare_study_data(const StudyConfig& cfg, const Ontology& ontology) {
  if (static_cast<int>(cfg.prior.size()) != ontology.class_count(cfg.fine))
    throw Error("study: prior size does not match the fine level");
  const auto synth = study_synth_config(cfg, ontology);
  StudyData d;
  d.fine.resize(cfg.images);
  parallel_for(static_cast<std::size_t>(cfg.images), [&](std::size_t i) {
    const auto scene = generate_scene(synth, i);
    std::vector<AnnotatorMask> masks;
    for (int k = 0; k < cfg.raters; ++k)
      masks.push_back(simulate_rater(scene, synth.raters[k], synth.jitter,
                                     derive_seed(scene.seed, 100 + static_cast<std::uint64_t>(k)), cfg.fine));
    const auto fg = foreground_mask(scene.image).mask;
    d.fine[i] = {"synth-" + std::to_string(i), scene.image, build_soft_labels(masks, fg, cfg.fine, ontology)};
  });
  for (const auto& s : d.fine)
    d.coarse.push_back({s.id, s.image, remap_soft_labels(s.labels, ontology, cfg.coarse)});

  std::vector<std::vector<double>> mass;
  for (const auto& s : d.fine) mass.push_back(class_pixel_mass(s.labels));
  const auto split = optimize_split(mass, kDefaultFractions, 10000, cfg.data_seed);
  d.split = split.tags;
  d.split_objective = split.objective;
  const auto [lo, hi] = std::minmax_element(cfg.prior.begin(), cfg.prior.end());
  d.imbalance = *hi / *lo;
  return d;
}

struct ArmResult {
  StudyArm arm;
  std::vector<EvalResult> runs;
  MetricsReport report;
  std::vector<int> best_epochs;
};

struct StudyResult {
  std::vector<ArmResult> arms;
  double macro_dice_margin = 0.0;  // softdice-fine minus ce-majority-fine
  double dice_gap = 0.0;           // softdice-fine minus dice-hard-coarse
  bool condition_a = false;        // margin >= 0.05
  bool condition_b = false;        // gap >= -0.02
  double seconds = 0.0;
  StudyData data;
};

inline std::vector<TrainingSample> select_split(const std::vector<TrainingSample>& all,
                                                const std::vector<SplitTag>& tags, SplitTag which) {
  std::vector<TrainingSample> out;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (tags[i] == which) out.push_back(all[i]);
  return out;
}

/// Trains one arm with one seed and evaluates its test-split predictions at the coarse level.
inline EvalResult run_study_arm(const StudyConfig& cfg, const StudyData& data, const StudyArm& arm,
                                std::uint64_t seed, const Ontology& ontology, int* best_epoch = nullptr,
                                std::ostream* log = nullptr) {
  const auto& samples = arm.level == cfg.fine ? data.fine : data.coarse;
  const auto train_set = select_split(samples, data.split, SplitTag::train);
  const auto val_set = select_split(samples, data.split, SplitTag::val);
  TrainerConfig tc = cfg.trainer;
  tc.seed = seed;
  tc.loss = arm.loss;
  tc.level = arm.level;
  const auto trained = train(tc, train_set, val_set, ontology, log);
  if (best_epoch) *best_epoch = trained.best_epoch;
  DatasetEvaluator eval(ontology, arm.level, cfg.coarse);
  const SlidingWindowOptions sw{cfg.window, 0.5, 0.125, 1e-3};
  for (std::size_t i = 0; i < data.fine.size(); ++i) {
    if (data.split[i] != SplitTag::test) continue;
    const auto& s = data.fine[i];
    eval.add(sliding_window_predict(trained.best.model, s.image, arm.level, sw, s.labels.foreground), s.labels);
  }
  return eval.result();
}

inline StudyResult run_soft_vs_hard(const StudyConfig& cfg, const Ontology& ontology, std::ostream* log = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  StudyResult res;
  res.data = prepare_study_data(cfg, ontology);
  for (const auto& arm : study_arms(cfg)) {
    ArmResult ar{arm, {}, {}, {}};
    for (auto seed : cfg.seeds) {
      int best = 0;
      ar.runs.push_back(run_study_arm(cfg, res.data, arm, seed, ontology, &best));
      ar.best_epochs.push_back(best);
      if (log)
        *log << nlohmann::json{{"arm", arm.name}, {"seed", seed}, {"best_epoch", best}, {"metrics", ar.runs.back().values}}
                    .dump()
             << '\n';
    }
    ar.report = summarize(ar.runs);
    res.arms.push_back(std::move(ar));
  }
  const auto mean = [&](int arm, const char* metric) { return res.arms[arm].report.metrics.at(metric).mean; };
  res.macro_dice_margin = mean(0, "macro_dice") - mean(1, "macro_dice");
  res.dice_gap = mean(0, "dice") - mean(2, "dice");
  res.condition_a = res.macro_dice_margin >= 0.05;
  res.condition_b = res.dice_gap >= -0.02;
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

inline nlohmann::json to_json(const StudyResult& r, const Ontology& ontology) {
  nlohmann::json j;
  for (const auto& a : r.arms) {
    auto e = to_json(a.report, &ontology);
    e["loss"] = std::string(to_string(a.arm.loss));
    e["best_epochs"] = a.best_epochs;
    j["arms"][a.arm.name] = std::move(e);
  }
  j["macro_dice_margin"] = r.macro_dice_margin;
  j["dice_gap"] = r.dice_gap;
  j["condition_macro_dice"] = r.condition_a;
  j["condition_dice"] = r.condition_b;
  j["imbalance"] = r.data.imbalance;
  j["split_objective"] = r.data.split_objective;
  return j;
}

}  // namespace softseg
