#pragma once

// Patch-based training loop: augmented random patches, masked losses, AdamW
// with a plateau schedule, validation on central patches and selection of the
// epoch with the lowest validation loss.

#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "softseg/hash.hpp"
#include "softseg/imaging.hpp"
#include "softseg/model.hpp"
#include "softseg/objectives.hpp"

namespace softseg {

struct TrainerConfig {
  double lr0 = 5e-5;
  double lr_factor = 1.0 / 3.0;
  int patience = 2;
  double weight_decay = 0.02;
  int batch = 12;
  int epochs = 200;
  double beta1 = 0.99;
  double beta2 = 0.9;
  double adam_eps = 1e-8;
  double min_lr = 1e-7;
  std::uint64_t seed = 0;
  LossId loss = LossId::softdice;
  Level level = Level::explanation;
  int patch = 64;
  int val_patch = 64;
  int patches_per_image = 1;
  bool augment = true;
  double tree_lambda = kTreeLambda;

  void validate() const {
    if (!(lr0 > 0 && lr_factor > 0 && lr_factor < 1 && weight_decay >= 0 && min_lr > 0 && adam_eps > 0))
      throw Error("TrainerConfig: rates must be positive");
    if (patience < 1) throw Error("TrainerConfig: patience must be at least 1");
    if (batch < 1 || epochs < 1 || patches_per_image < 1) throw Error("TrainerConfig: counts must be positive");
    if (patch < 2 || patch % 2 || val_patch < 2 || val_patch % 2) throw Error("TrainerConfig: patch sizes must be even");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw Error("TrainerConfig: betas must lie in [0, 1)");
  }

  AdamWConfig adamw() const { return {beta1, beta2, adam_eps, weight_decay}; }

  nlohmann::json to_json() const {
    return {{"lr0", lr0},         {"lr_factor", lr_factor},
            {"patience", patience}, {"weight_decay", weight_decay},
            {"batch", batch},     {"epochs", epochs},
            {"beta1", beta1},     {"beta2", beta2},
            {"adam_eps", adam_eps}, {"min_lr", min_lr},
            {"seed", seed},       {"loss", std::string(to_string(loss))},
            {"level", std::string(to_string(level))}, {"patch", patch},
            {"val_patch", val_patch}, {"patches_per_image", patches_per_image},
            {"augment", augment}, {"tree_lambda", tree_lambda}};
  }

  static TrainerConfig from_json(const nlohmann::json& j) {
    TrainerConfig c;
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("lr0", c.lr0);
    get("lr_factor", c.lr_factor);
    get("patience", c.patience);
    get("weight_decay", c.weight_decay);
    get("batch", c.batch);
    get("epochs", c.epochs);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("adam_eps", c.adam_eps);
    get("min_lr", c.min_lr);
    get("seed", c.seed);
    get("patch", c.patch);
    get("val_patch", c.val_patch);
    get("patches_per_image", c.patches_per_image);
    get("augment", c.augment);
    get("tree_lambda", c.tree_lambda);
    if (j.contains("loss")) c.loss = parse_loss_id(j.at("loss").get<std::string>());
    if (j.contains("level")) c.level = parse_level(j.at("level").get<std::string>());
    return c;
  }

  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }
};

/// Image with soft labels at the training level (same height and width).
struct TrainingSample {
  std::string id;
  RasterImage image;
  SoftLabelMap labels;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  int skipped_batches = 0;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  int best_epoch = 0;
  std::vector<EpochLog> log;
};

/// Network input: pixels centred around zero, N×3×H×W.
inline void append_input(const RasterImage& img, std::vector<float>& out) {
  for (int ch = 0; ch < 3; ++ch)
    for (int r = 0; r < img.height; ++r)
      for (int c = 0; c < img.width; ++c) out.push_back(static_cast<float>(img.at(r, c, ch) - 0.5));
}

/// Loss targets for a batch of label patches of equal size.
inline LossTargets make_targets(const std::vector<const SoftLabelMap*>& labels) {
  const int n = static_cast<int>(labels.size());
  const int classes = labels[0]->classes();
  const int pixels = static_cast<int>(labels[0]->probs.pixels());
  LossTargets t{BatchTensor(n, classes, pixels), HardTargets{n, pixels, std::vector<int>(std::size_t(n) * pixels, -1)},
                CountMask(std::size_t(n) * pixels, 0)};
  for (int b = 0; b < n; ++b) {
    const auto& s = *labels[b];
    const auto maj = majority_vote(s);
    for (int i = 0; i < pixels; ++i) {
      const auto y = s.probs.pixel(i);
      for (int c = 0; c < classes; ++c) t.soft.at(b, c, i) = y[c];
      t.foreground[std::size_t(b) * pixels + i] = s.foreground[i] ? 1 : 0;
      t.hard.labels[std::size_t(b) * pixels + i] = maj.valid[i] ? maj.labels[i] : -1;
    }
  }
  return t;
}

namespace detail {
inline bool has_counted_pixels(const LossTargets& t, LossId id) {
  for (std::size_t i = 0; i < t.foreground.size(); ++i)
    if (t.foreground[i] && (!is_hard_loss(id) || t.hard.labels[i] >= 0)) return true;
  return false;
}

inline BatchTensor to_batch_tensor(const std::vector<float>& logits, int n, int classes, int pixels) {
  BatchTensor b(n, classes, pixels);
  for (std::size_t i = 0; i < logits.size(); ++i) b.values[i] = logits[i];
  return b;
}
}  // namespace detail

/// Loss of `model` on one batch; nullopt when no pixel of the batch is counted.
inline std::optional<double> batch_loss(const MiniUNet<float>& model, const std::vector<const RasterImage*>& images,
                                        const std::vector<const SoftLabelMap*>& labels, const TrainerConfig& cfg,
                                        const Ontology& ontology, std::vector<float>* grad = nullptr) {
  const int n = static_cast<int>(images.size());
  const int h = images[0]->height, w = images[0]->width;
  std::vector<float> input;
  input.reserve(std::size_t(n) * 3 * h * w);
  for (const auto* img : images) append_input(*img, input);
  const auto targets = make_targets(labels);
  if (!detail::has_counted_pixels(targets, cfg.loss)) return std::nullopt;
  std::vector<MiniUNet<float>::Cache> caches;
  const auto logits = model.forward_batch(input, n, h, w, grad ? &caches : nullptr);
  const auto lv = compute_loss(cfg.loss, detail::to_batch_tensor(logits, n, model.classes(), h * w), targets,
                               &ontology, cfg.level, {cfg.tree_lambda, kDiceSmoothing});
  if (!std::isfinite(lv.value)) throw Error("training loss is not finite");
  if (grad) {
    std::vector<float> g(lv.grad_logits.values.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(lv.grad_logits.values[i]);
    *grad = model.backward_batch(caches, g);
  }
  return lv.value;
}

/// Mean validation loss over central patches, batched in sample order.
inline double validation_loss(const MiniUNet<float>& model, std::span<const TrainingSample> val,
                              const TrainerConfig& cfg, const Ontology& ontology) {
  std::vector<Patch> patches;
  for (const auto& s : val) patches.push_back(central_patch(s.image, s.labels, cfg.val_patch));
  double sum = 0.0;
  int count = 0;
  for (std::size_t b = 0; b < patches.size(); b += cfg.batch) {
    std::vector<const RasterImage*> imgs;
    std::vector<const SoftLabelMap*> labs;
    for (std::size_t i = b; i < std::min(patches.size(), b + cfg.batch); ++i) {
      imgs.push_back(&patches[i].image);
      labs.push_back(&patches[i].labels);
    }
    if (auto v = batch_loss(model, imgs, labs, cfg, ontology)) {
      sum += *v;
      ++count;
    }
  }
  if (!count) throw Error("validation split has no counted pixels");
  return sum / count;
}

inline nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"lr", e.lr},
          {"skipped_batches", e.skipped_batches}};
}

/// Trains from scratch. `log` receives one JSON line per epoch; `checkpoint_dir`
/// (optional) receives last.mun and best.mun after every epoch.
inline TrainResult train(const TrainerConfig& cfg, std::span<const TrainingSample> train_set,
                         std::span<const TrainingSample> val_set, const Ontology& ontology,
                         std::ostream* log = nullptr, const std::filesystem::path& checkpoint_dir = {}) {
  cfg.validate();
  if (train_set.empty()) throw Error("train: empty training split");
  if (val_set.empty()) throw Error("train: empty validation split");
  const int classes = ontology.class_count(cfg.level);
  for (const auto* set : {&train_set, &val_set})
    for (const auto& s : *set) {
      if (s.labels.level != cfg.level || s.labels.classes() != classes)
        throw Error("train: sample " + s.id + " is not labelled at level " + std::string(to_string(cfg.level)));
      if (s.image.height != s.labels.height() || s.image.width != s.labels.width())
        throw Error("train: sample " + s.id + " image and labels differ in size");
    }

  MiniUNet<float> model(classes, derive_seed(cfg.seed, 0x1417));
  AdamState<float> opt(model.parameter_count());
  PlateauSchedule schedule{cfg.lr0, cfg.lr_factor, cfg.patience, cfg.min_lr};
  const auto adam = cfg.adamw();
  const std::uint64_t config_hash = cfg.hash();

  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order;
    for (int rep = 0; rep < cfg.patches_per_image; ++rep)
      for (std::size_t i = 0; i < train_set.size(); ++i) order.push_back(i);
    rng.shuffle(std::span<std::size_t>(order));

    EpochLog entry{epoch, 0.0, 0.0, schedule.lr, 0};
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      std::vector<Patch> patches;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch); ++i) {
        const auto& s = train_set[order[i]];
        auto p = sample_patch(s.image, s.labels, cfg.patch, rng);
        patches.push_back(cfg.augment ? augment_light(p, rng) : std::move(p));
      }
      std::vector<const RasterImage*> imgs;
      std::vector<const SoftLabelMap*> labs;
      for (const auto& p : patches) {
        imgs.push_back(&p.image);
        labs.push_back(&p.labels);
      }
      std::vector<float> grad;
      const auto v = batch_loss(model, imgs, labs, cfg, ontology, &grad);
      if (!v) {
        ++entry.skipped_batches;
        continue;
      }
      adamw_step<float>(model.parameters(), grad, opt, schedule.lr, adam);
      loss_sum += *v;
      ++steps;
    }
    entry.train_loss = steps ? loss_sum / steps : std::numeric_limits<double>::quiet_NaN();
    entry.val_loss = validation_loss(model, val_set, cfg, ontology);
    if (!std::isfinite(entry.val_loss)) throw Error("validation loss is not finite at epoch " + std::to_string(epoch));

    result.last = Checkpoint{config_hash, epoch, entry.val_loss, schedule.lr, model, opt};
    if (entry.val_loss < best_val) {
      best_val = entry.val_loss;
      result.best = result.last;
      result.best_epoch = epoch;
    }
    schedule.step(entry.val_loss);
    result.last.lr = schedule.lr;
    if (!checkpoint_dir.empty()) {
      save_checkpoint(checkpoint_dir / "last.mun", result.last);
      save_checkpoint(checkpoint_dir / "best.mun", result.best);
    }
    if (log) *log << to_json(entry).dump() << '\n';
    result.log.push_back(entry);
  }
  return result;
}

}  // namespace softseg
