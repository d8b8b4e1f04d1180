// softseg: batch command-line surface over the library. Every command that
// writes files takes --out DIR and leaves a run manifest there; `replay`
// re-runs a manifest and compares the outputs.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "softseg/agreement.hpp"
#include "softseg/annotations.hpp"
#include "softseg/fusion.hpp"
#include "softseg/inference.hpp"
#include "softseg/io.hpp"
#include "softseg/metrics.hpp"
#include "softseg/ontology.hpp"
#include "softseg/parallel.hpp"
#include "softseg/predictive.hpp"
#include "softseg/repro.hpp"
#include "softseg/run_manifest.hpp"
#include "softseg/splitter.hpp"
#include "softseg/synthkit.hpp"
#include "softseg/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace softseg;

namespace {

// Label PNG codes for masks that are not plain class maps.
constexpr int kInvalidLabel = 255;

struct Globals {
  std::uint64_t seed = 0;
  int threads = 0;
  std::string ontology;
  std::string level;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path resolve_relative(const fs::path& base_file, const std::string& p) {
  const fs::path path(p);
  if (path.is_absolute()) return path;
  return fs::absolute(base_file).parent_path() / path;
}

/// Shared state of one command invocation.
class Run {
 public:
  Run(const Globals& g, std::vector<std::string> argv) : g_(g) {
    manifest_.argv = std::move(argv);
    manifest_.working_directory = fs::current_path().string();
    if (g.threads > 0) set_thread_count(g.threads);
    manifest_.threads = thread_count();
    manifest_.seeds.push_back(g.seed);
    if (g.ontology.empty()) {
      onto_ = Ontology::load_default();
      manifest_.add_input(Ontology::default_path());
    } else {
      onto_ = Ontology::load(g.ontology);
      manifest_.add_input(g.ontology);
    }
    manifest_.config["seed"] = g.seed;
    manifest_.config["ontology"] = g.ontology.empty() ? Ontology::default_path().string() : g.ontology;
    if (!g.level.empty()) manifest_.config["level"] = g.level;
  }

  const Ontology& ontology() const { return onto_; }
  std::uint64_t seed() const { return g_.seed; }
  std::optional<Level> level() const {
    if (g_.level.empty()) return std::nullopt;
    return parse_level(g_.level);
  }
  Level level_or(Level fallback) const { return level().value_or(fallback); }

  void begin(const std::string& command, const fs::path& out) {
    manifest_.command = command;
    out_ = out;
    fs::create_directories(out_);
  }

  const fs::path& out() const { return out_; }
  json& config() { return manifest_.config; }
  void input(const fs::path& p) { manifest_.add_input(p); }
  void seed_used(std::uint64_t s) { manifest_.seeds.push_back(s); }

  /// Checks every output, then records hashes and writes the manifest.
  void finish() {
    for (const auto& e : fs::recursive_directory_iterator(out_)) {
      if (!e.is_regular_file()) continue;
      validate_output(e.path());
    }
    manifest_.collect_outputs(out_);
    if (manifest_.outputs.empty()) throw Error("no outputs were written to " + out_.string());
    manifest_.save(out_);
  }

 private:
  void validate_output(const fs::path& p) const {
    if (p.filename() == kRunManifestName) return;
    if (fs::file_size(p) == 0) throw Error("output " + p.string() + " is empty");
    const auto ext = p.extension().string();
    if (ext == ".json") {
      read_json(p);
    } else if (ext == ".jsonl") {
      std::ifstream in(p);
      std::string line;
      while (std::getline(in, line))
        if (!line.empty() && !json::accept(line)) throw Error("output " + p.string() + ": malformed JSON line");
    } else if (ext == ".slt") {
      const auto s = load_slt(p);
      for (std::size_t i = 0; i < s.probs.pixels(); ++i) {
        if (!s.foreground[i]) continue;
        double sum = 0.0;
        for (double v : s.probs.pixel(i)) sum += v;
        if (std::abs(sum - 1.0) > 1e-4) throw Error("output " + p.string() + ": pixel distribution does not sum to 1");
      }
    } else if (ext == ".png") {
      read_label_png(p);
    } else if (ext == ".mun") {
      load_checkpoint(p);
    }
  }

  Globals g_;
  Ontology onto_;
  RunManifest manifest_;
  fs::path out_;
};

// ---------------------------------------------------------------------------
// Annotation helpers

struct LoadedImage {
  ImageAnnotations manifest;
  CleanedAnnotations cleaned;
  fs::path image_path;  // empty when the manifest names no image
};

LoadedImage load_image_annotations(Run& run, const fs::path& manifest_path, const SynonymTable& synonyms) {
  LoadedImage li;
  run.input(manifest_path);
  li.manifest = load_annotation_manifest(manifest_path);
  li.cleaned = clean_and_rasterize(li.manifest, run.ontology(), synonyms);
  if (!li.manifest.image_path.empty()) li.image_path = resolve_relative(manifest_path, li.manifest.image_path);
  return li;
}

SynonymTable load_synonyms(Run& run, const std::string& path, Level level) {
  if (path == "none") return {};
  const fs::path p = path.empty() ? fs::path(SOFTSEG_DATA_DIR) / "synonyms.txt" : fs::path(path);
  run.input(p);
  return SynonymTable::load(p, run.ontology(), level);
}

Mask foreground_for(Run& run, const LoadedImage& li, const std::string& mode) {
  const int h = li.manifest.height, w = li.manifest.width;
  if (mode == "all" || li.image_path.empty()) return Mask(h, w, 1);
  if (mode != "auto") throw Error("--foreground must be auto or all");
  run.input(li.image_path);
  const auto img = read_png(li.image_path);
  if (img.height != h || img.width != w)
    throw Error("image " + li.image_path.string() + " does not match the manifest size");
  return foreground_mask(img).mask;
}

LabelGrid majority_png_labels(const MajorityLabelMap& m) {
  LabelGrid out(m.labels.height(), m.labels.width(), kInvalidLabel);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (m.valid[i]) out[i] = m.labels[i];
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct OntologyOpts {
  std::string out;
};

int cmd_ontology_validate(Run& run, const OntologyOpts& o) {
  const auto& onto = run.ontology();
  std::cout << "ontology valid:";
  for (int l = 0; l < onto.level_count(); ++l)
    std::cout << ' ' << to_string(static_cast<Level>(l)) << '=' << onto.class_count(static_cast<Level>(l));
  std::cout << '\n';
  if (!o.out.empty()) {
    run.begin("ontology validate", o.out);
    json j{{"levels", json::object()}, {"ontology", onto.to_json()}};
    for (int l = 0; l < onto.level_count(); ++l)
      j["levels"][std::string(to_string(static_cast<Level>(l)))] = onto.class_count(static_cast<Level>(l));
    write_json(run.out() / "ontology.json", j);
    run.finish();
  }
  return 0;
}

struct RasterizeOpts {
  std::vector<std::string> manifests;
  std::string synonyms;
  std::string out;
};

int cmd_rasterize(Run& run, const RasterizeOpts& o) {
  run.begin("rasterize", o.out);
  json report = json::array();
  for (const auto& mp : o.manifests) {
    const auto probe = load_annotation_manifest(mp);
    const auto synonyms = load_synonyms(run, o.synonyms, probe.level);
    const auto li = load_image_annotations(run, mp, synonyms);
    json entry{{"image_id", li.manifest.image_id},
               {"level", std::string(to_string(li.manifest.level))},
               {"dropped_polygons", li.cleaned.dropped_polygons},
               {"warnings", li.cleaned.warnings},
               {"annotators", json::array()}};
    for (std::size_t a = 0; a < li.cleaned.masks.size(); ++a) {
      const auto& m = li.cleaned.masks[a];
      // Group index + 1 per pixel, 0 where unannotated; groups list the classes.
      LabelGrid codes(m.height(), m.width(), 0);
      for (std::size_t i = 0; i < codes.size(); ++i) codes[i] = m.group_at(i) + 1;
      if (m.groups().size() > 254) throw Error("rasterize: too many label groups for an 8-bit mask");
      const std::string file = li.manifest.image_id + "__" + li.cleaned.annotator_ids[a] + ".png";
      write_label_png(run.out() / file, codes);
      entry["annotators"].push_back({{"annotator_id", li.cleaned.annotator_ids[a]}, {"mask", file}, {"groups", m.groups()}});
    }
    report.push_back(std::move(entry));
  }
  run.config()["manifests"] = o.manifests;
  run.config()["synonyms"] = o.synonyms;
  write_json(run.out() / "rasterize.json", report);
  run.finish();
  return 0;
}

struct FuseOpts {
  std::vector<std::string> manifests;
  std::string synonyms;
  std::string foreground = "auto";
  std::string out;
  int max_iterations = 100;
  double tolerance = 1e-6;
};

int cmd_fuse(Run& run, const std::string& mode, const FuseOpts& o) {
  run.begin("fuse " + mode, o.out);
  json summary = json::array();
  json dataset{{"samples", json::array()}};
  for (const auto& mp : o.manifests) {
    const auto probe = load_annotation_manifest(mp);
    const auto synonyms = load_synonyms(run, o.synonyms, probe.level);
    const auto li = load_image_annotations(run, mp, synonyms);
    const Level level = run.level_or(li.manifest.level);
    const auto fg = foreground_for(run, li, o.foreground);
    const auto& id = li.manifest.image_id;
    json entry{{"image_id", id}, {"level", std::string(to_string(level))}, {"warnings", li.cleaned.warnings}};
    if (mode == "soft" || mode == "majority") {
      const auto soft = build_soft_labels(li.cleaned.masks, fg, level, run.ontology());
      if (mode == "soft") {
        save_slt(run.out() / (id + ".slt"), soft);
        entry["labels"] = id + ".slt";
        entry["ambiguous_pixels"] = std::count(soft.ambiguous.values().begin(), soft.ambiguous.values().end(), 1);
        json sample{{"id", id}, {"labels", id + ".slt"}};
        if (!li.image_path.empty()) sample["image"] = fs::absolute(li.image_path).lexically_normal().string();
        dataset["samples"].push_back(std::move(sample));
      } else {
        const auto maj = majority_vote(soft);
        write_label_png(run.out() / (id + ".majority.png"), majority_png_labels(maj));
        entry["labels"] = id + ".majority.png";
        entry["valid_pixels"] = std::count(maj.valid.values().begin(), maj.valid.values().end(), 1);
      }
    } else {
      std::vector<LabelGrid> hard;
      for (const auto& m : li.cleaned.masks) {
        auto labels = m.remapped(run.ontology(), level).hard_labels();
        const auto remapped = m.remapped(run.ontology(), level);
        for (std::size_t i = 0; i < labels.size(); ++i) {
          if (labels[i] == -1) labels[i] = kBenign;
          if (labels[i] == -2) labels[i] = remapped.classes_at(i).front();
        }
        hard.push_back(std::move(labels));
      }
      StapleOptions opt;
      opt.max_iterations = o.max_iterations;
      opt.tolerance = o.tolerance;
      const auto res = staple_multiclass(hard, run.ontology().class_count(level), opt);
      LabelGrid consensus = res.consensus;
      for (std::size_t i = 0; i < consensus.size(); ++i)
        if (!fg[i]) consensus[i] = kInvalidLabel;
      write_label_png(run.out() / (id + ".staple.png"), consensus);
      entry["labels"] = id + ".staple.png";
      entry["iterations"] = res.iterations;
      entry["converged"] = res.converged;
      entry["sensitivity"] = res.sensitivity;
      entry["specificity"] = res.specificity;
      entry["annotators"] = li.cleaned.annotator_ids;
      entry["staple_warnings"] = res.warnings;
    }
    summary.push_back(std::move(entry));
  }
  run.config()["manifests"] = o.manifests;
  run.config()["synonyms"] = o.synonyms;
  run.config()["foreground"] = o.foreground;
  if (mode == "staple") run.config()["staple"] = {{"max_iterations", o.max_iterations}, {"tolerance", o.tolerance}};
  write_json(run.out() / ("fuse_" + mode + ".json"), summary);
  if (mode == "soft") write_json(run.out() / "dataset.json", dataset);
  run.finish();
  return 0;
}

struct AgreeOpts {
  std::vector<std::string> manifests;
  std::vector<std::string> slt;
  std::string synonyms;
  std::string groups;
  std::string grades;
  int resamples = 1000;
  int raters = 0;
  std::string out;
};

// Smallest K for which every foreground probability is a multiple of 1/K.
int infer_rater_count(const SoftLabelMap& s) {
  for (int k = 1; k <= 64; ++k) {
    bool ok = true;
    for (std::size_t i = 0; ok && i < s.probs.pixels(); ++i) {
      if (!s.foreground[i]) continue;
      for (double v : s.probs.pixel(i))
        if (std::abs(v * k - std::round(v * k)) > 1e-3) {
          ok = false;
          break;
        }
    }
    if (ok) return k;
  }
  throw Error("cannot infer the rater count from soft labels; pass --raters");
}

std::map<std::string, std::string> load_groups(Run& run, const std::string& path) {
  std::map<std::string, std::string> out;
  if (path.empty()) return out;
  run.input(path);
  const auto j = read_json(path);
  for (const auto& [k, v] : j.items()) out[k] = v.get<std::string>();
  return out;
}

PresenceTable presence_from_manifests(Run& run, const AgreeOpts& o, Level level,
                                      const std::map<std::string, std::string>& groups) {
  auto table = make_presence_table(run.ontology(), level);
  for (const auto& mp : o.manifests) {
    run.input(mp);
    const auto m = load_annotation_manifest(mp);
    const auto synonyms = load_synonyms(run, o.synonyms, m.level);
    const auto g = groups.find(m.image_id);
    add_presence(table, m, run.ontology(), synonyms, g == groups.end() ? std::string{} : g->second);
  }
  return table;
}

GleasonScore parse_score(const Ontology& onto, const json& j) {
  auto pattern = [&](const std::string& s) {
    const auto id = onto.find(Level::pattern, s);
    if (!id) throw Error("unknown pattern '" + s + "' in grade file");
    return *id;
  };
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    const auto plus = s.find('+');
    if (plus == std::string::npos) throw Error("grade '" + s + "' is not of the form A+B");
    return {pattern(s.substr(0, plus)), pattern(s.substr(plus + 1))};
  }
  return {pattern(j.at("primary").get<std::string>()), pattern(j.at("secondary").get<std::string>())};
}

int cmd_agree(Run& run, const std::string& mode, const AgreeOpts& o) {
  run.begin("agree " + mode, o.out);
  const Level level = run.level_or(Level::explanation);
  run.config()["manifests"] = o.manifests;
  run.config()["level"] = std::string(to_string(level));
  if (mode == "kappa" || mode == "heatmap") {
    if (o.manifests.empty()) throw Error("agree " + mode + ": --manifests is required");
    const auto groups = load_groups(run, o.groups);
    const auto table = presence_from_manifests(run, o, level, groups);
    std::vector<KappaScope> scopes{KappaScope::global()};
    for (const auto& g : std::set<std::string>(
             [&] {
               std::set<std::string> s;
               for (const auto& [_, v] : groups) s.insert(v);
               return s;
             }()))
      scopes.push_back(KappaScope::of_group(g));
    if (mode == "kappa") {
      run.config()["resamples"] = o.resamples;
      std::vector<KappaReport> reports;
      json j{{"level", std::string(to_string(level))}, {"reports", json::array()}, {"pooled", json::object()},
             {"label_average", json::object()}};
      for (const auto& scope : scopes) {
        for (int l = 0; l < static_cast<int>(table.labels.size()); ++l) {
          reports.push_back(kappa_report(table, scope, table.labels[l], o.resamples, run.seed()));
          j["reports"].push_back(to_json(reports.back()));
        }
        const auto pooled = kappa_pooled(table, scope);
        const auto avg = kappa_label_average(table, scope);
        j["pooled"][scope.name()] = pooled ? json(*pooled) : json(nullptr);
        j["label_average"][scope.name()] = avg ? json(*avg) : json(nullptr);
      }
      write_json(run.out() / "kappa.json", j);
      write_text(run.out() / "kappa.csv", kappa_csv(reports));
    } else {
      json j = json::object();
      std::ostringstream csv;
      csv << "group,label";
      const auto first = presence_heatmap(table, scopes.front());
      for (int k = 0; k <= first.raters; ++k) csv << ",k" << k;
      csv << '\n';
      for (const auto& scope : scopes) {
        const auto h = presence_heatmap(table, scope);
        j[scope.name()] = {{"raters", h.raters}, {"labels", h.label_names}, {"counts", h.counts}};
        for (std::size_t l = 0; l < h.counts.size(); ++l) {
          csv << scope.name() << ",\"" << h.label_names[l] << '"';
          for (int v : h.counts[l]) csv << ',' << v;
          csv << '\n';
        }
      }
      write_json(run.out() / "heatmap.json", j);
      write_text(run.out() / "heatmap.csv", csv.str());
    }
  } else if (mode == "pixels") {
    if (o.slt.empty()) throw Error("agree pixels: --slt is required");
    std::vector<SoftLabelMap> maps;
    for (const auto& p : o.slt) {
      run.input(p);
      auto s = load_slt(p);
      s.annotator_count = o.raters > 0 ? o.raters : infer_rater_count(s);
      // Stored as f32; snap back to exact vote fractions.
      for (auto& v : s.probs.values()) v = std::round(v * s.annotator_count) / s.annotator_count;
      if (run.level() && *run.level() != s.level) s = remap_soft_labels(s, run.ontology(), *run.level());
      maps.push_back(std::move(s));
    }
    run.config()["slt"] = o.slt;
    run.config()["raters"] = o.raters;
    const auto st = pixel_agreement_stats(maps);
    write_json(run.out() / "pixels.json", {{"raters", st.raters},
                                            {"foreground_pixels", st.foreground_pixels},
                                            {"class_pixels", st.class_pixels},
                                            {"class_share", st.class_share},
                                            {"unique_majority_share", st.unique_majority_share},
                                            {"majority_votes_share", st.majority_votes_share}});
  } else {
    if (o.grades.empty() || o.manifests.empty()) throw Error("agree grade-confusion: --grades and --manifests are required");
    run.input(o.grades);
    std::map<std::string, GleasonScore> given;
    const auto grades = read_json(o.grades);
    for (const auto& [k, v] : grades.items()) given[k] = parse_score(run.ontology(), v);
    std::map<std::string, std::set<int>> annotated;
    for (const auto& mp : o.manifests) {
      run.input(mp);
      const auto m = load_annotation_manifest(mp);
      annotated[m.image_id] = annotated_patterns(m, run.ontology(), load_synonyms(run, o.synonyms, m.level));
    }
    const auto g = grade_annotation_confusion(given, annotated, run.ontology());
    std::ostringstream csv;
    csv << "given";
    for (const auto& c : g.col_labels) csv << ',' << c;
    csv << '\n';
    for (std::size_t r = 0; r < g.row_labels.size(); ++r) {
      csv << g.row_labels[r];
      for (int v : g.counts[r]) csv << ',' << v;
      csv << '\n';
    }
    write_json(run.out() / "grade_confusion.json",
               {{"rows", g.row_labels}, {"columns", g.col_labels}, {"counts", g.counts}, {"skipped", g.skipped}});
    write_text(run.out() / "grade_confusion.csv", csv.str());
  }
  run.finish();
  return 0;
}

struct SplitOpts {
  std::vector<std::string> slt;
  int restarts = 8;
  int iterations = 10000;
  std::vector<double> fractions{kDefaultFractions.begin(), kDefaultFractions.end()};
  std::string out;
};

int cmd_split(Run& run, const SplitOpts& o) {
  run.begin("split", o.out);
  if (o.fractions.size() != 3) throw Error("split: --fractions needs three values");
  std::vector<std::vector<double>> mass;
  std::vector<std::string> ids;
  std::optional<Level> level = run.level();
  for (const auto& p : o.slt) {
    run.input(p);
    auto s = load_slt(p);
    if (!level) level = s.level;
    if (s.level != *level) s = remap_soft_labels(s, run.ontology(), *level);
    mass.push_back(class_pixel_mass(s));
    ids.push_back(fs::path(p).stem().string());
  }
  if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size()) throw Error("split: duplicate image ids");
  const SplitFractions f{o.fractions[0], o.fractions[1], o.fractions[2]};
  const auto a = optimize_split_restarts(mass, o.restarts, f, o.iterations, run.seed());
  run.config()["slt"] = o.slt;
  run.config()["restarts"] = o.restarts;
  run.config()["iterations"] = o.iterations;
  run.config()["fractions"] = o.fractions;
  write_json(run.out() / "split.json", split_to_json(a, ids, f, to_string(*level)));
  std::cout << "split objective " << a.objective << '\n';
  run.finish();
  return 0;
}

struct DatasetSample {
  std::string id;
  fs::path image;
  fs::path labels;
};

std::vector<DatasetSample> load_dataset(Run& run, const std::string& path) {
  run.input(path);
  const auto j = read_json(path);
  std::vector<DatasetSample> out;
  for (const auto& s : j.at("samples")) {
    if (!s.contains("image")) throw Error("dataset sample " + s.at("id").get<std::string>() + " has no image");
    out.push_back({s.at("id").get<std::string>(), resolve_relative(path, s.at("image").get<std::string>()),
                   resolve_relative(path, s.at("labels").get<std::string>())});
  }
  if (out.empty()) throw Error("dataset " + path + " has no samples");
  return out;
}

TrainingSample load_sample(Run& run, const DatasetSample& d, std::optional<Level> level) {
  run.input(d.image);
  run.input(d.labels);
  auto labels = load_slt(d.labels);
  if (level && *level != labels.level) labels = remap_soft_labels(labels, run.ontology(), *level);
  auto image = read_png(d.image);
  if (image.height != labels.height() || image.width != labels.width())
    throw Error("sample " + d.id + ": image and labels differ in size");
  return {d.id, std::move(image), std::move(labels)};
}

struct TrainOpts {
  std::string dataset;
  std::string split;
  std::string trainer_config;
  std::string loss;
  int epochs = 0;
  double lr = 0.0;
  int batch = 0;
  int patch = 0;
  int patches_per_image = 0;
  bool no_augment = false;
  std::string out;
};

int cmd_train(Run& run, const TrainOpts& o) {
  run.begin("train", o.out);
  TrainerConfig cfg;
  if (!o.trainer_config.empty()) {
    run.input(o.trainer_config);
    cfg = TrainerConfig::from_json(read_json(o.trainer_config));
  }
  if (!o.loss.empty()) cfg.loss = parse_loss_id(o.loss);
  if (o.epochs > 0) cfg.epochs = o.epochs;
  if (o.lr > 0) cfg.lr0 = o.lr;
  if (o.batch > 0) cfg.batch = o.batch;
  if (o.patch > 0) cfg.patch = cfg.val_patch = o.patch;
  if (o.patches_per_image > 0) cfg.patches_per_image = o.patches_per_image;
  if (o.no_augment) cfg.augment = false;
  cfg.seed = run.seed();

  const auto samples = load_dataset(run, o.dataset);
  run.input(o.split);
  const auto tags = split_from_json(read_json(o.split));
  std::vector<TrainingSample> train_set, val_set;
  std::optional<Level> level = run.level();
  for (const auto& d : samples) {
    const auto it = tags.find(d.id);
    if (it == tags.end() || it->second == SplitTag::test) continue;
    auto s = load_sample(run, d, level);
    if (!level) level = s.labels.level;
    (it->second == SplitTag::train ? train_set : val_set).push_back(std::move(s));
  }
  if (!level) throw Error("train: no training samples in the split");
  cfg.level = *level;
  cfg.validate();
  run.config()["trainer"] = cfg.to_json();
  run.config()["dataset"] = o.dataset;
  run.config()["split"] = o.split;
  write_json(run.out() / "trainer.json", cfg.to_json());
  std::ofstream log(run.out() / "train_log.jsonl");
  const auto result = train(cfg, train_set, val_set, run.ontology(), &log, run.out());
  log.close();
  write_json(run.out() / "train_summary.json", {{"best_epoch", result.best_epoch},
                                                {"best_val_loss", result.best.val_loss},
                                                {"epochs", cfg.epochs},
                                                {"train_images", train_set.size()},
                                                {"val_images", val_set.size()},
                                                {"level", std::string(to_string(cfg.level))},
                                                {"config_hash", hex64(cfg.hash())}});
  std::cout << "best epoch " << result.best_epoch << " val loss " << result.best.val_loss << '\n';
  run.finish();
  return 0;
}

Level level_of_checkpoint(const Run& run, const Checkpoint& ck) {
  if (run.level()) {
    if (run.ontology().class_count(*run.level()) != ck.model.classes())
      throw Error("checkpoint has " + std::to_string(ck.model.classes()) + " classes, level " +
                  std::string(to_string(*run.level())) + " has " + std::to_string(run.ontology().class_count(*run.level())));
    return *run.level();
  }
  std::vector<Level> hits;
  for (int l = 0; l < run.ontology().level_count(); ++l)
    if (run.ontology().class_count(static_cast<Level>(l)) == ck.model.classes()) hits.push_back(static_cast<Level>(l));
  if (hits.size() != 1) throw Error("cannot infer the checkpoint level from its class count; pass --level");
  return hits.front();
}

SlidingWindowOptions window_for(int window, double overlap, const RasterImage& img) {
  SlidingWindowOptions sw;
  sw.overlap = overlap;
  if (window > 0) {
    sw.window = window;
  } else {
    const int side = std::max(2, std::min({512, img.height, img.width}) / 2 * 2);
    sw.window = side;
  }
  return sw;
}

struct EvalOpts {
  std::string dataset;
  std::string checkpoint;
  std::string split;
  std::string subset = "test";
  std::string eval_level;
  int window = 0;
  double overlap = 0.5;
  std::string out;
};

int cmd_eval(Run& run, const EvalOpts& o) {
  run.begin("eval", o.out);
  run.input(o.checkpoint);
  const auto ck = load_checkpoint(o.checkpoint);
  const Level trained = level_of_checkpoint(run, ck);
  const Level eval_level = o.eval_level.empty() ? trained : parse_level(o.eval_level);
  std::map<std::string, SplitTag> tags;
  if (!o.split.empty()) {
    run.input(o.split);
    tags = split_from_json(read_json(o.split));
  }
  const SplitTag subset = parse_split(o.subset);
  DatasetEvaluator eval(run.ontology(), trained, eval_level);
  json per_image = json::array();
  for (const auto& d : load_dataset(run, o.dataset)) {
    if (!tags.empty()) {
      const auto it = tags.find(d.id);
      if (it == tags.end() || it->second != subset) continue;
    }
    const auto s = load_sample(run, d, std::nullopt);
    const auto pred = sliding_window_predict(ck.model, s.image, trained, window_for(o.window, o.overlap, s.image),
                                             s.labels.foreground);
    eval.add(pred, s.labels);
    per_image.push_back({{"id", d.id}, {"metrics", evaluate(pred, s.labels, run.ontology(), eval_level).values}});
  }
  if (per_image.empty()) throw Error("eval: no images selected");
  const auto r = eval.result();
  std::vector<std::string> names;
  for (const auto& n : run.ontology().nodes(eval_level)) names.push_back(n.short_name);
  run.config()["dataset"] = o.dataset;
  run.config()["checkpoint"] = o.checkpoint;
  run.config()["split"] = o.split;
  run.config()["subset"] = o.subset;
  run.config()["eval_level"] = std::string(to_string(eval_level));
  run.config()["window"] = o.window;
  run.config()["overlap"] = o.overlap;
  json j = to_json(summarize({r}), &run.ontology());
  j["values"] = r.values;
  j["images"] = per_image;
  write_json(run.out() / "eval.json", j);
  write_text(run.out() / "confusion.csv", confusion_csv(r.confusion, names));
  for (const auto& [k, v] : r.values) std::cout << k << ' ' << v << '\n';
  run.finish();
  return 0;
}

struct InferOpts {
  std::string checkpoint;
  std::vector<std::string> images;
  int window = 0;
  double overlap = 0.5;
  std::string foreground = "auto";
  std::string out;
};

int cmd_infer(Run& run, const InferOpts& o) {
  run.begin("infer", o.out);
  run.input(o.checkpoint);
  const auto ck = load_checkpoint(o.checkpoint);
  const Level level = level_of_checkpoint(run, ck);
  for (const auto& p : o.images) {
    run.input(p);
    const auto img = read_png(p);
    Mask fg;
    if (o.foreground == "auto") fg = foreground_mask(img).mask;
    else if (o.foreground == "all") fg = Mask(img.height, img.width, 1);
    else throw Error("--foreground must be auto or all");
    const auto pred = sliding_window_predict(ck.model, img, level, window_for(o.window, o.overlap, img), fg);
    const auto stem = fs::path(p).stem().string();
    save_prediction(run.out() / (stem + ".slt"), pred);
    auto labels = argmax_labels(pred.probs);
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (!fg[i]) labels[i] = kInvalidLabel;
    write_label_png(run.out() / (stem + ".labels.png"), labels);
  }
  run.config()["checkpoint"] = o.checkpoint;
  run.config()["images"] = o.images;
  run.config()["window"] = o.window;
  run.config()["overlap"] = o.overlap;
  run.config()["foreground"] = o.foreground;
  run.finish();
  return 0;
}

struct RenderOpts {
  std::string image;
  std::string pred;
  double alpha = 0.5;
  std::string out;
};

int cmd_render(Run& run, const RenderOpts& o) {
  run.begin("render", o.out);
  run.input(o.image);
  run.input(o.pred);
  const auto img = read_png(o.image);
  auto pred = load_prediction(o.pred);
  if (run.level() && *run.level() != pred.level) pred = predict_remapped(pred, run.ontology(), *run.level());
  const auto overlay = render_overlay(img, pred.probs, pred.foreground, run.ontology(), pred.level, o.alpha);
  write_png(run.out() / (fs::path(o.image).stem().string() + ".overlay.png"), overlay);
  run.config()["image"] = o.image;
  run.config()["pred"] = o.pred;
  run.config()["alpha"] = o.alpha;
  run.finish();
  return 0;
}

struct SynthOpts {
  int count = 10;
  int size = 64;
  double radius = 0.0;
  int regions = 10;
  int raters = 3;
  double disagreement = 0.9;
  double cross = 0.1;
  double jitter = 1.5;
  std::vector<double> prior;
  std::string out;
};

SynthConfig synth_config(const Run& run, const SynthOpts& o, Level level) {
  SynthConfig s;
  s.height = s.width = o.size;
  s.core_radius = o.radius > 0 ? o.radius : o.size * 0.4375;
  s.regions = o.regions;
  const int c = run.ontology().class_count(level);
  if (!o.prior.empty()) {
    s.prior = o.prior;
  } else if (c == static_cast<int>(StudyConfig{}.prior.size())) {
    s.prior = StudyConfig{}.prior;
  } else {
    s.prior.assign(c, 1.0 / c);
  }
  s.palette = default_palette(c);
  for (int k = 0; k < o.raters; ++k)
    s.raters.push_back(level == Level::pattern ? identity_confusion(c)
                                                : sibling_shift_confusion(run.ontology(), level, k, o.disagreement, o.cross));
  s.jitter = o.jitter;
  s.level = level;
  s.seed = run.seed();
  s.validate();
  return s;
}

int cmd_synth(Run& run, const std::string& mode, const SynthOpts& o) {
  run.begin("synth " + mode, o.out);
  const Level level = run.level_or(Level::explanation);
  const auto cfg = synth_config(run, o, level);
  for (int i = 0; i < o.count; ++i) {
    const auto scene = generate_scene(cfg, static_cast<std::uint64_t>(i));
    char name[32];
    std::snprintf(name, sizeof name, "scene-%04d", i);
    const std::string id = name;
    write_png(run.out() / (id + ".png"), scene.image);
    if (mode == "scene") {
      write_label_png(run.out() / (id + ".truth.png"), scene.truth);
      write_mask_png(run.out() / (id + ".core.png"), scene.core);
    } else {
      ImageAnnotations m;
      m.image_id = id;
      m.image_path = id + ".png";
      m.height = cfg.height;
      m.width = cfg.width;
      m.level = level;
      for (int k = 0; k < cfg.rater_count(); ++k) {
        const auto mask = simulate_rater(scene, cfg.raters[k], cfg.jitter,
                                         derive_seed(scene.seed, 100 + static_cast<std::uint64_t>(k)), level);
        m.annotators.push_back(export_rater(mask, id, "rater" + std::to_string(k)));
      }
      write_json(run.out() / (id + ".json"), to_json(m));
    }
  }
  run.config()["synth"] = {{"count", o.count},     {"size", o.size},       {"core_radius", cfg.core_radius},
                           {"regions", o.regions}, {"raters", o.raters},   {"disagreement", o.disagreement},
                           {"cross", o.cross},     {"jitter", o.jitter},   {"prior", cfg.prior},
                           {"level", std::string(to_string(level))}};
  run.finish();
  return 0;
}

struct ReproOpts {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int images = 0;
  int epochs = 0;
  int size = 0;
  std::uint64_t data_seed = 7;
  std::string out;
};

int cmd_repro(Run& run, const ReproOpts& o) {
  run.begin("repro soft-vs-hard", o.out);
  StudyConfig cfg;
  cfg.seeds = o.seeds;
  if (o.images > 0) cfg.images = o.images;
  if (o.epochs > 0) cfg.trainer.epochs = o.epochs;
  if (o.size > 0) {
    cfg.core_radius = cfg.core_radius * o.size / cfg.image_size;
    cfg.image_size = o.size;
  }
  cfg.data_seed = o.data_seed;
  for (auto s : o.seeds) run.seed_used(s);
  run.config()["study"] = cfg.to_json();
  std::ofstream log(run.out() / "study_log.jsonl");
  const auto r = run_soft_vs_hard(cfg, run.ontology(), &log);
  log.close();
  write_json(run.out() / "report.json", to_json(r, run.ontology()));
  std::cout << "macro dice margin " << r.macro_dice_margin << (r.condition_a ? " (met)" : " (not met)") << '\n'
            << "coarse dice gap " << r.dice_gap << (r.condition_b ? " (met)" : " (not met)") << '\n';
  run.finish();
  return 0;
}

int run_cli(std::vector<std::string> args);

struct ReplayOpts {
  std::string manifest;
  std::string out;
  int threads = 0;
  double tolerance = 0.0;
};

bool lines_close(const fs::path& a, const fs::path& b, double tol) {
  std::ifstream fa(a), fb(b);
  std::string la, lb;
  while (true) {
    const bool ga = static_cast<bool>(std::getline(fa, la)), gb = static_cast<bool>(std::getline(fb, lb));
    if (ga != gb) return false;
    if (!ga) return true;
    if (la == lb) continue;
    try {
      if (!json_close(json::parse(la), json::parse(lb), tol)) return false;
    } catch (const json::exception&) {
      return false;
    }
  }
}

int cmd_replay(const ReplayOpts& o) {
  const fs::path manifest_path = fs::is_directory(o.manifest) ? fs::path(o.manifest) / kRunManifestName : fs::path(o.manifest);
  const auto m = RunManifest::load(manifest_path);
  const fs::path original_dir = fs::absolute(manifest_path).parent_path();
  const fs::path new_dir = fs::absolute(o.out);
  if (fs::weakly_canonical(original_dir) == fs::weakly_canonical(new_dir))
    throw Error("replay: --out must differ from the original output directory");

  std::vector<std::string> args;
  bool replaced = false;
  for (std::size_t i = 0; i < m.argv.size(); ++i) {
    const auto& a = m.argv[i];
    if ((a == "--out" || a == "-o") && i + 1 < m.argv.size()) {
      args.push_back(a);
      args.push_back(new_dir.string());
      ++i;
      replaced = true;
    } else if (a.rfind("--out=", 0) == 0) {
      args.push_back("--out=" + new_dir.string());
      replaced = true;
    } else if (o.threads > 0 && (a == "--threads" || a == "-j") && i + 1 < m.argv.size()) {
      ++i;
    } else if (o.threads > 0 && a.rfind("--threads=", 0) == 0) {
      continue;
    } else {
      args.push_back(a);
    }
  }
  if (!replaced) throw Error("replay: recorded command has no --out");
  if (o.threads > 0) {
    args.push_back("--threads");
    args.push_back(std::to_string(o.threads));
  }

  const auto cwd = fs::current_path();
  if (!m.working_directory.empty() && fs::exists(m.working_directory)) fs::current_path(m.working_directory);
  int rc = 0;
  try {
    rc = run_cli(args);
  } catch (...) {
    fs::current_path(cwd);
    throw;
  }
  fs::current_path(cwd);
  if (rc != 0) return rc;

  const auto again = RunManifest::load(new_dir);
  int exact = 0, close = 0, differ = 0;
  for (const auto& [rel, hash] : m.outputs) {
    const auto it = again.outputs.find(rel);
    if (it == again.outputs.end()) {
      std::cout << "missing " << rel << '\n';
      ++differ;
    } else if (it->second == hash) {
      ++exact;
    } else {
      const auto ext = fs::path(rel).extension().string();
      bool ok = false;
      if (o.tolerance > 0 && ext == ".json")
        ok = json_close(read_json(original_dir / rel), read_json(new_dir / rel), o.tolerance);
      else if (o.tolerance > 0 && ext == ".jsonl")
        ok = lines_close(original_dir / rel, new_dir / rel, o.tolerance);
      std::cout << (ok ? "close " : "differs ") << rel << '\n';
      ++(ok ? close : differ);
    }
  }
  for (const auto& [rel, _] : again.outputs)
    if (!m.outputs.count(rel)) {
      std::cout << "extra " << rel << '\n';
      ++differ;
    }
  std::cout << "replay: " << exact << " identical, " << close << " within tolerance, " << differ << " different\n";
  return differ ? 3 : 0;
}

void add_out(CLI::App* cmd, std::string& out) {
  cmd->add_option("-o,--out", out, "Output directory")->required();
}

int run_cli(std::vector<std::string> args) {
  CLI::App app{"softseg: soft-label segmentation toolkit"};
  app.set_version_flag("--version", kToolkitVersion);
  app.set_config("--config", "", "TOML/INI file with option values; command-line flags win");
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--threads,-j", g.threads, "Worker threads (default: SOFTSEG_THREADS or logical cores)")
      ->check(CLI::NonNegativeNumber);
  app.add_option("--ontology", g.ontology, "Ontology JSON (default: bundled Gleason ontology)");
  app.add_option("--level", g.level, "Label level: pattern, explanation or sub_explanation");
  app.fallthrough();

  auto leaf = [](CLI::App* parent, const std::string& name, const std::string& desc) {
    auto* c = parent->add_subcommand(name, desc);
    c->fallthrough();
    return c;
  };

  auto* ontology = leaf(&app, "ontology", "Ontology tools");
  ontology->require_subcommand(1);
  OntologyOpts onto_o;
  auto* onto_validate = leaf(ontology, "validate", "Load and validate an ontology");
  onto_validate->add_option("-o,--out", onto_o.out, "Optional output directory");

  RasterizeOpts rast_o;
  auto* rasterize = leaf(&app, "rasterize", "Clean and rasterize annotation manifests");
  rasterize->add_option("-m,--manifest", rast_o.manifests, "Annotation manifest(s)")->required()->check(CLI::ExistingFile);
  rasterize->add_option("--synonyms", rast_o.synonyms, "Synonym table (default: bundled; 'none' to disable)");
  add_out(rasterize, rast_o.out);

  auto* fuse = leaf(&app, "fuse", "Fuse annotator masks");
  fuse->require_subcommand(1);
  FuseOpts fuse_o;
  std::vector<std::pair<std::string, CLI::App*>> fuse_modes;
  for (const char* mode : {"soft", "majority", "staple"}) {
    auto* c = leaf(fuse, mode, std::string("Fuse with ") + mode);
    c->add_option("-m,--manifest", fuse_o.manifests, "Annotation manifest(s)")->required()->check(CLI::ExistingFile);
    c->add_option("--synonyms", fuse_o.synonyms, "Synonym table (default: bundled; 'none' to disable)");
    c->add_option("--foreground", fuse_o.foreground, "auto (from image) or all")->check(CLI::IsMember({"auto", "all"}));
    if (std::string(mode) == "staple") {
      c->add_option("--max-iterations", fuse_o.max_iterations, "EM iteration cap")->check(CLI::PositiveNumber);
      c->add_option("--tolerance", fuse_o.tolerance, "EM convergence tolerance")->check(CLI::PositiveNumber);
    }
    add_out(c, fuse_o.out);
    fuse_modes.emplace_back(mode, c);
  }

  auto* agree = leaf(&app, "agree", "Inter-rater agreement");
  agree->require_subcommand(1);
  AgreeOpts agree_o;
  std::vector<std::pair<std::string, CLI::App*>> agree_modes;
  for (const char* mode : {"kappa", "heatmap", "pixels", "grade-confusion"}) {
    auto* c = leaf(agree, mode, std::string("Agreement: ") + mode);
    const std::string m = mode;
    if (m == "pixels") {
      c->add_option("--slt", agree_o.slt, "Soft label files")->required()->check(CLI::ExistingFile);
      c->add_option("--raters", agree_o.raters, "Raters per image (default: inferred)")->check(CLI::NonNegativeNumber);
    } else {
      c->add_option("-m,--manifests", agree_o.manifests, "Annotation manifests")->required()->check(CLI::ExistingFile);
      c->add_option("--synonyms", agree_o.synonyms, "Synonym table (default: bundled; 'none' to disable)");
    }
    if (m == "kappa" || m == "heatmap") c->add_option("--groups", agree_o.groups, "JSON image id -> group");
    if (m == "kappa") c->add_option("--resamples", agree_o.resamples, "Bootstrap resamples")->check(CLI::NonNegativeNumber);
    if (m == "grade-confusion")
      c->add_option("--grades", agree_o.grades, "JSON image id -> \"GP3+GP4\"")->required()->check(CLI::ExistingFile);
    add_out(c, agree_o.out);
    agree_modes.emplace_back(m, c);
  }

  SplitOpts split_o;
  auto* split = leaf(&app, "split", "Stratified train/val/test assignment");
  split->add_option("--slt", split_o.slt, "Soft label files, one per image")->required()->check(CLI::ExistingFile);
  split->add_option("--restarts", split_o.restarts, "Independent restarts")->check(CLI::PositiveNumber);
  split->add_option("--iterations", split_o.iterations, "Swap proposals per restart")->check(CLI::NonNegativeNumber);
  split->add_option("--fractions", split_o.fractions, "train,val,test fractions")->delimiter(',')->expected(3);
  add_out(split, split_o.out);

  TrainOpts train_o;
  auto* trainc = leaf(&app, "train", "Train a MiniUNet");
  trainc->add_option("--dataset", train_o.dataset, "Dataset JSON")->required()->check(CLI::ExistingFile);
  trainc->add_option("--split", train_o.split, "Split JSON")->required()->check(CLI::ExistingFile);
  trainc->add_option("--trainer-config", train_o.trainer_config, "Trainer JSON")->check(CLI::ExistingFile);
  trainc->add_option("--loss", train_o.loss, "softdice | tree:softdice | tree:ce | ce-soft | ce-hard | dice-hard");
  trainc->add_option("--epochs", train_o.epochs, "Epochs")->check(CLI::PositiveNumber);
  trainc->add_option("--lr", train_o.lr, "Initial learning rate")->check(CLI::PositiveNumber);
  trainc->add_option("--batch", train_o.batch, "Batch size")->check(CLI::PositiveNumber);
  trainc->add_option("--patch", train_o.patch, "Patch size")->check(CLI::PositiveNumber);
  trainc->add_option("--patches-per-image", train_o.patches_per_image, "Patches per image per epoch")
      ->check(CLI::PositiveNumber);
  trainc->add_flag("--no-augment", train_o.no_augment, "Disable augmentation");
  add_out(trainc, train_o.out);

  EvalOpts eval_o;
  auto* evalc = leaf(&app, "eval", "Evaluate a checkpoint");
  evalc->add_option("--dataset", eval_o.dataset, "Dataset JSON")->required()->check(CLI::ExistingFile);
  evalc->add_option("--checkpoint", eval_o.checkpoint, "Checkpoint (.mun)")->required()->check(CLI::ExistingFile);
  evalc->add_option("--split", eval_o.split, "Split JSON")->check(CLI::ExistingFile);
  evalc->add_option("--subset", eval_o.subset, "Split subset")->check(CLI::IsMember({"train", "val", "test"}));
  evalc->add_option("--eval-level", eval_o.eval_level, "Evaluation level (default: trained level)");
  evalc->add_option("--window", eval_o.window, "Sliding window (default: min(512, image))")->check(CLI::NonNegativeNumber);
  evalc->add_option("--overlap", eval_o.overlap, "Window overlap")->check(CLI::Range(0.0, 0.99));
  add_out(evalc, eval_o.out);

  InferOpts infer_o;
  auto* infer = leaf(&app, "infer", "Sliding-window prediction");
  infer->add_option("--checkpoint", infer_o.checkpoint, "Checkpoint (.mun)")->required()->check(CLI::ExistingFile);
  infer->add_option("--image", infer_o.images, "RGB PNG image(s)")->required()->check(CLI::ExistingFile);
  infer->add_option("--window", infer_o.window, "Sliding window (default: min(512, image))")->check(CLI::NonNegativeNumber);
  infer->add_option("--overlap", infer_o.overlap, "Window overlap")->check(CLI::Range(0.0, 0.99));
  infer->add_option("--foreground", infer_o.foreground, "auto or all")->check(CLI::IsMember({"auto", "all"}));
  add_out(infer, infer_o.out);

  RenderOpts render_o;
  auto* render = leaf(&app, "render", "Argmax overlay");
  render->add_option("--image", render_o.image, "RGB PNG image")->required()->check(CLI::ExistingFile);
  render->add_option("--pred", render_o.pred, "Prediction (.slt)")->required()->check(CLI::ExistingFile);
  render->add_option("--alpha", render_o.alpha, "Overlay opacity")->check(CLI::Range(0.0, 1.0));
  add_out(render, render_o.out);

  auto* synth = leaf(&app, "synth", "Synthetic scenes and raters");
  synth->require_subcommand(1);
  SynthOpts synth_o;
  std::vector<std::pair<std::string, CLI::App*>> synth_modes;
  for (const char* mode : {"scene", "raters"}) {
    auto* c = leaf(synth, mode, std::string("Synthesize ") + mode);
    c->add_option("--count", synth_o.count, "Scenes")->check(CLI::PositiveNumber);
    c->add_option("--size", synth_o.size, "Scene side in pixels")->check(CLI::PositiveNumber);
    c->add_option("--radius", synth_o.radius, "Tissue core radius (default: 0.4375 * size)");
    c->add_option("--regions", synth_o.regions, "Regions per scene")->check(CLI::PositiveNumber);
    c->add_option("--raters", synth_o.raters, "Simulated raters")->check(CLI::PositiveNumber);
    c->add_option("--disagreement", synth_o.disagreement, "Mass moved to a rater's preferred sibling")
        ->check(CLI::Range(0.0, 1.0));
    c->add_option("--cross", synth_o.cross, "Share of that mass crossing parents")->check(CLI::Range(0.0, 1.0));
    c->add_option("--jitter", synth_o.jitter, "Boundary jitter radius")->check(CLI::NonNegativeNumber);
    c->add_option("--prior", synth_o.prior, "Class prior (comma separated)")->delimiter(',');
    add_out(c, synth_o.out);
    synth_modes.emplace_back(mode, c);
  }

  auto* repro = leaf(&app, "repro", "Reproduction studies");
  repro->require_subcommand(1);
  ReproOpts repro_o;
  auto* svh = leaf(repro, "soft-vs-hard", "Soft labels versus majority labels on a synthetic corpus");
  svh->add_option("--seeds", repro_o.seeds, "Training seeds")->delimiter(',');
  svh->add_option("--images", repro_o.images, "Corpus size")->check(CLI::PositiveNumber);
  svh->add_option("--epochs", repro_o.epochs, "Epochs per run")->check(CLI::PositiveNumber);
  svh->add_option("--size", repro_o.size, "Image side")->check(CLI::PositiveNumber);
  svh->add_option("--data-seed", repro_o.data_seed, "Corpus seed");
  add_out(svh, repro_o.out);

  ReplayOpts replay_o;
  auto* replay = leaf(&app, "replay", "Re-run a run manifest and compare outputs");
  replay->add_option("--manifest", replay_o.manifest, "run_manifest.json or its directory")->required();
  replay->add_option("--threads-override", replay_o.threads, "Thread count for the re-run")->check(CLI::NonNegativeNumber);
  replay->add_option("--tolerance", replay_o.tolerance, "Numeric tolerance for JSON reports")
      ->check(CLI::NonNegativeNumber);
  add_out(replay, replay_o.out);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    return app.exit(e);
  }

  if (replay->parsed()) {
    if (replay_o.threads == 0 && g.threads > 0) replay_o.threads = g.threads;
    return cmd_replay(replay_o);
  }

  Run run(g, args);
  if (onto_validate->parsed()) return cmd_ontology_validate(run, onto_o);
  if (rasterize->parsed()) return cmd_rasterize(run, rast_o);
  for (const auto& [mode, c] : fuse_modes)
    if (c->parsed()) return cmd_fuse(run, mode, fuse_o);
  for (const auto& [mode, c] : agree_modes)
    if (c->parsed()) return cmd_agree(run, mode, agree_o);
  if (split->parsed()) return cmd_split(run, split_o);
  if (trainc->parsed()) return cmd_train(run, train_o);
  if (evalc->parsed()) return cmd_eval(run, eval_o);
  if (infer->parsed()) return cmd_infer(run, infer_o);
  if (render->parsed()) return cmd_render(run, render_o);
  for (const auto& [mode, c] : synth_modes)
    if (c->parsed()) return cmd_synth(run, mode, synth_o);
  if (svh->parsed()) return cmd_repro(run, repro_o);
  std::cerr << app.help();
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    return run_cli(args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
