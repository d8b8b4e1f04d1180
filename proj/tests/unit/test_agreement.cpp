#include <gtest/gtest.h>

#include <cmath>

#include "softseg/agreement.hpp"
#include "softseg/random.hpp"

using namespace softseg;

namespace {

const Ontology& onto() {
  static const Ontology o = Ontology::load_default();
  return o;
}

// Textbook Fleiss formula in floating point.
double fleiss_oracle(const std::vector<std::vector<int>>& items) {
  const double big_n = items.size();
  double n = 0;
  for (int v : items[0]) n += v;
  std::vector<double> pj(items[0].size(), 0.0);
  double pbar = 0;
  for (const auto& it : items) {
    double sq = 0;
    for (std::size_t j = 0; j < it.size(); ++j) {
      sq += double(it[j]) * it[j];
      pj[j] += it[j] / (big_n * n);
    }
    pbar += (sq - n) / (n * (n - 1)) / big_n;
  }
  double pe = 0;
  for (double p : pj) pe += p * p;
  return (pbar - pe) / (1 - pe);
}

PresenceTable table_from(const std::vector<std::vector<std::vector<int>>>& used, Level level = Level::explanation) {
  auto t = make_presence_table(onto(), level);
  int img = 0;
  for (const auto& per_rater : used) {
    ImagePresence p{"img" + std::to_string(img++), "", {}, {}};
    int a = 0;
    for (const auto& labels : per_rater) {
      std::vector<std::uint8_t> row(t.labels.size(), 0);
      for (int l : labels) row[t.label_index(l)] = 1;
      p.annotators.push_back("r" + std::to_string(a++));
      p.used.push_back(row);
    }
    t.images.push_back(p);
  }
  return t;
}

ImageAnnotations manifest_with(const std::string& id, const std::vector<std::vector<int>>& labels_per_rater) {
  ImageAnnotations m{id, "", 4, 4, Level::explanation, {}};
  int a = 0;
  for (const auto& labels : labels_per_rater) {
    AnnotationSet s{id, "r" + std::to_string(a++), {}, 4, 4, Level::explanation};
    std::int64_t seq = 0;
    for (int l : labels) {
      PolygonRecord p;
      p.vertices = {{0, 0}, {2, 0}, {2, 2}};
      p.class_ids = {l};
      p.created_seq = seq++;
      s.polygons.push_back(p);
    }
    m.annotators.push_back(s);
  }
  return m;
}

}  // namespace

TEST(Fleiss, UnanimousItemsGiveOne) {
  EXPECT_DOUBLE_EQ(*fleiss_kappa({{3, 0}, {0, 3}}), 1.0);
}

TEST(Fleiss, HandEvaluatedExample) {
  EXPECT_NEAR(*fleiss_kappa({{2, 1}, {1, 2}}), -1.0 / 3.0, 1e-15);
}

TEST(Fleiss, AllYesIsUndefined) {
  EXPECT_FALSE(fleiss_kappa({{3, 0}, {3, 0}, {3, 0}}).has_value());
  EXPECT_EQ(landis_koch(std::nullopt), "undefined");
}

TEST(Fleiss, UnequalRaterCountsRejected) {
  EXPECT_THROW(fleiss_kappa({{2, 1}, {1, 1}}), Error);
  EXPECT_THROW(fleiss_kappa({}), Error);
}

TEST(Fleiss, MatchesFloatingOracleAndPermutationInvariant) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const int cats = 2 + rng.below(4), raters = 2 + rng.below(5), items = 2 + rng.below(30);
    std::vector<std::vector<int>> data(items, std::vector<int>(cats, 0));
    for (auto& it : data)
      for (int r = 0; r < raters; ++r) ++it[rng.below(cats)];
    const auto k = fleiss_kappa(data);
    ASSERT_TRUE(k.has_value());
    EXPECT_NEAR(*k, fleiss_oracle(data), 1e-12);
    auto shuffled = data;
    rng.shuffle(std::span<std::vector<int>>(shuffled));
    EXPECT_NEAR(*fleiss_kappa(shuffled), *k, 1e-12);
    EXPECT_GE(*k, -1.0);
    EXPECT_LE(*k, 1.0);
  }
}

TEST(Fleiss, OneIffUnanimous) {
  EXPECT_DOUBLE_EQ(*fleiss_kappa({{3, 0}, {0, 3}, {3, 0}}), 1.0);
  EXPECT_LT(*fleiss_kappa({{3, 0}, {0, 3}, {2, 1}}), 1.0);
}

TEST(LandisKoch, Bands) {
  EXPECT_EQ(landis_koch(-0.1), "poor");
  EXPECT_EQ(landis_koch(0.2), "slight");
  EXPECT_EQ(landis_koch(0.4), "fair");
  EXPECT_EQ(landis_koch(0.6), "moderate");
  EXPECT_EQ(landis_koch(0.8), "substantial");
  EXPECT_EQ(landis_koch(0.81), "almost perfect");
}

TEST(Presence, NineExplanationLabels) {
  EXPECT_EQ(make_presence_table(onto(), Level::explanation).labels.size(), 9u);
}

TEST(Presence, FromManifestRemapsAndSkipsBenign) {
  auto t = make_presence_table(onto(), Level::pattern);
  add_presence(t, manifest_with("x", {{1, 2}, {0}, {5}}), onto(), SynonymTable{});
  ASSERT_EQ(t.images.size(), 1u);
  EXPECT_EQ(t.yes_count(0, t.label_index(1)), 1);
  EXPECT_EQ(t.yes_count(0, t.label_index(2)), 1);
  EXPECT_EQ(t.yes_count(0, t.label_index(3)), 0);
}

TEST(Presence, FromMasksMatchesManifest) {
  AnnotatorMask a(2, 2, Level::explanation), b(2, 2, Level::explanation);
  a.set(0, 0, a.add_class(3));
  b.set(1, 1, b.add_group({3, 7}));
  auto t = make_presence_table(onto(), Level::explanation);
  std::vector<AnnotatorMask> masks = {a, b};
  add_presence(t, "m", masks, onto());
  EXPECT_EQ(t.yes_count(0, t.label_index(3)), 2);
  EXPECT_EQ(t.yes_count(0, t.label_index(7)), 1);
}

TEST(KappaPerLabel, UnanimousPresence) {
  const auto t = table_from({{{1}, {1}, {1}}, {{}, {}, {}}, {{1}, {1}, {1}}});
  const auto r = kappa_per_label(t, KappaScope::global(), 1);
  EXPECT_DOUBLE_EQ(*r.kappa, 1.0);
  EXPECT_EQ(r.landis_koch, "almost perfect");
}

TEST(KappaPerLabel, IndependentCoinFlipsNearZero) {
  Rng rng(2024);
  std::vector<std::vector<std::vector<int>>> used;
  for (int i = 0; i < 1000; ++i) {
    std::vector<std::vector<int>> raters(3);
    for (auto& r : raters)
      if (rng.uniform() < 0.5) r.push_back(4);
    used.push_back(raters);
  }
  const auto k = kappa_per_label(table_from(used), KappaScope::global(), 4).kappa;
  ASSERT_TRUE(k.has_value());
  EXPECT_LT(std::abs(*k), 0.1);
}

TEST(KappaPerLabel, GroupScopeAndErrors) {
  auto t = table_from({{{1}, {1}}, {{}, {1}}, {{2}, {2}}, {{}, {}}});
  t.images[0].group = t.images[1].group = "g1";
  t.images[2].group = t.images[3].group = "g2";
  EXPECT_DOUBLE_EQ(*kappa_per_label(t, KappaScope::of_group("g2"), 2).kappa, 1.0);
  EXPECT_THROW(kappa_per_label(t, KappaScope::of_group("nope"), 2), Error);
  EXPECT_THROW(kappa_per_label(t, KappaScope::global(), 0), Error);
}

TEST(KappaPooled, ConcatenatesLabelDecisions) {
  const auto t = table_from({{{1, 2}, {1}}, {{2}, {2, 3}}});
  // Oracle: one binary item per (image, label).
  std::vector<std::vector<int>> items;
  for (std::size_t i = 0; i < t.images.size(); ++i)
    for (std::size_t l = 0; l < t.labels.size(); ++l) {
      const int y = t.yes_count(i, static_cast<int>(l));
      items.push_back({y, 2 - y});
    }
  EXPECT_NEAR(*kappa_pooled(t, KappaScope::global()), fleiss_oracle(items), 1e-12);
}

TEST(Bootstrap, UnanimousIntervalIsDegenerateAtOne) {
  std::vector<std::vector<std::vector<int>>> used;
  for (int i = 0; i < 20; ++i) used.push_back(i % 2 ? std::vector<std::vector<int>>{{1}, {1}, {1}}
                                                    : std::vector<std::vector<int>>{{}, {}, {}});
  const auto ci = bootstrap_ci(table_from(used), 1, 10000, 3);
  EXPECT_DOUBLE_EQ(ci.low, 1.0);
  EXPECT_DOUBLE_EQ(ci.high, 1.0);
  EXPECT_EQ(ci.used + ci.degenerate, 10000);
}

TEST(Bootstrap, DeterministicAcrossThreadCounts) {
  Rng rng(6);
  std::vector<std::vector<std::vector<int>>> used;
  for (int i = 0; i < 40; ++i) {
    std::vector<std::vector<int>> raters(3);
    for (auto& r : raters)
      if (rng.uniform() < 0.3 + 0.4 * (i % 2)) r.push_back(5);
    used.push_back(raters);
  }
  const auto t = table_from(used);
  const int saved = thread_count();
  set_thread_count(1);
  const auto a = bootstrap_ci(t, 5, 2000, 99);
  set_thread_count(4);
  const auto b = bootstrap_ci(t, 5, 2000, 99);
  set_thread_count(saved);
  EXPECT_EQ(a.low, b.low);
  EXPECT_EQ(a.high, b.high);
  EXPECT_EQ(a.used, b.used);
  const auto k = *kappa_per_label(t, KappaScope::global(), 5).kappa;
  EXPECT_LE(a.low, k);
  EXPECT_GE(a.high, k);
}

TEST(Bootstrap, PercentileInterpolates) {
  const std::vector<double> v = {0, 1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(percentile_sorted(v, 0.5), 2.0);
  EXPECT_DOUBLE_EQ(percentile_sorted(v, 0.025), 0.1);
}

TEST(Heatmap, UnanimousAndDisjoint) {
  const auto uni = presence_heatmap(table_from({{{1}, {1}, {1}}, {{1}, {1}, {1}}}));
  const int l1 = 0;
  EXPECT_EQ(uni.counts[l1][3], 2);
  const auto dis = presence_heatmap(table_from({{{1}, {2}, {3}}}));
  EXPECT_EQ(dis.counts[0][1], 1);
  EXPECT_EQ(dis.counts[1][1], 1);
  EXPECT_EQ(dis.counts[2][1], 1);
}

TEST(PixelAgreement, UnanimousMapsAreAllThreeRater) {
  std::vector<AnnotatorMask> masks(3, AnnotatorMask(3, 3, Level::explanation));
  for (auto& m : masks)
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m.set(r, c, m.add_class(1 + (r + c) % 3));
  const std::vector<SoftLabelMap> maps = {build_soft_labels(masks, Mask(3, 3, 1), Level::explanation, onto())};
  const auto s = pixel_agreement_stats(maps);
  for (int c = 1; c <= 3; ++c) EXPECT_DOUBLE_EQ(s.class_share[c][2], 1.0);
  EXPECT_DOUBLE_EQ(s.unique_majority_share, 1.0);
}

TEST(PixelAgreement, SeededDisagreementMatchesScalarOracle) {
  Rng rng(12);
  const int h = 16, w = 16;
  std::vector<AnnotatorMask> masks(3, AnnotatorMask(h, w, Level::explanation));
  for (auto& m : masks)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        if (rng.uniform() < 0.8) m.set(r, c, m.add_class(1 + rng.below(3)));
  Mask fg(h, w, 1);
  const std::vector<SoftLabelMap> maps = {build_soft_labels(masks, fg, Level::explanation, onto())};
  const auto s = pixel_agreement_stats(maps);

  std::vector<std::vector<double>> votes_hist(10, std::vector<double>(3, 0.0));
  double unique = 0;
  for (int i = 0; i < h * w; ++i) {
    std::vector<int> v(10, 0);
    for (const auto& m : masks) {
      const int g = m.group_at(static_cast<std::size_t>(i));
      ++v[g < 0 ? 0 : m.groups()[g][0]];
    }
    const int mx = *std::max_element(v.begin(), v.end());
    unique += std::count(v.begin(), v.end(), mx) == 1;
    for (int c = 0; c < 10; ++c)
      if (v[c]) votes_hist[c][v[c] - 1] += 1;
  }
  EXPECT_NEAR(s.unique_majority_share, unique / (h * w), 1e-12);
  for (int c = 0; c < 10; ++c) {
    double total = 0;
    for (double x : votes_hist[c]) total += x;
    if (total == 0) continue;
    double share_sum = 0;
    for (int k = 0; k < 3; ++k) {
      EXPECT_NEAR(s.class_share[c][k], votes_hist[c][k] / total, 1e-12);
      share_sum += s.class_share[c][k];
    }
    EXPECT_NEAR(share_sum, 1.0, 1e-9);
  }
}

TEST(PixelAgreement, NonQuantizedRejected) {
  SoftLabelMap m{DistributionMap(1, 1, 2), Mask(1, 1, 1), Mask(1, 1, 0), Level::pattern, 3};
  m.probs.pixel(0)[0] = 0.5;
  m.probs.pixel(0)[1] = 0.5;
  const std::vector<SoftLabelMap> maps = {m};
  EXPECT_THROW(pixel_agreement_stats(maps), Error);
}

TEST(GradeConfusion, AlignedIsDiagonalAndExtraPatternCountsOnce) {
  std::map<std::string, GleasonScore> given = {{"a", {1, 1}}, {"b", {2, 2}}, {"c", {1, 2}}};
  std::map<std::string, std::set<int>> annotated;
  annotated["a"] = annotated_patterns(manifest_with("a", {{1}, {2}, {1}}), onto(), SynonymTable{});
  annotated["b"] = annotated_patterns(manifest_with("b", {{3}, {4}, {5}}), onto(), SynonymTable{});
  annotated["c"] = annotated_patterns(manifest_with("c", {{1, 3}, {7}, {3}}), onto(), SynonymTable{});
  annotated["d"] = {1};
  const auto g = grade_annotation_confusion(given, annotated, onto());
  ASSERT_EQ(g.row_labels.size(), 3u);
  EXPECT_EQ(g.row_labels[0], "GP3+GP3");
  EXPECT_EQ(g.counts[0], (std::vector<int>{1, 0, 0}));
  EXPECT_EQ(g.row_labels[1], "GP3+GP4");
  EXPECT_EQ(g.counts[1], (std::vector<int>{1, 1, 1}));
  EXPECT_EQ(g.row_labels[2], "GP4+GP4");
  EXPECT_EQ(g.counts[2], (std::vector<int>{0, 1, 0}));
  EXPECT_EQ(g.skipped, std::vector<std::string>{"d"});
}
