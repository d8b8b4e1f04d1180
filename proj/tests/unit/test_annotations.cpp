#include <gtest/gtest.h>

#include <sstream>

#include "softseg/annotations.hpp"
#include "softseg/random.hpp"

using namespace softseg;

namespace {

const Ontology& onto() {
  static const Ontology o = Ontology::load_default();
  return o;
}

PolygonRecord rect(double x0, double y0, double x1, double y1, std::vector<int> ids, std::int64_t seq,
                   int grade = 0) {
  PolygonRecord p;
  p.vertices = {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
  p.class_ids = std::move(ids);
  p.created_seq = seq;
  p.source_grade = grade;
  return p;
}

AnnotationSet make_set(std::vector<PolygonRecord> polys, int h = 10, int w = 10) {
  return {"img", "a1", std::move(polys), h, w, Level::sub_explanation};
}

double weight_sum(const AnnotatorMask& m, std::size_t i) {
  double s = 0.0;
  for (const auto& [c, w] : m.votes(i)) s += w;
  return s;
}

}  // namespace

TEST(FreeText, ExactNameMaps) {
  const SynonymTable syn;
  EXPECT_EQ(normalize_free_text("slit-like lumina", onto(), syn), 9);
  EXPECT_EQ(normalize_free_text("4.04", onto(), syn), 12);
}

TEST(FreeText, CaseAndWhitespaceVariantMaps) {
  const SynonymTable syn;
  EXPECT_EQ(normalize_free_text("  Slit-Like   LUMINA ", onto(), syn), 9);
}

TEST(FreeText, SynonymTableMaps) {
  std::istringstream in("# comment\nfused glands\t4.04\nkidney-like tufts\t24\n");
  const auto syn = SynonymTable::parse(in, onto());
  EXPECT_EQ(syn.size(), 2u);
  EXPECT_EQ(normalize_free_text("Fused  Glands", onto(), syn), 12);
  EXPECT_EQ(normalize_free_text("kidney-like tufts", onto(), syn), 24);
}

TEST(FreeText, UnknownTextIsUnmapped) {
  const SynonymTable syn;
  EXPECT_FALSE(normalize_free_text("tumor-ish stuff", onto(), syn).has_value());
  std::vector<PolygonRecord> polys(1);
  polys[0].raw_label = "tumor-ish stuff";
  EXPECT_EQ(resolve_free_text(polys, onto(), syn), 1);
  EXPECT_TRUE(polys[0].unmapped);
}

TEST(FreeText, BadSynonymTargetRejected) {
  std::istringstream in("foo\tnot-a-class\n");
  EXPECT_THROW(SynonymTable::parse(in, onto()), Error);
}

TEST(FreeText, BundledSynonymsLoad) {
  const auto syn = SynonymTable::load(std::filesystem::path(SOFTSEG_DATA_DIR) / "synonyms.txt", onto());
  EXPECT_GT(syn.size(), 0u);
}

TEST(FillForward, UnlabeledInheritsNextLabel) {
  std::vector<PolygonRecord> polys = {rect(0, 0, 1, 1, {}, 1), rect(0, 0, 1, 1, {12}, 2)};
  const auto r = fill_forward_labels(polys);
  ASSERT_EQ(r.polygons.size(), 2u);
  EXPECT_EQ(r.polygons[0].class_ids, std::vector<int>{12});
  EXPECT_EQ(r.polygons[1].class_ids, std::vector<int>{12});
  EXPECT_EQ(r.dropped, 0);
}

TEST(FillForward, AllLabeledIsIdentity) {
  std::vector<PolygonRecord> polys = {rect(0, 0, 1, 1, {1}, 1), rect(0, 0, 2, 2, {12, 9}, 2),
                                      rect(1, 1, 3, 3, {5}, 3)};
  const auto r = fill_forward_labels(polys);
  ASSERT_EQ(r.polygons.size(), polys.size());
  for (std::size_t i = 0; i < polys.size(); ++i) {
    EXPECT_EQ(r.polygons[i].class_ids, polys[i].class_ids);
    EXPECT_EQ(r.polygons[i].vertices, polys[i].vertices);
  }
}

TEST(FillForward, TrailingUnlabeledDropped) {
  std::vector<PolygonRecord> polys = {rect(0, 0, 1, 1, {1}, 1), rect(0, 0, 1, 1, {}, 2)};
  const auto r = fill_forward_labels(polys);
  ASSERT_EQ(r.polygons.size(), 1u);
  EXPECT_EQ(r.polygons[0].created_seq, 1);
  EXPECT_EQ(r.dropped, 1);
}

TEST(FillForward, OrdersByCreationSequence) {
  std::vector<PolygonRecord> polys = {rect(0, 0, 1, 1, {5}, 9), rect(0, 0, 1, 1, {}, 3), rect(0, 0, 1, 1, {7}, 4)};
  const auto r = fill_forward_labels(polys);
  ASSERT_EQ(r.polygons.size(), 3u);
  EXPECT_EQ(r.polygons[0].created_seq, 3);
  EXPECT_EQ(r.polygons[0].class_ids, std::vector<int>{7});
}

TEST(DuplicateMultilabel, TwoLabelsBecomeLinkedCopies) {
  const auto out = duplicate_multilabel({rect(0, 0, 2, 2, {9, 11}, 5)});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].class_ids, std::vector<int>{9});
  EXPECT_EQ(out[1].class_ids, std::vector<int>{11});
  EXPECT_EQ(out[0].group, out[1].group);
  EXPECT_EQ(out[0].vertices, out[1].vertices);
  EXPECT_EQ(out[0].created_seq, out[1].created_seq);
}

TEST(Rasterize, DisjointPolygonsHaveUnitWeight) {
  const auto set = make_set(duplicate_multilabel({rect(0, 0, 3, 3, {1}, 1), rect(5, 5, 8, 8, {12}, 2)}));
  const auto m = rasterize(set, onto()).mask;
  EXPECT_DOUBLE_EQ(m.weight(1, 1, 1), 1.0);
  EXPECT_DOUBLE_EQ(m.weight(6, 6, 12), 1.0);
  EXPECT_FALSE(m.annotated(4, 4));
}

TEST(Rasterize, HigherGradePaintsOverLowerGrade) {
  // GP3 polygon created later but from the GP3 image; GP4 image painted afterwards.
  const auto set = make_set(duplicate_multilabel({rect(4, 4, 8, 8, {12}, 1, 2), rect(0, 0, 6, 6, {1}, 7, 1)}));
  const auto m = rasterize(set, onto()).mask;
  EXPECT_EQ(m.hard_labels()(5, 5), 12);
  EXPECT_EQ(m.hard_labels()(1, 1), 1);
}

TEST(Rasterize, LaterPolygonOverwritesWithinGrade) {
  const auto set = make_set(duplicate_multilabel({rect(0, 0, 6, 6, {1}, 1), rect(4, 4, 8, 8, {12}, 2)}));
  const auto m = rasterize(set, onto()).mask;
  EXPECT_EQ(m.hard_labels()(5, 5), 12);
}

TEST(Rasterize, GroupOfTwoSplitsWeight) {
  const auto set = make_set(duplicate_multilabel({rect(0, 0, 4, 4, {9, 11}, 1)}));
  const auto m = rasterize(set, onto()).mask;
  EXPECT_DOUBLE_EQ(m.weight(2, 2, 9), 0.5);
  EXPECT_DOUBLE_EQ(m.weight(2, 2, 11), 0.5);
  EXPECT_EQ(m.hard_labels()(2, 2), -2);
}

TEST(Rasterize, CoverageUsesPixelCenters) {
  const std::vector<Point> tri = {{0, 0}, {4, 0}, {0, 4}};
  const auto cov = polygon_coverage(tri, 4, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) EXPECT_EQ(cov(r, c) != 0, (c + 0.5) + (r + 0.5) < 4.0) << r << "," << c;
}

TEST(Rasterize, OutsidePolygonWarnsAndSkips) {
  const auto set = make_set(duplicate_multilabel({rect(20, 20, 30, 30, {1}, 1)}));
  const auto r = rasterize(set, onto());
  EXPECT_EQ(r.warnings.size(), 1u);
  for (std::size_t i = 0; i < r.mask.entries().size(); ++i) EXPECT_FALSE(r.mask.group_at(i) >= 0);
}

TEST(Rasterize, UnmappedLabelIsError) {
  auto p = rect(0, 0, 2, 2, {}, 1);
  p.raw_label = "???";
  p.unmapped = true;
  EXPECT_THROW(rasterize(make_set(duplicate_multilabel({p})), onto()), Error);
}

TEST(Rasterize, WeightsSumToZeroOrOneAndDeterministic) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<PolygonRecord> polys;
    for (int k = 0; k < 6; ++k) {
      const double x = rng.uniform(-2, 12), y = rng.uniform(-2, 12);
      std::vector<int> ids = {1 + rng.below(32)};
      if (rng.uniform() < 0.4) ids.push_back(1 + rng.below(32));
      polys.push_back(rect(x, y, x + rng.uniform(1, 6), y + rng.uniform(1, 6), ids, k, rng.below(4)));
    }
    const auto set = make_set(duplicate_multilabel(polys), 12, 12);
    const auto a = rasterize(set, onto()).mask;
    const auto b = rasterize(set, onto()).mask;
    EXPECT_EQ(a, b);
    for (std::size_t i = 0; i < a.entries().size(); ++i) {
      const double s = weight_sum(a, i);
      EXPECT_TRUE(std::abs(s) < 1e-12 || std::abs(s - 1.0) < 1e-12) << s;
    }
  }
}

TEST(Rasterize, PermutationInvariantUnderSameKeys) {
  Rng rng(9);
  std::vector<PolygonRecord> polys;
  for (int k = 0; k < 8; ++k) {
    const double x = rng.uniform(0, 10), y = rng.uniform(0, 10);
    polys.push_back(rect(x, y, x + 3, y + 3, {1 + rng.below(32)}, k, rng.below(4)));
  }
  const auto base = rasterize(make_set(duplicate_multilabel(polys), 14, 14), onto()).mask.hard_labels();
  for (int t = 0; t < 5; ++t) {
    auto shuffled = polys;
    rng.shuffle(std::span<PolygonRecord>(shuffled));
    const auto other = rasterize(make_set(duplicate_multilabel(shuffled), 14, 14), onto()).mask.hard_labels();
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(base[i], other[i]);
  }
}

TEST(AnnotatorMask, RemappedCollapsesSiblingGroup) {
  AnnotatorMask m(1, 2, Level::sub_explanation);
  m.set(0, 0, m.add_group({9, 11}));  // both poorly formed glands
  m.set(0, 1, m.add_group({1, 12}));  // GP3 and GP4 children
  const auto up = m.remapped(onto(), Level::explanation);
  const auto v0 = up.votes(0);
  ASSERT_EQ(v0.size(), 1u);
  EXPECT_EQ(v0[0].first, 5);
  EXPECT_DOUBLE_EQ(v0[0].second, 1.0);
  const auto v1 = up.votes(1);
  ASSERT_EQ(v1.size(), 2u);
  EXPECT_DOUBLE_EQ(v1[0].second, 0.5);
}

TEST(Manifest, RoundTripAndPipeline) {
  const auto doc = nlohmann::json::parse(R"({
    "image_id": "core-1", "size": [8, 8], "level": "sub_explanation",
    "annotators": [
      {"annotator_id": "p1", "polygons": [
        {"vertices": [[0,0],[4,0],[4,4],[0,4]], "created_seq": 1},
        {"vertices": [[4,4],[8,4],[8,8],[4,8]], "raw_label": "slit-like lumina", "created_seq": 2},
        {"vertices": [[0,4],[4,4],[4,8],[0,8]], "labels": [1], "created_seq": 3},
        {"vertices": [[4,0],[8,0],[8,4]], "created_seq": 4}]},
      {"annotator_id": "p2", "polygons": [
        {"vertices": [[0,0],[8,0],[8,8],[0,8]], "labels": [9, 11], "created_seq": 1}]}
    ]})");
  const auto m = parse_annotation_manifest(doc);
  const auto back = parse_annotation_manifest(to_json(m));
  EXPECT_EQ(to_json(back), to_json(m));

  const auto cleaned = clean_and_rasterize(m, onto(), SynonymTable{});
  ASSERT_EQ(cleaned.masks.size(), 2u);
  EXPECT_EQ(cleaned.dropped_polygons, 1);
  const auto p1 = cleaned.masks[0].hard_labels();
  EXPECT_EQ(p1(1, 1), 9);
  EXPECT_EQ(p1(6, 6), 9);
  EXPECT_EQ(p1(6, 1), 1);
  EXPECT_EQ(p1(1, 6), -1);
  EXPECT_DOUBLE_EQ(cleaned.masks[1].weight(3, 3, 11), 0.5);
}

TEST(Manifest, DuplicateAnnotatorRejected) {
  const auto doc = nlohmann::json::parse(R"({"image_id": "x", "size": [2, 2],
    "annotators": [{"annotator_id": "a", "polygons": []}, {"annotator_id": "a", "polygons": []}]})");
  EXPECT_THROW(parse_annotation_manifest(doc), Error);
}

TEST(Manifest, MissingFieldIsError) {
  EXPECT_THROW(parse_annotation_manifest(nlohmann::json::parse(R"({"image_id": "x"})")), Error);
}
