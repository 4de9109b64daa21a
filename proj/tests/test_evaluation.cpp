#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "mfuse/evaluation.hpp"

using namespace mfuse;

namespace {

// Average precision straight from its definition: for every positive, the
// precision at the threshold equal to its score (ties all included).
double ap_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  std::size_t n_pos = 0;
  for (int v : y) n_pos += v;
  std::vector<double> thresholds(s);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    std::size_t tp = 0, seen = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) {
        ++seen;
        tp += y[i];
      }
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    ap += (recall - prev_recall) * static_cast<double>(tp) / static_cast<double>(seen);
    prev_recall = recall;
  }
  return ap;
}

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> positive;
};

ScoredSet random_scored_set(std::mt19937_64& gen) {
  std::uniform_int_distribution<int> len(1, 50);
  const int n = len(gen);
  // Coarse score grid so ties are common.
  std::uniform_int_distribution<int> grid(0, 9);
  std::bernoulli_distribution pos(0.4);
  ScoredSet r;
  for (int i = 0; i < n; ++i) {
    r.scores.push_back(grid(gen) / 10.0);
    r.positive.push_back(pos(gen));
  }
  if (std::count(r.positive.begin(), r.positive.end(), 1) == 0) r.positive[0] = 1;
  return r;
}

Tensor one_hot(const std::vector<int>& labels, std::size_t k) {
  Tensor t({labels.size(), k});
  for (std::size_t i = 0; i < labels.size(); ++i) t.data[i * k + static_cast<std::size_t>(labels[i])] = 1.0;
  return t;
}

Dataset small_dataset(std::size_t k, std::uint64_t seed) {
  DatasetSpec ds;
  ds.n_classes = k;
  ds.train_per_class = 2;
  ds.val_per_class = 0;
  ds.test_per_class = 6;
  ds.image_size = 24;
  ds.seq_len = 8;
  ds.seed = seed;
  return generate(ds).test;
}

ModelState small_model(std::size_t k) {
  ModelSpec spec;
  spec.image = BranchSpec{{4, 6, 8}, 5, k, {0}};
  spec.text = BranchSpec{{6, 7}, 5, k, {0}};
  spec.image_size = 24;
  spec.seq_len = 8;
  spec.vocab_size = 64;
  return build_model(spec, 11);
}

}  // namespace

TEST(ClassifyMetrics, PerfectPredictions) {
  const std::vector<int> y{0, 1, 2, 2, 1, 0};
  const auto m = classify_metrics(y, y, 3);
  EXPECT_DOUBLE_EQ(m.accuracy, 1.0);
  for (const auto& s : m.per_class) {
    EXPECT_DOUBLE_EQ(s.precision, 1.0);
    EXPECT_DOUBLE_EQ(s.recall, 1.0);
    EXPECT_DOUBLE_EQ(s.f1, 1.0);
    EXPECT_EQ(s.support, 2u);
  }
  EXPECT_DOUBLE_EQ(m.macro.f1, 1.0);
}

TEST(ClassifyMetrics, OneFalsePositive) {
  const auto m = classify_metrics(std::vector<int>{0, 0, 1, 1}, std::vector<int>{0, 1, 1, 1}, 2);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.75);
  EXPECT_NEAR(m.per_class[1].precision, 2.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(m.per_class[1].recall, 1.0);
  EXPECT_NEAR(m.per_class[1].f1, 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(m.per_class[0].precision, 1.0);
  EXPECT_DOUBLE_EQ(m.per_class[0].recall, 0.5);
  EXPECT_EQ(m.confusion, (ConfusionMatrix{{1, 1}, {0, 2}}));
}

TEST(ClassifyMetrics, NeverPredictedClassFlagged) {
  const auto m = classify_metrics(std::vector<int>{0, 0, 1, 1}, std::vector<int>{0, 0, 0, 0}, 2);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(m.per_class[0].precision, 0.5);
  EXPECT_DOUBLE_EQ(m.per_class[0].recall, 1.0);
  EXPECT_DOUBLE_EQ(m.per_class[1].precision, 0.0);
  EXPECT_DOUBLE_EQ(m.per_class[1].recall, 0.0);
  EXPECT_DOUBLE_EQ(m.per_class[1].f1, 0.0);
  EXPECT_TRUE(m.per_class[1].precision_undefined);
  EXPECT_FALSE(m.per_class[1].recall_undefined);
}

TEST(ClassifyMetrics, InvalidInputsRejected) {
  EXPECT_THROW(classify_metrics(std::vector<int>{0, 3}, std::vector<int>{0, 1}, 3), ValidationError);
  EXPECT_THROW(classify_metrics(std::vector<int>{0, 1}, std::vector<int>{0, -1}, 3), ValidationError);
  EXPECT_THROW(classify_metrics(std::vector<int>{0, 1}, std::vector<int>{0}, 3), InvalidInput);
}

TEST(ClassifyMetrics, ConfusionConsistentWithRates) {
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + trial % 6, n = 1 + trial % 40;
    std::uniform_int_distribution<int> cls(0, static_cast<int>(k) - 1);
    std::vector<int> y(n), p(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = cls(gen);
      p[i] = cls(gen);
    }
    const auto m = classify_metrics(y, p, k);
    std::size_t trace = 0, total = 0;
    for (std::size_t c = 0; c < k; ++c) {
      trace += m.confusion[c][c];
      std::size_t row = 0;
      for (std::size_t j = 0; j < k; ++j) row += m.confusion[c][j];
      total += row;
      if (row) {
        EXPECT_DOUBLE_EQ(m.per_class[c].recall, static_cast<double>(m.confusion[c][c]) / static_cast<double>(row));
      }
      EXPECT_EQ(m.per_class[c].support, row);
    }
    EXPECT_EQ(total, n);
    EXPECT_DOUBLE_EQ(m.accuracy, static_cast<double>(trace) / static_cast<double>(total));
  }
}

TEST(AveragePrecision, WorkedValues) {
  EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{0.9, 0.8, 0.3, 0.1}, std::vector<int>{1, 1, 0, 0}), 1.0);
  EXPECT_NEAR(average_precision(std::vector<double>{0.9, 0.8, 0.7}, std::vector<int>{1, 0, 1}), 0.8333333333, 1e-9);
  // [1, 0, 1] is a palindrome, so reversing the scores gives the same ranking.
  EXPECT_NEAR(average_precision(std::vector<double>{0.7, 0.8, 0.9}, std::vector<int>{1, 0, 1}), 0.8333333333, 1e-9);
  // The positive ranked last instead of first.
  EXPECT_NEAR(average_precision(std::vector<double>{0.9, 0.8, 0.7}, std::vector<int>{0, 1, 1}), 0.5833333333, 1e-9);
}

TEST(AveragePrecision, NoPositivesIsUndefined) {
  EXPECT_THROW(average_precision(std::vector<double>{0.2, 0.4}, std::vector<int>{0, 0}), UndefinedMetric);
  EXPECT_THROW(average_precision(std::vector<double>{}, std::vector<int>{}), UndefinedMetric);
}

TEST(AveragePrecision, NonFiniteScoresRejected) {
  EXPECT_THROW(average_precision(std::vector<double>{NAN, 0.4}, std::vector<int>{1, 0}), InvalidInput);
}

TEST(AveragePrecision, MatchesDefinitionOracle) {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 200; ++trial) {
    const ScoredSet r = random_scored_set(gen);
    EXPECT_NEAR(average_precision(r.scores, r.positive), ap_oracle(r.scores, r.positive), 1e-9);
  }
}

TEST(AveragePrecision, InvariantUnderMonotoneTransform) {
  std::mt19937_64 gen(6);
  for (int trial = 0; trial < 200; ++trial) {
    const ScoredSet r = random_scored_set(gen);
    std::vector<double> t(r.scores.size());
    std::transform(r.scores.begin(), r.scores.end(), t.begin(), [](double s) { return std::exp(3.0 * s) - 7.0; });
    EXPECT_DOUBLE_EQ(average_precision(r.scores, r.positive), average_precision(t, r.positive));
  }
}

TEST(AveragePrecision, ConstantScoresGivePrevalence) {
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 100; ++trial) {
    ScoredSet r = random_scored_set(gen);
    std::fill(r.scores.begin(), r.scores.end(), 0.5);
    const double prevalence = static_cast<double>(std::count(r.positive.begin(), r.positive.end(), 1)) /
                              static_cast<double>(r.positive.size());
    EXPECT_NEAR(average_precision(r.scores, r.positive), prevalence, 1e-15);
  }
}

TEST(AveragePrecision, CurveIsWellFormed) {
  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 200; ++trial) {
    const ScoredSet r = random_scored_set(gen);
    const PRCurve c = pr_curve(r.scores, r.positive);
    ASSERT_FALSE(c.points.empty());
    EXPECT_DOUBLE_EQ(c.points.back().recall, 1.0);
    for (std::size_t i = 0; i < c.points.size(); ++i) {
      EXPECT_GE(c.points[i].precision, 0.0);
      EXPECT_LE(c.points[i].precision, 1.0);
      if (i) {
        EXPECT_GE(c.points[i].recall, c.points[i - 1].recall);
        EXPECT_LT(c.points[i].threshold, c.points[i - 1].threshold);
      }
    }
    const double ap = average_precision(c);
    EXPECT_GE(ap, 0.0);
    EXPECT_LE(ap, 1.0 + 1e-15);
  }
}

TEST(MicroAveragePrecision, PerfectOneHotIsOne) {
  const std::vector<int> y{0, 2, 1, 1, 0};
  EXPECT_DOUBLE_EQ(micro_average_precision(one_hot(y, 3), y), 1.0);
}

TEST(MicroAveragePrecision, SingleClassEqualsBinary) {
  const std::vector<int> y{0, 0, 0};
  Tensor s({3, 1});
  s.data = {0.2, 0.9, 0.4};
  EXPECT_DOUBLE_EQ(micro_average_precision(s, y), average_precision(s.data, std::vector<int>{1, 1, 1}));
}

TEST(MicroAveragePrecision, MatchesFlattenedOracle) {
  std::mt19937_64 gen(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, 2);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor s({20, 3});
    std::vector<int> y(20), flat(60, 0);
    for (double& v : s.data) v = u(gen);
    for (std::size_t i = 0; i < 20; ++i) {
      y[i] = cls(gen);
      flat[i * 3 + static_cast<std::size_t>(y[i])] = 1;
    }
    EXPECT_NEAR(micro_average_precision(s, y), ap_oracle(s.data, flat), 1e-12);
  }
}

TEST(MicroAveragePrecision, ShapeAndLabelChecked) {
  const std::vector<int> y{0, 1};
  EXPECT_THROW(micro_average_precision(Tensor({3, 2}), y), InvalidInput);
  EXPECT_THROW(micro_average_precision(Tensor({2, 2}), std::vector<int>{0, 2}), ValidationError);
}

TEST(Report, ClassWithoutSupportHasNoAp) {
  const std::vector<int> y{0, 0, 1};
  Tensor p({3, 3});
  p.data = {0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.2, 0.5, 0.3};
  const auto r = make_report("image", {"a", "b", "c"}, p, y);
  EXPECT_TRUE(r.ap[0].has_value());
  EXPECT_TRUE(r.ap[1].has_value());
  EXPECT_FALSE(r.ap[2].has_value());
  EXPECT_EQ(r.curves.size(), 2u);
  EXPECT_EQ(r.metrics.confusion, (ConfusionMatrix{{1, 1, 0}, {0, 1, 0}, {0, 0, 0}}));
  const auto j = to_json(r);
  EXPECT_TRUE(j["per_class"][2]["ap"].is_null());
  EXPECT_EQ(j["n_samples"], 3);
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  EXPECT_EQ(keys, (std::vector<std::string>{"modality", "classes", "n_samples", "accuracy", "macro", "weighted",
                                            "per_class", "micro_ap", "confusion", "notes"}));
}

TEST(RestrictClasses, RenormalisesOverKept) {
  Tensor p({1, 4});
  p.data = {0.1, 0.6, 0.2, 0.1};
  const Tensor r = restrict_classes(p, {0, 2, 3});
  EXPECT_NEAR(r.data[0], 0.25, 1e-15);
  EXPECT_NEAR(r.data[1], 0.5, 1e-15);
  EXPECT_NEAR(r.data[2], 0.25, 1e-15);
}

TEST(Protocol, IdentityMappingMatchesIntraDataset) {
  const Dataset d = small_dataset(4, 21);
  const ModelState m = small_model(4);
  const auto intra = run_protocol(m, d.class_names, d, std::nullopt, AttentionMode::kDisabled);
  const auto mapped = run_protocol(m, d.class_names, d, ClassMapping::identity(d.class_names), AttentionMode::kDisabled);
  for (auto [a, b] : {std::pair{&intra.image, &mapped.image}, {&intra.text, &mapped.text}, {&intra.fusion, &mapped.fusion}}) {
    auto ja = to_json(*a), jb = to_json(*b);
    ja.erase("notes");
    jb.erase("notes");
    EXPECT_EQ(ja, jb);
  }
  EXPECT_TRUE(intra.fusion.notes.empty());
}

TEST(Protocol, SupportsSumToSetSize) {
  const Dataset d = small_dataset(3, 22);
  const auto res = run_protocol(small_model(3), d.class_names, d, std::nullopt, AttentionMode::kEnabled);
  for (const EvaluationReport* r : {&res.image, &res.text, &res.fusion}) {
    std::size_t n = 0;
    for (const auto& s : r->metrics.per_class) n += s.support;
    EXPECT_EQ(n, d.size());
  }
}

TEST(Protocol, ClassListMismatchNeedsMapping) {
  const Dataset d = small_dataset(3, 23);
  EXPECT_THROW(run_protocol(small_model(3), {"x", "y", "z"}, d, std::nullopt, AttentionMode::kDisabled),
               ValidationError);
  EXPECT_THROW(run_protocol(small_model(3), {"x", "y"}, d, std::nullopt, AttentionMode::kDisabled), InvalidConfig);
}

TEST(Protocol, HandBuiltTransferFixture) {
  const Dataset d = fixture::transfer_fixture();
  const ModelState m = fixture::nearest_index_model(16);
  const auto res = run_protocol(m, rvl_cdip_class_names(), d, tobacco_to_rvl_mapping(), AttentionMode::kDisabled);

  EXPECT_EQ(res.image.class_names.size(), 9u);
  EXPECT_EQ(res.image.class_names.front(), "Advertisement");
  EXPECT_EQ(res.image.class_names.back(), "Scientific report");
  // Rows and columns: Advertisement, Email, Form, Letter, Memo, News article,
  // Resume, Scientific publication, Scientific report.
  ConfusionMatrix image(9, std::vector<std::size_t>(9, 0));
  image[0][0] = 1;
  image[1][1] = 1;
  image[4][3] = 1;
  image[8][8] = 1;
  EXPECT_EQ(res.image.metrics.confusion, image);
  EXPECT_DOUBLE_EQ(res.image.metrics.accuracy, 0.75);
  EXPECT_DOUBLE_EQ(res.text.metrics.accuracy, 0.75);
  EXPECT_DOUBLE_EQ(res.fusion.metrics.accuracy, 0.25);
  EXPECT_TRUE(res.image.metrics.per_class[4].precision_undefined);
  EXPECT_TRUE(res.image.metrics.per_class[3].recall_undefined);

  EXPECT_EQ(per_class_table_csv(res), fixture::expected_transfer_table());
  ASSERT_EQ(res.fusion.notes.size(), 1u);
  EXPECT_EQ(res.fusion.notes[0],
            "inter-dataset: 1 samples of excluded classes dropped; outputs of 7 non-mapped classes masked before argmax");
}

TEST(Protocol, AllExcludedIsRejected) {
  Dataset d = fixture::transfer_fixture();
  d.samples = {d.samples[3]};  // the Note sample only
  EXPECT_THROW(run_protocol(fixture::nearest_index_model(16), rvl_cdip_class_names(), d, tobacco_to_rvl_mapping(),
                            AttentionMode::kDisabled),
               ValidationError);
}

TEST(Protocol, CsvExportsHaveExpectedShape) {
  const auto res = run_protocol(fixture::nearest_index_model(16), rvl_cdip_class_names(), fixture::transfer_fixture(),
                                tobacco_to_rvl_mapping(), AttentionMode::kDisabled);
  const std::string conf = confusion_csv(res.image);
  EXPECT_EQ(std::count(conf.begin(), conf.end(), '\n'), 10);
  EXPECT_EQ(conf.substr(0, conf.find('\n')),
            "true\\predicted,Advertisement,Email,Form,Letter,Memo,News article,Resume,Scientific publication,"
            "Scientific report");
  const std::string pr = pr_curves_csv(res.fusion);
  EXPECT_EQ(pr.substr(0, pr.find('\n')), "class,threshold,precision,recall");
}
