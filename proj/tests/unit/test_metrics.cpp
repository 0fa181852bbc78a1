#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "doctest.h"
#include "vasc/error.hpp"
#include "vasc/metrics.hpp"
#include "vasc/random.hpp"

using namespace vasc;

namespace {

std::vector<ScoredLabel> make(std::initializer_list<double> pos, std::initializer_list<double> neg) {
  std::vector<ScoredLabel> out;
  for (double s : pos) out.push_back({s, true});
  for (double s : neg) out.push_back({s, false});
  return out;
}

// Oracle: best J over every candidate cut, evaluated by direct counting.
double best_youden_j(const std::vector<ScoredLabel>& s) {
  std::set<double> cuts;
  for (const auto& x : s) cuts.insert(x.score);
  double best = -1.0;
  for (double t : cuts) {
    double tp = 0, fp = 0, p = 0, n = 0;
    for (const auto& x : s) {
      (x.positive ? p : n) += 1;
      if (x.score >= t) (x.positive ? tp : fp) += 1;
    }
    best = std::max(best, tp / p - fp / n);
  }
  return best;
}

double j_at(const std::vector<ScoredLabel>& s, double t) {
  double tp = 0, fp = 0, p = 0, n = 0;
  for (const auto& x : s) {
    (x.positive ? p : n) += 1;
    if (x.score >= t) (x.positive ? tp : fp) += 1;
  }
  return tp / p - fp / n;
}

}  // namespace

TEST_CASE("auc of a hand-worked example") {
  // Pairs: (0.9,0.6) (0.9,0.1) (0.4,0.1) correct, (0.4,0.6) wrong -> 3/4.
  const auto s = make({0.9, 0.4}, {0.6, 0.1});
  CHECK(auc(roc_curve(s)) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(pairwise_auc(s) == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("ties count one half") {
  const auto s = make({0.5}, {0.5});
  CHECK(auc(roc_curve(s)) == doctest::Approx(0.5));
}

TEST_CASE("roc curve shape") {
  const auto curve = roc_curve(make({0.9, 0.4}, {0.6, 0.1}));
  REQUIRE(curve.points.size() == 5);
  CHECK(std::isinf(curve.points.front().threshold));
  CHECK(curve.points.front().fpr == 0.0);
  CHECK(curve.points.back().tpr == 1.0);
  CHECK(curve.points.back().fpr == 1.0);
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    CHECK(curve.points[i].threshold < curve.points[i - 1].threshold);
  }
}

TEST_CASE("trapezoid agrees with concordance on random inputs") {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ScoredLabel> s;
    const auto n = 2 + rng.index(80);
    for (std::uint64_t i = 0; i < n; ++i) {
      // Coarse scores force plenty of ties.
      s.push_back({std::round(rng.uniform() * 10) / 10, i % 2 == 0});
    }
    CHECK(std::abs(auc(roc_curve(s)) - pairwise_auc(s)) < 1e-12);
    const double t = youden_threshold(s);
    CHECK(j_at(s, t) == doctest::Approx(best_youden_j(s)).epsilon(1e-12));
  }
}

TEST_CASE("youden ties keep the higher threshold") {
  // Cuts 0.8 and 0.3 both reach J = 0.5.
  const auto s = make({0.8, 0.3}, {0.5, 0.1});
  CHECK(youden_threshold(s) == 0.8);
}

TEST_CASE("degenerate inputs are rejected") {
  CHECK_THROWS_AS(roc_curve(make({0.1, 0.2}, {})), Error);
  CHECK_THROWS_AS(roc_curve(make({}, {0.3})), Error);
  CHECK_THROWS_AS(roc_curve(make({std::numeric_limits<double>::quiet_NaN()}, {0.3})), Error);
}

TEST_CASE("weighted f1 matches the hand-worked example") {
  BinaryCounts c;
  c.tp = 8;
  c.fn = 2;
  c.fp = 1;
  c.tn = 9;
  // Positive class 16/19, negative class 18/21, equal supports.
  CHECK(weighted_f1(c) == doctest::Approx((16.0 / 19 + 18.0 / 21) / 2).epsilon(1e-14));
  CHECK(weighted_f1(c) == doctest::Approx(0.8496).epsilon(1e-4));
}

TEST_CASE("weighted f1 guards") {
  BinaryCounts empty_pos;
  empty_pos.tn = 3;
  empty_pos.fp = 1;
  CHECK_THROWS_AS(weighted_f1(empty_pos), Error);
  CHECK_THROWS_AS(weighted_f1(make({0.9}, {0.1}), 1.5), Error);
}

TEST_CASE("quantiles interpolate linearly") {
  const std::vector<double> v{1, 2, 3, 4};
  CHECK(sorted_quantile(v, 0.0) == 1.0);
  CHECK(sorted_quantile(v, 1.0) == 4.0);
  CHECK(sorted_quantile(v, 0.5) == doctest::Approx(2.5));
  CHECK(sorted_quantile(v, 0.25) == doctest::Approx(1.75));
}

TEST_CASE("bootstrap interval") {
  std::vector<ScoredLabel> s;
  Rng rng(5);
  for (int i = 0; i < 40; ++i) s.push_back({rng.uniform() + (i % 2 ? 0.4 : 0.0), i % 2 == 1});
  BootstrapOptions opts;
  opts.seed = 17;
  opts.n_boot = 500;
  const auto a = auc_confidence_interval(s, opts);
  const auto b = auc_confidence_interval(s, opts);
  CHECK(a.lo == b.lo);
  CHECK(a.hi == b.hi);
  const double point = auc(roc_curve(s));
  CHECK(a.lo <= point);
  CHECK(point <= a.hi);
  CHECK(a.lo < a.hi);

  SUBCASE("perfect separation collapses to a point") {
    const auto p = auc_confidence_interval(make({0.9, 0.8, 0.7, 0.95, 0.85}, {0.1, 0.2, 0.3, 0.4, 0.05}), opts);
    CHECK(p.lo == 1.0);
    CHECK(p.hi == 1.0);
  }
  SUBCASE("too few samples") {
    CHECK_THROWS_AS(auc_confidence_interval(make({0.9, 0.8}, {0.1, 0.2, 0.3, 0.4, 0.5}), opts), Error);
  }
}

TEST_CASE("confusion matrix and pooled evaluation") {
  const Taxonomy tax = default_taxonomy().subset_six();
  std::vector<PredictionRecord> preds;
  Rng rng(8);
  for (int i = 0; i < 120; ++i) {
    PredictionRecord p;
    p.image_id = "img" + std::to_string(i);
    const auto truth = static_cast<std::size_t>(i % 6);
    p.true_class_id = tax[truth].class_id;
    p.probabilities.assign(6, 0.0);
    for (auto& v : p.probabilities) v = rng.uniform();
    p.probabilities[truth] += 1.5 * rng.uniform();
    double sum = 0.0;
    for (double v : p.probabilities) sum += v;
    for (auto& v : p.probabilities) v /= sum;
    preds.push_back(p);
  }
  const auto cm = confusion_matrix(preds, tax);
  CHECK(cm.total() == 120);
  std::size_t correct = 0;
  for (const auto& p : preds) correct += tax[p.predicted_index()].class_id == p.true_class_id;
  CHECK(cm.correct() == correct);

  BootstrapOptions opts;
  opts.n_boot = 200;
  const auto report = evaluate_predictions(preds, tax, opts);
  REQUIRE(report.classes.size() == 6);
  double mean_auc = 0.0;
  for (std::size_t k = 0; k < 6; ++k) {
    const double expected = pairwise_auc(one_vs_rest(preds, tax, k));
    CHECK(report.classes[k].auc == doctest::Approx(expected).epsilon(1e-12));
    mean_auc += expected / 6;
  }
  CHECK(report.macro_auc == doctest::Approx(mean_auc).epsilon(1e-12));
  REQUIRE(report.accuracy.has_value());
  CHECK(*report.accuracy == doctest::Approx(static_cast<double>(correct) / 120));

  const auto table = format_table(report, tax);
  CHECK(table.find("Average") != std::string::npos);
  CHECK(table.find("Accuracy") != std::string::npos);

  const auto round = predictions_from_tsv(predictions_to_tsv(preds, tax.class_ids()), nullptr);
  REQUIRE(round.size() == preds.size());
  CHECK(round[7].probabilities == preds[7].probabilities);
  CHECK(round[7].true_class_id == preds[7].true_class_id);
}

TEST_CASE("macro average of an empty list") {
  CHECK_THROWS_AS(macro_average(std::span<const ClassMetrics>{}), Error);
}
