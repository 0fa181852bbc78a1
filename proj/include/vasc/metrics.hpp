#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vasc/model.hpp"
#include "vasc/taxonomy.hpp"

namespace vasc {

struct ScoredLabel {
  double score = 0.0;
  bool positive = false;
};

struct RocPoint {
  double threshold = 0.0;  // predict positive when score >= threshold
  double fpr = 0.0;
  double tpr = 0.0;
};

/// Points ordered by decreasing threshold. The first point is the (0,0)
/// sentinel with threshold +inf; the last is (1,1) at the minimum score.
struct RocCurve {
  std::vector<RocPoint> points;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

/// Error{DegenerateInput} unless there is at least one positive and one negative.
RocCurve roc_curve(std::span<const ScoredLabel> scores);

/// Trapezoidal area under the curve.
double auc(const RocCurve& curve);

/// Fraction of (positive, negative) pairs ranked correctly, ties counting 1/2.
/// Quadratic; the reference against which the trapezoid is checked.
double pairwise_auc(std::span<const ScoredLabel> scores);

struct ConfidenceInterval {
  double lo = 0.0;
  double hi = 0.0;
};

struct BootstrapOptions {
  double level = 0.95;
  int n_boot = 2000;
  std::uint64_t seed = 0;
};

/// Label-stratified percentile bootstrap. Each replicate resamples the
/// positives and the negatives separately (with replacement) and the
/// interval takes the linear-interpolated quantiles of the replicate AUCs.
/// Error{InsufficientData} with fewer than 5 positives or 5 negatives.
ConfidenceInterval auc_confidence_interval(std::span<const ScoredLabel> scores,
                                           const BootstrapOptions& options = {});

/// Linear-interpolated quantile of an ascending-sorted sample (q in [0,1]).
double sorted_quantile(std::span<const double> sorted, double q);

/// Score cut maximizing TPR + (1 - FPR); ties go to the higher threshold.
double youden_threshold(const RocCurve& curve);
double youden_threshold(std::span<const ScoredLabel> scores);

struct BinaryCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

BinaryCounts binarize(std::span<const ScoredLabel> scores, double threshold);

/// Support-weighted mean of the F1 scores obtained by treating each label in
/// turn as positive. Error{UndefinedMetric} when either side has no examples.
double weighted_f1(const BinaryCounts& counts);
double weighted_f1(std::span<const ScoredLabel> scores, double threshold);

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : k_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return k_; }
  std::size_t& at(std::size_t truth, std::size_t predicted) { return counts_[truth * k_ + predicted]; }
  std::size_t at(std::size_t truth, std::size_t predicted) const {
    return counts_[truth * k_ + predicted];
  }
  std::size_t total() const;
  std::size_t correct() const;
  std::size_t row_sum(std::size_t truth) const;
  /// Error{UndefinedMetric} for an empty matrix.
  double accuracy() const;
  /// Diagonal share of one true-class row. Error{UndefinedMetric} if the row is empty.
  double class_accuracy(std::size_t truth) const;

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_;
  std::vector<std::size_t> counts_;
};

ConfusionMatrix confusion_matrix(std::span<const PredictionRecord> predictions,
                                 const Taxonomy& taxonomy);

struct ClassMetrics {
  std::string class_id;
  double auc = 0.0;
  ConfidenceInterval ci95;
  double operating_threshold = 0.0;
  double f1_weighted = 0.0;
  std::size_t support_pos = 0;
  std::size_t support_neg = 0;
};

/// One-vs-rest scores of class `index` over pooled predictions.
std::vector<ScoredLabel> one_vs_rest(std::span<const PredictionRecord> predictions,
                                     const Taxonomy& taxonomy, std::size_t index);

ClassMetrics evaluate_class(std::span<const PredictionRecord> predictions,
                            const Taxonomy& taxonomy, std::size_t index,
                            const BootstrapOptions& bootstrap);

struct MetricsReport {
  std::vector<ClassMetrics> classes;
  double macro_auc = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> accuracy;
  ConfusionMatrix confusion;
  std::string ci_method = "label-stratified percentile bootstrap";
  BootstrapOptions bootstrap;
};

/// Unweighted means over classes (Error{Validation} for an empty list).
std::pair<double, double> macro_average(std::span<const ClassMetrics> classes);

MetricsReport aggregate_report(std::vector<ClassMetrics> per_class,
                               std::span<const PredictionRecord> predictions,
                               const Taxonomy& taxonomy);

/// Full evaluation: per-class metrics from pooled predictions plus aggregate.
MetricsReport evaluate_predictions(std::span<const PredictionRecord> predictions,
                                   const Taxonomy& taxonomy, const BootstrapOptions& bootstrap);

/// Human table: "Class | AUC (95% CI) | F1", with an Average row.
std::string format_table(const MetricsReport& report, const Taxonomy& taxonomy,
                         bool include_ci = true);

/// Machine-readable results file (JSON): per-class rows and a macro row.
std::string results_to_json(const MetricsReport& report);

/// ROC point dump: "threshold fpr tpr" rows.
std::string roc_to_text(const RocCurve& curve);

/// Tab-separated predictions: image_id, true_class_id, then one probability
/// column per class id (header `p:<class_id>`), written with 17 significant digits.
std::string predictions_to_tsv(std::span<const PredictionRecord> predictions,
                               const std::vector<std::string>& class_ids);
std::vector<PredictionRecord> predictions_from_tsv(const std::string& text,
                                                   std::vector<std::string>* class_ids = nullptr);

}  // namespace vasc
