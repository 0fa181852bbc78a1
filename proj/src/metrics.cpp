#include "vasc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "vasc/error.hpp"
#include "vasc/random.hpp"

namespace vasc {

RocCurve roc_curve(std::span<const ScoredLabel> scores) {
  RocCurve curve;
  for (const auto& s : scores) {
    if (!std::isfinite(s.score)) throw Error(ErrorKind::DegenerateInput, "non-finite score");
    (s.positive ? curve.positives : curve.negatives) += 1;
  }
  if (curve.positives == 0 || curve.negatives == 0) {
    throw Error(ErrorKind::DegenerateInput, "ROC needs at least one positive and one negative");
  }
  std::vector<ScoredLabel> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const ScoredLabel& a, const ScoredLabel& b) { return a.score > b.score; });
  const double p = static_cast<double>(curve.positives);
  const double n = static_cast<double>(curve.negatives);
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double threshold = sorted[i].score;
    for (; i < sorted.size() && sorted[i].score == threshold; ++i) {
      (sorted[i].positive ? tp : fp) += 1;
    }
    curve.points.push_back({threshold, static_cast<double>(fp) / n, static_cast<double>(tp) / p});
  }
  return curve;
}

double auc(const RocCurve& curve) {
  if (curve.points.size() < 2) throw Error(ErrorKind::DegenerateInput, "empty ROC curve");
  double area = 0.0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5;
  }
  return area;
}

double pairwise_auc(std::span<const ScoredLabel> scores) {
  double concordant = 0.0;
  std::size_t pairs = 0;
  for (const auto& pos : scores) {
    if (!pos.positive) continue;
    for (const auto& neg : scores) {
      if (neg.positive) continue;
      ++pairs;
      if (pos.score > neg.score) {
        concordant += 1.0;
      } else if (pos.score == neg.score) {
        concordant += 0.5;
      }
    }
  }
  if (pairs == 0) throw Error(ErrorKind::DegenerateInput, "no positive/negative pairs");
  return concordant / static_cast<double>(pairs);
}

double sorted_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error(ErrorKind::InsufficientData, "quantile of empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

ConfidenceInterval auc_confidence_interval(std::span<const ScoredLabel> scores,
                                           const BootstrapOptions& options) {
  std::vector<ScoredLabel> pos, neg;
  for (const auto& s : scores) (s.positive ? pos : neg).push_back(s);
  if (pos.size() < 5 || neg.size() < 5) {
    throw Error(ErrorKind::InsufficientData,
                "bootstrap CI needs at least 5 positives and 5 negatives");
  }
  if (!(options.level > 0.0 && options.level < 1.0) || options.n_boot < 1) {
    throw Error(ErrorKind::Parameter, "invalid bootstrap options");
  }
  Rng rng(options.seed);
  std::vector<double> replicates;
  replicates.reserve(static_cast<std::size_t>(options.n_boot));
  std::vector<ScoredLabel> sample(pos.size() + neg.size());
  for (int b = 0; b < options.n_boot; ++b) {
    for (std::size_t i = 0; i < pos.size(); ++i) sample[i] = pos[rng.index(pos.size())];
    for (std::size_t j = 0; j < neg.size(); ++j) sample[pos.size() + j] = neg[rng.index(neg.size())];
    replicates.push_back(auc(roc_curve(sample)));
  }
  std::sort(replicates.begin(), replicates.end());
  const double alpha = (1.0 - options.level) / 2.0;
  return {sorted_quantile(replicates, alpha), sorted_quantile(replicates, 1.0 - alpha)};
}

double youden_threshold(const RocCurve& curve) {
  if (curve.points.size() < 2) throw Error(ErrorKind::DegenerateInput, "degenerate ROC curve");
  double best_j = -std::numeric_limits<double>::infinity();
  double best_threshold = 0.0;
  // Points run from high to low threshold, so strict improvement keeps the
  // higher threshold on ties.
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& p = curve.points[i];
    const double j = p.tpr - p.fpr;
    if (j > best_j + 1e-12) {
      best_j = j;
      best_threshold = p.threshold;
    }
  }
  return best_threshold;
}

double youden_threshold(std::span<const ScoredLabel> scores) {
  return youden_threshold(roc_curve(scores));
}

BinaryCounts binarize(std::span<const ScoredLabel> scores, double threshold) {
  BinaryCounts c;
  for (const auto& s : scores) {
    const bool predicted = s.score >= threshold;
    if (s.positive) {
      (predicted ? c.tp : c.fn) += 1;
    } else {
      (predicted ? c.fp : c.tn) += 1;
    }
  }
  return c;
}

double weighted_f1(const BinaryCounts& c) {
  const double pos = static_cast<double>(c.tp + c.fn);
  const double neg = static_cast<double>(c.tn + c.fp);
  if (pos == 0.0 || neg == 0.0) {
    throw Error(ErrorKind::UndefinedMetric, "weighted F1 needs positive and negative examples");
  }
  const double f1_pos = 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn);
  const double f1_neg = 2.0 * c.tn / (2.0 * c.tn + c.fn + c.fp);
  return (pos * f1_pos + neg * f1_neg) / (pos + neg);
}

double weighted_f1(std::span<const ScoredLabel> scores, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw Error(ErrorKind::Parameter, "threshold must be in [0,1]");
  }
  return weighted_f1(binarize(scores, threshold));
}

// ---------------------------------------------------------------- confusion

std::size_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0});
}

std::size_t ConfusionMatrix::correct() const {
  std::size_t sum = 0;
  for (std::size_t i = 0; i < k_; ++i) sum += at(i, i);
  return sum;
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::size_t sum = 0;
  for (std::size_t j = 0; j < k_; ++j) sum += at(truth, j);
  return sum;
}

double ConfusionMatrix::accuracy() const {
  const auto n = total();
  if (n == 0) throw Error(ErrorKind::UndefinedMetric, "accuracy of an empty confusion matrix");
  return static_cast<double>(correct()) / static_cast<double>(n);
}

double ConfusionMatrix::class_accuracy(std::size_t truth) const {
  const auto n = row_sum(truth);
  if (n == 0) throw Error(ErrorKind::UndefinedMetric, "class has no items");
  return static_cast<double>(at(truth, truth)) / static_cast<double>(n);
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw Error(ErrorKind::Shape, "confusion matrices differ in size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix confusion_matrix(std::span<const PredictionRecord> predictions,
                                 const Taxonomy& taxonomy) {
  ConfusionMatrix m(taxonomy.size());
  for (const auto& p : predictions) {
    if (p.probabilities.size() != taxonomy.size()) {
      throw Error(ErrorKind::Shape, "prediction for " + p.image_id + " has " +
                                        std::to_string(p.probabilities.size()) + " classes");
    }
    m.at(taxonomy.require_index(p.true_class_id), p.predicted_index()) += 1;
  }
  return m;
}

// ---------------------------------------------------------------- reports

std::vector<ScoredLabel> one_vs_rest(std::span<const PredictionRecord> predictions,
                                     const Taxonomy& taxonomy, std::size_t index) {
  std::vector<ScoredLabel> out;
  out.reserve(predictions.size());
  const auto& cls = taxonomy[index].class_id;
  for (const auto& p : predictions) {
    if (index >= p.probabilities.size()) throw Error(ErrorKind::Shape, "class index out of range");
    out.push_back({p.probabilities[index], p.true_class_id == cls});
  }
  return out;
}

ClassMetrics evaluate_class(std::span<const PredictionRecord> predictions,
                            const Taxonomy& taxonomy, std::size_t index,
                            const BootstrapOptions& bootstrap) {
  const auto scores = one_vs_rest(predictions, taxonomy, index);
  const RocCurve curve = roc_curve(scores);
  ClassMetrics m;
  m.class_id = taxonomy[index].class_id;
  m.auc = auc(curve);
  m.support_pos = curve.positives;
  m.support_neg = curve.negatives;
  try {
    BootstrapOptions opts = bootstrap;
    opts.seed = derive_seed(bootstrap.seed, index);
    m.ci95 = auc_confidence_interval(scores, opts);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::InsufficientData) throw;
    m.ci95 = {std::nan(""), std::nan("")};
  }
  m.operating_threshold = youden_threshold(curve);
  m.f1_weighted = weighted_f1(binarize(scores, m.operating_threshold));
  return m;
}

std::pair<double, double> macro_average(std::span<const ClassMetrics> classes) {
  if (classes.empty()) throw Error(ErrorKind::Validation, "no classes to average");
  double a = 0.0, f = 0.0;
  for (const auto& c : classes) {
    a += c.auc;
    f += c.f1_weighted;
  }
  const double n = static_cast<double>(classes.size());
  return {a / n, f / n};
}

MetricsReport aggregate_report(std::vector<ClassMetrics> per_class,
                               std::span<const PredictionRecord> predictions,
                               const Taxonomy& taxonomy) {
  MetricsReport report;
  std::tie(report.macro_auc, report.macro_f1) = macro_average(per_class);
  report.classes = std::move(per_class);
  report.confusion = confusion_matrix(predictions, taxonomy);
  if (report.confusion.total() > 0) report.accuracy = report.confusion.accuracy();
  return report;
}

MetricsReport evaluate_predictions(std::span<const PredictionRecord> predictions,
                                   const Taxonomy& taxonomy, const BootstrapOptions& bootstrap) {
  std::vector<ClassMetrics> per_class;
  for (std::size_t k = 0; k < taxonomy.size(); ++k) {
    per_class.push_back(evaluate_class(predictions, taxonomy, k, bootstrap));
  }
  MetricsReport report = aggregate_report(std::move(per_class), predictions, taxonomy);
  report.bootstrap = bootstrap;
  return report;
}

namespace {

std::string fixed(double v, int digits = 4) {
  if (std::isnan(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

}  // namespace

std::string format_table(const MetricsReport& report, const Taxonomy& taxonomy, bool include_ci) {
  std::size_t name_width = 8;
  for (const auto& c : report.classes) {
    const auto idx = taxonomy.index_of(c.class_id);
    name_width = std::max(name_width, (idx ? taxonomy[*idx].display_name : c.class_id).size() + 2);
  }
  std::ostringstream out;
  out << pad("Class", name_width) << pad(include_ci ? "AUC (95% CI)" : "AUC", 28) << "F1\n";
  for (const auto& c : report.classes) {
    const auto idx = taxonomy.index_of(c.class_id);
    std::string auc_text = fixed(c.auc);
    if (include_ci) auc_text += " (" + fixed(c.ci95.lo) + " -- " + fixed(c.ci95.hi) + ")";
    out << pad(idx ? taxonomy[*idx].display_name : c.class_id, name_width) << pad(auc_text, 28)
        << fixed(c.f1_weighted) << "\n";
  }
  out << pad("Average", name_width) << pad(fixed(report.macro_auc), 28) << fixed(report.macro_f1)
      << "\n";
  if (report.accuracy) out << "Accuracy: " << fixed(*report.accuracy) << "\n";
  return out.str();
}

std::string results_to_json(const MetricsReport& report) {
  using nlohmann::json;
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json j;
  j["format"] = "vasc-results";
  j["version"] = 1;
  j["ci_method"] = report.ci_method;
  j["bootstrap"] = {{"level", report.bootstrap.level},
                    {"n_boot", report.bootstrap.n_boot},
                    {"seed", report.bootstrap.seed}};
  j["classes"] = json::array();
  for (const auto& c : report.classes) {
    j["classes"].push_back({{"class_id", c.class_id},
                            {"auc", c.auc},
                            {"ci_lo", num(c.ci95.lo)},
                            {"ci_hi", num(c.ci95.hi)},
                            {"threshold", c.operating_threshold},
                            {"f1", c.f1_weighted},
                            {"support_pos", c.support_pos},
                            {"support_neg", c.support_neg}});
  }
  j["macro"] = {{"auc", report.macro_auc}, {"f1", report.macro_f1}};
  j["accuracy"] = report.accuracy ? json(*report.accuracy) : json(nullptr);
  json rows = json::array();
  for (std::size_t t = 0; t < report.confusion.classes(); ++t) {
    json row = json::array();
    for (std::size_t p = 0; p < report.confusion.classes(); ++p) row.push_back(report.confusion.at(t, p));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  return j.dump(2);
}

std::string roc_to_text(const RocCurve& curve) {
  std::ostringstream out;
  out << "# threshold fpr tpr\n";
  out.precision(10);
  for (const auto& p : curve.points) {
    out << (std::isinf(p.threshold) ? std::string("inf") : std::to_string(p.threshold)) << ' '
        << p.fpr << ' ' << p.tpr << '\n';
  }
  return out.str();
}

std::string predictions_to_tsv(std::span<const PredictionRecord> predictions,
                               const std::vector<std::string>& class_ids) {
  std::ostringstream out;
  out.precision(17);
  out << "image_id\ttrue_class_id";
  for (const auto& c : class_ids) out << "\tp:" << c;
  out << '\n';
  for (const auto& p : predictions) {
    if (p.probabilities.size() != class_ids.size()) {
      throw Error(ErrorKind::Shape, "prediction for " + p.image_id + " has the wrong length");
    }
    out << p.image_id << '\t' << p.true_class_id;
    for (double v : p.probabilities) out << '\t' << v;
    out << '\n';
  }
  return out.str();
}

std::vector<PredictionRecord> predictions_from_tsv(const std::string& text,
                                                   std::vector<std::string>* class_ids) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("image_id\ttrue_class_id", 0) != 0) {
    throw Error(ErrorKind::Load, "predictions file lacks its header");
  }
  std::vector<std::string> ids;
  {
    std::istringstream hs(line);
    std::string field;
    int col = 0;
    while (std::getline(hs, field, '\t')) {
      if (col++ < 2) continue;
      if (field.rfind("p:", 0) != 0) throw Error(ErrorKind::Load, "bad probability column " + field);
      ids.push_back(field.substr(2));
    }
  }
  std::vector<PredictionRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    PredictionRecord r;
    std::string field;
    std::getline(ls, r.image_id, '\t');
    std::getline(ls, r.true_class_id, '\t');
    while (std::getline(ls, field, '\t')) r.probabilities.push_back(std::stod(field));
    if (r.probabilities.size() != ids.size()) {
      throw Error(ErrorKind::Load, "prediction row for " + r.image_id + " has the wrong width");
    }
    out.push_back(std::move(r));
  }
  if (class_ids) *class_ids = std::move(ids);
  return out;
}

}  // namespace vasc
