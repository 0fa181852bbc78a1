#include "vasc/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "vasc/error.hpp"
#include "vasc/parallel.hpp"
#include "vasc/random.hpp"

namespace vasc {

std::string to_string(BackbonePolicy policy) {
  return policy == BackbonePolicy::Frozen ? "frozen" : "top-blocks-unfrozen";
}

BackbonePolicy backbone_policy_from_string(const std::string& text) {
  if (text == "frozen") return BackbonePolicy::Frozen;
  if (text == "top-blocks-unfrozen") return BackbonePolicy::TopBlockUnfrozen;
  throw Error(ErrorKind::Configuration, "unknown backbone policy '" + text + "'");
}

void TrainConfig::validate() const {
  if (optimizer != "rmsprop") throw Error(ErrorKind::Configuration, "optimizer must be rmsprop");
  if (loss != "categorical_crossentropy") {
    throw Error(ErrorKind::Configuration, "loss must be categorical_crossentropy");
  }
  if (!(learning_rate >= 0.0)) throw Error(ErrorKind::Configuration, "learning_rate must be >= 0");
  if (!(rho >= 0.0 && rho < 1.0)) throw Error(ErrorKind::Configuration, "rho must be in [0,1)");
  if (epochs < 1) throw Error(ErrorKind::Configuration, "epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorKind::Configuration, "batch_size must be >= 1");
  if (patience < 0) throw Error(ErrorKind::Configuration, "patience must be >= 0");
}

namespace {

/// RMSProp accumulator for one parameter block (Keras semantics).
class RmsProp {
 public:
  RmsProp(std::size_t size, const TrainConfig& cfg)
      : cache_(size, 0.0), lr_(cfg.learning_rate), rho_(cfg.rho), eps_(cfg.epsilon) {}

  void step(double* params, const double* grad) {
    for (std::size_t i = 0; i < cache_.size(); ++i) {
      cache_[i] = rho_ * cache_[i] + (1.0 - rho_) * grad[i] * grad[i];
      params[i] -= lr_ * grad[i] / (std::sqrt(cache_[i]) + eps_);
    }
  }

 private:
  std::vector<double> cache_;
  double lr_, rho_, eps_;
};

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& m, std::span<const std::size_t> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

std::size_t count_correct(const Eigen::MatrixXd& probs, std::span<const std::size_t> labels) {
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    Eigen::Index arg;
    probs.row(r).maxCoeff(&arg);
    if (static_cast<std::size_t>(arg) == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return correct;
}

void check_finite(double loss, int epoch, std::size_t batch) {
  if (!std::isfinite(loss)) {
    throw Error(ErrorKind::Training, "non-finite loss at epoch " + std::to_string(epoch) +
                                         ", batch " + std::to_string(batch) +
                                         "; try a smaller learning rate");
  }
}

}  // namespace

TrainResult train(const Classifier& initial, const ExampleSet& train_set,
                  const ExampleSet& val_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.size() == 0) throw Error(ErrorKind::Training, "empty training set");
  const std::size_t k = initial.num_classes();
  for (const auto* set : {&train_set, &val_set}) {
    if (set->group_ids.size() != set->size()) {
      throw Error(ErrorKind::Shape, "example set group ids and labels differ in length");
    }
    for (auto y : set->labels) {
      if (y >= k) throw Error(ErrorKind::Validation, "label outside the taxonomy");
    }
  }
  const std::set<std::string> train_groups(train_set.group_ids.begin(), train_set.group_ids.end());
  for (const auto& g : val_set.group_ids) {
    if (train_groups.contains(g)) {
      throw Error(ErrorKind::Validation,
                  "lesion group '" + g + "' appears in both training and validation data");
    }
  }

  TrainResult result{initial, {}, 0};
  Classifier& model = result.model;
  const bool unfreeze = cfg.backbone_policy == BackbonePolicy::TopBlockUnfrozen;
  const std::size_t top = unfreeze ? model.backbone().top_block_start() : 0;
  const int threads = resolve_threads(cfg.threads);
  const int dim = model.backbone().feature_dim();

  // Frozen: cache backbone features. Unfrozen: cache top-block inputs.
  auto encode = [&](const ExampleSet& set, std::vector<FeatureMap>& block_inputs) {
    Eigen::MatrixXd feats(static_cast<Eigen::Index>(set.size()), dim);
    if (unfreeze) block_inputs.resize(set.size());
    std::vector<std::vector<double>> rows(set.size());
    parallel_for(set.size(), threads, [&](std::size_t i) {
      const Image image = set.render(i);
      model.backbone().check_input(image);
      if (unfreeze) {
        FeatureMap act = to_feature_map(image);
        const auto& layers = model.backbone().layers();
        for (std::size_t l = 0; l < top; ++l) act = layers[l]->forward(act);
        rows[i] = model.backbone().features_from(top, act);
        block_inputs[i] = std::move(act);
      } else {
        rows[i] = model.backbone().features(image);
      }
    });
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (int j = 0; j < dim; ++j) feats(static_cast<Eigen::Index>(i), j) = rows[i][j];
    }
    return feats;
  };
  std::vector<FeatureMap> train_blocks, val_blocks;
  Eigen::MatrixXd train_feats = encode(train_set, train_blocks);
  Eigen::MatrixXd val_feats = encode(val_set, val_blocks);

  auto refresh = [&](const std::vector<FeatureMap>& blocks, Eigen::MatrixXd& feats) {
    parallel_for(blocks.size(), threads, [&](std::size_t i) {
      const auto f = model.backbone().features_from(top, blocks[i]);
      for (int j = 0; j < dim; ++j) feats(static_cast<Eigen::Index>(i), j) = f[static_cast<std::size_t>(j)];
    });
  };

  Head& head = model.head();
  RmsProp opt_w1(static_cast<std::size_t>(head.w1.size()), cfg);
  RmsProp opt_b1(static_cast<std::size_t>(head.b1.size()), cfg);
  RmsProp opt_w2(static_cast<std::size_t>(head.w2.size()), cfg);
  RmsProp opt_b2(static_cast<std::size_t>(head.b2.size()), cfg);
  std::optional<RmsProp> opt_top;
  if (unfreeze) opt_top.emplace(model.backbone().top_block_params().size(), cfg);

  Classifier best = model;
  double best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::vector<std::size_t> order(train_set.size());
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += bs, ++batch) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      const Eigen::MatrixXd x = gather_rows(train_feats, idx);
      std::vector<std::size_t> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = train_set.labels[idx[i]];
      const Eigen::MatrixXd mask = head.sample_dropout_mask(x.rows(), rng);
      Head::Gradient g;
      const double loss = head.loss_and_gradient(x, y, &mask, g);
      check_finite(loss, epoch, batch);
      loss_sum += loss * static_cast<double>(idx.size());
      correct += count_correct(head.probabilities(x), y);

      if (unfreeze) {
        std::vector<std::vector<double>> per(idx.size());
        parallel_for(idx.size(), threads, [&](std::size_t i) {
          const Eigen::RowVectorXd row = g.input.row(static_cast<Eigen::Index>(i));
          per[i] = model.backbone().top_block_gradient(
              train_blocks[idx[i]], std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
        });
        std::vector<double> total(per.front().size(), 0.0);
        for (const auto& p : per) {
          for (std::size_t j = 0; j < p.size(); ++j) total[j] += p[j];
        }
        opt_top->step(model.backbone().top_block_params().data(), total.data());
      }
      opt_w1.step(head.w1.data(), g.w1.data());
      opt_b1.step(head.b1.data(), g.b1.data());
      opt_w2.step(head.w2.data(), g.w2.data());
      opt_b2.step(head.b2.data(), g.b2.data());
    }
    if (unfreeze) {
      refresh(train_blocks, train_feats);
      refresh(val_blocks, val_feats);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(order.size());
    stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    if (val_set.size() > 0) {
      stats.val_loss = head.loss(val_feats, val_set.labels);
      stats.val_accuracy = static_cast<double>(count_correct(head.probabilities(val_feats), val_set.labels)) /
                           static_cast<double>(val_set.size());
    } else {
      stats.val_loss = head.loss(train_feats, train_set.labels);
      stats.val_accuracy = stats.train_accuracy;
    }
    check_finite(stats.val_loss, epoch, 0);
    result.curve.push_back(stats);

    if (stats.val_loss < best_loss) {
      best_loss = stats.val_loss;
      best = model;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
  }
  best.mark_trained();
  result.model = std::move(best);
  return result;
}

std::string format_curve(const std::vector<EpochStats>& curve) {
  std::ostringstream out;
  out << "# epoch train_loss train_accuracy val_loss val_accuracy\n";
  out.setf(std::ios::fixed);
  out.precision(6);
  for (const auto& e : curve) {
    out << e.epoch << ' ' << e.train_loss << ' ' << e.train_accuracy << ' ' << e.val_loss << ' '
        << e.val_accuracy << '\n';
  }
  return out.str();
}

}  // namespace vasc
