#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vasc/layers.hpp"
#include "vasc/taxonomy.hpp"

namespace vasc {

inline constexpr int kModelInputSize = 299;

struct BackboneSpec {
  /// "compact-cnn" is the bundled from-scratch network. Pretrained providers
  /// (e.g. "inception-v3") need weights that are not shipped.
  std::string name = "compact-cnn";
  int feature_dim = 128;
  int input_size = kModelInputSize;
  std::uint64_t seed = 1;
};

struct HeadConfig {
  int hidden_nodes = 256;
  std::string activation = "relu";
  double dropout_rate = 0.6;
  int num_classes = 6;
};

/// Frozen-or-fine-tunable convolutional feature extractor.
class Backbone {
 public:
  struct Trace {
    std::vector<FeatureMap> activations;  // [0] is the input
  };

  static Backbone from_spec(const BackboneSpec& spec);

  Backbone(BackboneSpec spec, std::vector<std::unique_ptr<Layer>> layers);
  Backbone(const Backbone& other);
  Backbone& operator=(const Backbone& other);
  Backbone(Backbone&&) noexcept = default;
  Backbone& operator=(Backbone&&) noexcept = default;

  const BackboneSpec& spec() const { return spec_; }
  int feature_dim() const { return spec_.feature_dim; }
  const std::vector<std::unique_ptr<Layer>>& layers() const { return layers_; }

  /// Image must be input_size x input_size x 3 (Error{Shape} otherwise).
  std::vector<double> features(const Image& image) const;
  Trace forward_trace(const FeatureMap& input) const;
  /// Features from an intermediate activation: runs layers [first_layer, end).
  std::vector<double> features_from(std::size_t first_layer, const FeatureMap& act) const;

  /// Back-propagates d(objective)/d(features) to the input.
  FeatureMap input_gradient(const Trace& trace, std::span<const double> feature_grad) const;

  /// Index of the first layer of the trainable top block (the last conv).
  std::size_t top_block_start() const;
  /// Parameters of the top block, and their gradient given a trace.
  std::span<double> top_block_params();
  std::span<const double> top_block_params() const;
  std::vector<double> top_block_gradient(const FeatureMap& block_input,
                                         std::span<const double> feature_grad) const;

  /// All parameters concatenated in layer order.
  std::vector<double> flat_params() const;
  void set_flat_params(std::span<const double> values);

  void check_input(const Image& image) const;

 private:
  BackboneSpec spec_;
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Dense(256, relu) -> Dropout -> Dense(K) -> softmax, batched over rows.
class Head {
 public:
  struct Gradient {
    Eigen::MatrixXd w1, w2;
    Eigen::RowVectorXd b1, b2;
    Eigen::MatrixXd input;  // d loss / d features, one row per sample
  };

  Head() = default;
  Head(int feature_dim, const HeadConfig& cfg);

  /// Glorot-uniform weights, zero biases.
  void initialize(Rng& rng);

  const HeadConfig& config() const { return cfg_; }
  int feature_dim() const { return static_cast<int>(w1.rows()); }

  Eigen::MatrixXd hidden(const Eigen::MatrixXd& features) const;
  Eigen::MatrixXd logits(const Eigen::MatrixXd& features) const;
  Eigen::MatrixXd probabilities(const Eigen::MatrixXd& features) const;

  /// Mean categorical cross-entropy. `dropout_mask` (rows x hidden, entries
  /// 0 or 1) applies inverted dropout; nullptr means evaluation mode.
  double loss(const Eigen::MatrixXd& features, std::span<const std::size_t> labels,
              const Eigen::MatrixXd* dropout_mask = nullptr) const;
  double loss_and_gradient(const Eigen::MatrixXd& features,
                           std::span<const std::size_t> labels,
                           const Eigen::MatrixXd* dropout_mask, Gradient& grad) const;

  /// d p_target / d features for a single feature row (evaluation mode).
  Eigen::RowVectorXd probability_gradient(const Eigen::RowVectorXd& features,
                                          std::size_t target) const;

  Eigen::MatrixXd sample_dropout_mask(Eigen::Index rows, Rng& rng) const;

  Eigen::MatrixXd w1, w2;
  Eigen::RowVectorXd b1, b2;

 private:
  HeadConfig cfg_;
};

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits);

struct PredictionRecord {
  std::string image_id;
  std::vector<double> probabilities;
  std::string true_class_id;

  std::size_t predicted_index() const;
};

/// Backbone + head bound to an ordered class list.
class Classifier {
 public:
  Classifier(Backbone backbone, Head head, std::vector<std::string> class_ids);

  const Backbone& backbone() const { return backbone_; }
  Backbone& backbone() { return backbone_; }
  const Head& head() const { return head_; }
  Head& head() { return head_; }
  const std::vector<std::string>& class_ids() const { return class_ids_; }
  std::size_t num_classes() const { return class_ids_.size(); }

  bool trained() const { return trained_; }
  void mark_trained(bool value = true) { trained_ = value; }

  std::vector<double> predict(const Image& image) const;
  Eigen::MatrixXd predict_batch(std::span<const Image> images) const;
  Eigen::MatrixXd features(std::span<const Image> images, int threads = 1) const;

  /// 256-d post-activation outputs of the hidden layer.
  std::vector<double> penultimate(const Image& image) const;

  /// p_target(x) and, if `grad` is set, d p_target / d x (same shape as input).
  double target_probability(const FeatureMap& input, std::size_t target,
                            FeatureMap* grad) const;

  void save(const std::filesystem::path& dir) const;
  static Classifier load(const std::filesystem::path& dir);

 private:
  Backbone backbone_;
  Head head_;
  std::vector<std::string> class_ids_;
  bool trained_ = false;
};

/// Untrained classifier; Error{Configuration} if the taxonomy size and
/// head.num_classes disagree.
Classifier build_classifier(const BackboneSpec& backbone, const HeadConfig& head,
                            const Taxonomy& taxonomy, std::uint64_t seed = 7);

std::vector<PredictionRecord> predict_proba(const Classifier& model,
                                            std::span<const Image> images,
                                            std::span<const std::string> image_ids,
                                            std::span<const std::string> true_class_ids,
                                            int threads = 1);

}  // namespace vasc
