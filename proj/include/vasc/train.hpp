#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vasc/image.hpp"
#include "vasc/model.hpp"

namespace vasc {

enum class BackbonePolicy { Frozen, TopBlockUnfrozen };

std::string to_string(BackbonePolicy policy);
BackbonePolicy backbone_policy_from_string(const std::string& text);

struct TrainConfig {
  std::string optimizer = "rmsprop";
  double learning_rate = 1e-5;
  double rho = 0.9;
  double epsilon = 1e-7;
  std::string loss = "categorical_crossentropy";
  int epochs = 30;
  int batch_size = 32;
  int patience = 5;  // early stop after this many epochs without val-loss gain; 0 disables
  BackbonePolicy backbone_policy = BackbonePolicy::Frozen;
  std::uint64_t seed = 0;
  int threads = 0;

  void validate() const;
};

/// Training or validation examples rendered on demand. `render(i)` must be
/// thread-safe and return a model-sized RGB image.
struct ExampleSet {
  std::vector<std::string> image_ids;
  std::vector<std::string> group_ids;
  std::vector<std::size_t> labels;
  std::function<Image(std::size_t)> render;

  std::size_t size() const { return labels.size(); }
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  Classifier model;
  std::vector<EpochStats> curve;
  int best_epoch = 0;
};

/// Fits the head (and optionally the top backbone block) with RMSProp on
/// categorical cross-entropy, returning the best-validation-loss checkpoint.
TrainResult train(const Classifier& model, const ExampleSet& train_set,
                  const ExampleSet& val_set, const TrainConfig& cfg);

/// Plain-text training curve: one "epoch train_loss train_acc val_loss val_acc" row per epoch.
std::string format_curve(const std::vector<EpochStats>& curve);

}  // namespace vasc
