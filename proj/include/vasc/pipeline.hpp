#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "vasc/augment.hpp"
#include "vasc/dataset.hpp"
#include "vasc/model.hpp"
#include "vasc/train.hpp"

namespace vasc {

/// Decodes manifest images relative to a data root, memoizing decoded pixels.
class ImageStore {
 public:
  explicit ImageStore(std::filesystem::path root) : root_(std::move(root)) {}

  /// Thread-safe. Throws Error{Load} if the file does not decode.
  std::shared_ptr<const Image> get(const ImageRecord& record) const;
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
  mutable std::mutex mutex_;
  mutable std::map<std::string, std::shared_ptr<const Image>> cache_;
};

/// Augmented training examples for a record list: every class expanded to
/// policy.target_per_class. Class seeds derive from (policy.seed, stream, class).
ExampleSet augmented_examples(const std::vector<ImageRecord>& records,
                              const std::vector<std::string>& class_ids,
                              const AugmentationPolicy& policy, std::uint64_t stream,
                              const ImageStore& store);

/// Resize-only examples (validation and test data).
ExampleSet plain_examples(const std::vector<ImageRecord>& records,
                          const std::vector<std::string>& class_ids, const ImageStore& store);

struct ExperimentConfig {
  BackboneSpec backbone;
  HeadConfig head;
  TrainConfig train;
  AugmentationPolicy augmentation;
  bool augment_validation = false;
  std::uint64_t init_seed = 7;
};

struct CrossValResult {
  std::vector<PredictionRecord> pooled;
  std::vector<std::vector<PredictionRecord>> per_fold;
  std::vector<std::vector<EpochStats>> curves;
};

/// Trains one model per fold and collects validation predictions.
CrossValResult run_crossval(const Manifest& cv_manifest, const SplitPlan& plan,
                            const Taxonomy& taxonomy, const ExperimentConfig& cfg,
                            const ImageStore& store);

/// Trains on every non-test record (no validation split; the checkpoint is
/// selected on training loss).
TrainResult train_final(const Manifest& cv_manifest, const Taxonomy& taxonomy,
                        const ExperimentConfig& cfg, const ImageStore& store);

std::vector<PredictionRecord> evaluate(const Classifier& model,
                                       const std::vector<ImageRecord>& records,
                                       const ImageStore& store, int threads = 0);

}  // namespace vasc
