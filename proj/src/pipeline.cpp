#include "vasc/pipeline.hpp"

#include <algorithm>

#include "vasc/error.hpp"
#include "vasc/parallel.hpp"
#include "vasc/random.hpp"

namespace vasc {

std::shared_ptr<const Image> ImageStore::get(const ImageRecord& record) const {
  {
    std::lock_guard lock(mutex_);
    if (auto it = cache_.find(record.image_id); it != cache_.end()) return it->second;
  }
  auto image = std::make_shared<const Image>(read_pnm(root_ / record.file_path));
  std::lock_guard lock(mutex_);
  return cache_.emplace(record.image_id, std::move(image)).first->second;
}

namespace {

std::size_t label_of(const std::vector<std::string>& class_ids, const std::string& cls) {
  const auto it = std::find(class_ids.begin(), class_ids.end(), cls);
  if (it == class_ids.end()) throw Error(ErrorKind::Validation, "class '" + cls + "' not in model");
  return static_cast<std::size_t>(it - class_ids.begin());
}

}  // namespace

ExampleSet augmented_examples(const std::vector<ImageRecord>& records,
                              const std::vector<std::string>& class_ids,
                              const AugmentationPolicy& policy, std::uint64_t stream,
                              const ImageStore& store) {
  struct Item {
    ImageRecord parent;
    TransformParams params;
  };
  auto items = std::make_shared<std::vector<Item>>();
  ExampleSet set;
  for (std::size_t c = 0; c < class_ids.size(); ++c) {
    std::vector<ImageRecord> members;
    for (const auto& r : records) {
      if (r.class_id == class_ids[c]) members.push_back(r);
    }
    if (members.empty()) continue;
    const std::uint64_t class_seed = derive_seed(derive_seed(policy.seed, stream), c);
    for (const auto& entry : plan_class_augmentation(members.size(), policy, class_seed)) {
      const auto& parent = members[entry.parent];
      items->push_back({parent, entry.params});
      set.image_ids.push_back(parent.image_id + "#aug" + std::to_string(entry.sample_index));
      set.group_ids.push_back(parent.lesion_group_id);
      set.labels.push_back(c);
    }
  }
  set.render = [items, policy, &store](std::size_t i) {
    const auto& item = (*items)[i];
    return render_augmented(*store.get(item.parent), item.params, policy);
  };
  return set;
}

ExampleSet plain_examples(const std::vector<ImageRecord>& records,
                          const std::vector<std::string>& class_ids, const ImageStore& store) {
  auto parents = std::make_shared<std::vector<ImageRecord>>(records);
  ExampleSet set;
  for (const auto& r : records) {
    set.image_ids.push_back(r.image_id);
    set.group_ids.push_back(r.lesion_group_id);
    set.labels.push_back(label_of(class_ids, r.class_id));
  }
  set.render = [parents, &store](std::size_t i) {
    return preprocess_resize(*store.get((*parents)[i]));
  };
  return set;
}

CrossValResult run_crossval(const Manifest& cv_manifest, const SplitPlan& plan,
                            const Taxonomy& taxonomy, const ExperimentConfig& cfg,
                            const ImageStore& store) {
  const auto class_ids = taxonomy.class_ids();
  HeadConfig head = cfg.head;
  head.num_classes = static_cast<int>(taxonomy.size());
  const Classifier initial = build_classifier(cfg.backbone, head, taxonomy, cfg.init_seed);
  CrossValResult result;
  for (int fold = 0; fold < plan.fold_count; ++fold) {
    const auto records = materialize_fold(cv_manifest, plan, fold);
    const auto stream = static_cast<std::uint64_t>(fold);
    const ExampleSet train_set =
        augmented_examples(records.train, class_ids, cfg.augmentation, stream, store);
    const ExampleSet val_set =
        cfg.augment_validation
            ? augmented_examples(records.validation, class_ids, cfg.augmentation, 1000 + stream, store)
            : plain_examples(records.validation, class_ids, store);
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(cfg.train.seed, stream);
    auto trained = train(initial, train_set, val_set, tc);
    auto preds = evaluate(trained.model, records.validation, store, tc.threads);
    result.pooled.insert(result.pooled.end(), preds.begin(), preds.end());
    result.per_fold.push_back(std::move(preds));
    result.curves.push_back(std::move(trained.curve));
  }
  return result;
}

TrainResult train_final(const Manifest& cv_manifest, const Taxonomy& taxonomy,
                        const ExperimentConfig& cfg, const ImageStore& store) {
  const auto class_ids = taxonomy.class_ids();
  HeadConfig head = cfg.head;
  head.num_classes = static_cast<int>(taxonomy.size());
  const Classifier initial = build_classifier(cfg.backbone, head, taxonomy, cfg.init_seed);
  const ExampleSet train_set =
      augmented_examples(cv_manifest.records, class_ids, cfg.augmentation, 999, store);
  return train(initial, train_set, ExampleSet{}, cfg.train);
}

std::vector<PredictionRecord> evaluate(const Classifier& model,
                                       const std::vector<ImageRecord>& records,
                                       const ImageStore& store, int threads) {
  std::vector<PredictionRecord> out(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    out[i].image_id = records[i].image_id;
    out[i].true_class_id = records[i].class_id;
    out[i].probabilities = model.predict(preprocess_resize(*store.get(records[i])));
  });
  return out;
}

}  // namespace vasc
