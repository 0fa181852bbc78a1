#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vasc/dataset.hpp"
#include "vasc/image.hpp"

namespace vasc {

struct AugmentationPolicy {
  int target_per_class = 1000;
  double rotation_min_degrees = 0.0;
  double rotation_max_degrees = 360.0;  // exclusive
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  double shear_intensity_max = 0.2;
  double zoom_min = 0.8;
  double zoom_max = 1.2;
  int output_size = 299;
  std::uint64_t seed = 0;

  /// Error{Parameter} on inconsistent ranges.
  void validate() const;
};

/// One sampled label-preserving transform. `shear` is a shear angle in
/// radians; `zoom` magnifies about the image center (zoom > 1 enlarges).
struct TransformParams {
  double angle_degrees = 0.0;  // counter-clockwise as displayed
  bool hflip = false;
  bool vflip = false;
  double shear = 0.0;
  double zoom = 1.0;

  bool operator==(const TransformParams&) const = default;
};

/// Geometric transform about the image center with nearest-edge fill.
/// Output has the input's size. Error{Parameter} if shear or zoom fall
/// outside the policy.
Image apply_transform(const Image& image, const TransformParams& params,
                      const AugmentationPolicy& policy = {});

TransformParams sample_transform(const AugmentationPolicy& policy, std::uint64_t class_seed,
                                 std::size_t sample_index);

struct AugmentationEntry {
  std::size_t sample_index = 0;
  std::size_t parent = 0;  // index into the class's record list
  TransformParams params;
};

/// Parent selection round-robins over the records; sample i's transform
/// depends only on (class_seed, i).
std::vector<AugmentationEntry> plan_class_augmentation(std::size_t record_count,
                                                       const AugmentationPolicy& policy,
                                                       std::uint64_t class_seed);

struct AugmentedSample {
  Image derived_image;  // output_size x output_size x 3, values in [0,1]
  std::string parent_image_id;
  std::string class_id;
  std::string lesion_group_id;
  TransformParams transform_log;
};

using ImageLoader = std::function<Image(const ImageRecord&)>;

/// Expands one class to exactly policy.target_per_class samples.
/// Error{EmptyClass} for no records, Error{Validation} for mixed classes.
std::vector<AugmentedSample> augment_class_to_target(std::span<const ImageRecord> records,
                                                     const AugmentationPolicy& policy,
                                                     std::uint64_t class_seed,
                                                     const ImageLoader& loader, int threads = 1);

/// Resizes a decoded RGB image to the model input (direct bilinear, values
/// clamped to [0,1], the compact backbone's input range). Error{Channel} for
/// non-RGB input.
Image preprocess_resize(const Image& image, int size = 299);

/// Transform-then-resize for one augmentation entry.
Image render_augmented(const Image& parent, const TransformParams& params,
                       const AugmentationPolicy& policy);

}  // namespace vasc
