#include "vasc/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "vasc/error.hpp"
#include "vasc/parallel.hpp"
#include "vasc/random.hpp"

namespace vasc {

void AugmentationPolicy::validate() const {
  auto prob_ok = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (target_per_class <= 0) throw Error(ErrorKind::Parameter, "target_per_class must be positive");
  if (!(rotation_min_degrees <= rotation_max_degrees)) {
    throw Error(ErrorKind::Parameter, "rotation range is inverted");
  }
  if (!prob_ok(hflip_prob) || !prob_ok(vflip_prob)) {
    throw Error(ErrorKind::Parameter, "flip probabilities must be in [0,1]");
  }
  if (shear_intensity_max < 0.0) throw Error(ErrorKind::Parameter, "shear max must be >= 0");
  if (!(zoom_min > 0.0 && zoom_min <= zoom_max)) {
    throw Error(ErrorKind::Parameter, "zoom range must satisfy 0 < lower <= upper");
  }
  if (output_size <= 0) throw Error(ErrorKind::Parameter, "output_size must be positive");
}

Image apply_transform(const Image& image, const TransformParams& params,
                      const AugmentationPolicy& policy) {
  if (std::abs(params.shear) > policy.shear_intensity_max + 1e-12) {
    throw Error(ErrorKind::Parameter, "shear outside policy range");
  }
  if (params.zoom < policy.zoom_min - 1e-12 || params.zoom > policy.zoom_max + 1e-12) {
    throw Error(ErrorKind::Parameter, "zoom outside policy range");
  }
  const double theta = params.angle_degrees * std::numbers::pi / 180.0;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  // Forward map on centered coordinates (y down): zoom * rotate * shear.
  //   rotate = [[c, s], [-s, c]]  (counter-clockwise on screen)
  //   shear  = [[1, -sin(k)], [0, cos(k)]]
  const double sk = std::sin(params.shear);
  const double ck = std::cos(params.shear);
  const double f00 = params.zoom * c;
  const double f01 = params.zoom * (-c * sk + s * ck);
  const double f10 = params.zoom * (-s);
  const double f11 = params.zoom * (s * sk + c * ck);
  const double det = f00 * f11 - f01 * f10;
  const double i00 = f11 / det, i01 = -f01 / det, i10 = -f10 / det, i11 = f00 / det;

  const double cx = (image.width - 1) / 2.0;
  const double cy = (image.height - 1) / 2.0;
  const bool identity = params.angle_degrees == 0.0 && params.shear == 0.0 && params.zoom == 1.0;
  Image out(image.width, image.height, image.channels);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      double qx = x - cx;
      double qy = y - cy;
      if (params.hflip) qx = -qx;
      if (params.vflip) qy = -qy;
      double sx, sy;
      if (identity) {
        sx = qx + cx;
        sy = qy + cy;
      } else {
        sx = i00 * qx + i01 * qy + cx;
        sy = i10 * qx + i11 * qy + cy;
      }
      for (int ch = 0; ch < image.channels; ++ch) out.at(x, y, ch) = image.bilinear(sx, sy, ch);
    }
  }
  return out;
}

TransformParams sample_transform(const AugmentationPolicy& policy, std::uint64_t class_seed,
                                 std::size_t sample_index) {
  Rng rng(derive_seed(class_seed, sample_index));
  TransformParams p;
  p.angle_degrees = rng.uniform(policy.rotation_min_degrees, policy.rotation_max_degrees);
  p.hflip = rng.bernoulli(policy.hflip_prob);
  p.vflip = rng.bernoulli(policy.vflip_prob);
  p.shear = rng.uniform(-policy.shear_intensity_max, policy.shear_intensity_max);
  p.zoom = rng.uniform(policy.zoom_min, policy.zoom_max);
  return p;
}

std::vector<AugmentationEntry> plan_class_augmentation(std::size_t record_count,
                                                       const AugmentationPolicy& policy,
                                                       std::uint64_t class_seed) {
  policy.validate();
  if (record_count == 0) throw Error(ErrorKind::EmptyClass, "cannot augment an empty class");
  std::vector<AugmentationEntry> plan(static_cast<std::size_t>(policy.target_per_class));
  for (std::size_t i = 0; i < plan.size(); ++i) {
    plan[i] = {i, i % record_count, sample_transform(policy, class_seed, i)};
  }
  return plan;
}

Image preprocess_resize(const Image& image, int size) {
  if (image.channels != 3) {
    throw Error(ErrorKind::Channel, "expected an RGB image, got " +
                                        std::to_string(image.channels) + " channel(s)");
  }
  Image out = resize_bilinear(image, size, size);
  for (auto& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

Image render_augmented(const Image& parent, const TransformParams& params,
                       const AugmentationPolicy& policy) {
  return preprocess_resize(apply_transform(parent, params, policy), policy.output_size);
}

std::vector<AugmentedSample> augment_class_to_target(std::span<const ImageRecord> records,
                                                     const AugmentationPolicy& policy,
                                                     std::uint64_t class_seed,
                                                     const ImageLoader& loader, int threads) {
  if (records.empty()) throw Error(ErrorKind::EmptyClass, "cannot augment an empty class");
  for (const auto& r : records) {
    if (r.class_id != records.front().class_id) {
      throw Error(ErrorKind::Validation, "augment_class_to_target needs records of one class");
    }
  }
  const auto plan = plan_class_augmentation(records.size(), policy, class_seed);
  std::vector<Image> parents(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) { parents[i] = loader(records[i]); });
  std::vector<AugmentedSample> out(plan.size());
  parallel_for(plan.size(), threads, [&](std::size_t i) {
    const auto& entry = plan[i];
    const auto& parent = records[entry.parent];
    out[i] = {render_augmented(parents[entry.parent], entry.params, policy), parent.image_id,
              parent.class_id, parent.lesion_group_id, entry.params};
  });
  return out;
}

}  // namespace vasc
