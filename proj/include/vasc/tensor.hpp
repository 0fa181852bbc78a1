#pragma once

#include <cstddef>
#include <vector>

#include "vasc/image.hpp"

namespace vasc {

/// Channel-major (CHW) activation volume.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t size() const { return data.size(); }

  double& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  const double& at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  bool same_shape(const FeatureMap& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

FeatureMap to_feature_map(const Image& image);
/// Inverse of to_feature_map (values narrowed to float).
Image to_image(const FeatureMap& map);

}  // namespace vasc
