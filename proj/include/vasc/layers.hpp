#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vasc/random.hpp"
#include "vasc/tensor.hpp"

namespace vasc {

struct MapShape {
  int channels = 0;
  int height = 0;
  int width = 0;
  bool operator==(const MapShape&) const = default;
};

/// Stateless feature-extractor layer. Activations are passed in and out so a
/// single layer instance can serve concurrent forward passes.
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string_view op() const = 0;
  virtual MapShape output_shape(MapShape in) const = 0;
  virtual FeatureMap forward(const FeatureMap& in) const = 0;

  /// Gradient w.r.t. the input. When `param_grad` is non-empty it must have
  /// params().size() entries and receives the accumulated parameter gradient.
  virtual FeatureMap backward(const FeatureMap& in, const FeatureMap& out,
                              const FeatureMap& grad_out,
                              std::span<double> param_grad) const = 0;

  virtual std::span<double> params() { return {}; }
  virtual std::span<const double> params() const { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;
};

class Conv2d final : public Layer {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding);

  /// He-normal weights, zero bias.
  void initialize(Rng& rng);

  std::string_view op() const override { return "conv2d"; }
  MapShape output_shape(MapShape in) const override;
  FeatureMap forward(const FeatureMap& in) const override;
  FeatureMap backward(const FeatureMap& in, const FeatureMap& out,
                      const FeatureMap& grad_out,
                      std::span<double> param_grad) const override;
  std::span<double> params() override { return params_; }
  std::span<const double> params() const override { return params_; }
  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<Conv2d>(*this);
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return kernel_; }
  int stride() const { return stride_; }
  int padding() const { return padding_; }

  /// Weight layout: [out][in][ky][kx], followed by `out` biases.
  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_) * in_ * kernel_ * kernel_;
  }

 private:
  int in_;
  int out_;
  int kernel_;
  int stride_;
  int padding_;
  std::vector<double> params_;
};

class Relu final : public Layer {
 public:
  std::string_view op() const override { return "relu"; }
  MapShape output_shape(MapShape in) const override { return in; }
  FeatureMap forward(const FeatureMap& in) const override;
  FeatureMap backward(const FeatureMap& in, const FeatureMap& out,
                      const FeatureMap& grad_out,
                      std::span<double> param_grad) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(); }
};

/// Non-overlapping-or-strided average pooling, no padding (trailing rows and
/// columns that do not fill a window are dropped).
class AvgPool2d final : public Layer {
 public:
  AvgPool2d(int window, int stride) : window_(window), stride_(stride) {}

  std::string_view op() const override { return "avgpool2d"; }
  MapShape output_shape(MapShape in) const override;
  FeatureMap forward(const FeatureMap& in) const override;
  FeatureMap backward(const FeatureMap& in, const FeatureMap& out,
                      const FeatureMap& grad_out,
                      std::span<double> param_grad) const override;
  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<AvgPool2d>(*this);
  }

  int window() const { return window_; }
  int stride() const { return stride_; }

 private:
  int window_;
  int stride_;
};

/// Concatenates per-channel global mean and global max into a 2C x 1 x 1 map.
class GlobalAvgMaxPool final : public Layer {
 public:
  std::string_view op() const override { return "global_avg_max_pool"; }
  MapShape output_shape(MapShape in) const override { return {2 * in.channels, 1, 1}; }
  FeatureMap forward(const FeatureMap& in) const override;
  FeatureMap backward(const FeatureMap& in, const FeatureMap& out,
                      const FeatureMap& grad_out,
                      std::span<double> param_grad) const override;
  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<GlobalAvgMaxPool>();
  }
};

/// User-supplied elementwise-free transform. Inference only; the portable
/// exporter rejects it.
class CustomLayer final : public Layer {
 public:
  using Fn = std::function<FeatureMap(const FeatureMap&)>;
  CustomLayer(std::string name, Fn fn, std::function<MapShape(MapShape)> shape)
      : name_(std::move(name)), fn_(std::move(fn)), shape_(std::move(shape)) {}

  std::string_view op() const override { return name_; }
  MapShape output_shape(MapShape in) const override { return shape_(in); }
  FeatureMap forward(const FeatureMap& in) const override { return fn_(in); }
  FeatureMap backward(const FeatureMap& in, const FeatureMap& out,
                      const FeatureMap& grad_out,
                      std::span<double> param_grad) const override;
  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<CustomLayer>(*this);
  }

 private:
  std::string name_;
  Fn fn_;
  std::function<MapShape(MapShape)> shape_;
};

}  // namespace vasc
