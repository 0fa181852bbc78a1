#include "vasc/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "vasc/error.hpp"

namespace vasc {

FeatureMap to_feature_map(const Image& image) {
  FeatureMap map(image.channels, image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < image.channels; ++c) {
        map.at(c, y, x) = image.at(x, y, c);
      }
    }
  }
  return map;
}

Image to_image(const FeatureMap& map) {
  Image image(map.width, map.height, map.channels);
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      for (int c = 0; c < map.channels; ++c) {
        image.at(x, y, c) = static_cast<float>(map.at(c, y, x));
      }
    }
  }
  return image;
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride),
      padding_(padding),
      params_(static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel +
                  out_channels,
              0.0) {
  if (in_ <= 0 || out_ <= 0 || kernel_ <= 0 || stride_ <= 0 || padding_ < 0) {
    throw Error(ErrorKind::Configuration, "invalid conv2d geometry");
  }
}

void Conv2d::initialize(Rng& rng) {
  const double stddev = std::sqrt(2.0 / (in_ * kernel_ * kernel_));
  const std::size_t n = weight_count();
  for (std::size_t i = 0; i < n; ++i) params_[i] = stddev * rng.normal();
  std::fill(params_.begin() + static_cast<std::ptrdiff_t>(n), params_.end(), 0.0);
}

MapShape Conv2d::output_shape(MapShape in) const {
  if (in.channels != in_) {
    throw Error(ErrorKind::Shape, "conv2d expects " + std::to_string(in_) +
                                      " channels, got " + std::to_string(in.channels));
  }
  const int h = (in.height + 2 * padding_ - kernel_) / stride_ + 1;
  const int w = (in.width + 2 * padding_ - kernel_) / stride_ + 1;
  if (h <= 0 || w <= 0) throw Error(ErrorKind::Shape, "conv2d input too small");
  return {out_, h, w};
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unfolds receptive fields into a (in*k*k) x (oh*ow) row-major matrix.
RowMatrix im2col(const FeatureMap& in, int kernel, int stride, int padding, int oh, int ow) {
  RowMatrix cols(static_cast<Eigen::Index>(in.channels) * kernel * kernel,
                 static_cast<Eigen::Index>(oh) * ow);
  for (int ci = 0; ci < in.channels; ++ci) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        double* dst = cols.row((static_cast<Eigen::Index>(ci) * kernel + ky) * kernel + kx).data();
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - padding;
          double* out = dst + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= in.height) {
            std::fill(out, out + ow, 0.0);
            continue;
          }
          const double* src = &in.at(ci, iy, 0);
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - padding;
            out[ox] = (ix < 0 || ix >= in.width) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
  return cols;
}

// Adds folded columns back into an input-shaped gradient.
void col2im(const RowMatrix& cols, int kernel, int stride, int padding, int oh, int ow,
            FeatureMap& grad) {
  for (int ci = 0; ci < grad.channels; ++ci) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const double* src = cols.row((static_cast<Eigen::Index>(ci) * kernel + ky) * kernel + kx).data();
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - padding;
          if (iy < 0 || iy >= grad.height) continue;
          double* dst = &grad.at(ci, iy, 0);
          const double* row = src + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - padding;
            if (ix >= 0 && ix < grad.width) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

FeatureMap Conv2d::forward(const FeatureMap& in) const {
  const MapShape os = output_shape({in.channels, in.height, in.width});
  const RowMatrix cols = im2col(in, kernel_, stride_, padding_, os.height, os.width);
  const Eigen::Map<const RowMatrix> weights(params_.data(), out_, static_cast<Eigen::Index>(in_) * kernel_ * kernel_);
  const Eigen::Map<const Eigen::VectorXd> bias(params_.data() + weight_count(), out_);
  FeatureMap out(os.channels, os.height, os.width);
  Eigen::Map<RowMatrix> result(out.data.data(), out_, static_cast<Eigen::Index>(os.height) * os.width);
  result.noalias() = weights * cols;
  result.colwise() += bias;
  return out;
}

FeatureMap Conv2d::backward(const FeatureMap& in, const FeatureMap& /*out*/,
                            const FeatureMap& grad_out,
                            std::span<double> param_grad) const {
  const int oh = grad_out.height;
  const int ow = grad_out.width;
  const Eigen::Index fan_in = static_cast<Eigen::Index>(in_) * kernel_ * kernel_;
  const Eigen::Map<const RowMatrix> weights(params_.data(), out_, fan_in);
  const Eigen::Map<const RowMatrix> g(grad_out.data.data(), out_, static_cast<Eigen::Index>(oh) * ow);
  const RowMatrix grad_cols = weights.transpose() * g;
  FeatureMap grad_in(in.channels, in.height, in.width);
  col2im(grad_cols, kernel_, stride_, padding_, oh, ow, grad_in);
  if (!param_grad.empty()) {
    const RowMatrix cols = im2col(in, kernel_, stride_, padding_, oh, ow);
    Eigen::Map<RowMatrix> wgrad(param_grad.data(), out_, fan_in);
    wgrad.noalias() += g * cols.transpose();
    Eigen::Map<Eigen::VectorXd> bgrad(param_grad.data() + weight_count(), out_);
    bgrad += g.rowwise().sum();
  }
  return grad_in;
}

// ---------------------------------------------------------------- Relu

FeatureMap Relu::forward(const FeatureMap& in) const {
  FeatureMap out = in;
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

FeatureMap Relu::backward(const FeatureMap& in, const FeatureMap& /*out*/,
                          const FeatureMap& grad_out, std::span<double>) const {
  FeatureMap grad = grad_out;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (in.data[i] <= 0.0) grad.data[i] = 0.0;
  }
  return grad;
}

// ---------------------------------------------------------------- AvgPool2d

MapShape AvgPool2d::output_shape(MapShape in) const {
  const int h = (in.height - window_) / stride_ + 1;
  const int w = (in.width - window_) / stride_ + 1;
  if (h <= 0 || w <= 0) throw Error(ErrorKind::Shape, "avgpool2d input too small");
  return {in.channels, h, w};
}

FeatureMap AvgPool2d::forward(const FeatureMap& in) const {
  const MapShape os = output_shape({in.channels, in.height, in.width});
  FeatureMap out(os.channels, os.height, os.width);
  const double scale = 1.0 / (window_ * window_);
  for (int c = 0; c < os.channels; ++c) {
    for (int oy = 0; oy < os.height; ++oy) {
      for (int ox = 0; ox < os.width; ++ox) {
        double sum = 0.0;
        for (int ky = 0; ky < window_; ++ky) {
          const double* row = &in.at(c, oy * stride_ + ky, ox * stride_);
          for (int kx = 0; kx < window_; ++kx) sum += row[kx];
        }
        out.at(c, oy, ox) = sum * scale;
      }
    }
  }
  return out;
}

FeatureMap AvgPool2d::backward(const FeatureMap& in, const FeatureMap& /*out*/,
                               const FeatureMap& grad_out, std::span<double>) const {
  FeatureMap grad(in.channels, in.height, in.width);
  const double scale = 1.0 / (window_ * window_);
  for (int c = 0; c < grad_out.channels; ++c) {
    for (int oy = 0; oy < grad_out.height; ++oy) {
      for (int ox = 0; ox < grad_out.width; ++ox) {
        const double g = grad_out.at(c, oy, ox) * scale;
        for (int ky = 0; ky < window_; ++ky) {
          double* row = &grad.at(c, oy * stride_ + ky, ox * stride_);
          for (int kx = 0; kx < window_; ++kx) row[kx] += g;
        }
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------- GlobalAvgMaxPool

FeatureMap GlobalAvgMaxPool::forward(const FeatureMap& in) const {
  FeatureMap out(2 * in.channels, 1, 1);
  const std::size_t plane = static_cast<std::size_t>(in.height) * in.width;
  for (int c = 0; c < in.channels; ++c) {
    const double* p = &in.at(c, 0, 0);
    double sum = 0.0;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < plane; ++i) {
      sum += p[i];
      best = std::max(best, p[i]);
    }
    out.data[c] = sum / static_cast<double>(plane);
    out.data[in.channels + c] = best;
  }
  return out;
}

FeatureMap GlobalAvgMaxPool::backward(const FeatureMap& in, const FeatureMap& out,
                                      const FeatureMap& grad_out, std::span<double>) const {
  FeatureMap grad(in.channels, in.height, in.width);
  const std::size_t plane = static_cast<std::size_t>(in.height) * in.width;
  for (int c = 0; c < in.channels; ++c) {
    const double* p = &in.at(c, 0, 0);
    double* g = &grad.at(c, 0, 0);
    const double avg_grad = grad_out.data[c] / static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) g[i] = avg_grad;
    // The max gradient routes to the first arg-max.
    const double best = out.data[in.channels + c];
    for (std::size_t i = 0; i < plane; ++i) {
      if (p[i] == best) {
        g[i] += grad_out.data[in.channels + c];
        break;
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------- CustomLayer

FeatureMap CustomLayer::backward(const FeatureMap&, const FeatureMap&, const FeatureMap&,
                                 std::span<double>) const {
  throw Error(ErrorKind::Configuration,
              "custom layer '" + name_ + "' has no gradient");
}

}  // namespace vasc
