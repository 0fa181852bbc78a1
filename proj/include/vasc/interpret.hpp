#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vasc/image.hpp"
#include "vasc/model.hpp"
#include "vasc/tensor.hpp"

namespace vasc {

// ---------------------------------------------------------------- features

/// One 256-d hidden-layer row per image. A warning is appended when the
/// classifier has not been trained.
Eigen::MatrixXd extract_penultimate_features(const Classifier& model, std::span<const Image> images,
                                             int threads = 1,
                                             std::vector<std::string>* warnings = nullptr);

// ---------------------------------------------------------------- saliency

enum class BaselineKind { Black, Gray, Custom };

std::string to_string(BaselineKind kind);
BaselineKind baseline_kind_from_string(const std::string& text);

struct SaliencyConfig {
  BaselineKind baseline = BaselineKind::Black;
  Image custom_baseline;  // used when baseline == Custom
  int ig_steps = 50;
  int smoothgrad_samples = 25;
  /// Noise standard deviation as a fraction of the nominal [0, 1] pixel range.
  double smoothgrad_noise_sigma = 0.15;
  /// Empty means the class the model predicts for the clean image.
  std::optional<std::size_t> target;
  std::uint64_t seed = 11;

  /// Error{Configuration} for m < 2, n < 1 or a negative sigma.
  void validate() const;
};

struct SaliencyMap {
  int height = 0;
  int width = 0;
  std::vector<double> grid;  // row-major H x W, channels summed
  std::size_t target = 0;
  double score_input = 0.0;     // F(x), averaged over noisy copies for SmoothGrad
  double score_baseline = 0.0;  // F(x0)
  double residual = 0.0;        // |sum(grid) - (F(x) - F(x0))|
  double relative_residual = 0.0;
  int steps = 0;
  int samples = 1;
  double sigma = 0.0;
  BaselineKind baseline = BaselineKind::Black;

  double at(int y, int x) const { return grid[static_cast<std::size_t>(y) * width + x]; }
  double total() const;
};

/// Differentiable scalar F(x). Writes dF/dx into `grad` when it is non-null.
using ScoreFunction = std::function<double(const FeatureMap& x, FeatureMap* grad)>;

/// Midpoint Riemann approximation of the path integral from `baseline` to
/// `input` with `steps` evaluations.
SaliencyMap integrated_gradients(const ScoreFunction& score, const FeatureMap& input,
                                 const FeatureMap& baseline, int steps);

FeatureMap make_baseline(const SaliencyConfig& cfg, int channels, int height, int width);

/// The image must already be preprocessed to the model input size.
SaliencyMap integrated_gradients(const Classifier& model, const Image& image,
                                 const SaliencyConfig& cfg);

/// Mean of integrated gradients over cfg.smoothgrad_samples noisy copies.
/// Copy s draws its noise from derive_seed(cfg.seed, s).
SaliencyMap smoothgrad_smooth(const ScoreFunction& score, const FeatureMap& input,
                              const FeatureMap& baseline, const SaliencyConfig& cfg);
SaliencyMap smoothgrad_smooth(const Classifier& model, const Image& image,
                              const SaliencyConfig& cfg);

/// Grayscale overlay: dimmed image luminance under the normalized attribution.
/// `absolute` renders |a|; otherwise 0.5 is zero on a signed scale.
Image render_saliency(const SaliencyMap& map, const Image& image, bool absolute = true);

/// Plain-text grid: a header line, then one row per image row.
void write_saliency_grid(const std::filesystem::path& path, const SaliencyMap& map);
SaliencyMap read_saliency_grid(const std::filesystem::path& path);

/// Sum of |attribution| inside a box divided by the sum outside it, each
/// normalized by its pixel count.
double attribution_density_ratio(const SaliencyMap& map, int x0, int y0, int x1, int y1);

// ---------------------------------------------------------------- t-SNE

struct EmbedConfig {
  double perplexity = 5.0;
  int iterations = 1000;
  double theta = 0.5;
  std::uint64_t seed = 5;
  /// 0 selects max(n / early_exaggeration / 4, 50); a fixed 200 oscillates
  /// on small inputs.
  double learning_rate = 0.0;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  /// Larger inputs are seed-sampled down to this many points.
  std::size_t max_points = 2000;

  void validate() const;
};

struct EmbeddingPoint {
  std::string image_id;
  double x = 0.0;
  double y = 0.0;
  std::string class_id;
};

struct EmbeddingResult {
  std::vector<EmbeddingPoint> points;
  std::vector<std::size_t> source_rows;  // input row of each point
  std::vector<double> kl_trace;          // one entry per iteration
  double final_kl = 0.0;
  EmbedConfig config;
};

/// Barnes-Hut t-SNE to two dimensions. Error{Configuration} unless
/// 1 <= perplexity and 3 * perplexity < n.
EmbeddingResult tsne_embed(const Eigen::MatrixXd& features, std::span<const std::string> image_ids,
                           std::span<const std::string> class_ids, const EmbedConfig& cfg = {});

void write_embedding(const std::filesystem::path& path, const EmbeddingResult& result);
std::vector<EmbeddingPoint> read_embedding(const std::filesystem::path& path);

}  // namespace vasc
