#include "vasc/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "vasc/error.hpp"
#include "vasc/random.hpp"

namespace vasc {

Eigen::MatrixXd extract_penultimate_features(const Classifier& model, std::span<const Image> images,
                                             int threads, std::vector<std::string>* warnings) {
  if (!model.trained() && warnings) {
    warnings->push_back("penultimate features taken from an untrained head");
  }
  if (images.empty()) return Eigen::MatrixXd(0, model.head().config().hidden_nodes);
  return model.head().hidden(model.features(images, threads));
}

std::string to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::Black: return "black";
    case BaselineKind::Gray: return "gray";
    case BaselineKind::Custom: return "custom";
  }
  return "black";
}

BaselineKind baseline_kind_from_string(const std::string& text) {
  if (text == "black") return BaselineKind::Black;
  if (text == "gray" || text == "grey") return BaselineKind::Gray;
  if (text == "custom") return BaselineKind::Custom;
  throw Error(ErrorKind::Configuration, "unknown baseline '" + text + "'");
}

void SaliencyConfig::validate() const {
  std::vector<std::string> problems;
  if (ig_steps < 2) problems.push_back("ig_steps must be >= 2");
  if (smoothgrad_samples < 1) problems.push_back("smoothgrad_samples must be >= 1");
  if (!(smoothgrad_noise_sigma >= 0.0)) problems.push_back("smoothgrad_noise_sigma must be >= 0");
  if (baseline == BaselineKind::Custom && custom_baseline.empty()) {
    problems.push_back("custom baseline selected but no baseline image given");
  }
  if (problems.empty()) return;
  std::string msg;
  for (const auto& p : problems) msg += (msg.empty() ? "" : "; ") + p;
  throw Error(ErrorKind::Configuration, msg);
}

double SaliencyMap::total() const {
  double s = 0.0;
  for (double v : grid) s += v;
  return s;
}

namespace {

void finish_residual(SaliencyMap& map) {
  const double delta = map.score_input - map.score_baseline;
  map.residual = std::abs(map.total() - delta);
  map.relative_residual = std::abs(delta) > 0.0 ? map.residual / std::abs(delta) : map.residual;
}

std::size_t predicted_class(const Classifier& model, const FeatureMap& x) {
  const auto trace = model.backbone().forward_trace(x);
  const auto& f = trace.activations.back().data;
  const Eigen::Map<const Eigen::RowVectorXd> row(f.data(), static_cast<Eigen::Index>(f.size()));
  const Eigen::MatrixXd p = model.head().probabilities(Eigen::MatrixXd(row));
  Eigen::Index best = 0;
  p.row(0).maxCoeff(&best);
  return static_cast<std::size_t>(best);
}

}  // namespace

SaliencyMap integrated_gradients(const ScoreFunction& score, const FeatureMap& input,
                                 const FeatureMap& baseline, int steps) {
  if (steps < 2) throw Error(ErrorKind::Configuration, "ig_steps must be >= 2");
  if (!input.same_shape(baseline)) throw Error(ErrorKind::Shape, "baseline shape differs from input");

  const std::size_t n = input.size();
  std::vector<double> grad_sum(n, 0.0);
  FeatureMap point(input.channels, input.height, input.width);
  FeatureMap grad;
  for (int k = 0; k < steps; ++k) {
    const double alpha = (k + 0.5) / steps;
    for (std::size_t i = 0; i < n; ++i) {
      point.data[i] = baseline.data[i] + alpha * (input.data[i] - baseline.data[i]);
    }
    score(point, &grad);
    if (grad.size() != n) throw Error(ErrorKind::Shape, "score gradient has the wrong size");
    for (std::size_t i = 0; i < n; ++i) grad_sum[i] += grad.data[i];
  }

  SaliencyMap map;
  map.height = input.height;
  map.width = input.width;
  map.steps = steps;
  map.grid.assign(static_cast<std::size_t>(input.height) * input.width, 0.0);
  const std::size_t plane = map.grid.size();
  for (int c = 0; c < input.channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t i = c * plane + p;
      map.grid[p] += (input.data[i] - baseline.data[i]) * (grad_sum[i] / steps);
    }
  }
  map.score_input = score(input, nullptr);
  map.score_baseline = score(baseline, nullptr);
  finish_residual(map);
  return map;
}

FeatureMap make_baseline(const SaliencyConfig& cfg, int channels, int height, int width) {
  switch (cfg.baseline) {
    case BaselineKind::Black: return FeatureMap(channels, height, width, 0.0);
    case BaselineKind::Gray: return FeatureMap(channels, height, width, 0.5);
    case BaselineKind::Custom: {
      FeatureMap b = to_feature_map(cfg.custom_baseline);
      if (b.channels != channels || b.height != height || b.width != width) {
        throw Error(ErrorKind::Shape, "custom baseline does not match the input size");
      }
      return b;
    }
  }
  return FeatureMap(channels, height, width, 0.0);
}

namespace {

struct ModelScore {
  const Classifier* model;
  FeatureMap input;
  FeatureMap baseline;
  std::size_t target;
};

ModelScore bind_model(const Classifier& model, const Image& image, const SaliencyConfig& cfg) {
  cfg.validate();
  model.backbone().check_input(image);
  ModelScore s{&model, to_feature_map(image), {}, 0};
  s.baseline = make_baseline(cfg, s.input.channels, s.input.height, s.input.width);
  s.target = cfg.target ? *cfg.target : predicted_class(model, s.input);
  if (s.target >= model.num_classes()) throw Error(ErrorKind::Range, "target class out of range");
  return s;
}

ScoreFunction score_function(const ModelScore& s) {
  return [model = s.model, target = s.target](const FeatureMap& x, FeatureMap* grad) {
    return model->target_probability(x, target, grad);
  };
}

}  // namespace

SaliencyMap integrated_gradients(const Classifier& model, const Image& image,
                                 const SaliencyConfig& cfg) {
  const auto bound = bind_model(model, image, cfg);
  SaliencyMap map = integrated_gradients(score_function(bound), bound.input, bound.baseline, cfg.ig_steps);
  map.target = bound.target;
  map.baseline = cfg.baseline;
  return map;
}

SaliencyMap smoothgrad_smooth(const ScoreFunction& score, const FeatureMap& input,
                              const FeatureMap& baseline, const SaliencyConfig& cfg) {
  cfg.validate();
  SaliencyMap out;
  FeatureMap noisy = input;
  for (int s = 0; s < cfg.smoothgrad_samples; ++s) {
    if (cfg.smoothgrad_noise_sigma > 0.0) {
      Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(s)));
      for (std::size_t i = 0; i < input.size(); ++i) {
        noisy.data[i] = input.data[i] + cfg.smoothgrad_noise_sigma * rng.normal();
      }
    }
    SaliencyMap one = integrated_gradients(score, noisy, baseline, cfg.ig_steps);
    if (s == 0) {
      out = std::move(one);
    } else {
      for (std::size_t p = 0; p < out.grid.size(); ++p) out.grid[p] += one.grid[p];
      out.score_input += one.score_input;
    }
  }
  const double n = cfg.smoothgrad_samples;
  if (cfg.smoothgrad_samples > 1) {
    for (double& v : out.grid) v /= n;
    out.score_input /= n;
  }
  out.samples = cfg.smoothgrad_samples;
  out.sigma = cfg.smoothgrad_noise_sigma;
  out.baseline = cfg.baseline;
  finish_residual(out);
  return out;
}

SaliencyMap smoothgrad_smooth(const Classifier& model, const Image& image,
                              const SaliencyConfig& cfg) {
  const auto bound = bind_model(model, image, cfg);
  SaliencyMap map = smoothgrad_smooth(score_function(bound), bound.input, bound.baseline, cfg);
  map.target = bound.target;
  return map;
}

Image render_saliency(const SaliencyMap& map, const Image& image, bool absolute) {
  if (image.width != map.width || image.height != map.height) {
    throw Error(ErrorKind::Shape, "overlay image does not match the saliency grid");
  }
  double scale = 0.0;
  for (double v : map.grid) scale = std::max(scale, std::abs(v));
  Image out(map.width, map.height, 1);
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      double lum = 0.0;
      for (int c = 0; c < image.channels; ++c) lum += image.at(x, y, c);
      lum /= image.channels;
      const double a = scale > 0.0 ? map.at(y, x) / scale : 0.0;
      const double heat = absolute ? std::abs(a) : 0.5 + 0.5 * a;
      out.at(x, y, 0) = static_cast<float>(std::clamp(0.25 * lum + 0.75 * heat, 0.0, 1.0));
    }
  }
  return out;
}

void write_saliency_grid(const std::filesystem::path& path, const SaliencyMap& map) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.precision(17);
  out << "# vasc-saliency 1 height=" << map.height << " width=" << map.width
      << " target=" << map.target << " steps=" << map.steps << " samples=" << map.samples
      << " sigma=" << map.sigma << " baseline=" << to_string(map.baseline)
      << " score_input=" << map.score_input << " score_baseline=" << map.score_baseline
      << " residual=" << map.residual << "\n";
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) out << (x ? " " : "") << map.at(y, x);
    out << "\n";
  }
  if (!out) throw Error(ErrorKind::Io, "failed writing " + path.string());
}

SaliencyMap read_saliency_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Load, "cannot read " + path.string());
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string token;
  hs >> token >> token;
  if (token != "vasc-saliency") throw Error(ErrorKind::Load, "not a saliency grid: " + path.string());
  hs >> token;
  SaliencyMap map;
  while (hs >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = token.substr(0, eq), value = token.substr(eq + 1);
    if (key == "height") map.height = std::stoi(value);
    else if (key == "width") map.width = std::stoi(value);
    else if (key == "target") map.target = std::stoul(value);
    else if (key == "steps") map.steps = std::stoi(value);
    else if (key == "samples") map.samples = std::stoi(value);
    else if (key == "sigma") map.sigma = std::stod(value);
    else if (key == "baseline") map.baseline = baseline_kind_from_string(value);
    else if (key == "score_input") map.score_input = std::stod(value);
    else if (key == "score_baseline") map.score_baseline = std::stod(value);
    else if (key == "residual") map.residual = std::stod(value);
  }
  map.grid.resize(static_cast<std::size_t>(map.height) * map.width);
  for (double& v : map.grid) {
    if (!(in >> v)) throw Error(ErrorKind::Load, "saliency grid truncated: " + path.string());
  }
  const double delta = std::abs(map.score_input - map.score_baseline);
  map.relative_residual = delta > 0.0 ? map.residual / delta : map.residual;
  return map;
}

double attribution_density_ratio(const SaliencyMap& map, int x0, int y0, int x1, int y1) {
  x0 = std::clamp(x0, 0, map.width);
  x1 = std::clamp(x1, 0, map.width);
  y0 = std::clamp(y0, 0, map.height);
  y1 = std::clamp(y1, 0, map.height);
  double inside = 0.0, outside = 0.0;
  std::size_t n_in = 0, n_out = 0;
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      const double a = std::abs(map.at(y, x));
      if (x >= x0 && x < x1 && y >= y0 && y < y1) {
        inside += a;
        ++n_in;
      } else {
        outside += a;
        ++n_out;
      }
    }
  }
  if (n_in == 0 || n_out == 0) throw Error(ErrorKind::Range, "box must split the image");
  const double d_out = outside / static_cast<double>(n_out);
  const double d_in = inside / static_cast<double>(n_in);
  return d_out > 0.0 ? d_in / d_out : (d_in > 0.0 ? INFINITY : 1.0);
}

}  // namespace vasc
