#include "vasc/model.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "vasc/error.hpp"
#include "vasc/parallel.hpp"

namespace vasc {

using json = nlohmann::json;

// ---------------------------------------------------------------- Backbone

Backbone Backbone::from_spec(const BackboneSpec& spec) {
  if (spec.name != "compact-cnn") {
    throw Error(ErrorKind::Configuration,
                "backbone provider '" + spec.name +
                    "' is not available in this build; use compact-cnn");
  }
  // Three unpadded stride-2 convolutions after the 4x pool need at least 60 pixels.
  if (spec.input_size < 60) {
    throw Error(ErrorKind::Configuration, "compact-cnn needs an input of at least 60x60");
  }
  Rng rng(spec.seed);
  std::vector<std::unique_ptr<Layer>> layers;
  layers.push_back(std::make_unique<AvgPool2d>(4, 4));
  const int widths[] = {3, 16, 32, 64};
  for (int i = 0; i < 3; ++i) {
    auto conv = std::make_unique<Conv2d>(widths[i], widths[i + 1], 3, 2, 0);
    conv->initialize(rng);
    layers.push_back(std::move(conv));
    layers.push_back(std::make_unique<Relu>());
  }
  layers.push_back(std::make_unique<GlobalAvgMaxPool>());
  return Backbone(spec, std::move(layers));
}

Backbone::Backbone(BackboneSpec spec, std::vector<std::unique_ptr<Layer>> layers)
    : spec_(std::move(spec)), layers_(std::move(layers)) {
  MapShape shape{3, spec_.input_size, spec_.input_size};
  for (const auto& layer : layers_) shape = layer->output_shape(shape);
  const int dim = shape.channels * shape.height * shape.width;
  if (dim != spec_.feature_dim) {
    throw Error(ErrorKind::Configuration,
                "backbone produces " + std::to_string(dim) + " features but spec says " +
                    std::to_string(spec_.feature_dim));
  }
}

Backbone::Backbone(const Backbone& other) : spec_(other.spec_) {
  layers_.reserve(other.layers_.size());
  for (const auto& layer : other.layers_) layers_.push_back(layer->clone());
}

Backbone& Backbone::operator=(const Backbone& other) {
  if (this != &other) {
    Backbone copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Backbone::check_input(const Image& image) const {
  if (image.channels != 3) {
    throw Error(ErrorKind::Shape, "model input must have 3 channels");
  }
  if (image.width != spec_.input_size || image.height != spec_.input_size) {
    throw Error(ErrorKind::Shape, "model input must be " + std::to_string(spec_.input_size) +
                                      "x" + std::to_string(spec_.input_size) + ", got " +
                                      std::to_string(image.width) + "x" +
                                      std::to_string(image.height));
  }
}

std::vector<double> Backbone::features(const Image& image) const {
  check_input(image);
  return features_from(0, to_feature_map(image));
}

std::vector<double> Backbone::features_from(std::size_t first_layer,
                                            const FeatureMap& act) const {
  FeatureMap current = act;
  for (std::size_t i = first_layer; i < layers_.size(); ++i) {
    current = layers_[i]->forward(current);
  }
  return std::move(current.data);
}

Backbone::Trace Backbone::forward_trace(const FeatureMap& input) const {
  Trace trace;
  trace.activations.reserve(layers_.size() + 1);
  trace.activations.push_back(input);
  for (const auto& layer : layers_) {
    trace.activations.push_back(layer->forward(trace.activations.back()));
  }
  return trace;
}

FeatureMap Backbone::input_gradient(const Trace& trace,
                                    std::span<const double> feature_grad) const {
  const FeatureMap& last = trace.activations.back();
  FeatureMap grad(last.channels, last.height, last.width);
  std::copy(feature_grad.begin(), feature_grad.end(), grad.data.begin());
  for (std::size_t i = layers_.size(); i-- > 0;) {
    grad = layers_[i]->backward(trace.activations[i], trace.activations[i + 1], grad, {});
  }
  return grad;
}

std::size_t Backbone::top_block_start() const {
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (layers_[i]->op() == "conv2d") return i;
  }
  throw Error(ErrorKind::Configuration, "backbone has no convolution to unfreeze");
}

std::span<double> Backbone::top_block_params() {
  return layers_[top_block_start()]->params();
}

std::span<const double> Backbone::top_block_params() const {
  return std::as_const(*layers_[top_block_start()]).params();
}

std::vector<double> Backbone::top_block_gradient(const FeatureMap& block_input,
                                                 std::span<const double> feature_grad) const {
  const std::size_t start = top_block_start();
  std::vector<FeatureMap> acts{block_input};
  for (std::size_t i = start; i < layers_.size(); ++i) {
    acts.push_back(layers_[i]->forward(acts.back()));
  }
  const FeatureMap& last = acts.back();
  FeatureMap grad(last.channels, last.height, last.width);
  std::copy(feature_grad.begin(), feature_grad.end(), grad.data.begin());
  std::vector<double> param_grad(layers_[start]->params().size(), 0.0);
  for (std::size_t i = layers_.size(); i-- > start;) {
    const std::size_t a = i - start;
    std::span<double> pg = i == start ? std::span<double>(param_grad) : std::span<double>();
    grad = layers_[i]->backward(acts[a], acts[a + 1], grad, pg);
  }
  return param_grad;
}

std::vector<double> Backbone::flat_params() const {
  std::vector<double> out;
  for (const auto& layer : layers_) {
    const auto p = std::as_const(*layer).params();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

void Backbone::set_flat_params(std::span<const double> values) {
  std::size_t offset = 0;
  for (auto& layer : layers_) {
    auto p = layer->params();
    if (offset + p.size() > values.size()) {
      throw Error(ErrorKind::Load, "backbone parameter count mismatch");
    }
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), p.size(), p.begin());
    offset += p.size();
  }
  if (offset != values.size()) {
    throw Error(ErrorKind::Load, "backbone parameter count mismatch");
  }
}

// ---------------------------------------------------------------- Head

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Head::Head(int feature_dim, const HeadConfig& cfg) : cfg_(cfg) {
  if (cfg.hidden_nodes <= 0 || cfg.num_classes <= 0) {
    throw Error(ErrorKind::Configuration, "head sizes must be positive");
  }
  if (!(cfg.dropout_rate >= 0.0 && cfg.dropout_rate < 1.0)) {
    throw Error(ErrorKind::Configuration, "dropout_rate must be in [0, 1)");
  }
  if (cfg.activation != "relu") {
    throw Error(ErrorKind::Configuration, "head activation must be relu");
  }
  w1 = Eigen::MatrixXd::Zero(feature_dim, cfg.hidden_nodes);
  b1 = Eigen::RowVectorXd::Zero(cfg.hidden_nodes);
  w2 = Eigen::MatrixXd::Zero(cfg.hidden_nodes, cfg.num_classes);
  b2 = Eigen::RowVectorXd::Zero(cfg.num_classes);
}

void Head::initialize(Rng& rng) {
  auto glorot = [&rng](Eigen::MatrixXd& w) {
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = rng.uniform(-limit, limit);
    }
  };
  glorot(w1);
  glorot(w2);
  b1.setZero();
  b2.setZero();
}

Eigen::MatrixXd Head::hidden(const Eigen::MatrixXd& features) const {
  Eigen::MatrixXd pre = features * w1;
  pre.rowwise() += b1;
  return pre.cwiseMax(0.0);
}

Eigen::MatrixXd Head::logits(const Eigen::MatrixXd& features) const {
  Eigen::MatrixXd z = hidden(features) * w2;
  z.rowwise() += b2;
  return z;
}

Eigen::MatrixXd Head::probabilities(const Eigen::MatrixXd& features) const {
  return softmax_rows(logits(features));
}

Eigen::MatrixXd Head::sample_dropout_mask(Eigen::Index rows, Rng& rng) const {
  Eigen::MatrixXd mask(rows, cfg_.hidden_nodes);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < mask.cols(); ++c) {
      mask(r, c) = rng.uniform() < cfg_.dropout_rate ? 0.0 : 1.0;
    }
  }
  return mask;
}

double Head::loss(const Eigen::MatrixXd& features, std::span<const std::size_t> labels,
                  const Eigen::MatrixXd* dropout_mask) const {
  Gradient unused;
  Eigen::MatrixXd h = hidden(features);
  if (dropout_mask) h = h.cwiseProduct(*dropout_mask) / (1.0 - cfg_.dropout_rate);
  Eigen::MatrixXd z = h * w2;
  z.rowwise() += b2;
  const Eigen::MatrixXd p = softmax_rows(z);
  double total = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    total -= std::log(std::max(p(r, static_cast<Eigen::Index>(labels[r])), 1e-300));
  }
  return total / static_cast<double>(p.rows());
}

double Head::loss_and_gradient(const Eigen::MatrixXd& features,
                               std::span<const std::size_t> labels,
                               const Eigen::MatrixXd* dropout_mask, Gradient& grad) const {
  const auto n = features.rows();
  Eigen::MatrixXd pre = features * w1;
  pre.rowwise() += b1;
  const Eigen::MatrixXd h = pre.cwiseMax(0.0);
  const double keep_scale = dropout_mask ? 1.0 / (1.0 - cfg_.dropout_rate) : 1.0;
  const Eigen::MatrixXd d = dropout_mask ? Eigen::MatrixXd(h.cwiseProduct(*dropout_mask) * keep_scale) : h;
  Eigen::MatrixXd z = d * w2;
  z.rowwise() += b2;
  const Eigen::MatrixXd p = softmax_rows(z);

  double total = 0.0;
  Eigen::MatrixXd dz = p;
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto y = static_cast<Eigen::Index>(labels[r]);
    total -= std::log(std::max(p(r, y), 1e-300));
    dz(r, y) -= 1.0;
  }
  dz /= static_cast<double>(n);

  grad.w2 = d.transpose() * dz;
  grad.b2 = dz.colwise().sum();
  Eigen::MatrixXd dh = dz * w2.transpose();
  if (dropout_mask) dh = dh.cwiseProduct(*dropout_mask) * keep_scale;
  const Eigen::MatrixXd dpre = dh.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
  grad.w1 = features.transpose() * dpre;
  grad.b1 = dpre.colwise().sum();
  grad.input = dpre * w1.transpose();
  return total / static_cast<double>(n);
}

Eigen::RowVectorXd Head::probability_gradient(const Eigen::RowVectorXd& features,
                                              std::size_t target) const {
  Eigen::RowVectorXd pre = features * w1 + b1;
  const Eigen::RowVectorXd h = pre.cwiseMax(0.0);
  const Eigen::RowVectorXd z = h * w2 + b2;
  const Eigen::MatrixXd p = softmax_rows(z);
  const auto t = static_cast<Eigen::Index>(target);
  // d p_t / d z_j = p_t (delta_tj - p_j)
  Eigen::RowVectorXd dz = -p(0, t) * p.row(0);
  dz(t) += p(0, t);
  Eigen::RowVectorXd dh = dz * w2.transpose();
  for (Eigen::Index j = 0; j < dh.size(); ++j) {
    if (pre(j) <= 0.0) dh(j) = 0.0;
  }
  return dh * w1.transpose();
}

// ---------------------------------------------------------------- Classifier

std::size_t PredictionRecord::predicted_index() const {
  return static_cast<std::size_t>(
      std::max_element(probabilities.begin(), probabilities.end()) - probabilities.begin());
}

Classifier::Classifier(Backbone backbone, Head head, std::vector<std::string> class_ids)
    : backbone_(std::move(backbone)), head_(std::move(head)), class_ids_(std::move(class_ids)) {
  if (head_.feature_dim() != backbone_.feature_dim()) {
    throw Error(ErrorKind::Configuration, "head input does not match backbone feature_dim");
  }
  if (static_cast<int>(class_ids_.size()) != head_.config().num_classes) {
    throw Error(ErrorKind::Configuration, "class list does not match head.num_classes");
  }
}

std::vector<double> Classifier::predict(const Image& image) const {
  const auto f = backbone_.features(image);
  const Eigen::Map<const Eigen::RowVectorXd> row(f.data(), static_cast<Eigen::Index>(f.size()));
  const Eigen::MatrixXd p = head_.probabilities(Eigen::MatrixXd(row));
  return {p.data(), p.data() + p.size()};
}

Eigen::MatrixXd Classifier::features(std::span<const Image> images, int threads) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), backbone_.feature_dim());
  for (const auto& image : images) backbone_.check_input(image);
  std::vector<std::vector<double>> rows(images.size());
  parallel_for(images.size(), threads, [&](std::size_t i) { rows[i] = backbone_.features(images[i]); });
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int j = 0; j < backbone_.feature_dim(); ++j) out(static_cast<Eigen::Index>(i), j) = rows[i][j];
  }
  return out;
}

Eigen::MatrixXd Classifier::predict_batch(std::span<const Image> images) const {
  return head_.probabilities(features(images));
}

std::vector<double> Classifier::penultimate(const Image& image) const {
  const auto f = backbone_.features(image);
  const Eigen::Map<const Eigen::RowVectorXd> row(f.data(), static_cast<Eigen::Index>(f.size()));
  const Eigen::MatrixXd h = head_.hidden(Eigen::MatrixXd(row));
  return {h.data(), h.data() + h.size()};
}

double Classifier::target_probability(const FeatureMap& input, std::size_t target,
                                      FeatureMap* grad) const {
  if (target >= num_classes()) throw Error(ErrorKind::Range, "target class out of range");
  const auto trace = backbone_.forward_trace(input);
  const auto& f = trace.activations.back().data;
  const Eigen::Map<const Eigen::RowVectorXd> row(f.data(), static_cast<Eigen::Index>(f.size()));
  const Eigen::MatrixXd p = head_.probabilities(Eigen::MatrixXd(row));
  if (grad) {
    const Eigen::RowVectorXd g = head_.probability_gradient(row, target);
    *grad = backbone_.input_gradient(trace, std::span<const double>(g.data(), static_cast<std::size_t>(g.size())));
  }
  return p(0, static_cast<Eigen::Index>(target));
}

namespace {

void append(std::vector<double>& out, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  }
}

std::size_t take(std::span<const double> in, std::size_t offset, Eigen::MatrixXd& m) {
  if (offset + static_cast<std::size_t>(m.size()) > in.size()) {
    throw Error(ErrorKind::Load, "checkpoint weights truncated");
  }
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = in[offset++];
  }
  return offset;
}

}  // namespace

void Classifier::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  const auto& bs = backbone_.spec();
  const auto& hc = head_.config();
  json meta = {
      {"format", "vasc-checkpoint"},
      {"version", 1},
      {"backbone", {{"name", bs.name}, {"feature_dim", bs.feature_dim},
                    {"input_size", bs.input_size}, {"seed", bs.seed}}},
      {"head", {{"hidden_nodes", hc.hidden_nodes}, {"activation", hc.activation},
                {"dropout_rate", hc.dropout_rate}, {"num_classes", hc.num_classes}}},
      {"class_ids", class_ids_},
      {"trained", trained_},
  };
  std::vector<double> weights = backbone_.flat_params();
  meta["backbone_param_count"] = weights.size();
  append(weights, head_.w1);
  append(weights, head_.b1);
  append(weights, head_.w2);
  append(weights, head_.b2);
  meta["param_count"] = weights.size();

  std::ofstream(dir / "model.json") << meta.dump(2) << "\n";
  std::ofstream bin(dir / "weights.bin", std::ios::binary);
  bin.write(reinterpret_cast<const char*>(weights.data()),
            static_cast<std::streamsize>(weights.size() * sizeof(double)));
  if (!bin) throw Error(ErrorKind::Io, "cannot write checkpoint to " + dir.string());
}

Classifier Classifier::load(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "model.json");
  if (!meta_in) throw Error(ErrorKind::Load, "no checkpoint at " + dir.string());
  json meta;
  try {
    meta = json::parse(meta_in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Load, std::string("checkpoint metadata: ") + e.what());
  }
  if (meta.value("format", "") != "vasc-checkpoint") {
    throw Error(ErrorKind::Load, "not a vasc checkpoint");
  }
  BackboneSpec bs;
  bs.name = meta["backbone"]["name"];
  bs.feature_dim = meta["backbone"]["feature_dim"];
  bs.input_size = meta["backbone"]["input_size"];
  bs.seed = meta["backbone"]["seed"];
  HeadConfig hc;
  hc.hidden_nodes = meta["head"]["hidden_nodes"];
  hc.activation = meta["head"]["activation"];
  hc.dropout_rate = meta["head"]["dropout_rate"];
  hc.num_classes = meta["head"]["num_classes"];

  const std::size_t count = meta["param_count"];
  std::vector<double> weights(count);
  std::ifstream bin(dir / "weights.bin", std::ios::binary);
  bin.read(reinterpret_cast<char*>(weights.data()),
           static_cast<std::streamsize>(count * sizeof(double)));
  if (static_cast<std::size_t>(bin.gcount()) != count * sizeof(double)) {
    throw Error(ErrorKind::Load, "checkpoint weights truncated");
  }
  Backbone backbone = Backbone::from_spec(bs);
  const std::size_t nb = meta["backbone_param_count"];
  backbone.set_flat_params(std::span<const double>(weights).first(nb));
  Head head(bs.feature_dim, hc);
  std::size_t offset = nb;
  Eigen::MatrixXd b1(1, hc.hidden_nodes), b2(1, hc.num_classes);
  offset = take(weights, offset, head.w1);
  offset = take(weights, offset, b1);
  offset = take(weights, offset, head.w2);
  offset = take(weights, offset, b2);
  head.b1 = b1.row(0);
  head.b2 = b2.row(0);
  Classifier model(std::move(backbone), std::move(head),
                   meta["class_ids"].get<std::vector<std::string>>());
  model.mark_trained(meta.value("trained", false));
  return model;
}

Classifier build_classifier(const BackboneSpec& backbone, const HeadConfig& head,
                            const Taxonomy& taxonomy, std::uint64_t seed) {
  if (static_cast<int>(taxonomy.size()) != head.num_classes) {
    throw Error(ErrorKind::Configuration,
                "taxonomy has " + std::to_string(taxonomy.size()) + " classes but head has " +
                    std::to_string(head.num_classes));
  }
  Backbone bb = Backbone::from_spec(backbone);
  Head h(bb.feature_dim(), head);
  Rng rng(seed);
  h.initialize(rng);
  return Classifier(std::move(bb), std::move(h), taxonomy.class_ids());
}

std::vector<PredictionRecord> predict_proba(const Classifier& model,
                                            std::span<const Image> images,
                                            std::span<const std::string> image_ids,
                                            std::span<const std::string> true_class_ids,
                                            int threads) {
  if (image_ids.size() != images.size() ||
      (!true_class_ids.empty() && true_class_ids.size() != images.size())) {
    throw Error(ErrorKind::Shape, "image, id and label lists differ in length");
  }
  const Eigen::MatrixXd probs = model.head().probabilities(model.features(images, threads));
  std::vector<PredictionRecord> out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out[i].image_id = image_ids[i];
    out[i].true_class_id = true_class_ids.empty() ? std::string() : true_class_ids[i];
    out[i].probabilities.resize(model.num_classes());
    for (std::size_t k = 0; k < model.num_classes(); ++k) {
      out[i].probabilities[k] = probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
    }
  }
  return out;
}

}  // namespace vasc
