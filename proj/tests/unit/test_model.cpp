#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "vasc/error.hpp"
#include "vasc/layers.hpp"
#include "vasc/model.hpp"

using namespace vasc;

namespace {

// Relative error in the usual gradient-check sense.
double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

struct Batch {
  Eigen::MatrixXd features;
  std::vector<std::size_t> labels;
};

Batch random_batch(int rows, int dim, int classes, std::uint64_t seed) {
  Rng rng(seed);
  Batch b;
  b.features.resize(rows, dim);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < dim; ++c) b.features(r, c) = rng.normal();
  for (int r = 0; r < rows; ++r) b.labels.push_back(static_cast<std::size_t>(rng.index(classes)));
  return b;
}

}  // namespace

TEST_CASE("head gradient matches central differences") {
  HeadConfig cfg;
  cfg.hidden_nodes = 16;
  cfg.num_classes = 6;
  Head head(12, cfg);
  Rng rng(4);
  head.initialize(rng);
  const Batch b = random_batch(10, 12, 6, 9);
  const Eigen::MatrixXd mask = head.sample_dropout_mask(10, rng);

  Head::Gradient g;
  head.loss_and_gradient(b.features, b.labels, &mask, g);
  const double h = 1e-5;
  double worst = 0.0;
  auto probe = [&](double& param, double analytic) {
    const double keep = param;
    param = keep + h;
    const double up = head.loss(b.features, b.labels, &mask);
    param = keep - h;
    const double down = head.loss(b.features, b.labels, &mask);
    param = keep;
    worst = std::max(worst, rel_err((up - down) / (2 * h), analytic));
  };
  for (int i = 0; i < head.w1.rows(); i += 3)
    for (int j = 0; j < head.w1.cols(); j += 2) probe(head.w1(i, j), g.w1(i, j));
  for (int i = 0; i < head.w2.rows(); ++i)
    for (int j = 0; j < head.w2.cols(); ++j) probe(head.w2(i, j), g.w2(i, j));
  for (int j = 0; j < head.b1.size(); ++j) probe(head.b1(j), g.b1(j));
  for (int j = 0; j < head.b2.size(); ++j) probe(head.b2(j), g.b2(j));
  CHECK(worst <= 1e-3);

  // Input gradient.
  Eigen::MatrixXd x = b.features;
  double worst_in = 0.0;
  for (int r = 0; r < 10; r += 3)
    for (int c = 0; c < 12; c += 5) {
      const double keep = x(r, c);
      x(r, c) = keep + h;
      const double up = head.loss(x, b.labels, &mask);
      x(r, c) = keep - h;
      const double down = head.loss(x, b.labels, &mask);
      x(r, c) = keep;
      worst_in = std::max(worst_in, rel_err((up - down) / (2 * h), g.input(r, c)));
    }
  CHECK(worst_in <= 1e-3);
}

TEST_CASE("probability gradient matches central differences") {
  HeadConfig cfg;
  cfg.hidden_nodes = 8;
  cfg.num_classes = 4;
  Head head(5, cfg);
  Rng rng(2);
  head.initialize(rng);
  Eigen::RowVectorXd f(5);
  for (int i = 0; i < 5; ++i) f(i) = rng.normal();
  const auto g = head.probability_gradient(f, 2);
  for (int i = 0; i < 5; ++i) {
    Eigen::RowVectorXd up = f, down = f;
    up(i) += 1e-6;
    down(i) -= 1e-6;
    const double fd = (head.probabilities(up)(0, 2) - head.probabilities(down)(0, 2)) / 2e-6;
    CHECK(rel_err(fd, g(i)) < 1e-5);
  }
}

TEST_CASE("softmax rows are distributions") {
  Eigen::MatrixXd logits(2, 3);
  logits << 1000, 1001, 999, -3, 0, 3;
  const auto p = softmax_rows(logits);
  CHECK(p.row(0).sum() == doctest::Approx(1.0));
  CHECK(p.row(1).sum() == doctest::Approx(1.0));
  CHECK(p(0, 1) > p(0, 0));
}

TEST_CASE("backbone input gradient matches central differences") {
  const Classifier model = test_support::small_classifier();
  const Image img = test_support::random_image(64, 64, 3, 8);
  const FeatureMap x = to_feature_map(img);
  const auto trace = model.backbone().forward_trace(x);
  // Objective: a fixed random projection of the features.
  Rng rng(1);
  std::vector<double> w(static_cast<std::size_t>(model.backbone().feature_dim()));
  for (auto& v : w) v = rng.normal();
  auto objective = [&](const FeatureMap& in) {
    const auto f = model.backbone().features_from(0, in);
    double s = 0;
    for (std::size_t i = 0; i < f.size(); ++i) s += w[i] * f[i];
    return s;
  };
  const FeatureMap g = model.backbone().input_gradient(trace, w);
  int checked = 0;
  double worst = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int y = 1; y < 64; y += 13)
      for (int xx = 2; xx < 64; xx += 17) {
        FeatureMap up = x, down = x;
        up.at(c, y, xx) += 1e-5;
        down.at(c, y, xx) -= 1e-5;
        const double fd = (objective(up) - objective(down)) / 2e-5;
        if (std::abs(fd) < 1e-9 && std::abs(g.at(c, y, xx)) < 1e-9) continue;
        worst = std::max(worst, rel_err(fd, g.at(c, y, xx)));
        ++checked;
      }
  CHECK(checked > 10);
  CHECK(worst < 1e-3);
}

TEST_CASE("classifier predictions and checkpoints") {
  const Classifier model = test_support::small_classifier();
  const Image img = test_support::random_image(64, 64, 3, 1);
  const auto p = model.predict(img);
  REQUIRE(p.size() == 6);
  double sum = 0;
  for (double v : p) sum += v;
  CHECK(sum == doctest::Approx(1.0));
  CHECK_FALSE(model.trained());

  const auto dir = test_support::scratch_dir("ckpt");
  model.save(dir / "m");
  const Classifier back = Classifier::load(dir / "m");
  CHECK(back.class_ids() == model.class_ids());
  const auto q = back.predict(img);
  for (std::size_t i = 0; i < 6; ++i) CHECK(q[i] == doctest::Approx(p[i]).epsilon(1e-12));
  std::filesystem::remove_all(dir);

  CHECK_THROWS_AS(model.predict(test_support::random_image(63, 64, 3, 1)), Error);
}

TEST_CASE("build_classifier checks the class count") {
  BackboneSpec spec;
  spec.input_size = 64;
  HeadConfig head;
  head.num_classes = 12;
  CHECK_THROWS_AS(build_classifier(spec, head, default_taxonomy().subset_six()), Error);
}
