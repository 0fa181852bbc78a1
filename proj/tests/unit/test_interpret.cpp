#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "vasc/augment.hpp"
#include "vasc/error.hpp"
#include "vasc/interpret.hpp"

using namespace vasc;

namespace {

FeatureMap random_map(int c, int h, int w, std::uint64_t seed) {
  FeatureMap m(c, h, w);
  Rng rng(seed);
  for (auto& v : m.data) v = rng.uniform();
  return m;
}

}  // namespace

TEST_CASE("linear score attributions are exact") {
  const FeatureMap x = random_map(3, 6, 5, 1);
  const FeatureMap w = random_map(3, 6, 5, 2);
  const FeatureMap base(3, 6, 5, 0.25);
  const ScoreFunction linear = [&](const FeatureMap& in, FeatureMap* grad) {
    double s = 0;
    for (std::size_t i = 0; i < in.data.size(); ++i) s += w.data[i] * in.data[i];
    if (grad) *grad = w;
    return s;
  };
  const SaliencyMap map = integrated_gradients(linear, x, base, 7);
  for (int y = 0; y < 6; ++y)
    for (int xx = 0; xx < 5; ++xx) {
      double expected = 0;
      for (int c = 0; c < 3; ++c) expected += w.at(c, y, xx) * (x.at(c, y, xx) - base.at(c, y, xx));
      CHECK(std::abs(map.at(y, xx) - expected) < 1e-10);
    }
  CHECK(map.residual < 1e-10);
}

TEST_CASE("cubic score converges with more steps") {
  const FeatureMap x = random_map(1, 4, 4, 3);
  const FeatureMap base(1, 4, 4, 0.0);
  // Sum of cubes: the midpoint rule leaves an O(1/m^2) residual.
  const ScoreFunction cubic = [](const FeatureMap& in, FeatureMap* grad) {
    double s = 0;
    for (double v : in.data) s += v * v * v;
    if (grad) {
      *grad = in;
      for (auto& v : grad->data) v = 3 * v * v;
    }
    return s;
  };
  const auto coarse = integrated_gradients(cubic, x, base, 4);
  const auto fine = integrated_gradients(cubic, x, base, 200);
  CHECK(fine.residual < coarse.residual);
  CHECK(fine.relative_residual < 1e-4);
  // Separable score: each pixel's attribution is exactly its own term.
  for (int y = 0; y < 4; ++y)
    for (int xx = 0; xx < 4; ++xx) CHECK(fine.at(y, xx) == doctest::Approx(std::pow(x.at(0, y, xx), 3)).epsilon(1e-4));
}

TEST_CASE("pixels outside the score's support get zero attribution") {
  const FeatureMap x = random_map(3, 10, 10, 4);
  const FeatureMap base(3, 10, 10, 0.0);
  const ScoreFunction masked = [](const FeatureMap& in, FeatureMap* grad) {
    double s = 0;
    if (grad) *grad = FeatureMap(in.channels, in.height, in.width, 0.0);
    for (int c = 0; c < 3; ++c)
      for (int y = 2; y < 5; ++y)
        for (int xx = 3; xx < 7; ++xx) {
          s += std::sin(in.at(c, y, xx));
          if (grad) grad->at(c, y, xx) = std::cos(in.at(c, y, xx));
        }
    return s;
  };
  SaliencyConfig cfg;
  cfg.smoothgrad_samples = 4;
  cfg.ig_steps = 20;
  const auto map = smoothgrad_smooth(masked, x, base, cfg);
  double inside = 0;
  for (int y = 0; y < 10; ++y)
    for (int xx = 0; xx < 10; ++xx) {
      const bool in_box = y >= 2 && y < 5 && xx >= 3 && xx < 7;
      if (in_box) inside += std::abs(map.at(y, xx));
      else CHECK(map.at(y, xx) == 0.0);
    }
  CHECK(inside > 0);
  CHECK(std::isinf(attribution_density_ratio(map, 3, 2, 7, 5)));
}

TEST_CASE("model attribution completeness improves with steps") {
  const Classifier model = test_support::small_classifier();
  const Image img = test_support::random_image(64, 64, 3, 12);
  SaliencyConfig cfg;
  cfg.ig_steps = 10;
  const auto coarse = integrated_gradients(model, img, cfg);
  cfg.ig_steps = 300;
  const auto fine = integrated_gradients(model, img, cfg);
  CHECK(fine.relative_residual <= 1e-2);
  CHECK(fine.relative_residual < coarse.relative_residual);
  CHECK(fine.target == coarse.target);
  CHECK(fine.score_input == doctest::Approx(model.predict(img)[fine.target]).epsilon(1e-12));
}

TEST_CASE("smoothgrad is reproducible from its seed") {
  const Classifier model = test_support::small_classifier();
  const Image img = test_support::random_image(64, 64, 3, 13);
  SaliencyConfig cfg;
  cfg.ig_steps = 8;
  cfg.smoothgrad_samples = 3;
  const auto a = smoothgrad_smooth(model, img, cfg);
  const auto b = smoothgrad_smooth(model, img, cfg);
  CHECK(a.grid == b.grid);
  cfg.seed += 1;
  const auto c = smoothgrad_smooth(model, img, cfg);
  CHECK(a.grid != c.grid);
}

TEST_CASE("baselines") {
  SaliencyConfig cfg;
  CHECK(make_baseline(cfg, 3, 2, 2).data == std::vector<double>(12, 0.0));
  cfg.baseline = BaselineKind::Gray;
  CHECK(make_baseline(cfg, 3, 2, 2).data == std::vector<double>(12, 0.5));
  cfg.baseline = BaselineKind::Custom;
  CHECK_THROWS_AS(make_baseline(cfg, 3, 2, 2), Error);
  cfg.custom_baseline = Image(2, 2, 3, 0.25f);
  CHECK(make_baseline(cfg, 3, 2, 2).data == std::vector<double>(12, 0.25));
  CHECK(baseline_kind_from_string("gray") == BaselineKind::Gray);
  CHECK_THROWS_AS(baseline_kind_from_string("purple"), Error);
}

TEST_CASE("config validation lists problems") {
  SaliencyConfig cfg;
  cfg.ig_steps = 1;
  cfg.smoothgrad_samples = 0;
  cfg.smoothgrad_noise_sigma = -1;
  try {
    cfg.validate();
    FAIL("expected a configuration error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Configuration);
    const std::string msg = e.what();
    CHECK(msg.find("steps") != std::string::npos);
    CHECK(msg.find("sigma") != std::string::npos);
  }
}

TEST_CASE("grid files round trip and overlays render") {
  const Classifier model = test_support::small_classifier();
  const Image img = test_support::random_image(64, 64, 3, 14);
  SaliencyConfig cfg;
  cfg.ig_steps = 4;
  const auto map = integrated_gradients(model, img, cfg);
  const auto dir = test_support::scratch_dir("grid");
  write_saliency_grid(dir / "g.txt", map);
  const auto back = read_saliency_grid(dir / "g.txt");
  REQUIRE(back.grid.size() == map.grid.size());
  for (std::size_t i = 0; i < map.grid.size(); ++i) CHECK(back.grid[i] == doctest::Approx(map.grid[i]).epsilon(1e-12));
  CHECK(back.target == map.target);
  CHECK(back.steps == 4);
  std::filesystem::remove_all(dir);

  const Image overlay = render_saliency(map, img);
  CHECK(overlay.width == 64);
  CHECK(overlay.channels == 1);
  for (float v : overlay.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("penultimate features") {
  const Classifier model = test_support::small_classifier();
  std::vector<Image> imgs{test_support::random_image(64, 64, 3, 1), test_support::random_image(64, 64, 3, 2)};
  std::vector<std::string> warnings;
  const auto f = extract_penultimate_features(model, imgs, 1, &warnings);
  CHECK(f.rows() == 2);
  CHECK(f.cols() == 256);
  CHECK(warnings.size() == 1);
  CHECK((f.array() >= 0).all());
}
