#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "vasc/error.hpp"
#include "vasc/interpret.hpp"

using namespace vasc;

namespace {

struct Clusters {
  Eigen::MatrixXd x;
  std::vector<std::string> ids;
  std::vector<std::string> labels;
};

Clusters two_clusters(int per, int dim, double gap, std::uint64_t seed) {
  Rng rng(seed);
  Clusters c;
  c.x.resize(2 * per, dim);
  for (int i = 0; i < 2 * per; ++i) {
    for (int d = 0; d < dim; ++d) c.x(i, d) = rng.normal() + (i < per && d == 0 ? gap : 0.0);
    c.ids.push_back("p" + std::to_string(i));
    c.labels.push_back(i < per ? "a" : "b");
  }
  return c;
}

// Mean silhouette over points, Euclidean in the embedding.
double silhouette(const std::vector<EmbeddingPoint>& pts) {
  double total = 0;
  for (const auto& p : pts) {
    double same = 0, other = 0;
    int ns = 0, no = 0;
    for (const auto& q : pts) {
      if (&p == &q) continue;
      const double d = std::hypot(p.x - q.x, p.y - q.y);
      if (q.class_id == p.class_id) same += d, ++ns;
      else other += d, ++no;
    }
    const double a = same / ns, b = other / no;
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(pts.size());
}

std::vector<double> pairwise(const std::vector<EmbeddingPoint>& pts) {
  std::vector<double> d;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) d.push_back(std::hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y));
  return d;
}

}  // namespace

TEST_CASE("defaults") {
  const EmbedConfig cfg;
  CHECK(cfg.perplexity == 5.0);
  CHECK(cfg.iterations == 1000);
}

TEST_CASE("separated clusters stay separated") {
  const auto c = two_clusters(50, 10, 8.0, 3);
  EmbedConfig cfg;
  cfg.iterations = 500;
  const auto r = tsne_embed(c.x, c.ids, c.labels, cfg);
  REQUIRE(r.points.size() == 100);
  CHECK(silhouette(r.points) > 0.5);
  CHECK(r.kl_trace.size() == 500);
  CHECK(r.final_kl == r.kl_trace.back());
  CHECK(r.config.learning_rate == 50.0);
  // Non-increasing over the tail, within a small tolerance.
  for (std::size_t i = r.kl_trace.size() - 100; i < r.kl_trace.size(); ++i) {
    CHECK(r.kl_trace[i] <= r.kl_trace[i - 1] + 1e-3);
  }
}

TEST_CASE("embedding is reproducible and invariant to input rotation") {
  const auto c = two_clusters(30, 4, 5.0, 4);
  EmbedConfig cfg;
  cfg.iterations = 300;
  const auto a = tsne_embed(c.x, c.ids, c.labels, cfg);
  const auto b = tsne_embed(c.x, c.ids, c.labels, cfg);
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    CHECK(a.points[i].x == b.points[i].x);
    CHECK(a.points[i].y == b.points[i].y);
  }
  // An orthogonal map preserves every input distance, so affinities and the
  // early trajectory match to rounding. Later iterations amplify rounding
  // differences, hence the short run.
  const double t = 0.7;
  Eigen::MatrixXd rot = Eigen::MatrixXd::Identity(4, 4);
  rot(0, 0) = std::cos(t);
  rot(0, 1) = -std::sin(t);
  rot(1, 0) = std::sin(t);
  rot(1, 1) = std::cos(t);
  const Eigen::MatrixXd rotated = c.x * rot.transpose();
  cfg.iterations = 20;
  const auto base = tsne_embed(c.x, c.ids, c.labels, cfg);
  const auto r = tsne_embed(rotated, c.ids, c.labels, cfg);
  const auto da = pairwise(base.points), dr = pairwise(r.points);
  double worst = 0;
  for (std::size_t i = 0; i < da.size(); ++i) worst = std::max(worst, std::abs(da[i] - dr[i]));
  CHECK(worst < 1e-6);
}

TEST_CASE("perplexity must fit the sample") {
  const auto c = two_clusters(5, 3, 1.0, 1);
  EmbedConfig cfg;
  cfg.perplexity = 5.0;  // 3 * 5 >= 10 points
  CHECK_THROWS_AS(tsne_embed(c.x, c.ids, c.labels, cfg), Error);
  cfg.perplexity = 0.5;
  CHECK_THROWS_AS(tsne_embed(c.x, c.ids, c.labels, cfg), Error);
}

TEST_CASE("large inputs are subsampled deterministically") {
  const auto c = two_clusters(60, 3, 6.0, 9);
  EmbedConfig cfg;
  cfg.iterations = 50;
  cfg.max_points = 40;
  const auto r = tsne_embed(c.x, c.ids, c.labels, cfg);
  REQUIRE(r.points.size() == 40);
  for (std::size_t i = 1; i < r.source_rows.size(); ++i) CHECK(r.source_rows[i] > r.source_rows[i - 1]);
  for (std::size_t i = 0; i < r.points.size(); ++i) CHECK(r.points[i].image_id == c.ids[r.source_rows[i]]);
}

TEST_CASE("embedding files round trip") {
  const auto c = two_clusters(10, 3, 6.0, 2);
  EmbedConfig cfg;
  cfg.perplexity = 3;
  cfg.iterations = 30;
  const auto r = tsne_embed(c.x, c.ids, c.labels, cfg);
  const auto dir = test_support::scratch_dir("embed");
  write_embedding(dir / "e.tsv", r);
  const auto back = read_embedding(dir / "e.tsv");
  REQUIRE(back.size() == r.points.size());
  CHECK(back[3].image_id == r.points[3].image_id);
  CHECK(back[3].x == doctest::Approx(r.points[3].x).epsilon(1e-12));
  std::filesystem::remove_all(dir);
}
