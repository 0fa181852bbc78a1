#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <sstream>

#include "vasc/error.hpp"
#include "vasc/interpret.hpp"
#include "vasc/random.hpp"

namespace vasc {

void EmbedConfig::validate() const {
  std::vector<std::string> problems;
  if (!(perplexity >= 1.0)) problems.push_back("perplexity must be >= 1");
  if (iterations < 1) problems.push_back("iterations must be >= 1");
  if (!(theta >= 0.0)) problems.push_back("theta must be >= 0");
  if (!(learning_rate >= 0.0)) problems.push_back("learning_rate must be >= 0 (0 = auto)");
  if (exaggeration_iterations < 0) problems.push_back("exaggeration_iterations must be >= 0");
  if (max_points < 2) problems.push_back("max_points must be >= 2");
  if (problems.empty()) return;
  std::string msg;
  for (const auto& p : problems) msg += (msg.empty() ? "" : "; ") + p;
  throw Error(ErrorKind::Configuration, msg);
}

namespace {

// ------------------------------------------------------------ vantage-point tree

class VpTree {
 public:
  explicit VpTree(const Eigen::MatrixXd& x) : x_(x), order_(static_cast<std::size_t>(x.rows())) {
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.reserve(order_.size());
    root_ = build(0, order_.size());
  }

  /// k nearest neighbours of row i (excluding i), nearest first.
  void search(std::size_t i, std::size_t k, std::vector<std::size_t>& idx,
              std::vector<double>& dist) const {
    Heap heap;
    double tau = std::numeric_limits<double>::max();
    search(root_, i, k, heap, tau);
    idx.resize(heap.size());
    dist.resize(heap.size());
    for (std::size_t r = heap.size(); r-- > 0;) {
      idx[r] = heap.top().second;
      dist[r] = heap.top().first;
      heap.pop();
    }
  }

 private:
  struct Node {
    std::size_t index;
    double radius = 0.0;
    int left = -1;
    int right = -1;
  };
  using Entry = std::pair<double, std::size_t>;
  using Heap = std::priority_queue<Entry>;

  double distance(std::size_t a, std::size_t b) const {
    return (x_.row(static_cast<Eigen::Index>(a)) - x_.row(static_cast<Eigen::Index>(b))).norm();
  }

  int build(std::size_t lo, std::size_t hi) {
    if (lo >= hi) return -1;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({order_[lo]});
    if (hi - lo > 1) {
      const std::size_t vp = order_[lo];
      const std::size_t mid = (lo + 1 + hi) / 2;
      std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(lo + 1),
                       order_.begin() + static_cast<std::ptrdiff_t>(mid),
                       order_.begin() + static_cast<std::ptrdiff_t>(hi),
                       [&](std::size_t a, std::size_t b) {
                         const double da = distance(vp, a), db = distance(vp, b);
                         return da < db || (da == db && a < b);
                       });
      nodes_[static_cast<std::size_t>(id)].radius = distance(vp, order_[mid]);
      const int left = build(lo + 1, mid);
      const int right = build(mid, hi);
      nodes_[static_cast<std::size_t>(id)].left = left;
      nodes_[static_cast<std::size_t>(id)].right = right;
    }
    return id;
  }

  void search(int node, std::size_t target, std::size_t k, Heap& heap, double& tau) const {
    if (node < 0) return;
    const Node& n = nodes_[static_cast<std::size_t>(node)];
    const double d = distance(n.index, target);
    if (n.index != target && d < tau) {
      if (heap.size() == k) heap.pop();
      heap.push({d, n.index});
      if (heap.size() == k) tau = heap.top().first;
    }
    if (n.left < 0 && n.right < 0) return;
    if (d < n.radius) {
      if (d - tau <= n.radius) search(n.left, target, k, heap, tau);
      if (d + tau >= n.radius) search(n.right, target, k, heap, tau);
    } else {
      if (d + tau >= n.radius) search(n.right, target, k, heap, tau);
      if (d - tau <= n.radius) search(n.left, target, k, heap, tau);
    }
  }

  const Eigen::MatrixXd& x_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

// ------------------------------------------------------------ quadtree

class QuadTree {
 public:
  QuadTree(const std::vector<double>& y, std::size_t n) : y_(y) {
    double min_x = y[0], max_x = y[0], min_y = y[1], max_y = y[1];
    for (std::size_t i = 1; i < n; ++i) {
      min_x = std::min(min_x, y[2 * i]);
      max_x = std::max(max_x, y[2 * i]);
      min_y = std::min(min_y, y[2 * i + 1]);
      max_y = std::max(max_y, y[2 * i + 1]);
    }
    const double half = std::max(max_x - min_x, max_y - min_y) / 2.0 + 1e-5;
    nodes_.reserve(4 * n);
    nodes_.push_back(make_node((min_x + max_x) / 2.0, (min_y + max_y) / 2.0, half));
    for (std::size_t i = 0; i < n; ++i) insert(0, i, 0);
  }

  /// Repulsive force numerator on point i and its share of the normalization sum.
  void repulsion(std::size_t i, double theta, double& fx, double& fy, double& sum_q) const {
    visit(0, i, theta * theta, fx, fy, sum_q);
  }

 private:
  static constexpr int kMaxDepth = 48;

  struct Node {
    double cx = 0.0, cy = 0.0, half = 0.0;
    double com_x = 0.0, com_y = 0.0;
    std::size_t count = 0;
    int child = -1;                   // index of first of four children
    std::vector<std::size_t> points;  // leaf payload
  };

  static Node make_node(double cx, double cy, double half) {
    Node n;
    n.cx = cx;
    n.cy = cy;
    n.half = half;
    return n;
  }

  int quadrant(const Node& n, std::size_t i) const {
    return (y_[2 * i] > n.cx ? 1 : 0) + (y_[2 * i + 1] > n.cy ? 2 : 0);
  }

  void subdivide(std::size_t id) {
    const double h = nodes_[id].half / 2.0;
    const double cx = nodes_[id].cx, cy = nodes_[id].cy;
    const int first = static_cast<int>(nodes_.size());
    nodes_.push_back(make_node(cx - h, cy - h, h));
    nodes_.push_back(make_node(cx + h, cy - h, h));
    nodes_.push_back(make_node(cx - h, cy + h, h));
    nodes_.push_back(make_node(cx + h, cy + h, h));
    nodes_[id].child = first;
  }

  void insert(std::size_t id, std::size_t i, int depth) {
    {
      Node& n = nodes_[id];
      const double c = static_cast<double>(n.count);
      n.com_x = (n.com_x * c + y_[2 * i]) / (c + 1.0);
      n.com_y = (n.com_y * c + y_[2 * i + 1]) / (c + 1.0);
      ++n.count;
      if (n.child < 0) {
        const bool duplicate = !n.points.empty() && y_[2 * n.points[0]] == y_[2 * i] &&
                               y_[2 * n.points[0] + 1] == y_[2 * i + 1];
        if (n.points.empty() || duplicate || depth >= kMaxDepth) {
          n.points.push_back(i);
          return;
        }
      }
    }
    if (nodes_[id].child < 0) {
      subdivide(id);
      const auto moved = std::move(nodes_[id].points);
      nodes_[id].points.clear();
      for (std::size_t j : moved) {
        insert(static_cast<std::size_t>(nodes_[id].child + quadrant(nodes_[id], j)), j, depth + 1);
      }
    }
    insert(static_cast<std::size_t>(nodes_[id].child + quadrant(nodes_[id], i)), i, depth + 1);
  }

  void visit(std::size_t id, std::size_t i, double theta2, double& fx, double& fy,
             double& sum_q) const {
    const Node& n = nodes_[id];
    if (n.count == 0) return;
    const double px = y_[2 * i], py = y_[2 * i + 1];
    if (n.child < 0) {
      for (std::size_t j : n.points) {
        if (j == i) continue;
        const double dx = px - y_[2 * j], dy = py - y_[2 * j + 1];
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        sum_q += q;
        fx += q * q * dx;
        fy += q * q * dy;
      }
      return;
    }
    const double dx = px - n.com_x, dy = py - n.com_y;
    const double d2 = dx * dx + dy * dy;
    const double width = 2.0 * n.half;
    if (d2 > 0.0 && width * width < theta2 * d2) {
      const double q = 1.0 / (1.0 + d2);
      const double mult = static_cast<double>(n.count) * q;
      sum_q += mult;
      fx += mult * q * dx;
      fy += mult * q * dy;
      return;
    }
    for (int c = 0; c < 4; ++c) visit(static_cast<std::size_t>(n.child + c), i, theta2, fx, fy, sum_q);
  }

  const std::vector<double>& y_;
  std::vector<Node> nodes_;
};

// ------------------------------------------------------------ affinities

struct SparseP {
  std::vector<std::size_t> row_start;
  std::vector<std::size_t> col;
  std::vector<double> val;
};

/// Conditional affinities for each point from its k nearest neighbours, with
/// the Gaussian precision binary-searched to the target perplexity.
SparseP input_affinities(const Eigen::MatrixXd& x, double perplexity) {
  const auto n = static_cast<std::size_t>(x.rows());
  const std::size_t k = std::min<std::size_t>(n - 1, static_cast<std::size_t>(3.0 * perplexity));
  const VpTree tree(x);
  const double target_entropy = std::log(perplexity);

  std::vector<std::vector<std::pair<std::size_t, double>>> rows(n);
  std::vector<std::size_t> idx;
  std::vector<double> dist, p(k);
  for (std::size_t i = 0; i < n; ++i) {
    tree.search(i, k, idx, dist);
    double beta = 1.0, lo = -1.0, hi = -1.0;
    // Distances are shifted by the nearest one so exp() cannot underflow to
    // an all-zero row; the shift cancels in the normalization.
    const double d0 = dist[0] * dist[0];
    for (int iter = 0; iter < 200; ++iter) {
      double sum = 0.0, weighted = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double d2 = dist[j] * dist[j] - d0;
        p[j] = std::exp(-beta * d2);
        sum += p[j];
        weighted += d2 * p[j];
      }
      const double entropy = std::log(sum) + beta * weighted / sum;
      const double diff = entropy - target_entropy;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0) {
        lo = beta;
        beta = hi < 0 ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = lo < 0 ? beta / 2.0 : (beta + lo) / 2.0;
      }
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(-beta * (dist[j] * dist[j] - d0));
      sum += p[j];
    }
    rows[i].reserve(k);
    for (std::size_t j = 0; j < k; ++j) rows[i].push_back({idx[j], p[j] / sum});
  }

  // Symmetrize: P_ij = (p_j|i + p_i|j) / 2n.
  std::vector<std::vector<std::pair<std::size_t, double>>> sym(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto [j, v] : rows[i]) {
      sym[i].push_back({j, v});
      sym[j].push_back({i, v});
    }
  }
  SparseP out;
  out.row_start.push_back(0);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = sym[i];
    std::sort(r.begin(), r.end());
    for (std::size_t a = 0; a < r.size();) {
      std::size_t b = a;
      double v = 0.0;
      for (; b < r.size() && r[b].first == r[a].first; ++b) v += r[b].second;
      out.col.push_back(r[a].first);
      out.val.push_back(v / (2.0 * static_cast<double>(n)));
      a = b;
    }
    out.row_start.push_back(out.col.size());
  }
  return out;
}

}  // namespace

EmbeddingResult tsne_embed(const Eigen::MatrixXd& features, std::span<const std::string> image_ids,
                           std::span<const std::string> class_ids, const EmbedConfig& cfg) {
  cfg.validate();
  const auto total = static_cast<std::size_t>(features.rows());
  if (image_ids.size() != total || class_ids.size() != total) {
    throw Error(ErrorKind::Shape, "ids and labels must match the feature rows");
  }

  EmbeddingResult result;
  result.config = cfg;
  result.source_rows.resize(total);
  std::iota(result.source_rows.begin(), result.source_rows.end(), 0);
  if (total > cfg.max_points) {
    Rng rng(derive_seed(cfg.seed, 1));
    rng.shuffle(result.source_rows.begin(), result.source_rows.end());
    result.source_rows.resize(cfg.max_points);
    std::sort(result.source_rows.begin(), result.source_rows.end());
  }
  const std::size_t n = result.source_rows.size();
  if (!(3.0 * cfg.perplexity < static_cast<double>(n))) {
    throw Error(ErrorKind::Configuration,
                "perplexity " + std::to_string(cfg.perplexity) + " needs more than " +
                    std::to_string(static_cast<int>(3.0 * cfg.perplexity)) + " points, got " +
                    std::to_string(n));
  }

  if (cfg.learning_rate == 0.0) {
    result.config.learning_rate =
        std::max(static_cast<double>(n) / cfg.early_exaggeration / 4.0, 50.0);
  }
  const double eta = result.config.learning_rate;

  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), features.cols());
  for (std::size_t r = 0; r < n; ++r) {
    x.row(static_cast<Eigen::Index>(r)) = features.row(static_cast<Eigen::Index>(result.source_rows[r]));
  }
  if (!x.allFinite()) throw Error(ErrorKind::DegenerateInput, "features contain non-finite values");
  x.rowwise() -= x.colwise().mean();

  const SparseP P = input_affinities(x, cfg.perplexity);
  double p_log_p = 0.0;
  for (double v : P.val) p_log_p += v > 0.0 ? v * std::log(v) : 0.0;

  std::vector<double> y(2 * n), update(2 * n, 0.0), gains(2 * n, 1.0), grad(2 * n);
  {
    Rng rng(derive_seed(cfg.seed, 0));
    for (double& v : y) v = 1e-4 * rng.normal();
  }

  result.kl_trace.reserve(static_cast<std::size_t>(cfg.iterations));
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const bool exaggerating = iter < cfg.exaggeration_iterations;
    const double exaggeration = exaggerating ? cfg.early_exaggeration : 1.0;
    const double momentum = exaggerating ? cfg.initial_momentum : cfg.final_momentum;

    const QuadTree tree(y, n);
    double sum_q = 0.0, p_log_q = 0.0;
    std::vector<double> neg(2 * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) tree.repulsion(i, cfg.theta, neg[2 * i], neg[2 * i + 1], sum_q);
    for (std::size_t i = 0; i < n; ++i) {
      double ax = 0.0, ay = 0.0;
      for (std::size_t e = P.row_start[i]; e < P.row_start[i + 1]; ++e) {
        const std::size_t j = P.col[e];
        const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        ax += P.val[e] * q * dx;
        ay += P.val[e] * q * dy;
        p_log_q += P.val[e] * std::log(q);
      }
      grad[2 * i] = 4.0 * (exaggeration * ax - neg[2 * i] / sum_q);
      grad[2 * i + 1] = 4.0 * (exaggeration * ay - neg[2 * i + 1] / sum_q);
    }
    // KL(P || Q) with Q_ij = q_ij / Z and sum(P) = 1.
    result.kl_trace.push_back(p_log_p - p_log_q + std::log(sum_q));

    for (std::size_t d = 0; d < 2 * n; ++d) {
      const bool same_sign = (grad[d] > 0.0) == (update[d] > 0.0);
      gains[d] = same_sign ? std::max(gains[d] * 0.8, 0.01) : gains[d] + 0.2;
      update[d] = momentum * update[d] - eta * gains[d] * grad[d];
      y[d] += update[d];
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += y[2 * i];
      my += y[2 * i + 1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[2 * i] -= mx;
      y[2 * i + 1] -= my;
    }
  }
  result.final_kl = result.kl_trace.back();

  result.points.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t src = result.source_rows[r];
    if (!std::isfinite(y[2 * r]) || !std::isfinite(y[2 * r + 1])) {
      throw Error(ErrorKind::Training, "t-SNE diverged to non-finite coordinates");
    }
    result.points.push_back({image_ids[src], y[2 * r], y[2 * r + 1], class_ids[src]});
  }
  return result;
}

void write_embedding(const std::filesystem::path& path, const EmbeddingResult& result) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.precision(17);
  const auto& c = result.config;
  out << "# vasc-embedding 1 perplexity=" << c.perplexity << " iterations=" << c.iterations
      << " theta=" << c.theta << " seed=" << c.seed << " final_kl=" << result.final_kl << "\n";
  out << "image_id\tclass_id\tx\ty\n";
  for (const auto& p : result.points) {
    out << p.image_id << '\t' << p.class_id << '\t' << p.x << '\t' << p.y << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "failed writing " + path.string());
}

std::vector<EmbeddingPoint> read_embedding(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Load, "cannot read " + path.string());
  std::vector<EmbeddingPoint> points;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("image_id\t", 0) == 0) continue;
    std::istringstream ls(line);
    EmbeddingPoint p;
    std::string x, y;
    if (!std::getline(ls, p.image_id, '\t') || !std::getline(ls, p.class_id, '\t') ||
        !std::getline(ls, x, '\t') || !std::getline(ls, y, '\t')) {
      throw Error(ErrorKind::Load, "malformed embedding line: " + line);
    }
    p.x = std::stod(x);
    p.y = std::stod(y);
    points.push_back(std::move(p));
  }
  return points;
}

}  // namespace vasc
