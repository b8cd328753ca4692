#include "gaussq.hpp"

#include <algorithm>
#include <mutex>
#include <unordered_map>

#include <Eigen/Dense>

namespace widefim::gaussq {

namespace {

constexpr double kCutoff = 12.0;  // normal mass beyond: ~1.8e-33

double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

struct Rule {
  std::vector<double> nodes, weights;
};

// Golub-Welsch for a symmetric Jacobi matrix with the given off-diagonal.
Rule golub_welsch(const std::vector<double>& offdiag) {
  const int n = static_cast<int>(offdiag.size()) + 1;
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    jacobi(k, k - 1) = offdiag[k - 1];
    jacobi(k - 1, k) = offdiag[k - 1];
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi);
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("gaussq: eigensolver failed");
  Rule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    rule.nodes[i] = solver.eigenvalues()(i);
    const double v0 = solver.eigenvectors()(0, i);
    rule.weights[i] = v0 * v0;
  }
  return rule;
}

// Gauss-Legendre on [-1, 1], total weight normalized to 2. Cached per count.
const Rule& legendre(int n) {
  static std::mutex mutex;
  static std::unordered_map<int, Rule> cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<double> off(n - 1);
  for (int k = 1; k < n; ++k)
    off[k - 1] = k / std::sqrt(4.0 * k * k - 1.0);
  Rule rule = golub_welsch(off);
  for (double& w : rule.weights) w *= 2.0;
  return cache.emplace(n, std::move(rule)).first->second;
}

void enforce_symmetry(QuadratureGrid& grid) {
  const int order = grid.order;
  std::vector<std::size_t> perm(order);
  for (int i = 0; i < order; ++i) perm[i] = i;
  std::sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
    return grid.nodes[a] < grid.nodes[b];
  });
  QuadratureGrid sorted;
  sorted.order = order;
  for (int i = 0; i < order; ++i) {
    sorted.nodes.push_back(grid.nodes[perm[i]]);
    sorted.weights.push_back(grid.weights[perm[i]]);
  }
  for (int i = 0, j = order - 1; i < j; ++i, --j) {
    const double node = 0.5 * (sorted.nodes[j] - sorted.nodes[i]);
    sorted.nodes[i] = -node;
    sorted.nodes[j] = node;
    const double w = 0.5 * (sorted.weights[i] + sorted.weights[j]);
    sorted.weights[i] = w;
    sorted.weights[j] = w;
  }
  if (order % 2 == 1) sorted.nodes[order / 2] = 0.0;
  double total = 0.0;
  for (double w : sorted.weights) total += w;
  for (double& w : sorted.weights) w /= total;
  grid = std::move(sorted);
}

QuadratureGrid hermite_grid(int order) {
  std::vector<double> off(order - 1);
  for (int k = 1; k < order; ++k) off[k - 1] = std::sqrt(static_cast<double>(k));
  Rule rule = golub_welsch(off);
  QuadratureGrid grid;
  grid.order = order;
  grid.nodes = std::move(rule.nodes);
  grid.weights = std::move(rule.weights);
  enforce_symmetry(grid);
  return grid;
}

// Panel edges on the positive half axis; mirrored for the negative half.
// Few wide panels beat many narrow ones: per-panel Gauss-Legendre converges
// exponentially in the node count.
const double kHalfEdges[] = {0.0, 3.0, 6.0, kCutoff};
constexpr int kHalfPanels = 3;

QuadratureGrid composite_grid(int order) {
  const int half = order / 2;
  const int base = half / kHalfPanels;
  const int extra = half % kHalfPanels;
  QuadratureGrid grid;
  grid.order = order;
  for (int p = 0; p < kHalfPanels; ++p) {
    const double lo = kHalfEdges[p], hi = kHalfEdges[p + 1];
    const int n = base + (p < extra ? 1 : 0);  // inner panels take the slack
    const Rule& gl = legendre(n);
    const double mid = 0.5 * (lo + hi), halfw = 0.5 * (hi - lo);
    for (int i = 0; i < n; ++i) {
      const double x = mid + halfw * gl.nodes[i];
      const double w = halfw * gl.weights[i] * normal_pdf(x);
      grid.nodes.push_back(x);
      grid.weights.push_back(w);
      grid.nodes.push_back(-x);
      grid.weights.push_back(w);
    }
  }
  enforce_symmetry(grid);
  return grid;
}

}  // namespace

QuadratureGrid build_grid(int order) {
  if (order < 2) throw std::invalid_argument("build_grid: order must be >= 2");
  if (order >= 64 && order % 2 == 0) return composite_grid(order);
  return hermite_grid(order);
}

const QuadratureGrid& default_grid() {
  static const QuadratureGrid grid = build_grid(kDefaultOrder);
  return grid;
}

namespace detail {

InnerRule inner_rule(double mu, double s, int target_order) {
  const int order = std::max(target_order, 64);
  // Panel edges: mu +- {0, 2s, 4s, 6s, 12s}, with 0 pinned as an extra edge
  // when it lies inside the support.
  std::vector<double> edges;
  for (double e : kHalfEdges) {
    edges.push_back(mu - e * s);
    if (e != 0.0) edges.push_back(mu + e * s);
  }
  if (0.0 > mu - kCutoff * s && 0.0 < mu + kCutoff * s) edges.push_back(0.0);
  std::sort(edges.begin(), edges.end());
  const int panels = static_cast<int>(edges.size()) - 1;
  const int base = std::max(2, order / panels);
  InnerRule rule;
  for (int p = 0; p < panels; ++p) {
    const double lo = edges[p], hi = edges[p + 1];
    if (!(hi > lo)) continue;
    const Rule& gl = legendre(base);
    const double mid = 0.5 * (lo + hi), halfw = 0.5 * (hi - lo);
    for (int i = 0; i < base; ++i) {
      const double z = mid + halfw * gl.nodes[i];
      rule.nodes.push_back(z);
      rule.weights.push_back(halfw * gl.weights[i] * normal_pdf((z - mu) / s) /
                             s);
    }
  }
  return rule;
}

}  // namespace detail

}  // namespace widefim::gaussq
