// Gaussian-expectation quadrature against the standard normal measure
// Du = du exp(-u^2/2)/sqrt(2*pi). All mean-field recurrences reduce their
// one- and two-dimensional Gaussian integrals to these grids.
//
// Grids are hybrid. Small or odd orders are probabilists' Gauss-Hermite
// rules (polynomially exact). Even orders >= 64 are composite
// Gauss-Legendre rules against the normal density, truncated at |u| = 12,
// with a panel edge pinned at the origin: that keeps machine accuracy for
// the ReLU-family activations whose weak derivative kinks at 0, where a
// plain Hermite rule stalls near 1e-3. expect2 builds its inner rule per
// outer node with an edge pinned at the inner argument's zero crossing for
// the same reason.
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

namespace widefim::gaussq {

struct QuadratureGrid {
  std::vector<double> nodes;    // symmetric about 0, ascending
  std::vector<double> weights;  // positive, sum to 1
  int order = 0;
};

// order >= 2. Weights are normalized to unit Gaussian mass and the node set
// is exactly symmetrized about the origin.
QuadratureGrid build_grid(int order);

inline constexpr int kDefaultOrder = 100;

const QuadratureGrid& default_grid();

namespace detail {
// Quadrature against N(mu, s^2) with a panel edge pinned at 0 when the
// origin lies inside the (truncated) support. Weights include the density.
struct InnerRule {
  std::vector<double> nodes, weights;
};
InnerRule inner_rule(double mu, double s, int target_order);
}  // namespace detail

// E[f(z)] with z ~ N(0, q).
template <class F>
double expect1(F&& f, double q, const QuadratureGrid& grid) {
  if (!(q > 0.0)) throw std::domain_error("expect1: variance q must be > 0");
  const double s = std::sqrt(q);
  double acc = 0.0;
  for (std::size_t i = 0; i < grid.nodes.size(); ++i)
    acc += grid.weights[i] * f(s * grid.nodes[i]);
  return acc;
}

// I[a,b] = E[f(x) g(y)] with (x,y) jointly Gaussian, Var = a, Cov = b.
// Correlations within 1e-9 of +/-1 are snapped to the exact correlated case
// to avoid cancellation in sqrt(1-c^2).
template <class F, class G>
double expect2(F&& f, G&& g, double a, double b, const QuadratureGrid& grid) {
  if (!(a > 0.0)) throw std::domain_error("expect2: variance a must be > 0");
  const double c = b / a;
  if (std::abs(c) > 1.0 + 1e-12)
    throw std::domain_error("expect2: |b| must not exceed a");
  const double s = std::sqrt(a);
  if (c > 1.0 - 1e-9) {
    double acc = 0.0;
    for (std::size_t i = 0; i < grid.nodes.size(); ++i) {
      const double x = s * grid.nodes[i];
      acc += grid.weights[i] * f(x) * g(x);
    }
    return acc;
  }
  if (c < -1.0 + 1e-9) {
    double acc = 0.0;
    for (std::size_t i = 0; i < grid.nodes.size(); ++i) {
      const double x = s * grid.nodes[i];
      acc += grid.weights[i] * f(x) * g(-x);
    }
    return acc;
  }
  if (b == 0.0) {  // independent: the integral factorizes exactly
    double accf = 0.0, accg = 0.0;
    for (std::size_t i = 0; i < grid.nodes.size(); ++i) {
      accf += grid.weights[i] * f(s * grid.nodes[i]);
      accg += grid.weights[i] * g(s * grid.nodes[i]);
    }
    return accf * accg;
  }
  // Conditional on x, the inner argument z = c x + sqrt(1-c^2) y is
  // N(c x, 1-c^2); integrate g(sqrt(a) z) in z-space.
  const double root = std::sqrt(1.0 - c * c);
  double acc = 0.0;
  for (std::size_t i = 0; i < grid.nodes.size(); ++i) {
    const double x = grid.nodes[i];
    const detail::InnerRule rule =
        detail::inner_rule(c * x, root, grid.order);
    double inner = 0.0;
    for (std::size_t j = 0; j < rule.nodes.size(); ++j)
      inner += rule.weights[j] * g(s * rule.nodes[j]);
    acc += grid.weights[i] * f(s * x) * inner;
  }
  return acc;
}

}  // namespace widefim::gaussq
