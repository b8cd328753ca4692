// Pointwise activations with their weak derivatives, plus the analytic
// Gaussian moments available in closed form (ReLU family and linear). The
// closed forms double as fast paths and as oracles for the quadrature route.
#pragma once

#include <string>

#include "gaussq.hpp"

namespace widefim::meanfield {

// Arccosine kernel J(x) = (sqrt(1-x^2) + (pi - acos(x)) x) / pi, the
// closed-form overlap propagator of ReLU layers. Maps [-1,1] onto [0,1].
double arccos_kernel(double x);

enum class ActTag { relu, leaky_relu, tanh, sigmoid, erf, linear };

class Activation {
public:
  static Activation relu() { return Activation(ActTag::relu); }
  static Activation leaky_relu(double slope);
  static Activation tanh() { return Activation(ActTag::tanh); }
  static Activation sigmoid() { return Activation(ActTag::sigmoid); }
  static Activation erf() { return Activation(ActTag::erf); }
  static Activation linear() { return Activation(ActTag::linear); }

  // Accepts "relu", "leaky_relu(0.2)", "tanh", "sigmoid", "erf", "linear".
  static Activation parse(const std::string& name);

  ActTag tag() const { return tag_; }
  double slope() const { return slope_; }
  std::string name() const;

  double phi(double x) const;
  double dphi(double x) const;  // weak derivative; ReLU kink resolved as 0

  // E[phi(z)] with z ~ N(0,1), via quadrature.
  double gaussian_mean(const gaussq::QuadratureGrid& grid) const;
  // True when |E[phi(z)]| < 1e-8.
  bool centered(const gaussq::QuadratureGrid& grid) const;
  // phi(x) >= 0 and phi' bounded, checked on a dense grid over [-50, 50].
  bool nonnegative() const;
  bool bounded_derivative() const;

  // Closed-form Gaussian moments (ReLU, leaky ReLU, linear only).
  bool has_closed_forms() const;
  double moment2(double q) const;           // E[phi(sqrt(q) u)^2]
  double dmoment2(double q) const;          // E[phi'(sqrt(q) u)^2]
  double cross(double a, double b) const;   // I_phi[a, b]
  double dcross(double a, double b) const;  // I_phi'[a, b]

  // Quadrature route for the same four moments, any activation.
  double moment2_quad(double q, const gaussq::QuadratureGrid& g) const;
  double dmoment2_quad(double q, const gaussq::QuadratureGrid& g) const;
  double cross_quad(double a, double b, const gaussq::QuadratureGrid& g) const;
  double dcross_quad(double a, double b, const gaussq::QuadratureGrid& g) const;

  // Fast path when available, quadrature otherwise.
  double moment2_any(double q, const gaussq::QuadratureGrid& g) const;
  double dmoment2_any(double q, const gaussq::QuadratureGrid& g) const;
  double cross_any(double a, double b, const gaussq::QuadratureGrid& g) const;
  double dcross_any(double a, double b, const gaussq::QuadratureGrid& g) const;

  bool operator==(const Activation& o) const {
    return tag_ == o.tag_ && slope_ == o.slope_;
  }

private:
  explicit Activation(ActTag tag, double slope = 0.0)
      : tag_(tag), slope_(slope) {}
  ActTag tag_;
  double slope_;
};

}  // namespace widefim::meanfield
