#include "activation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace widefim::meanfield {

double arccos_kernel(double x) {
  if (std::abs(x) > 1.0) {
    if (std::abs(x) < 1.0 + 1e-12)
      x = x > 0.0 ? 1.0 : -1.0;
    else
      throw std::domain_error("arccos_kernel: argument outside [-1, 1]");
  }
  return (std::sqrt(1.0 - x * x) + (M_PI - std::acos(x)) * x) / M_PI;
}

Activation Activation::leaky_relu(double slope) {
  if (!(slope > 0.0 && slope < 1.0))
    throw std::invalid_argument("leaky_relu: slope must lie in (0, 1)");
  return Activation(ActTag::leaky_relu, slope);
}

Activation Activation::parse(const std::string& name) {
  if (name == "relu") return relu();
  if (name == "tanh") return tanh();
  if (name == "sigmoid") return sigmoid();
  if (name == "erf") return erf();
  if (name == "linear") return linear();
  const std::string prefix = "leaky_relu(";
  if (name.rfind(prefix, 0) == 0 && name.back() == ')') {
    const std::string arg = name.substr(prefix.size(), name.size() - prefix.size() - 1);
    return leaky_relu(std::stod(arg));
  }
  throw std::invalid_argument("unknown activation: " + name);
}

std::string Activation::name() const {
  switch (tag_) {
    case ActTag::relu: return "relu";
    case ActTag::leaky_relu: return "leaky_relu(" + std::to_string(slope_) + ")";
    case ActTag::tanh: return "tanh";
    case ActTag::sigmoid: return "sigmoid";
    case ActTag::erf: return "erf";
    case ActTag::linear: return "linear";
  }
  return "?";
}

double Activation::phi(double x) const {
  switch (tag_) {
    case ActTag::relu: return x > 0.0 ? x : 0.0;
    case ActTag::leaky_relu: return x > 0.0 ? x : slope_ * x;
    case ActTag::tanh: return std::tanh(x);
    case ActTag::sigmoid: return 1.0 / (1.0 + std::exp(-x));
    case ActTag::erf: return std::erf(x);
    case ActTag::linear: return x;
  }
  return 0.0;
}

double Activation::dphi(double x) const {
  switch (tag_) {
    case ActTag::relu: return x > 0.0 ? 1.0 : 0.0;
    case ActTag::leaky_relu: return x > 0.0 ? 1.0 : slope_;
    case ActTag::tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case ActTag::sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 - s);
    }
    case ActTag::erf: return 2.0 / std::sqrt(M_PI) * std::exp(-x * x);
    case ActTag::linear: return 1.0;
  }
  return 0.0;
}

double Activation::gaussian_mean(const gaussq::QuadratureGrid& grid) const {
  return gaussq::expect1([this](double u) { return phi(u); }, 1.0, grid);
}

bool Activation::centered(const gaussq::QuadratureGrid& grid) const {
  return std::abs(gaussian_mean(grid)) < 1e-8;
}

bool Activation::nonnegative() const {
  for (double x = -50.0; x <= 50.0; x += 0.01)
    if (phi(x) < 0.0) return false;
  return true;
}

bool Activation::bounded_derivative() const {
  for (double x = -50.0; x <= 50.0; x += 0.01)
    if (!(std::abs(dphi(x)) <= 1e3)) return false;
  return true;
}

bool Activation::has_closed_forms() const {
  return tag_ == ActTag::relu || tag_ == ActTag::leaky_relu ||
         tag_ == ActTag::linear;
}

double Activation::moment2(double q) const {
  switch (tag_) {
    case ActTag::relu: return 0.5 * q;
    case ActTag::leaky_relu: return 0.5 * q * (1.0 + slope_ * slope_);
    case ActTag::linear: return q;
    default: throw std::logic_error("moment2: no closed form for " + name());
  }
}

double Activation::dmoment2(double q) const {
  (void)q;
  switch (tag_) {
    case ActTag::relu: return 0.5;
    case ActTag::leaky_relu: return 0.5 * (1.0 + slope_ * slope_);
    case ActTag::linear: return 1.0;
    default: throw std::logic_error("dmoment2: no closed form for " + name());
  }
}

double Activation::cross(double a, double b) const {
  const double c = b / a;
  switch (tag_) {
    case ActTag::relu: return 0.5 * a * arccos_kernel(c);
    case ActTag::leaky_relu: {
      const double m = slope_;
      return a * (m * c + 0.5 * (1.0 - m) * (1.0 - m) * arccos_kernel(c));
    }
    case ActTag::linear: return b;
    default: throw std::logic_error("cross: no closed form for " + name());
  }
}

double Activation::dcross(double a, double b) const {
  const double c = std::clamp(b / a, -1.0, 1.0);
  const double theta = std::acos(c);
  switch (tag_) {
    case ActTag::relu: return (M_PI - theta) / (2.0 * M_PI);
    case ActTag::leaky_relu: {
      const double m = slope_;
      return ((1.0 + m * m) * (M_PI - theta) + 2.0 * m * theta) / (2.0 * M_PI);
    }
    case ActTag::linear: return 1.0;
    default: throw std::logic_error("dcross: no closed form for " + name());
  }
}

double Activation::moment2_quad(double q, const gaussq::QuadratureGrid& g) const {
  return gaussq::expect1([this](double u) { const double p = phi(u); return p * p; }, q, g);
}

double Activation::dmoment2_quad(double q, const gaussq::QuadratureGrid& g) const {
  return gaussq::expect1([this](double u) { const double p = dphi(u); return p * p; }, q, g);
}

double Activation::cross_quad(double a, double b, const gaussq::QuadratureGrid& g) const {
  auto f = [this](double u) { return phi(u); };
  return gaussq::expect2(f, f, a, b, g);
}

double Activation::dcross_quad(double a, double b, const gaussq::QuadratureGrid& g) const {
  auto f = [this](double u) { return dphi(u); };
  return gaussq::expect2(f, f, a, b, g);
}

double Activation::moment2_any(double q, const gaussq::QuadratureGrid& g) const {
  return has_closed_forms() ? moment2(q) : moment2_quad(q, g);
}

double Activation::dmoment2_any(double q, const gaussq::QuadratureGrid& g) const {
  return has_closed_forms() ? dmoment2(q) : dmoment2_quad(q, g);
}

double Activation::cross_any(double a, double b, const gaussq::QuadratureGrid& g) const {
  return has_closed_forms() ? cross(a, b) : cross_quad(a, b, g);
}

double Activation::dcross_any(double a, double b, const gaussq::QuadratureGrid& g) const {
  return has_closed_forms() ? dcross(a, b) : dcross_quad(a, b, g);
}

}  // namespace widefim::meanfield
