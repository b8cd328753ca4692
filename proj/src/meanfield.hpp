// Mean-field order parameters and the eigenvalue predictions of the
// infinite-width theory, for all four normalization modes.
//
// Forward recurrence (unit-variance standard-normal inputs):
//   qhat_t[0] = 1, qhat_st[0] = 0,
//   q_t[l]  = sw2 * qhat_t[l-1]  + sb2,   q_st[l] = sw2 * qhat_st[l-1] + sb2,
//   qhat_t[l]  = E[phi(sqrt(q_t[l]) u)^2],   qhat_st[l] = I_phi[q_t[l], q_st[l]].
// Backward recurrence, seeded at the linear readout:
//   qtilde_t[L] = qtilde_st[L] = 1,
//   qtilde_t[l]  = sw2 * qtilde_t[l+1]  * E[phi'(sqrt(q_t[l]) u)^2],
//   qtilde_st[l] = sw2 * qtilde_st[l+1] * I_phi'[q_t[l], q_st[l]].
// kappa1/kappa2 are the alpha-weighted layer sums entering every prediction.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "activation.hpp"
#include "errors.hpp"
#include "gaussq.hpp"

namespace widefim::meanfield {

enum class NormMode { none, bn_last_meansub, bn_last_full, bn_middle, layernorm };

std::string norm_mode_name(NormMode mode);
NormMode parse_norm_mode(const std::string& name);

struct NetSpec {
  int L = 2;                      // layer count; L-1 hidden layers
  std::vector<double> alpha;      // width ratios alpha_1..alpha_{L-1}
  double alpha0 = 1.0;            // input width ratio M0/M
  int C = 1;                      // readout units
  double sigma_w2 = 1.0;
  double sigma_b2 = 0.0;
  std::vector<Activation> activations;  // one per hidden layer
  NormMode norm_mode = NormMode::none;

  void validate() const;  // throws ConfigError
  // alpha = sum_{l=1}^{L-1} alpha_l alpha_{l-1}, the P ~ alpha M^2 coefficient.
  double alpha_total() const;
  // sigma_b2 > 0 or some activation with non-zero Gaussian mean.
  bool non_centered(const gaussq::QuadratureGrid& grid) const;
  const Activation& act(int layer) const { return activations.at(layer - 1); }
};

// Per-layer order parameters, index 0..L. Slot 0 holds the input moments
// (qhat_t[0]=1, qhat_st[0]=0); qtilde slots below 1 are unused and left 0.
struct OrderParams {
  std::vector<double> q_t, q_st;          // pre-activation moments
  std::vector<double> qhat_t, qhat_st;    // forward
  std::vector<double> qtilde_t, qtilde_st;  // backward
  NormMode mode = NormMode::none;
  int L = 0;
};

OrderParams forward_order_params(const NetSpec& spec,
                                 const gaussq::QuadratureGrid& grid);
// Requires the forward part of `params` filled for the same spec.
void backward_order_params(const NetSpec& spec,
                           const gaussq::QuadratureGrid& grid,
                           OrderParams& params);
// Both passes under the layer-norm recurrences (normalized pre-activations).
OrderParams layernorm_order_params(const NetSpec& spec,
                                   const gaussq::QuadratureGrid& grid);

struct KappaPair {
  double kappa1 = 0.0;
  double kappa2 = 0.0;
  bool centered_warning = false;  // kappa2 < 1e-10
};

KappaPair kappas(const NetSpec& spec, const OrderParams& params);

// Middle-layer batch-norm order parameters (per hidden layer). ReLU has the
// closed form qhat_t = 1/2, qhat_st = J(-1/(T-1))/2; everything else goes
// through Monte Carlo over the T-dimensional Gaussian with the equicorrelated
// covariance of the previous layer, batch-standardized before phi.
struct BnOrderParams {
  std::vector<double> qhat_t_bn;   // layers 1..L-1
  std::vector<double> qhat_st_bn;
};

BnOrderParams bn_middle_order_params(const NetSpec& spec, int T,
                                     long mc_samples, std::uint64_t seed);

enum class Regime {
  unnormalized,
  bn_last_meansub_smallT,
  bn_last_meansub_bigT,
  bn_last_full_bigT,
  bn_middle_bound,
  layernorm,
};

std::string regime_name(Regime regime);

struct TheoryPrediction {
  Regime regime = Regime::unnormalized;
  std::optional<double> m_lambda;
  std::optional<double> lambda_max_point;
  std::optional<double> lambda_max_lower;
  std::optional<double> lambda_max_upper;
  int M = 0;
  int T = 0;
  double rho = 0.0;  // M/T
  // The big-T bounds are proven only up to unspecified non-negative
  // constants; they are reported with those constants set to 0.
  bool bound_modulo_constant = false;
  double kappa1 = 0.0, kappa2 = 0.0;  // kappa'_1, kappa'_2 under layer norm
};

// Theorem B.1 order exponents for a user-supplied convergence rate q:
// lambda_max between O(M^{1-2q*}) and O(M^{1-q*}), q* = min(q, 1/2).
struct QRegimeOrders {
  double q_star = 0.5;
  double lower_exponent = 0.0;
  double upper_exponent = 0.5;
};

QRegimeOrders meansub_order_exponents(double q);

enum class TScaling { small_T, big_T };

// Theorem 2.2: m ~ kappa1 C / M, lmax ~ alpha ((T-1)/T kappa2 + kappa1/T) M.
TheoryPrediction predict_unnormalized(const NetSpec& spec, int M, int T,
                                      const gaussq::QuadratureGrid& grid);

// Theorem 3.3 (last-layer mean subtraction). small_T gives the point value
// alpha (kappa1-kappa2) M / T; big_T gives the bound pair
// [rho alpha (k1-k2), sqrt(C alpha^2 rho (k1-k2)^2 M)].
TheoryPrediction predict_bn_last_meansub(const NetSpec& spec, int M, int T,
                                         TScaling scaling,
                                         const gaussq::QuadratureGrid& grid);

// Last-layer mean subtraction + variance normalization with the measured (or
// supplied) per-output standard deviations sigma_k.
TheoryPrediction predict_bn_last_full(const NetSpec& spec, int M, int T,
                                      const std::vector<double>& sigma_k,
                                      const gaussq::QuadratureGrid& grid);

// Theorem 3.4 lower bound; requires non-negative activations and T >= 3.
TheoryPrediction predict_bn_middle_lower_bound(const NetSpec& spec, int M,
                                               int T,
                                               const BnOrderParams& bn_params);

struct LayerNormEtas {
  double eta1 = 0.0;  // mean of 1/sigma(t)^2
  double eta2 = 0.0;  // mean of 1/sigma(t)^4
  double eta3 = 0.0;  // double mean of g(t,t')/(sigma(t) sigma(t'))
};

// Theorem 4.1 with measured last-layer variance statistics; C > 2 required.
TheoryPrediction predict_layernorm(const NetSpec& spec, int M, int T,
                                   const LayerNormEtas& etas,
                                   const gaussq::QuadratureGrid& grid);

}  // namespace widefim::meanfield
