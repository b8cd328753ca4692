// Finite random networks: initialization, exact forward passes under the four
// normalization modes, exact per-sample Jacobians (including the batch-coupled
// chain through batch-norm statistics and the layer-norm projector), and
// empirical order parameters.
//
// Layer arrays are indexed by layer number: W[l], b[l], U[l] belong to layer
// l = 1..L (slot 0 unused); H[l] holds activations with H[0] = the input.
#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "meanfield.hpp"

namespace widefim::netlab {

using meanfield::NetSpec;
using meanfield::NormMode;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// M_0..M_L; hidden widths round(alpha_l * M) clamped to >= 1, M_L = C.
std::vector<int> layer_widths(const NetSpec& spec, int M);

struct Params {
  NetSpec spec;
  int M = 0;
  std::vector<int> widths;  // M_0..M_L
  std::vector<Matrix> W;    // W[l]: widths[l] x widths[l-1]
  std::vector<Vector> b;    // b[l]: widths[l]
  std::uint64_t seed = 0;
  long long param_count() const;
};

// W^l_ij ~ N(0, sigma_w2 / M_{l-1}), b^l_i ~ N(0, sigma_b2); one substream
// per (layer, weights|biases) derived from `seed`.
Params init_params(const NetSpec& spec, int M, std::uint64_t seed);

struct Batch {
  Matrix X;  // M_0 x T, one column per sample
  std::uint64_t seed = 0;
  int T() const { return static_cast<int>(X.cols()); }
};

Batch make_batch(const NetSpec& spec, int M, int T, std::uint64_t seed);

struct ForwardTrace {
  NormMode mode = NormMode::none;
  std::vector<Matrix> U;     // pre-activations, U[1..L]
  std::vector<Matrix> Ubar;  // normalized pre-activations where applicable
  std::vector<Matrix> H;     // activations, H[0..L-1]
  Matrix F;                  // outputs, C x T
  std::vector<Vector> bn_mu, bn_sigma;  // bn_middle: per layer, per unit
  std::vector<Vector> ln_mu, ln_sigma;  // layernorm: per layer, per sample
  Vector last_mu, last_sigma;           // bn_last modes: per output unit
};

// norm_eps is an optional epsilon under the normalization square roots
// (default 0, matching the model; frameworks use a small positive value).
// gamma, when given, scales the bn_last outputs per unit (beta is fixed 0).
ForwardTrace forward(const Params& params, const Batch& batch, NormMode mode,
                     double norm_eps = 0.0, const Vector* gamma = nullptr);

struct JacobianBlock {
  Matrix R;  // P x (C*T); column k*T + t holds grad_theta f_k(t) / sqrt(T)
  int C = 0, T = 0;
  long long P = 0;
};

JacobianBlock jacobian(const Params& params, const Batch& batch, NormMode mode,
                       double norm_eps = 0.0, const Vector* gamma = nullptr,
                       int threads = 1);

// Backward sensitivities delta_k^l = d f_k / d u^l of the un-normalized
// chain, per output k: sens[k][l] is M_l x T (l = 1..L, slot 0 empty).
std::vector<std::vector<Matrix>> unnormalized_sensitivities(
    const Params& params, const ForwardTrace& trace);

// R * vec(coeff) without materializing R; mode none. coeff is C x T with
// coeff(k, t) multiplying the column of f_k(t).
Vector mix_columns(const Params& params, const ForwardTrace& trace,
                   const Matrix& coeff);

// Max |analytic - central difference| over all Jacobian entries, relative to
// the largest finite-difference entry.
double finite_diff_check(const Params& params, const Batch& batch,
                         NormMode mode, double epsilon, double norm_eps = 0.0);

struct EmpiricalForward {
  std::vector<double> qhat_M_t, qhat_M_st;  // per layer 0..L-1 over H
};
EmpiricalForward empirical_forward_order_params(const Params& params,
                                                const ForwardTrace& trace);

struct EmpiricalBackward {
  std::vector<double> qtilde_M_t, qtilde_M_st;  // per layer 1..L (slot 0 = 0)
};
// Output unit 0 of the un-normalized chain; pair statistics averaged over
// distinct sample pairs.
EmpiricalBackward empirical_backward_order_params(const Params& params,
                                                  const Batch& batch);

// Squared loss E = 1/(2T) sum_{k,t} (y - f)^2 and its exact gradient.
struct LossGrad {
  double loss = 0.0;
  std::vector<Matrix> dW;  // per layer 1..L (slot 0 empty)
  std::vector<Vector> db;
};
LossGrad loss_gradient(const Params& params, const Batch& batch,
                       const Matrix& Y, NormMode mode, double norm_eps = 0.0);

}  // namespace widefim::netlab
