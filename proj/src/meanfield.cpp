#include "meanfield.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "rng.hpp"

namespace widefim::meanfield {

std::string norm_mode_name(NormMode mode) {
  switch (mode) {
    case NormMode::none: return "none";
    case NormMode::bn_last_meansub: return "bn_last_meansub";
    case NormMode::bn_last_full: return "bn_last_full";
    case NormMode::bn_middle: return "bn_middle";
    case NormMode::layernorm: return "layernorm";
  }
  return "?";
}

NormMode parse_norm_mode(const std::string& name) {
  if (name == "none") return NormMode::none;
  if (name == "bn_last_meansub") return NormMode::bn_last_meansub;
  if (name == "bn_last_full") return NormMode::bn_last_full;
  if (name == "bn_middle") return NormMode::bn_middle;
  if (name == "layernorm") return NormMode::layernorm;
  throw ConfigError("unknown norm_mode: " + name);
}

void NetSpec::validate() const {
  if (L < 2) throw ConfigError("NetSpec: L must be >= 2");
  if (C < 1) throw ConfigError("NetSpec: C must be >= 1");
  if (static_cast<int>(alpha.size()) != L - 1)
    throw ConfigError("NetSpec: alpha must list L-1 width ratios");
  if (static_cast<int>(activations.size()) != L - 1)
    throw ConfigError("NetSpec: activations must list L-1 entries");
  for (double a : alpha)
    if (!(a > 0.0)) throw ConfigError("NetSpec: width ratios must be > 0");
  if (!(alpha0 > 0.0)) throw ConfigError("NetSpec: alpha0 must be > 0");
  if (!(sigma_w2 > 0.0)) throw ConfigError("NetSpec: sigma_w2 must be > 0");
  if (sigma_b2 < 0.0) throw ConfigError("NetSpec: sigma_b2 must be >= 0");
  if (!(alpha_total() > 0.0)) throw ConfigError("NetSpec: alpha sum must be > 0");
  for (const auto& a : activations)
    if (!a.bounded_derivative())
      throw ConfigError("NetSpec: activation with unbounded derivative");
}

double NetSpec::alpha_total() const {
  double total = 0.0;
  double prev = alpha0;
  for (int l = 1; l <= L - 1; ++l) {
    total += alpha[l - 1] * prev;
    prev = alpha[l - 1];
  }
  return total;
}

bool NetSpec::non_centered(const gaussq::QuadratureGrid& grid) const {
  if (sigma_b2 > 0.0) return true;
  for (const auto& a : activations)
    if (!a.centered(grid)) return true;
  return false;
}

OrderParams forward_order_params(const NetSpec& spec,
                                 const gaussq::QuadratureGrid& grid) {
  spec.validate();
  OrderParams p;
  p.L = spec.L;
  p.mode = spec.norm_mode;
  const int n = spec.L + 1;
  p.q_t.assign(n, 0.0);
  p.q_st.assign(n, 0.0);
  p.qhat_t.assign(n, 0.0);
  p.qhat_st.assign(n, 0.0);
  p.qtilde_t.assign(n, 0.0);
  p.qtilde_st.assign(n, 0.0);

  p.q_t[0] = p.qhat_t[0] = 1.0;  // standard-normal inputs
  p.q_st[0] = p.qhat_st[0] = 0.0;
  for (int l = 1; l <= spec.L; ++l) {
    p.q_t[l] = spec.sigma_w2 * p.qhat_t[l - 1] + spec.sigma_b2;
    p.q_st[l] = spec.sigma_w2 * p.qhat_st[l - 1] + spec.sigma_b2;
    if (l == spec.L) {
      // linear readout
      p.qhat_t[l] = p.q_t[l];
      p.qhat_st[l] = p.q_st[l];
      break;
    }
    const Activation& act = spec.act(l);
    p.qhat_t[l] = act.moment2_any(p.q_t[l], grid);
    p.qhat_st[l] = act.cross_any(p.q_t[l], p.q_st[l], grid);
  }
  return p;
}

void backward_order_params(const NetSpec& spec,
                           const gaussq::QuadratureGrid& grid,
                           OrderParams& params) {
  params.qtilde_t[spec.L] = 1.0;
  params.qtilde_st[spec.L] = 1.0;
  for (int l = spec.L - 1; l >= 1; --l) {
    const Activation& act = spec.act(l);
    params.qtilde_t[l] = spec.sigma_w2 * params.qtilde_t[l + 1] *
                         act.dmoment2_any(params.q_t[l], grid);
    params.qtilde_st[l] = spec.sigma_w2 * params.qtilde_st[l + 1] *
                          act.dcross_any(params.q_t[l], params.q_st[l], grid);
  }
}

OrderParams layernorm_order_params(const NetSpec& spec,
                                   const gaussq::QuadratureGrid& grid) {
  spec.validate();
  OrderParams p;
  p.L = spec.L;
  p.mode = NormMode::layernorm;
  const int n = spec.L + 1;
  p.q_t.assign(n, 0.0);
  p.q_st.assign(n, 0.0);
  p.qhat_t.assign(n, 0.0);
  p.qhat_st.assign(n, 0.0);
  p.qtilde_t.assign(n, 0.0);
  p.qtilde_st.assign(n, 0.0);

  p.q_t[0] = p.qhat_t[0] = 1.0;
  // Layer norm pins every normalized pre-activation to unit variance; only
  // the correlation c_l = (sw2 qhat_st + sb2)/(sw2 qhat_t + sb2) propagates.
  for (int l = 1; l <= spec.L; ++l) {
    p.q_t[l] = spec.sigma_w2 * p.qhat_t[l - 1] + spec.sigma_b2;
    p.q_st[l] = spec.sigma_w2 * p.qhat_st[l - 1] + spec.sigma_b2;
    const double c = p.q_st[l] / p.q_t[l];
    if (l == spec.L) {
      p.qhat_t[l] = 1.0;
      p.qhat_st[l] = c;
      break;
    }
    const Activation& act = spec.act(l);
    p.qhat_t[l] = act.moment2_any(1.0, grid);
    p.qhat_st[l] = act.cross_any(1.0, c, grid);
  }
  p.qtilde_t[spec.L] = 1.0;
  p.qtilde_st[spec.L] = 1.0;
  for (int l = spec.L - 1; l >= 1; --l) {
    const Activation& act = spec.act(l);
    const double denom = p.q_t[l];
    const double c = p.q_st[l] / p.q_t[l];
    p.qtilde_t[l] = spec.sigma_w2 * p.qtilde_t[l + 1] / denom *
                    act.dmoment2_any(1.0, grid);
    p.qtilde_st[l] = spec.sigma_w2 * p.qtilde_st[l + 1] / denom *
                     act.dcross_any(1.0, c, grid);
  }
  return p;
}

KappaPair kappas(const NetSpec& spec, const OrderParams& params) {
  const double alpha = spec.alpha_total();
  KappaPair k;
  double prev = spec.alpha0;
  for (int l = 1; l <= spec.L; ++l) {
    k.kappa1 += prev / alpha * params.qtilde_t[l] * params.qhat_t[l - 1];
    k.kappa2 += prev / alpha * params.qtilde_st[l] * params.qhat_st[l - 1];
    if (l <= spec.L - 1) prev = spec.alpha[l - 1];
  }
  k.centered_warning = k.kappa2 < 1e-10;
  return k;
}

BnOrderParams bn_middle_order_params(const NetSpec& spec, int T,
                                     long mc_samples, std::uint64_t seed) {
  spec.validate();
  if (T <= 2)
    throw DegenerateError(
        "bn_middle_order_params: T <= 2 is the degenerate batch symmetry");
  if (mc_samples < 10000)
    throw std::invalid_argument("bn_middle_order_params: mc_samples >= 1e4");

  BnOrderParams out;
  out.qhat_t_bn.resize(spec.L - 1);
  out.qhat_st_bn.resize(spec.L - 1);
  // Previous-layer moments feeding the equicorrelated covariance; input layer
  // contributes correlation 0.
  double prev_t = 1.0, prev_st = 0.0;
  for (int l = 1; l <= spec.L - 1; ++l) {
    const Activation& act = spec.act(l);
    if (act.tag() == ActTag::relu) {
      out.qhat_t_bn[l - 1] = 0.5;
      out.qhat_st_bn[l - 1] = 0.5 * arccos_kernel(-1.0 / (T - 1));
    } else {
      const double c = prev_st / prev_t;
      rng::GaussianStream gs(
          rng::substream(seed, rng::Purpose::bn_montecarlo, l));
      // u = sqrt(1-c)(z - zbar 1) + sqrt(1+(T-1)c) zbar 1 has the
      // equicorrelated covariance (1-c)I + c 11^T; the overall scale drops
      // out in the batch standardization.
      const double w_res = std::sqrt(std::max(0.0, 1.0 - c));
      const double w_mean = std::sqrt(std::max(0.0, 1.0 + (T - 1) * c));
      Eigen::VectorXd z(T), u(T), phi(T);
      double acc_t = 0.0, acc_st = 0.0;
      for (long s = 0; s < mc_samples; ++s) {
        for (int t = 0; t < T; ++t) z(t) = gs.next();
        const double zbar = z.mean();
        u = w_res * (z.array() - zbar).matrix();
        u.array() += w_mean * zbar;
        const double mu = u.mean();
        const double var = (u.array() - mu).square().mean();
        const double sd = std::sqrt(var);
        for (int t = 0; t < T; ++t) phi(t) = act.phi((u(t) - mu) / sd);
        const double sum = phi.sum();
        const double sumsq = phi.squaredNorm();
        acc_t += sumsq / T;
        acc_st += (sum * sum - sumsq) / (static_cast<double>(T) * (T - 1));
      }
      out.qhat_t_bn[l - 1] = acc_t / static_cast<double>(mc_samples);
      out.qhat_st_bn[l - 1] = acc_st / static_cast<double>(mc_samples);
    }
    prev_t = out.qhat_t_bn[l - 1];
    prev_st = out.qhat_st_bn[l - 1];
  }
  return out;
}

std::string regime_name(Regime regime) {
  switch (regime) {
    case Regime::unnormalized: return "unnormalized";
    case Regime::bn_last_meansub_smallT: return "bn_last_meansub_smallT";
    case Regime::bn_last_meansub_bigT: return "bn_last_meansub_bigT";
    case Regime::bn_last_full_bigT: return "bn_last_full_bigT";
    case Regime::bn_middle_bound: return "bn_middle_bound";
    case Regime::layernorm: return "layernorm";
  }
  return "?";
}

QRegimeOrders meansub_order_exponents(double q) {
  if (!(q > 0.0))
    throw std::invalid_argument("meansub_order_exponents: q must be > 0");
  QRegimeOrders r;
  r.q_star = std::min(q, 0.5);
  r.lower_exponent = 1.0 - 2.0 * r.q_star;
  r.upper_exponent = 1.0 - r.q_star;
  return r;
}

namespace {

KappaPair kappas_for(const NetSpec& spec, const gaussq::QuadratureGrid& grid) {
  OrderParams p = forward_order_params(spec, grid);
  backward_order_params(spec, grid, p);
  return kappas(spec, p);
}

void require_non_centered(const NetSpec& spec,
                          const gaussq::QuadratureGrid& grid,
                          const char* where) {
  if (!spec.non_centered(grid))
    throw DegenerateError(std::string(where) +
                          ": theorem requires a non-centered network "
                          "(sigma_b2 > 0 or non-zero Gaussian mean)");
}

}  // namespace

TheoryPrediction predict_unnormalized(const NetSpec& spec, int M, int T,
                                      const gaussq::QuadratureGrid& grid) {
  require_non_centered(spec, grid, "predict_unnormalized");
  const KappaPair k = kappas_for(spec, grid);
  const double alpha = spec.alpha_total();
  TheoryPrediction pred;
  pred.regime = Regime::unnormalized;
  pred.M = M;
  pred.T = T;
  pred.rho = static_cast<double>(M) / T;
  pred.kappa1 = k.kappa1;
  pred.kappa2 = k.kappa2;
  pred.m_lambda = k.kappa1 * spec.C / M;
  pred.lambda_max_point =
      alpha * ((T - 1.0) / T * k.kappa2 + k.kappa1 / T) * M;
  return pred;
}

TheoryPrediction predict_bn_last_meansub(const NetSpec& spec, int M, int T,
                                         TScaling scaling,
                                         const gaussq::QuadratureGrid& grid) {
  require_non_centered(spec, grid, "predict_bn_last_meansub");
  if (T < 2)
    throw std::invalid_argument("predict_bn_last_meansub: T >= 2 required");
  const KappaPair k = kappas_for(spec, grid);
  const double alpha = spec.alpha_total();
  const double gap = k.kappa1 - k.kappa2;
  TheoryPrediction pred;
  pred.M = M;
  pred.T = T;
  pred.rho = static_cast<double>(M) / T;
  pred.kappa1 = k.kappa1;
  pred.kappa2 = k.kappa2;
  pred.m_lambda = (1.0 - 1.0 / T) * gap * spec.C / M;
  if (scaling == TScaling::small_T) {
    pred.regime = Regime::bn_last_meansub_smallT;
    pred.lambda_max_point = alpha * gap / T * M;
  } else {
    pred.regime = Regime::bn_last_meansub_bigT;
    pred.lambda_max_lower = pred.rho * alpha * gap;
    pred.lambda_max_upper =
        std::sqrt(spec.C * alpha * alpha * pred.rho * gap * gap * M);
    pred.bound_modulo_constant = true;
  }
  return pred;
}

TheoryPrediction predict_bn_last_full(const NetSpec& spec, int M, int T,
                                      const std::vector<double>& sigma_k,
                                      const gaussq::QuadratureGrid& grid) {
  require_non_centered(spec, grid, "predict_bn_last_full");
  if (static_cast<int>(sigma_k.size()) != spec.C)
    throw std::invalid_argument("predict_bn_last_full: need C sigma values");
  for (double s : sigma_k)
    if (!(s > 0.0))
      throw std::invalid_argument("predict_bn_last_full: sigma_k must be > 0");
  const KappaPair k = kappas_for(spec, grid);
  const double alpha = spec.alpha_total();
  const double gap = k.kappa1 - k.kappa2;
  double q1 = 0.0, q2 = 0.0;
  for (double s : sigma_k) {
    q1 += 1.0 / (s * s);
    q2 += 1.0 / (s * s * s * s);
  }
  TheoryPrediction pred;
  pred.regime = Regime::bn_last_full_bigT;
  pred.M = M;
  pred.T = T;
  pred.rho = static_cast<double>(M) / T;
  pred.kappa1 = k.kappa1;
  pred.kappa2 = k.kappa2;
  pred.m_lambda = q1 * gap / M;
  pred.lambda_max_lower = pred.rho * alpha * (q2 / q1) * gap;
  pred.lambda_max_upper =
      std::sqrt(q2 * alpha * alpha * pred.rho * gap * gap * M);
  pred.bound_modulo_constant = true;
  return pred;
}

TheoryPrediction predict_bn_middle_lower_bound(const NetSpec& spec, int M,
                                               int T,
                                               const BnOrderParams& bn_params) {
  for (const auto& a : spec.activations)
    if (!a.nonnegative())
      throw DegenerateError(
          "predict_bn_middle_lower_bound: theorem requires non-negative "
          "activation functions");
  if (T <= 2)
    throw DegenerateError("predict_bn_middle_lower_bound: T >= 3 required");
  const double alpha_last = spec.alpha[spec.L - 2];
  const double qt = bn_params.qhat_t_bn.at(spec.L - 2);
  const double qst = bn_params.qhat_st_bn.at(spec.L - 2);
  TheoryPrediction pred;
  pred.regime = Regime::bn_middle_bound;
  pred.M = M;
  pred.T = T;
  pred.rho = static_cast<double>(M) / T;
  pred.lambda_max_lower = alpha_last * ((T - 1.0) / T * qst + qt / T) * M;
  return pred;
}

TheoryPrediction predict_layernorm(const NetSpec& spec, int M, int T,
                                   const LayerNormEtas& etas,
                                   const gaussq::QuadratureGrid& grid) {
  require_non_centered(spec, grid, "predict_layernorm");
  if (spec.C <= 2)
    throw DegenerateError(
        "predict_layernorm: C <= 2 makes the FIM a zero matrix (last-layer "
        "normalization symmetry)");
  OrderParams p = layernorm_order_params(spec, grid);
  const KappaPair k = kappas(spec, p);
  const double alpha = spec.alpha_total();
  const double k1 = k.kappa1, k2 = k.kappa2;
  const double C = spec.C;
  const double s =
      ((etas.eta3 * etas.eta3 - etas.eta1 * etas.eta1) * T +
       (C - 2.0) * (etas.eta1 * etas.eta1 * T - etas.eta2)) /
          T * k2 * k2 +
      (C - 2.0) * etas.eta2 * k1 * k1 / T;
  TheoryPrediction pred;
  pred.regime = Regime::layernorm;
  pred.M = M;
  pred.T = T;
  pred.rho = static_cast<double>(M) / T;
  pred.kappa1 = k1;
  pred.kappa2 = k2;
  pred.m_lambda = (C - 2.0) * etas.eta1 * k1 / M;
  if ((C - 2.0) * etas.eta1 * k1 > 0.0)
    pred.lambda_max_lower = alpha * s * M / ((C - 2.0) * etas.eta1 * k1);
  else
    pred.lambda_max_lower = 0.0;
  pred.lambda_max_upper = alpha * std::sqrt(std::max(0.0, s)) * M;
  return pred;
}

}  // namespace widefim::meanfield
