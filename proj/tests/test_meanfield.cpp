#include <doctest.h>

#include <cmath>
#include <cstring>

#include "meanfield.hpp"
#include "oracles.hpp"

using namespace widefim;
using namespace widefim::meanfield;
using gaussq::default_grid;

namespace {

NetSpec relu_spec(double sw2 = 2.0, double sb2 = 0.0, int L = 3, int C = 1) {
  NetSpec spec;
  spec.L = L;
  spec.alpha.assign(L - 1, 1.0);
  spec.C = C;
  spec.sigma_w2 = sw2;
  spec.sigma_b2 = sb2;
  spec.activations.assign(L - 1, Activation::relu());
  return spec;
}

NetSpec with_act(const Activation& act, double sw2, double sb2, int L = 3,
                 int C = 1) {
  NetSpec spec = relu_spec(sw2, sb2, L, C);
  spec.activations.assign(L - 1, act);
  return spec;
}

OrderParams full_params(const NetSpec& spec) {
  OrderParams p = forward_order_params(spec, default_grid());
  backward_order_params(spec, default_grid(), p);
  return p;
}

}  // namespace

TEST_CASE("arccos kernel endpoints and domain") {
  CHECK(std::abs(arccos_kernel(1.0) - 1.0) < 1e-15);
  CHECK(std::abs(arccos_kernel(-1.0)) < 1e-15);
  CHECK(std::abs(arccos_kernel(0.0) - 1.0 / M_PI) < 1e-15);
  CHECK_THROWS_AS(arccos_kernel(1.5), std::domain_error);
  CHECK_THROWS_AS(arccos_kernel(-1.0000001), std::domain_error);
  for (double x = -1.0; x <= 1.0; x += 0.05) {
    const double j = arccos_kernel(x);
    CHECK(j >= 0.0);
    CHECK(j <= 1.0);
  }
}

TEST_CASE("activation flags and parsing") {
  const auto& grid = default_grid();
  CHECK(Activation::relu().centered(grid) == false);
  CHECK(Activation::sigmoid().centered(grid) == false);
  CHECK(Activation::leaky_relu(0.3).centered(grid) == false);
  CHECK(Activation::tanh().centered(grid) == true);
  CHECK(Activation::erf().centered(grid) == true);
  CHECK(Activation::linear().centered(grid) == true);

  CHECK(Activation::relu().nonnegative());
  CHECK(Activation::sigmoid().nonnegative());
  CHECK_FALSE(Activation::tanh().nonnegative());
  CHECK_FALSE(Activation::leaky_relu(0.2).nonnegative());
  for (auto name : {"relu", "tanh", "sigmoid", "erf", "linear"})
    CHECK(Activation::parse(name).bounded_derivative());

  CHECK(Activation::parse("leaky_relu(0.25)").slope() == 0.25);
  CHECK_THROWS_AS(Activation::parse("swish"), std::invalid_argument);
  CHECK_THROWS_AS(Activation::leaky_relu(1.5), std::invalid_argument);
  CHECK_THROWS_AS(Activation::leaky_relu(0.0), std::invalid_argument);
}

TEST_CASE("closed-form moments agree with the quadrature route") {
  const auto& grid = default_grid();
  for (const auto& act :
       {Activation::relu(), Activation::leaky_relu(0.3), Activation::linear()}) {
    for (double a : {0.5, 1.0, 2.0, 5.0}) {
      CHECK(std::abs(act.moment2(a) - act.moment2_quad(a, grid)) < 1e-9);
      CHECK(std::abs(act.dmoment2(a) - act.dmoment2_quad(a, grid)) < 1e-9);
      for (double frac : {-1.0, -0.5, 0.0, 0.5, 1.0}) {
        CHECK(std::abs(act.cross(a, frac * a) -
                       act.cross_quad(a, frac * a, grid)) < 1e-8);
        CHECK(std::abs(act.dcross(a, frac * a) -
                       act.dcross_quad(a, frac * a, grid)) < 1e-8);
      }
    }
  }
}

TEST_CASE("NetSpec validation and derived quantities") {
  NetSpec spec = relu_spec();
  CHECK_NOTHROW(spec.validate());
  CHECK(spec.alpha_total() == 2.0);
  CHECK(spec.non_centered(default_grid()));

  NetSpec bad = spec;
  bad.L = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = spec;
  bad.C = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = spec;
  bad.alpha = {1.0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = spec;
  bad.alpha = {1.0, -2.0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = spec;
  bad.sigma_w2 = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = spec;
  bad.sigma_b2 = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  CHECK_FALSE(with_act(Activation::linear(), 1.0, 0.0).non_centered(default_grid()));
  CHECK(with_act(Activation::tanh(), 3.0, 0.64).non_centered(default_grid()));
}

TEST_CASE("ReLU forward order parameters match the hand arccos recursion") {
  const NetSpec spec = relu_spec();
  const OrderParams p = forward_order_params(spec, default_grid());
  const oracles::ReluChain chain = oracles::relu_chain(2.0, 3);

  // sw2 = 2 sits at the q/2 fixed point: total activity stays 1.
  for (int l = 0; l <= 2; ++l) {
    CHECK(std::abs(p.qhat_t[l] - 1.0) < 1e-12);
    CHECK(std::abs(p.qhat_t[l] - chain.qhat_t[l]) < 1e-12);
    CHECK(std::abs(p.qhat_st[l] - chain.qhat_st[l]) < 1e-12);
  }
  CHECK(std::abs(p.qhat_st[1] - 1.0 / M_PI) < 1e-12);
  // Spec quotes ~0.49371 for layer 2; the recursion evaluates to 0.4937389.
  CHECK(std::abs(p.qhat_st[2] - 0.49371) < 5e-5);
  CHECK(std::abs(p.qhat_st[2] - chain.qhat_st[2]) < 1e-12);
}

TEST_CASE("centered linear network propagates zero overlap") {
  const NetSpec spec = with_act(Activation::linear(), 1.0, 0.0);
  const OrderParams p = forward_order_params(spec, default_grid());
  for (int l = 0; l <= spec.L; ++l) CHECK(std::abs(p.qhat_st[l]) < 1e-15);
}

TEST_CASE("ReLU backward order parameters match the hand recursion") {
  const NetSpec spec = relu_spec();
  const OrderParams p = full_params(spec);
  const oracles::ReluChain chain = oracles::relu_chain(2.0, 3);
  CHECK(p.qtilde_t[3] == 1.0);
  CHECK(p.qtilde_st[3] == 1.0);
  for (int l = 1; l <= 3; ++l) {
    CHECK(std::abs(p.qtilde_t[l] - 1.0) < 1e-12);
    CHECK(std::abs(p.qtilde_t[l] - chain.qtilde_t[l - 1]) < 1e-12);
    CHECK(std::abs(p.qtilde_st[l] - chain.qtilde_st[l - 1]) < 1e-12);
  }
  CHECK(std::abs(p.qtilde_st[2] - 0.60312) < 5e-5);
  CHECK(std::abs(p.qtilde_st[1] - 0.30156) < 5e-5);
}

TEST_CASE("kappa sums for the reference ReLU network") {
  const NetSpec spec = relu_spec();
  const KappaPair k = kappas(spec, full_params(spec));
  const auto [ok1, ok2] = oracles::relu_kappas(2.0, 3);
  CHECK(std::abs(k.kappa1 - 1.5) < 1e-12);
  CHECK(std::abs(k.kappa1 - ok1) < 1e-12);
  CHECK(std::abs(k.kappa2 - ok2) < 1e-12);
  CHECK(std::abs(k.kappa2 - 0.34285) < 5e-5);
  CHECK_FALSE(k.centered_warning);

  const NetSpec centered = with_act(Activation::linear(), 1.0, 0.0);
  const KappaPair kc = kappas(centered, full_params(centered));
  CHECK(kc.kappa2 == 0.0);
  CHECK(kc.centered_warning);
}

TEST_CASE("centered kill-switch holds for tanh and erf without biases") {
  for (const auto& act : {Activation::tanh(), Activation::erf()}) {
    const NetSpec spec = with_act(act, 1.7, 0.0);
    const KappaPair k = kappas(spec, full_params(spec));
    CHECK(std::abs(k.kappa2) < 1e-12);
    CHECK(k.centered_warning);
  }
}

TEST_CASE("monotone overlap qhat_st <= qhat_t and kappa1 > kappa2") {
  for (const NetSpec& spec :
       {relu_spec(2.0, 0.0), with_act(Activation::tanh(), 3.0, 0.64),
        with_act(Activation::sigmoid(), 1.5, 0.2, 4),
        with_act(Activation::leaky_relu(0.1), 2.0, 0.05)}) {
    OrderParams p = forward_order_params(spec, default_grid());
    for (int l = 0; l <= spec.L; ++l) {
      CHECK(p.qhat_st[l] <= p.qhat_t[l] + 1e-12);
      CHECK(p.qhat_st[l] >= -1e-12);
    }
    backward_order_params(spec, default_grid(), p);
    const KappaPair k = kappas(spec, p);
    CHECK(k.kappa1 > k.kappa2);
    CHECK(k.kappa2 > 0.0);
  }
}

TEST_CASE("order parameters are bitwise deterministic") {
  const NetSpec spec = with_act(Activation::tanh(), 3.0, 0.64);
  const OrderParams a = full_params(spec);
  const OrderParams b = full_params(spec);
  REQUIRE(a.qhat_st.size() == b.qhat_st.size());
  CHECK(std::memcmp(a.qhat_st.data(), b.qhat_st.data(),
                    a.qhat_st.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(a.qtilde_st.data(), b.qtilde_st.data(),
                    a.qtilde_st.size() * sizeof(double)) == 0);
}

TEST_CASE("quadrature path reproduces the arccosine closed form per layer") {
  const NetSpec spec = relu_spec();
  const OrderParams p = forward_order_params(spec, default_grid());
  const Activation relu = Activation::relu();
  for (int l = 1; l <= spec.L - 1; ++l) {
    const double quad = relu.cross_quad(p.q_t[l], p.q_st[l], default_grid());
    const double closed =
        0.5 * p.q_t[l] * arccos_kernel(p.q_st[l] / p.q_t[l]);
    CHECK(std::abs(quad - closed) < 1e-6);
    CHECK(std::abs(p.qhat_st[l] - closed) < 1e-9);
  }
}

TEST_CASE("predict_unnormalized reproduces the plug-in values") {
  const NetSpec spec = relu_spec();
  const auto pred = predict_unnormalized(spec, 1000, 1000, default_grid());
  const auto [k1, k2] = oracles::relu_kappas(2.0, 3);
  const double expected = 2.0 * (999.0 / 1000.0 * k2 + k1 / 1000.0) * 1000.0;
  CHECK(std::abs(*pred.lambda_max_point - expected) < 1e-9);
  CHECK(std::abs(*pred.lambda_max_point - 688.1) < 0.5);  // plug-in value
  CHECK(std::abs(*pred.m_lambda - 0.0015) < 1e-12);

  const auto t1 = predict_unnormalized(spec, 512, 1, default_grid());
  CHECK(std::abs(*t1.lambda_max_point - 2.0 * k1 * 512.0) < 1e-9);

  const NetSpec centered = with_act(Activation::linear(), 1.0, 0.0);
  CHECK_THROWS_AS(predict_unnormalized(centered, 64, 64, default_grid()),
                  DegenerateError);
}

TEST_CASE("predict_bn_last_meansub covers both T regimes") {
  const NetSpec spec = relu_spec();
  const auto [k1, k2] = oracles::relu_kappas(2.0, 3);
  const double gap = k1 - k2;

  const auto big = predict_bn_last_meansub(spec, 512, 512, TScaling::big_T,
                                           default_grid());
  CHECK(std::abs(*big.lambda_max_lower - 2.0 * gap) < 1e-9);
  CHECK(std::abs(*big.lambda_max_lower - 2.3143) < 5e-4);
  CHECK(std::abs(*big.lambda_max_upper -
                 std::sqrt(4.0 * 1.0 * gap * gap * 512.0)) < 1e-9);
  CHECK(big.bound_modulo_constant);

  const auto small = predict_bn_last_meansub(spec, 4096, 8, TScaling::small_T,
                                             default_grid());
  CHECK(std::abs(*small.lambda_max_point - 2.0 * gap * 4096.0 / 8.0) < 1e-6);
  CHECK(std::abs(*small.lambda_max_point - 1184.9) < 0.1);

  const auto t2 = predict_bn_last_meansub(spec, 128, 2, TScaling::small_T,
                                          default_grid());
  CHECK(std::abs(*t2.m_lambda - 0.5 * gap / 128.0) < 1e-12);
  CHECK_THROWS_AS(
      predict_bn_last_meansub(spec, 128, 1, TScaling::small_T, default_grid()),
      std::invalid_argument);
}

TEST_CASE("predict_bn_last_full reduces to mean subtraction at sigma = 1") {
  const NetSpec spec = relu_spec();
  const auto full = predict_bn_last_full(spec, 256, 256, {1.0}, default_grid());
  const auto ms = predict_bn_last_meansub(spec, 256, 256, TScaling::big_T,
                                          default_grid());
  CHECK(std::abs(*full.lambda_max_lower - *ms.lambda_max_lower) < 1e-12);
  CHECK(std::abs(*full.lambda_max_upper - *ms.lambda_max_upper) < 1e-12);

  // C = 2, sigma = {1, 2}: Q1 = 1.25, Q2 = 1.0625.
  const NetSpec spec2 = relu_spec(2.0, 0.0, 3, 2);
  const auto [k1, k2] = oracles::relu_kappas(2.0, 3);
  const auto p2 =
      predict_bn_last_full(spec2, 256, 256, {1.0, 2.0}, default_grid());
  CHECK(std::abs(*p2.m_lambda - 1.25 * (k1 - k2) / 256.0) < 1e-12);
  CHECK(std::abs(*p2.lambda_max_lower -
                 1.0 * 2.0 * (1.0625 / 1.25) * (k1 - k2)) < 1e-12);

  const auto p3 =
      predict_bn_last_full(spec, 256, 256, {std::sqrt(2.0)}, default_grid());
  CHECK(std::abs(*p3.lambda_max_lower - 1.1571) < 5e-4);

  CHECK_THROWS_AS(predict_bn_last_full(spec, 256, 256, {0.0}, default_grid()),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      predict_bn_last_full(spec, 256, 256, {1.0, 1.0}, default_grid()),
      std::invalid_argument);
}

TEST_CASE("bn_middle order parameters: ReLU closed form") {
  const NetSpec spec = relu_spec();
  const auto bn = bn_middle_order_params(spec, 100, 10000, 7);
  REQUIRE(bn.qhat_t_bn.size() == 2);
  for (double v : bn.qhat_t_bn) CHECK(v == 0.5);
  const double expected = 0.5 * oracles::arccos_J(-1.0 / 99.0);
  for (double v : bn.qhat_st_bn) CHECK(std::abs(v - expected) < 1e-12);
  CHECK(std::abs(expected - 0.15663) < 1e-5);

  // Large T tends to J(0)/2 = 1/(2 pi).
  const auto big = bn_middle_order_params(spec, 10000, 10000, 7);
  CHECK(std::abs(big.qhat_st_bn[0] - 1.0 / (2.0 * M_PI)) < 1e-3);
  CHECK(std::abs(big.qhat_st_bn[0] - 1.0 / (2.0 * M_PI)) <
        std::abs(bn.qhat_st_bn[0] - 1.0 / (2.0 * M_PI)));

  CHECK_THROWS_AS(bn_middle_order_params(spec, 2, 10000, 7), DegenerateError);
  CHECK_THROWS_AS(bn_middle_order_params(spec, 100, 100, 7),
                  std::invalid_argument);
}

TEST_CASE("bn_middle Monte Carlo path against exact linear values") {
  // Linear activation after batch standardization: qhat_t = 1 exactly and
  // qhat_st = -1/(T-1) by the zero-sum constraint.
  const int T = 50;
  const NetSpec spec = with_act(Activation::linear(), 1.0, 0.0);
  const auto bn = bn_middle_order_params(spec, T, 200000, 99);
  for (double v : bn.qhat_t_bn) CHECK(std::abs(v - 1.0) < 5e-3);
  for (double v : bn.qhat_st_bn) CHECK(std::abs(v - (-1.0 / (T - 1))) < 5e-3);
  // Deterministic given (seed, sample count).
  const auto again = bn_middle_order_params(spec, T, 200000, 99);
  CHECK(bn.qhat_st_bn == again.qhat_st_bn);
}

TEST_CASE("predict_bn_middle_lower_bound plug-ins and preconditions") {
  const NetSpec spec = relu_spec();
  const auto bn = bn_middle_order_params(spec, 100, 10000, 7);
  const auto pred = predict_bn_middle_lower_bound(spec, 512, 100, bn);
  const double expected =
      (99.0 / 100.0 * 0.5 * oracles::arccos_J(-1.0 / 99.0) + 0.5 / 100.0) *
      512.0;
  CHECK(std::abs(*pred.lambda_max_lower - expected) < 1e-9);
  CHECK(std::abs(*pred.lambda_max_lower - 81.9) < 0.1);
  CHECK_FALSE(pred.lambda_max_upper.has_value());

  const auto pred2 = predict_bn_middle_lower_bound(spec, 1024, 100, bn);
  CHECK(std::abs(*pred2.lambda_max_lower - 2.0 * *pred.lambda_max_lower) <
        1e-9);

  const auto bn3 = bn_middle_order_params(spec, 3, 10000, 7);
  CHECK(std::abs(bn3.qhat_st_bn[0] - 0.5 * oracles::arccos_J(-0.5)) < 1e-12);

  const NetSpec neg = with_act(Activation::tanh(), 3.0, 0.64);
  CHECK_THROWS_AS(predict_bn_middle_lower_bound(neg, 512, 100, bn),
                  DegenerateError);
}

TEST_CASE("layer-norm order parameters pin the normalized variance") {
  const auto& grid = default_grid();
  for (double sw2 : {0.5, 2.0, 10.0}) {
    const NetSpec spec = relu_spec(sw2, 0.0);
    const OrderParams p = layernorm_order_params(spec, grid);
    for (int l = 1; l <= spec.L - 1; ++l)
      CHECK(std::abs(p.qhat_t[l] - 0.5) < 1e-12);
  }
  const NetSpec tspec = with_act(Activation::tanh(), 3.0, 0.0);
  const OrderParams tp = layernorm_order_params(tspec, grid);
  const double tanh_m2 = gaussq::expect1(
      [](double u) {
        const double t = std::tanh(u);
        return t * t;
      },
      1.0, gaussq::build_grid(201));
  CHECK(std::abs(tp.qhat_t[1] - tanh_m2) < 1e-9);
  CHECK(std::abs(tanh_m2 - 0.39429) < 1e-5);
  for (int l = 0; l <= tspec.L; ++l) CHECK(std::abs(tp.qhat_st[l]) < 1e-12);
}

TEST_CASE("predict_layernorm formula, degeneracies and the T-limit") {
  NetSpec spec = relu_spec(2.0, 0.0, 3, 4);
  spec.norm_mode = NormMode::layernorm;
  LayerNormEtas etas{0.7, 0.6, 0.65};
  const auto pred = predict_layernorm(spec, 256, 100, etas, default_grid());
  CHECK(*pred.m_lambda ==
        doctest::Approx((4.0 - 2.0) * 0.7 * pred.kappa1 / 256.0)
            .epsilon(1e-12));
  CHECK(*pred.lambda_max_lower <= *pred.lambda_max_upper);

  NetSpec c2 = relu_spec(2.0, 0.0, 3, 2);
  c2.norm_mode = NormMode::layernorm;
  CHECK_THROWS_AS(predict_layernorm(c2, 256, 100, etas, default_grid()),
                  DegenerateError);

  LayerNormEtas zero{0.0, 0.0, 0.0};
  const auto pz = predict_layernorm(spec, 256, 100, zero, default_grid());
  CHECK(*pz.m_lambda == 0.0);
  CHECK(*pz.lambda_max_upper == 0.0);

  // C = 3, eta3 = eta1, large T: s -> eta1^2 kappa2'^2 and the lower bound
  // tends to alpha eta1 kappa2'^2 / kappa1' * M.
  NetSpec c3 = relu_spec(2.0, 0.0, 3, 3);
  c3.norm_mode = NormMode::layernorm;
  LayerNormEtas lim{0.8, 0.64, 0.8};
  const int bigT = 1000000;
  const auto pl = predict_layernorm(c3, 256, bigT, lim, default_grid());
  const double limit =
      2.0 * lim.eta1 * pl.kappa2 * pl.kappa2 / pl.kappa1 * 256.0;
  CHECK(std::abs(*pl.lambda_max_lower - limit) < 1e-3 * limit);
}

TEST_CASE("bound ordering holds across (M, T) grids") {
  const NetSpec spec = relu_spec();
  for (int M : {64, 256, 1024, 4096}) {
    for (int T : {8, 64, M}) {
      const auto ms = predict_bn_last_meansub(spec, M, T, TScaling::big_T,
                                              default_grid());
      CHECK(*ms.lambda_max_lower <= *ms.lambda_max_upper + 1e-12);
      const auto full = predict_bn_last_full(spec, M, T, {1.3}, default_grid());
      CHECK(*full.lambda_max_lower <= *full.lambda_max_upper + 1e-12);
    }
  }
}

TEST_CASE("mean subtraction alleviates sharpness as M grows at rho = 1") {
  const NetSpec spec = relu_spec();
  double prev_ratio = 1e300;
  for (int M = 64; M <= 16384; M *= 2) {
    const auto un = predict_unnormalized(spec, M, M, default_grid());
    const auto ms = predict_bn_last_meansub(spec, M, M, TScaling::big_T,
                                            default_grid());
    const double ratio = *ms.lambda_max_upper / *un.lambda_max_point;
    CHECK(ratio < prev_ratio);
    prev_ratio = ratio;
  }
  const auto un64 = predict_unnormalized(spec, 64, 64, default_grid());
  const auto ms64 =
      predict_bn_last_meansub(spec, 64, 64, TScaling::big_T, default_grid());
  const auto un16k = predict_unnormalized(spec, 16384, 16384, default_grid());
  const auto ms16k = predict_bn_last_meansub(spec, 16384, 16384,
                                             TScaling::big_T, default_grid());
  CHECK(*ms16k.lambda_max_upper / *un16k.lambda_max_point <
        0.1 * (*ms64.lambda_max_upper / *un64.lambda_max_point));
}

TEST_CASE("general-q order exponents") {
  const auto q14 = meansub_order_exponents(0.25);
  CHECK(q14.q_star == 0.25);
  CHECK(q14.lower_exponent == 0.5);
  CHECK(q14.upper_exponent == 0.75);
  const auto q1 = meansub_order_exponents(1.0);
  CHECK(q1.q_star == 0.5);
  CHECK(q1.lower_exponent == 0.0);
  CHECK(q1.upper_exponent == 0.5);
  CHECK_THROWS_AS(meansub_order_exponents(0.0), std::invalid_argument);
}
