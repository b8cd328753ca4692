#include <doctest.h>

#include <cmath>
#include <cstring>

#include "netlab.hpp"
#include "oracles.hpp"
#include "rng.hpp"

using namespace widefim;
using namespace widefim::netlab;
using meanfield::Activation;
using meanfield::NetSpec;
using meanfield::NormMode;

namespace {

NetSpec make_spec(const Activation& act, double sw2, double sb2, int L, int C,
                  NormMode mode = NormMode::none) {
  NetSpec spec;
  spec.L = L;
  spec.alpha.assign(L - 1, 1.0);
  spec.C = C;
  spec.sigma_w2 = sw2;
  spec.sigma_b2 = sb2;
  spec.activations.assign(L - 1, act);
  spec.norm_mode = mode;
  return spec;
}

// Parameter-vector layout used by JacobianBlock: per layer, vec(W) in
// column-major order, then b.
void apply_delta(Params& params, const Eigen::VectorXd& delta) {
  long long off = 0;
  for (int l = 1; l <= params.spec.L; ++l) {
    for (long long i = 0; i < params.W[l].size(); ++i)
      params.W[l].data()[i] += delta(off++);
    for (long long i = 0; i < params.b[l].size(); ++i)
      params.b[l](i) += delta(off++);
  }
  REQUIRE(off == params.param_count());
}

}  // namespace

TEST_CASE("init_params determinism, shapes and moment concentration") {
  const NetSpec spec = make_spec(Activation::relu(), 2.0, 0.5, 3, 2);
  const Params a = init_params(spec, 100, 42);
  const Params b = init_params(spec, 100, 42);
  REQUIRE(a.widths == std::vector<int>({100, 100, 100, 2}));
  for (int l = 1; l <= 3; ++l) {
    CHECK(std::memcmp(a.W[l].data(), b.W[l].data(),
                      sizeof(double) * a.W[l].size()) == 0);
    CHECK(std::memcmp(a.b[l].data(), b.b[l].data(),
                      sizeof(double) * a.b[l].size()) == 0);
  }
  const Params c = init_params(spec, 100, 43);
  CHECK(a.W[1] != c.W[1]);

  // Var(W) = sw2 / fan-in within the chi-square band at 1e6 entries.
  const Params big =
      init_params(make_spec(Activation::relu(), 2.0, 0.0, 2, 1), 1000, 7);
  const double var = big.W[1].array().square().mean();
  CHECK(var > 0.002 * 0.85);
  CHECK(var < 0.002 * 1.15);
  CHECK(big.b[1].cwiseAbs().maxCoeff() == 0.0);  // sb2 = 0 -> biases exactly 0

  // Bias variance within 5 standard errors (chi-square).
  const Params bias =
      init_params(make_spec(Activation::relu(), 2.0, 0.7, 2, 1), 4096, 11);
  const double bvar = bias.b[1].array().square().mean();
  CHECK(std::abs(bvar - 0.7) < 5.0 * 0.7 * std::sqrt(2.0 / 4096.0));
}

TEST_CASE("fractional width ratios round to the nearest unit") {
  NetSpec spec = make_spec(Activation::relu(), 2.0, 0.0, 3, 1);
  spec.alpha = {0.5, 2.0};
  CHECK(layer_widths(spec, 101) == std::vector<int>({101, 51, 202, 1}));
  spec.alpha0 = 0.25;
  CHECK(layer_widths(spec, 8) == std::vector<int>({2, 4, 16, 1}));
  spec.alpha = {0.001, 2.0};
  CHECK(layer_widths(spec, 10)[1] == 1);  // clamped to >= 1
}

TEST_CASE("make_batch draws a standard-normal input matrix") {
  const NetSpec spec = make_spec(Activation::relu(), 2.0, 0.0, 2, 1);
  const Batch batch = make_batch(spec, 300, 400, 5);
  REQUIRE(batch.X.rows() == 300);
  REQUIRE(batch.X.cols() == 400);
  const double n = 300.0 * 400.0;
  CHECK(std::abs(batch.X.mean()) < 5.0 / std::sqrt(n));
  CHECK(std::abs(batch.X.array().square().mean() - 1.0) <
        5.0 * std::sqrt(2.0 / n));
  const Batch again = make_batch(spec, 300, 400, 5);
  CHECK(batch.X == again.X);
}

TEST_CASE("hand-checkable tiny linear net") {
  NetSpec spec = make_spec(Activation::linear(), 1.0, 0.0, 2, 1);
  Params p = init_params(spec, 3, 1);
  p.W[1] << 1, 0, 0, 0, 1, 0, 0, 0, 1;  // identity hidden layer
  p.W[2] << 2, -1, 0.5;
  p.b[1].setZero();
  p.b[2].setZero();
  Batch batch;
  batch.X.resize(3, 2);
  batch.X << 1, 0, 2, 1, 3, -1;
  const ForwardTrace tr = forward(p, batch, NormMode::none);
  CHECK(std::abs(tr.F(0, 0) - (2.0 * 1 - 1.0 * 2 + 0.5 * 3)) < 1e-14);
  CHECK(std::abs(tr.F(0, 1) - (2.0 * 0 - 1.0 * 1 + 0.5 * -1)) < 1e-14);
}

TEST_CASE("forward normalization invariants per mode") {
  const int M = 64, T = 32;
  SUBCASE("bn_middle: per-unit batch mean 0, variance 1") {
    const NetSpec spec =
        make_spec(Activation::relu(), 2.0, 0.3, 3, 2, NormMode::bn_middle);
    const ForwardTrace tr = forward(
        init_params(spec, M, 3), make_batch(spec, M, T, 4), NormMode::bn_middle);
    for (int l = 1; l <= 2; ++l) {
      const Eigen::VectorXd mean = tr.Ubar[l].rowwise().mean();
      CHECK(mean.cwiseAbs().maxCoeff() < 1e-9);
      const Eigen::VectorXd var = tr.Ubar[l].array().square().rowwise().mean();
      CHECK((var.array() - 1.0).abs().maxCoeff() < 1e-9);
    }
  }
  SUBCASE("layernorm: per-sample mean 0, variance 1, including the readout") {
    const NetSpec spec =
        make_spec(Activation::tanh(), 3.0, 0.64, 3, 4, NormMode::layernorm);
    const ForwardTrace tr = forward(
        init_params(spec, M, 3), make_batch(spec, M, T, 4), NormMode::layernorm);
    for (int l = 1; l <= 3; ++l) {
      const Eigen::RowVectorXd mean = tr.Ubar[l].colwise().mean();
      CHECK(mean.cwiseAbs().maxCoeff() < 1e-9);
      const Eigen::RowVectorXd var =
          tr.Ubar[l].array().square().colwise().mean();
      CHECK((var.array() - 1.0).abs().maxCoeff() < 1e-9);
    }
  }
  SUBCASE("bn_last modes: output rows centered, full mode unit variance") {
    const NetSpec spec = make_spec(Activation::relu(), 2.0, 0.1, 3, 3);
    const Params p = init_params(spec, M, 3);
    const Batch batch = make_batch(spec, M, T, 4);
    const ForwardTrace ms = forward(p, batch, NormMode::bn_last_meansub);
    CHECK(ms.F.rowwise().mean().cwiseAbs().maxCoeff() < 1e-9);
    const ForwardTrace full = forward(p, batch, NormMode::bn_last_full);
    CHECK(full.F.rowwise().mean().cwiseAbs().maxCoeff() < 1e-9);
    const Eigen::VectorXd var = full.F.array().square().rowwise().mean();
    CHECK((var.array() - 1.0).abs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("forward activity concentrates on the mean-field value") {
  const NetSpec spec = make_spec(Activation::relu(), 2.0, 0.0, 3, 1);
  const int M = 2048;
  const Params p = init_params(spec, M, 9);
  const Batch batch = make_batch(spec, M, 64, 10);
  const ForwardTrace tr = forward(p, batch, NormMode::none);
  const auto ef = empirical_forward_order_params(p, tr);
  CHECK(std::abs(ef.qhat_M_t[1] - 1.0) < 0.1);
  CHECK(std::abs(ef.qhat_M_t[2] - 1.0) < 0.1);
  // Lemma A.1 step: overlap concentration within 3/sqrt(M).
  const oracles::ReluChain chain = oracles::relu_chain(2.0, 3);
  CHECK(std::abs(ef.qhat_M_st[1] - chain.qhat_st[1]) < 3.0 / std::sqrt(M));
  CHECK(std::abs(ef.qhat_M_st[2] - chain.qhat_st[2]) < 3.0 / std::sqrt(M));
}

TEST_CASE("degenerate normalization raises with location info") {
  const NetSpec spec =
      make_spec(Activation::relu(), 2.0, 0.0, 3, 1, NormMode::bn_middle);
  const Params p = init_params(spec, 8, 3);
  Batch batch = make_batch(spec, 8, 4, 4);
  batch.X = batch.X.col(0).replicate(1, 4).eval();  // constant batch
  CHECK_THROWS_AS(forward(p, batch, NormMode::bn_middle), DegenerateError);

  NetSpec ln = make_spec(Activation::relu(), 2.0, 0.0, 2, 2, NormMode::layernorm);
  Params lp = init_params(ln, 8, 3);
  lp.W[1].setZero();
  lp.b[1].setZero();  // constant layer output across units
  const Batch lb = make_batch(ln, 8, 4, 4);
  CHECK_THROWS_AS(forward(lp, lb, NormMode::layernorm), DegenerateError);

  Batch single;
  single.X = batch.X.leftCols(1);
  CHECK_THROWS_AS(forward(p, single, NormMode::bn_middle),
                  DegenerateError);  // T = 1 under a bn mode
  const NetSpec c1 =
      make_spec(Activation::relu(), 2.0, 0.0, 2, 1, NormMode::layernorm);
  CHECK_THROWS_AS(forward(init_params(c1, 8, 3), make_batch(c1, 8, 4, 4),
                          NormMode::layernorm),
                  DegenerateError);  // C = 1 layer norm
}

TEST_CASE("gamma rescales bn_last outputs") {
  const NetSpec spec = make_spec(Activation::relu(), 2.0, 0.1, 3, 2);
  const Params p = init_params(spec, 32, 5);
  const Batch batch = make_batch(spec, 32, 16, 6);
  Eigen::VectorXd gamma(2);
  gamma << 2.0, 3.0;
  const ForwardTrace base = forward(p, batch, NormMode::bn_last_full);
  const ForwardTrace scaled =
      forward(p, batch, NormMode::bn_last_full, 0.0, &gamma);
  CHECK((scaled.F.row(0) - 2.0 * base.F.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((scaled.F.row(1) - 3.0 * base.F.row(1)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("jacobian columns assemble delta * h for the plain chain") {
  const NetSpec spec = make_spec(Activation::tanh(), 1.5, 0.2, 2, 1);
  const Params p = init_params(spec, 2, 8);
  Batch batch = make_batch(spec, 2, 3, 9);
  const ForwardTrace tr = forward(p, batch, NormMode::none);
  const JacobianBlock jb = jacobian(p, batch, NormMode::none);
  const double sqrt_T = std::sqrt(3.0);
  // Hand chain rule on the 2-2-1 net: d f / d W^2_j = h^1_j,
  // d f / d W^1_{ij} = W^2_i phi'(u^1_i) x_j, d f / d b^1_i = W^2_i phi'(u^1_i).
  for (int t = 0; t < 3; ++t) {
    Eigen::VectorXd expected(p.param_count());
    int off = 0;
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 2; ++i) {
        const double th = std::tanh(tr.U[1](i, t));
        expected(off++) = p.W[2](0, i) * (1.0 - th * th) * batch.X(j, t);
      }
    for (int i = 0; i < 2; ++i) {
      const double th = std::tanh(tr.U[1](i, t));
      expected(off++) = p.W[2](0, i) * (1.0 - th * th);
    }
    for (int j = 0; j < 2; ++j) expected(off++) = tr.H[1](j, t);
    expected(off++) = 1.0;
    REQUIRE(off == p.param_count());
    CHECK((jb.R.col(t) * sqrt_T - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("jacobian matches central finite differences in every mode") {
  const double eps = 1e-5;
  SUBCASE("smooth activations, all modes") {
    for (NormMode mode :
         {NormMode::none, NormMode::bn_last_meansub, NormMode::bn_last_full,
          NormMode::bn_middle, NormMode::layernorm}) {
      const NetSpec spec = make_spec(Activation::tanh(), 1.8, 0.3, 3, 3, mode);
      const Params p = init_params(spec, 8, 21);
      const Batch batch = make_batch(spec, 8, 5, 22);
      CHECK(finite_diff_check(p, batch, mode, eps) < 1e-5);
    }
  }
  SUBCASE("relu, plain mode, tighter floor") {
    const NetSpec spec = make_spec(Activation::relu(), 2.0, 0.1, 3, 3);
    const Params p = init_params(spec, 8, 23);
    const Batch batch = make_batch(spec, 8, 5, 24);
    CHECK(finite_diff_check(p, batch, NormMode::none, eps) < 1e-6);
  }
  SUBCASE("relu, batch-coupled modes") {
    const NetSpec spec =
        make_spec(Activation::relu(), 2.0, 0.1, 3, 3, NormMode::bn_middle);
    const Params p = init_params(spec, 8, 25);
    const Batch batch = make_batch(spec, 8, 5, 26);
    CHECK(finite_diff_check(p, batch, NormMode::bn_middle, eps) < 1e-5);
    CHECK(finite_diff_check(p, batch, NormMode::bn_last_full, eps) < 1e-5);
  }
  SUBCASE("sigmoid, layer norm with a positive normalization epsilon") {
    const NetSpec spec =
        make_spec(Activation::sigmoid(), 2.5, 0.2, 3, 4, NormMode::layernorm);
    const Params p = init_params(spec, 6, 27);
    const Batch batch = make_batch(spec, 6, 4, 28);
    CHECK(finite_diff_check(p, batch, NormMode::layernorm, eps, 1e-4) < 1e-5);
  }
}

TEST_CASE("first-order Taylor expansion along random directions") {
  const NetSpec spec = make_spec(Activation::tanh(), 1.5, 0.2, 3, 2);
  const Params p = init_params(spec, 10, 31);
  const Batch batch = make_batch(spec, 10, 6, 32);
  const JacobianBlock jb = jacobian(p, batch, NormMode::none);
  const Matrix f0 = forward(p, batch, NormMode::none).F;
  const double sqrt_T = std::sqrt(6.0);

  rng::GaussianStream gs(991);
  Eigen::VectorXd v(p.param_count());
  for (long long i = 0; i < v.size(); ++i) v(i) = gs.next();
  v.normalize();

  auto remainder = [&](double eps) {
    Params pert = p;
    apply_delta(pert, eps * v);
    const Matrix f1 = forward(pert, batch, NormMode::none).F;
    double worst = 0.0;
    for (int k = 0; k < jb.C; ++k)
      for (int t = 0; t < jb.T; ++t) {
        const double lin = eps * sqrt_T * jb.R.col(k * jb.T + t).dot(v);
        worst = std::max(worst, std::abs(f1(k, t) - f0(k, t) - lin));
      }
    return worst;
  };
  const double r1 = remainder(1e-3);
  const double r2 = remainder(5e-4);
  CHECK(r1 < 1e-4);
  CHECK(r2 < 0.3 * r1);  // contracts like eps^2
}

TEST_CASE("mean-subtraction Jacobian equals the G-projected plain Jacobian") {
  const NetSpec spec = make_spec(Activation::relu(), 2.0, 0.1, 3, 2);
  const Params p = init_params(spec, 12, 41);
  const Batch batch = make_batch(spec, 12, 7, 42);
  const JacobianBlock plain = jacobian(p, batch, NormMode::none);
  const JacobianBlock ms = jacobian(p, batch, NormMode::bn_last_meansub);
  const int T = 7;
  const Matrix G = Matrix::Identity(T, T) - Matrix::Constant(T, T, 1.0 / T);
  for (int k = 0; k < 2; ++k) {
    const Matrix expected = plain.R.middleCols(k * T, T) * G;
    CHECK((ms.R.middleCols(k * T, T) - expected).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("layer-norm C=2 and bn_last_full T=2 degeneracies zero the Jacobian") {
  const NetSpec ln =
      make_spec(Activation::relu(), 2.0, 0.2, 3, 2, NormMode::layernorm);
  const Params lp = init_params(ln, 16, 51);
  const Batch lb = make_batch(ln, 16, 9, 52);
  CHECK(jacobian(lp, lb, NormMode::layernorm).R.cwiseAbs().maxCoeff() < 1e-12);

  const NetSpec bn = make_spec(Activation::relu(), 2.0, 0.2, 3, 3);
  const Params bp = init_params(bn, 16, 53);
  const Batch bb = make_batch(bn, 16, 2, 54);
  CHECK(jacobian(bp, bb, NormMode::bn_last_full).R.cwiseAbs().maxCoeff() <
        1e-12);
}

TEST_CASE("ReLU positive homogeneity and bn_last_full scale invariance") {
  const NetSpec spec = make_spec(Activation::relu(), 2.0, 0.0, 3, 2);
  const Params p = init_params(spec, 24, 61);
  Batch batch = make_batch(spec, 24, 10, 62);
  const Matrix base = forward(p, batch, NormMode::none).F;
  const Matrix base_full = forward(p, batch, NormMode::bn_last_full).F;
  Batch scaled = batch;
  scaled.X *= 3.5;
  const Matrix out = forward(p, scaled, NormMode::none).F;
  CHECK((out - 3.5 * base).cwiseAbs().maxCoeff() < 1e-9);
  const Matrix out_full = forward(p, scaled, NormMode::bn_last_full).F;
  CHECK((out_full - base_full).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("bn_middle Jacobian is schedule-independent") {
  const NetSpec spec =
      make_spec(Activation::relu(), 2.0, 0.1, 3, 2, NormMode::bn_middle);
  const Params p = init_params(spec, 12, 71);
  const Batch batch = make_batch(spec, 12, 6, 72);
  const JacobianBlock one =
      jacobian(p, batch, NormMode::bn_middle, 0.0, nullptr, 1);
  const JacobianBlock four =
      jacobian(p, batch, NormMode::bn_middle, 0.0, nullptr, 4);
  CHECK(one.R == four.R);
}

TEST_CASE("empirical backward order parameters") {
  // Single hidden layer, C = 1: the readout sensitivity is the one-hot, so
  // qtilde at the top layer is exactly 1.
  const NetSpec shallow = make_spec(Activation::relu(), 2.0, 0.0, 2, 1);
  const Params sp = init_params(shallow, 64, 81);
  const Batch sb = make_batch(shallow, 64, 12, 82);
  const auto seb = empirical_backward_order_params(sp, sb);
  CHECK(seb.qtilde_M_t[2] == 1.0);

  const NetSpec spec = make_spec(Activation::relu(), 2.0, 0.0, 3, 1);
  const int M = 4096;
  const auto eb = empirical_backward_order_params(init_params(spec, M, 83),
                                                  make_batch(spec, M, 50, 84));
  CHECK(std::abs(eb.qtilde_M_t[1] - 1.0) < 0.1);

  // Fluctuations shrink like 1/sqrt(M): quadrupling M twice roughly
  // quarters the ensemble spread of qtilde^1_st.
  auto spread = [&](int m, int members) {
    std::vector<double> xs;
    for (int j = 0; j < members; ++j) {
      const auto r = empirical_backward_order_params(
          init_params(spec, m, 1000 + j), make_batch(spec, m, 50, 2000 + j));
      xs.push_back(r.qtilde_M_st[1]);
    }
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= xs.size();
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / (xs.size() - 1));
  };
  const double s64 = spread(64, 30);
  const double s1024 = spread(1024, 30);
  const double ratio = s64 / s1024;  // expect ~4
  CHECK(ratio > 2.0);
  CHECK(ratio < 8.0);
}

TEST_CASE("loss gradient matches finite differences in every mode") {
  for (NormMode mode :
       {NormMode::none, NormMode::bn_last_meansub, NormMode::bn_last_full,
        NormMode::bn_middle, NormMode::layernorm}) {
    const NetSpec spec = make_spec(Activation::tanh(), 1.8, 0.3, 3, 3, mode);
    Params p = init_params(spec, 7, 91);
    const Batch batch = make_batch(spec, 7, 5, 92);
    Matrix Y = Matrix::Ones(3, 5);
    const LossGrad lg = loss_gradient(p, batch, Y, mode);
    auto loss_at = [&](Params& q) {
      const Matrix f = forward(q, batch, mode).F;
      return (Y - f).squaredNorm() / (2.0 * 5);
    };
    const double eps = 1e-6;
    rng::GaussianStream gs(17);
    for (int probe = 0; probe < 10; ++probe) {
      const int l = 1 + static_cast<int>(gs.engine()() % 3);
      const long long i = static_cast<long long>(gs.engine()() % p.W[l].size());
      Params q = p;
      q.W[l].data()[i] += eps;
      const double up = loss_at(q);
      q.W[l].data()[i] -= 2 * eps;
      const double down = loss_at(q);
      const double fd = (up - down) / (2 * eps);
      CHECK(std::abs(fd - lg.dW[l].data()[i]) <
            1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("layers may mix different activation functions") {
  NetSpec spec = make_spec(Activation::relu(), 1.6, 0.2, 3, 2);
  spec.activations = {Activation::relu(), Activation::tanh()};
  const meanfield::OrderParams op =
      meanfield::forward_order_params(spec, gaussq::default_grid());
  // Layer 1 follows the ReLU half-variance law, layer 2 the tanh moment.
  CHECK(std::abs(op.qhat_t[1] - 0.5 * op.q_t[1]) < 1e-9);
  CHECK(op.qhat_t[2] < op.q_t[2]);  // tanh saturates

  const Params p = init_params(spec, 2048, 130);
  const Batch big = make_batch(spec, 2048, 32, 131);
  const auto ef =
      empirical_forward_order_params(p, forward(p, big, NormMode::none));
  CHECK(std::abs(ef.qhat_M_t[1] - op.qhat_t[1]) < 0.1);
  CHECK(std::abs(ef.qhat_M_t[2] - op.qhat_t[2]) < 0.1);

  const Params small = init_params(spec, 8, 132);
  const Batch sb = make_batch(spec, 8, 5, 133);
  CHECK(finite_diff_check(small, sb, NormMode::none, 1e-5) < 1e-5);
  CHECK(finite_diff_check(small, sb, NormMode::layernorm, 1e-5) < 1e-5);
}

TEST_CASE("mix_columns reproduces R * coeff") {
  const NetSpec spec = make_spec(Activation::relu(), 2.0, 0.1, 3, 2);
  const Params p = init_params(spec, 10, 95);
  const Batch batch = make_batch(spec, 10, 6, 96);
  const ForwardTrace tr = forward(p, batch, NormMode::none);
  const JacobianBlock jb = jacobian(p, batch, NormMode::none);
  Matrix coeff(2, 6);
  rng::GaussianStream gs(97);
  for (int k = 0; k < 2; ++k)
    for (int t = 0; t < 6; ++t) coeff(k, t) = gs.next();
  Eigen::VectorXd flat(12);
  for (int k = 0; k < 2; ++k)
    for (int t = 0; t < 6; ++t) flat(k * 6 + t) = coeff(k, t);
  const Eigen::VectorXd direct = jb.R * flat;
  const Eigen::VectorXd streamed = mix_columns(p, tr, coeff);
  CHECK((direct - streamed).cwiseAbs().maxCoeff() < 1e-12);
}
