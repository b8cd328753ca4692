#include "netlab.hpp"

#include <cmath>
#include <string>

#include "parallel.hpp"
#include "rng.hpp"

namespace widefim::netlab {

namespace {

using meanfield::Activation;

void check_bn_preconditions(const NetSpec& spec, int T, NormMode mode,
                            const std::vector<int>& widths) {
  const bool bn = mode == NormMode::bn_last_meansub ||
                  mode == NormMode::bn_last_full || mode == NormMode::bn_middle;
  if (bn && T < 2)
    throw DegenerateError(
        "forward: batch-norm modes need T >= 2 (zero batch variance)");
  if (mode == NormMode::layernorm) {
    for (int l = 1; l <= spec.L; ++l)
      if (widths[l] < 2)
        throw DegenerateError(
            "forward: layer norm needs at least 2 units per layer (zero "
            "variance at layer " +
            std::to_string(l) + ")");
  }
}

Matrix apply_phi(const Activation& act, const Matrix& u) {
  return u.unaryExpr([&act](double x) { return act.phi(x); });
}

Matrix apply_dphi(const Activation& act, const Matrix& u) {
  return u.unaryExpr([&act](double x) { return act.dphi(x); });
}

// g[u] from g[ubar] for per-unit batch standardization: row i gets
// (1/sigma_i) (g - mean_b g - ubar * mean_b(g .* ubar)).
Matrix bn_backward(const Matrix& g_ubar, const Matrix& ubar,
                   const Vector& sigma) {
  Vector mean_g = g_ubar.rowwise().mean();
  Vector mean_gu = (g_ubar.array() * ubar.array()).rowwise().mean();
  Matrix g = g_ubar;
  g.colwise() -= mean_g;
  g.noalias() -= mean_gu.asDiagonal() * ubar;
  return sigma.cwiseInverse().asDiagonal() * g;
}

// g[u] from g[ubar] for per-sample standardization across units: column t
// gets (1/sigma_t) (g - mean_i g - n_t * mean_i(g .* n_t)).
Matrix ln_backward(const Matrix& g_ubar, const Matrix& n, const Vector& sigma) {
  Eigen::RowVectorXd mean_g = g_ubar.colwise().mean();
  Eigen::RowVectorXd mean_gn = (g_ubar.array() * n.array()).colwise().mean();
  Matrix g = g_ubar;
  g.rowwise() -= mean_g;
  g.noalias() -= n * mean_gn.asDiagonal();
  return g * sigma.cwiseInverse().asDiagonal();
}

struct ParamLayout {
  std::vector<long long> w_offset, b_offset;  // per layer 1..L
  long long total = 0;
};

ParamLayout layout_of(const std::vector<int>& widths) {
  const int L = static_cast<int>(widths.size()) - 1;
  ParamLayout lay;
  lay.w_offset.assign(L + 1, 0);
  lay.b_offset.assign(L + 1, 0);
  long long off = 0;
  for (int l = 1; l <= L; ++l) {
    lay.w_offset[l] = off;
    off += static_cast<long long>(widths[l]) * widths[l - 1];
    lay.b_offset[l] = off;
    off += widths[l];
  }
  lay.total = off;
  return lay;
}

}  // namespace

std::vector<int> layer_widths(const NetSpec& spec, int M) {
  if (M < 1) throw std::invalid_argument("layer_widths: M must be >= 1");
  std::vector<int> widths(spec.L + 1);
  widths[0] = std::max(1, static_cast<int>(std::lround(spec.alpha0 * M)));
  for (int l = 1; l <= spec.L - 1; ++l)
    widths[l] = std::max(1, static_cast<int>(std::lround(spec.alpha[l - 1] * M)));
  widths[spec.L] = spec.C;
  return widths;
}

long long Params::param_count() const { return layout_of(widths).total; }

Params init_params(const NetSpec& spec, int M, std::uint64_t seed) {
  spec.validate();
  Params p;
  p.spec = spec;
  p.M = M;
  p.seed = seed;
  p.widths = layer_widths(spec, M);
  p.W.resize(spec.L + 1);
  p.b.resize(spec.L + 1);
  const double sw = std::sqrt(spec.sigma_w2);
  const double sb = std::sqrt(spec.sigma_b2);
  for (int l = 1; l <= spec.L; ++l) {
    const int rows = p.widths[l], cols = p.widths[l - 1];
    rng::GaussianStream gw(rng::substream(seed, rng::Purpose::weights, l));
    p.W[l].resize(rows, cols);
    gw.fill(p.W[l]);
    p.W[l] *= sw / std::sqrt(static_cast<double>(cols));
    rng::GaussianStream gb(rng::substream(seed, rng::Purpose::biases, l));
    p.b[l].resize(rows);
    for (int i = 0; i < rows; ++i) p.b[l](i) = sb * gb.next();
  }
  return p;
}

Batch make_batch(const NetSpec& spec, int M, int T, std::uint64_t seed) {
  if (T < 1) throw std::invalid_argument("make_batch: T must be >= 1");
  Batch batch;
  batch.seed = seed;
  const int m0 = layer_widths(spec, M)[0];
  batch.X.resize(m0, T);
  rng::GaussianStream gs(rng::substream(seed, rng::Purpose::batch));
  gs.fill(batch.X);
  return batch;
}

ForwardTrace forward(const Params& params, const Batch& batch, NormMode mode,
                     double norm_eps, const Vector* gamma) {
  const NetSpec& spec = params.spec;
  const int L = spec.L;
  const int T = batch.T();
  if (batch.X.rows() != params.widths[0])
    throw std::invalid_argument("forward: batch width does not match M_0");
  check_bn_preconditions(spec, T, mode, params.widths);
  if (gamma && (mode != NormMode::bn_last_meansub && mode != NormMode::bn_last_full))
    throw std::invalid_argument("forward: gamma only applies to bn_last modes");

  ForwardTrace tr;
  tr.mode = mode;
  tr.U.resize(L + 1);
  tr.Ubar.resize(L + 1);
  tr.H.resize(L);
  tr.H[0] = batch.X;
  if (mode == NormMode::bn_middle) {
    tr.bn_mu.resize(L);
    tr.bn_sigma.resize(L);
  }
  if (mode == NormMode::layernorm) {
    tr.ln_mu.resize(L + 1);
    tr.ln_sigma.resize(L + 1);
  }

  for (int l = 1; l <= L; ++l) {
    tr.U[l].noalias() = params.W[l] * tr.H[l - 1];
    tr.U[l].colwise() += params.b[l];

    if (mode == NormMode::bn_middle && l < L) {
      Vector mu = tr.U[l].rowwise().mean();
      Matrix centered = tr.U[l].colwise() - mu;
      Vector var = centered.array().square().rowwise().mean();
      for (int i = 0; i < var.size(); ++i)
        if (var(i) + norm_eps <= 0.0)
          throw DegenerateError("forward: zero batch variance at layer " +
                                std::to_string(l) + ", unit " +
                                std::to_string(i));
      Vector sigma = (var.array() + norm_eps).sqrt();
      tr.bn_mu[l] = mu;
      tr.bn_sigma[l] = sigma;
      // True division keeps the exact cancellations of the degenerate
      // symmetries (x/x == 1 in IEEE; x * (1/x) is off by an ulp).
      tr.Ubar[l] = (centered.array().colwise() / sigma.array()).matrix();
      tr.H[l] = apply_phi(spec.act(l), tr.Ubar[l]);
      continue;
    }

    if (mode == NormMode::layernorm) {
      Eigen::RowVectorXd mu = tr.U[l].colwise().mean();
      Matrix centered = tr.U[l].rowwise() - mu;
      Eigen::RowVectorXd var = centered.array().square().colwise().mean();
      for (int t = 0; t < T; ++t)
        if (var(t) + norm_eps <= 0.0)
          throw DegenerateError("forward: zero layer variance at layer " +
                                std::to_string(l) + ", sample " +
                                std::to_string(t));
      Vector sigma = (var.array() + norm_eps).sqrt().transpose();
      tr.ln_mu[l] = mu.transpose();
      tr.ln_sigma[l] = sigma;
      tr.Ubar[l] =
          (centered.array().rowwise() / sigma.transpose().array()).matrix();
      if (l < L)
        tr.H[l] = apply_phi(spec.act(l), tr.Ubar[l]);
      else
        tr.F = tr.Ubar[L];
      continue;
    }

    if (l < L) tr.H[l] = apply_phi(spec.act(l), tr.U[l]);
  }

  switch (mode) {
    case NormMode::none:
    case NormMode::bn_middle:
      tr.F = tr.U[L];
      break;
    case NormMode::bn_last_meansub:
    case NormMode::bn_last_full: {
      Vector mu = tr.U[L].rowwise().mean();
      Matrix centered = tr.U[L].colwise() - mu;
      Vector var = centered.array().square().rowwise().mean();
      tr.last_mu = mu;
      tr.last_sigma = (var.array() + norm_eps).sqrt();
      if (mode == NormMode::bn_last_full) {
        for (int k = 0; k < spec.C; ++k)
          if (var(k) + norm_eps <= 0.0)
            throw DegenerateError(
                "forward: zero output variance at readout unit " +
                std::to_string(k));
        tr.F = (centered.array().colwise() / tr.last_sigma.array()).matrix();
      } else {
        tr.F = centered;
      }
      if (gamma) tr.F = gamma->asDiagonal() * tr.F;
      break;
    }
    case NormMode::layernorm:
      break;  // already set
  }
  return tr;
}

std::vector<std::vector<Matrix>> unnormalized_sensitivities(
    const Params& params, const ForwardTrace& trace) {
  const NetSpec& spec = params.spec;
  const int L = spec.L;
  const int T = static_cast<int>(trace.H[0].cols());
  std::vector<std::vector<Matrix>> sens(spec.C);
  for (int k = 0; k < spec.C; ++k) {
    auto& s = sens[k];
    s.resize(L + 1);
    s[L] = Matrix::Zero(spec.C, T);
    s[L].row(k).setOnes();
    for (int l = L - 1; l >= 1; --l) {
      Matrix gh = params.W[l + 1].transpose() * s[l + 1];
      s[l] = apply_dphi(spec.act(l), trace.U[l]).cwiseProduct(gh);
    }
  }
  return sens;
}

namespace {

// Writes the parameter-gradient column for sample t from the per-layer
// pre-activation gradients gU[l] (M_l x T each).
void write_column(Eigen::Ref<Eigen::VectorXd> col, const ParamLayout& lay,
                  const std::vector<Matrix>& gU,
                  const std::vector<Matrix>& H, int L, int t,
                  double inv_sqrt_T) {
  for (int l = 1; l <= L; ++l) {
    const auto g = gU[l].col(t);
    const auto h = H[l - 1].col(t);
    Eigen::Map<Matrix> wblock(col.data() + lay.w_offset[l], g.size(), h.size());
    wblock.noalias() = (g * inv_sqrt_T) * h.transpose();
    col.segment(lay.b_offset[l], g.size()) = g * inv_sqrt_T;
  }
}

JacobianBlock jacobian_separable(const Params& params, const ForwardTrace& tr,
                                 NormMode mode, const Vector* gamma) {
  // Modes whose chain is per-sample below the output: none, bn_last_*,
  // layernorm. bn_last couplings enter as a per-output column mix afterwards.
  const NetSpec& spec = params.spec;
  const int L = spec.L;
  const int T = static_cast<int>(tr.H[0].cols());
  const ParamLayout lay = layout_of(params.widths);
  JacobianBlock jb;
  jb.C = spec.C;
  jb.T = T;
  jb.P = lay.total;
  jb.R.setZero(lay.total, static_cast<long long>(spec.C) * T);
  const double inv_sqrt_T = 1.0 / std::sqrt(static_cast<double>(T));

  std::vector<Matrix> gU(L + 1);
  for (int k = 0; k < spec.C; ++k) {
    if (mode == NormMode::layernorm) {
      // d f_k(t) / d u_j^L(t) = (1/sigma_t)(delta_jk - 1/C - n_j n_k / C)
      // C = 2 readouts are sign functions (ubar_1 = -ubar_2, f = +-1); the
      // derivative vanishes identically there.
      const Matrix& n = tr.Ubar[L];
      gU[L].setZero(spec.C, T);
      if (spec.C != 2)
        for (int t = 0; t < T; ++t) {
          const double inv_s = 1.0 / tr.ln_sigma[L](t);
          for (int j = 0; j < spec.C; ++j)
            gU[L](j, t) = inv_s * ((j == k ? 1.0 : 0.0) - 1.0 / spec.C -
                                   n(j, t) * n(k, t) / spec.C);
        }
    } else {
      gU[L] = Matrix::Zero(spec.C, T);
      gU[L].row(k).setOnes();
    }
    for (int l = L - 1; l >= 1; --l) {
      Matrix gh = params.W[l + 1].transpose() * gU[l + 1];
      if (mode == NormMode::layernorm) {
        Matrix g_ubar = apply_dphi(spec.act(l), tr.Ubar[l]).cwiseProduct(gh);
        gU[l] = ln_backward(g_ubar, tr.Ubar[l], tr.ln_sigma[l]);
      } else {
        gU[l] = apply_dphi(spec.act(l), tr.U[l]).cwiseProduct(gh);
      }
    }
    for (int t = 0; t < T; ++t)
      write_column(jb.R.col(static_cast<long long>(k) * T + t), lay, gU, tr.H,
                   L, t, inv_sqrt_T);
  }

  if (mode == NormMode::bn_last_meansub || mode == NormMode::bn_last_full) {
    // Column mix per output block: R_k <- R_k A_k with A = G for mean
    // subtraction and A = (1/sigma)(G - z z^T / T) for full normalization.
    for (int k = 0; k < spec.C; ++k) {
      auto block = jb.R.middleCols(static_cast<long long>(k) * T, T);
      const Vector rowmean = block.rowwise().mean();
      if (mode == NormMode::bn_last_full) {
        if (T == 2) {
          // Standardizing two samples yields f = +-1: a sign function with
          // an identically zero derivative.
          block.setZero();
          continue;
        }
        const double sigma = tr.last_sigma(k);
        const Vector z =
            ((tr.U[L].row(k).transpose().array() - tr.last_mu(k)) / sigma)
                .matrix();
        const Vector bz = block * z;
        block.colwise() -= rowmean;
        block.noalias() -= bz * (z.transpose() / T);
        block /= sigma;
      } else {
        block.colwise() -= rowmean;
      }
      if (gamma) block *= (*gamma)(k);
    }
  }
  return jb;
}

JacobianBlock jacobian_bn_middle(const Params& params, const Batch& batch,
                                 const ForwardTrace& tr, int threads) {
  const NetSpec& spec = params.spec;
  const int L = spec.L;
  const int T = batch.T();
  const ParamLayout lay = layout_of(params.widths);
  JacobianBlock jb;
  jb.C = spec.C;
  jb.T = T;
  jb.P = lay.total;
  jb.R.setZero(lay.total, static_cast<long long>(spec.C) * T);
  const double inv_sqrt_T = 1.0 / std::sqrt(static_cast<double>(T));

  // Every column touches the whole batch through the normalization
  // statistics, so each (k, t) runs its own backward pass over M x T
  // gradient matrices.
  parallel_for(static_cast<std::size_t>(spec.C) * T, threads, [&](std::size_t c) {
    const int k = static_cast<int>(c / T);
    const int t = static_cast<int>(c % T);
    auto col = jb.R.col(c);

    // Last layer is un-normalized: d f_k(t) / d W^L = e_k h^{L-1}(t)^T.
    {
      Eigen::Map<Matrix> wblock(col.data() + lay.w_offset[L], spec.C,
                                params.widths[L - 1]);
      wblock.row(k) = tr.H[L - 1].col(t).transpose() * inv_sqrt_T;
      col(lay.b_offset[L] + k) = inv_sqrt_T;
    }

    Matrix gh = Matrix::Zero(params.widths[L - 1], T);
    gh.col(t) = params.W[L].row(k).transpose();
    for (int l = L - 1; l >= 1; --l) {
      Matrix g_ubar = apply_dphi(spec.act(l), tr.Ubar[l]).cwiseProduct(gh);
      Matrix gu = bn_backward(g_ubar, tr.Ubar[l], tr.bn_sigma[l]);
      Eigen::Map<Matrix> wblock(col.data() + lay.w_offset[l],
                                params.widths[l], params.widths[l - 1]);
      wblock.noalias() = gu * tr.H[l - 1].transpose() * inv_sqrt_T;
      col.segment(lay.b_offset[l], params.widths[l]) =
          gu.rowwise().sum() * inv_sqrt_T;
      if (l > 1) gh.noalias() = params.W[l].transpose() * gu;
    }
  });
  return jb;
}

}  // namespace

JacobianBlock jacobian(const Params& params, const Batch& batch, NormMode mode,
                       double norm_eps, const Vector* gamma, int threads) {
  ForwardTrace tr = forward(params, batch, mode, norm_eps, gamma);
  JacobianBlock jb = mode == NormMode::bn_middle
                         ? jacobian_bn_middle(params, batch, tr, threads)
                         : jacobian_separable(params, tr, mode, gamma);
  if (!jb.R.allFinite())
    throw NumericError("jacobian: non-finite entries");
  return jb;
}

Vector mix_columns(const Params& params, const ForwardTrace& trace,
                   const Matrix& coeff) {
  const NetSpec& spec = params.spec;
  if (trace.mode != NormMode::none)
    throw std::invalid_argument("mix_columns: only the un-normalized mode");
  if (coeff.rows() != spec.C || coeff.cols() != trace.H[0].cols())
    throw std::invalid_argument("mix_columns: coeff must be C x T");
  const int L = spec.L;
  const int T = static_cast<int>(coeff.cols());
  const ParamLayout lay = layout_of(params.widths);
  const double inv_sqrt_T = 1.0 / std::sqrt(static_cast<double>(T));
  auto sens = unnormalized_sensitivities(params, trace);
  Vector v = Vector::Zero(lay.total);
  for (int k = 0; k < spec.C; ++k) {
    for (int l = 1; l <= L; ++l) {
      const Matrix weighted =
          sens[k][l] * coeff.row(k).asDiagonal() * inv_sqrt_T;
      Eigen::Map<Matrix> wblock(v.data() + lay.w_offset[l], params.widths[l],
                                params.widths[l - 1]);
      wblock.noalias() += weighted * trace.H[l - 1].transpose();
      v.segment(lay.b_offset[l], params.widths[l]) += weighted.rowwise().sum();
    }
  }
  return v;
}

double finite_diff_check(const Params& params, const Batch& batch,
                         NormMode mode, double epsilon, double norm_eps) {
  JacobianBlock jb = jacobian(params, batch, mode, norm_eps);
  const ParamLayout lay = layout_of(params.widths);
  const double sqrt_T = std::sqrt(static_cast<double>(jb.T));

  Params pert = params;
  auto param_ref = [&](long long p) -> double& {
    for (int l = params.spec.L; l >= 1; --l) {
      if (p >= lay.b_offset[l]) return pert.b[l](p - lay.b_offset[l]);
      if (p >= lay.w_offset[l]) {
        const long long off = p - lay.w_offset[l];
        return pert.W[l].data()[off];
      }
    }
    throw std::logic_error("finite_diff_check: bad parameter index");
  };

  double max_abs_fd = 0.0, max_err = 0.0;
  for (long long p = 0; p < lay.total; ++p) {
    double& x = param_ref(p);
    const double saved = x;
    x = saved + epsilon;
    Matrix fp = forward(pert, batch, mode, norm_eps).F;
    x = saved - epsilon;
    Matrix fm = forward(pert, batch, mode, norm_eps).F;
    x = saved;
    Matrix fd = (fp - fm) / (2.0 * epsilon);
    max_abs_fd = std::max(max_abs_fd, fd.cwiseAbs().maxCoeff());
    for (int k = 0; k < jb.C; ++k)
      for (int t = 0; t < jb.T; ++t) {
        const double analytic =
            jb.R(p, static_cast<long long>(k) * jb.T + t) * sqrt_T;
        max_err = std::max(max_err, std::abs(analytic - fd(k, t)));
      }
  }
  return max_err / std::max(1.0, max_abs_fd);
}

EmpiricalForward empirical_forward_order_params(const Params& params,
                                                const ForwardTrace& trace) {
  const int L = params.spec.L;
  const int T = static_cast<int>(trace.H[0].cols());
  EmpiricalForward out;
  out.qhat_M_t.resize(L);
  out.qhat_M_st.resize(L);
  for (int l = 0; l <= L - 1; ++l) {
    const Matrix gram = trace.H[l].transpose() * trace.H[l] /
                        static_cast<double>(params.widths[l]);
    out.qhat_M_t[l] = gram.trace() / T;
    out.qhat_M_st[l] =
        (gram.sum() - gram.trace()) / (static_cast<double>(T) * (T - 1));
  }
  return out;
}

EmpiricalBackward empirical_backward_order_params(const Params& params,
                                                  const Batch& batch) {
  const int L = params.spec.L;
  const int T = batch.T();
  ForwardTrace tr = forward(params, batch, NormMode::none);
  auto sens = unnormalized_sensitivities(params, tr);
  EmpiricalBackward out;
  out.qtilde_M_t.assign(L + 1, 0.0);
  out.qtilde_M_st.assign(L + 1, 0.0);
  for (int l = 1; l <= L; ++l) {
    const Matrix gram = sens[0][l].transpose() * sens[0][l];
    out.qtilde_M_t[l] = gram.trace() / T;
    out.qtilde_M_st[l] = T > 1 ? (gram.sum() - gram.trace()) /
                                     (static_cast<double>(T) * (T - 1))
                               : 0.0;
  }
  return out;
}

LossGrad loss_gradient(const Params& params, const Batch& batch,
                       const Matrix& Y, NormMode mode, double norm_eps) {
  const NetSpec& spec = params.spec;
  const int L = spec.L;
  const int T = batch.T();
  if (Y.rows() != spec.C || Y.cols() != T)
    throw std::invalid_argument("loss_gradient: labels must be C x T");
  ForwardTrace tr = forward(params, batch, mode, norm_eps);
  const Matrix resid = tr.F - Y;
  LossGrad out;
  out.loss = resid.squaredNorm() / (2.0 * T);
  out.dW.resize(L + 1);
  out.db.resize(L + 1);

  Matrix gF = resid / static_cast<double>(T);
  Matrix gU;
  switch (mode) {
    case NormMode::none:
    case NormMode::bn_middle:
      gU = gF;
      break;
    case NormMode::bn_last_meansub:
      gU = gF.colwise() - Vector(gF.rowwise().mean());
      break;
    case NormMode::bn_last_full: {
      if (T == 2) {  // sign-function outputs, zero derivative
        gU = Matrix::Zero(spec.C, T);
        break;
      }
      gU = gF.colwise() - Vector(gF.rowwise().mean());
      for (int k = 0; k < spec.C; ++k) {
        const double sigma = tr.last_sigma(k);
        const Vector z =
            (tr.U[L].row(k).transpose().array() - tr.last_mu(k)) / sigma;
        const double zg = z.dot(gF.row(k).transpose());
        gU.row(k) -= (zg / T) * z.transpose();
        gU.row(k) /= sigma;
      }
      break;
    }
    case NormMode::layernorm:
      gU = spec.C == 2 ? Matrix::Zero(spec.C, T)
                       : ln_backward(gF, tr.Ubar[L], tr.ln_sigma[L]);
      break;
  }

  for (int l = L; l >= 1; --l) {
    out.dW[l].noalias() = gU * tr.H[l - 1].transpose();
    out.db[l] = gU.rowwise().sum();
    if (l == 1) break;
    Matrix gh = params.W[l].transpose() * gU;
    if (mode == NormMode::bn_middle) {
      Matrix g_ubar = apply_dphi(spec.act(l - 1), tr.Ubar[l - 1]).cwiseProduct(gh);
      gU = bn_backward(g_ubar, tr.Ubar[l - 1], tr.bn_sigma[l - 1]);
    } else if (mode == NormMode::layernorm) {
      Matrix g_ubar = apply_dphi(spec.act(l - 1), tr.Ubar[l - 1]).cwiseProduct(gh);
      gU = ln_backward(g_ubar, tr.Ubar[l - 1], tr.ln_sigma[l - 1]);
    } else {
      gU = apply_dphi(spec.act(l - 1), tr.U[l - 1]).cwiseProduct(gh);
    }
  }
  return out;
}

}  // namespace widefim::netlab
