#include "fimlab.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "rng.hpp"

namespace widefim::fimlab {

ReversedFIM reversed_fim(const JacobianBlock& jb, NormMode mode) {
  if (!jb.R.allFinite())
    throw NumericError("reversed_fim: non-finite Jacobian entries");
  ReversedFIM f;
  f.C = jb.C;
  f.T = jb.T;
  f.mode = mode;
  f.mat.noalias() = jb.R.transpose() * jb.R;
  f.mat = 0.5 * (f.mat + f.mat.transpose()).eval();
  return f;
}

ReversedFIM reversed_fim_unnormalized(const Params& params,
                                      const Batch& batch) {
  const int C = params.spec.C;
  const int T = batch.T();
  ForwardTrace tr = netlab::forward(params, batch, NormMode::none);
  auto sens = netlab::unnormalized_sensitivities(params, tr);

  ReversedFIM f;
  f.C = C;
  f.T = T;
  f.mode = NormMode::none;
  f.mat.setZero(static_cast<long long>(C) * T, static_cast<long long>(C) * T);

  const int L = params.spec.L;
  std::vector<Matrix> hgram(L);  // H^{l-1T} H^{l-1} + 1 (bias rows)
  for (int l = 1; l <= L; ++l) {
    hgram[l - 1].noalias() = tr.H[l - 1].transpose() * tr.H[l - 1];
    hgram[l - 1].array() += 1.0;
  }
  for (int k = 0; k < C; ++k) {
    for (int kp = k; kp < C; ++kp) {
      Matrix block = Matrix::Zero(T, T);
      for (int l = 1; l <= L; ++l) {
        Matrix dgram = sens[k][l].transpose() * sens[kp][l];
        block.array() += dgram.array() * hgram[l - 1].array();
      }
      block /= static_cast<double>(T);
      f.mat.block(k * T, kp * T, T, T) = block;
      if (kp != k) f.mat.block(kp * T, k * T, T, T) = block.transpose();
    }
  }
  f.mat = 0.5 * (f.mat + f.mat.transpose()).eval();
  return f;
}

ReversedFIM project_mean_subtraction(const ReversedFIM& fstar) {
  if (fstar.mode != NormMode::none)
    throw std::invalid_argument(
        "project_mean_subtraction: expects the un-normalized F*");
  const int C = fstar.C, T = fstar.T;
  ReversedFIM out;
  out.C = C;
  out.T = T;
  out.mode = NormMode::bn_last_meansub;
  out.mat = fstar.mat;
  // G B G per T x T block: remove row means, column means, add back the
  // grand mean.
  for (int k = 0; k < C; ++k) {
    for (int kp = 0; kp < C; ++kp) {
      auto block = out.mat.block(k * T, kp * T, T, T);
      const Vector rmean = block.rowwise().mean();
      const Eigen::RowVectorXd cmean = block.colwise().mean();
      const double all = rmean.mean();
      block.colwise() -= rmean;
      block.rowwise() -= cmean;
      block.array() += all;
    }
  }
  out.mat = 0.5 * (out.mat + out.mat.transpose()).eval();
  return out;
}

ReversedFIM apply_variance_projector(const ReversedFIM& meansub,
                                     const Matrix& ubar) {
  if (meansub.mode != NormMode::bn_last_meansub)
    throw std::invalid_argument(
        "apply_variance_projector: expects the mean-subtracted F*");
  const int C = meansub.C, T = meansub.T;
  if (ubar.rows() != C || ubar.cols() != T)
    throw std::invalid_argument("apply_variance_projector: ubar must be C x T");

  ReversedFIM out;
  out.C = C;
  out.T = T;
  out.mode = NormMode::bn_last_full;
  out.symmetric = false;
  out.mat.resize(C * T, C * T);
  out.sym.resize(C * T, C * T);
  for (int k = 0; k < C; ++k) {
    const Vector u = ubar.row(k).transpose();
    const double s2 = u.squaredNorm() / T;
    if (!(s2 > 0.0))
      throw DegenerateError(
          "apply_variance_projector: zero output variance at unit " +
          std::to_string(k));
    Matrix q = Matrix::Identity(T, T) - u * u.transpose() / (T * s2);
    // Q(k,k) = q / s2 is PSD with Q^{1/2} = q / s (q is an exact projector).
    for (int kp = 0; kp < C; ++kp) {
      const auto block = meansub.mat.block(k * T, kp * T, T, T);
      out.mat.block(k * T, kp * T, T, T).noalias() = q * block / s2;
      out.sym.block(k * T, kp * T, T, T).noalias() = q * block / std::sqrt(s2);
    }
  }
  // Right-multiply sym by blockdiag(Q^{1/2}).
  for (int kp = 0; kp < C; ++kp) {
    const Vector u = ubar.row(kp).transpose();
    const double s2 = u.squaredNorm() / T;
    Matrix q = Matrix::Identity(T, T) - u * u.transpose() / (T * s2);
    for (int k = 0; k < C; ++k) {
      Matrix block = out.sym.block(k * T, kp * T, T, T);
      out.sym.block(k * T, kp * T, T, T).noalias() = block * q / std::sqrt(s2);
    }
  }
  out.sym = 0.5 * (out.sym + out.sym.transpose()).eval();
  return out;
}

namespace {

double power_iteration(const Matrix& a, int* iterations, bool* converged) {
  const Eigen::Index n = a.rows();
  rng::GaussianStream gs(rng::substream(0x706f776572ULL, rng::Purpose::probe));
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = gs.next();
  v.normalize();
  double lambda = 0.0;
  const int max_iter = 200000;
  for (int it = 1; it <= max_iter; ++it) {
    Vector av = a * v;
    const double norm = av.norm();
    if (norm == 0.0) {  // null input direction; the matrix is zero
      *iterations = it;
      *converged = true;
      return 0.0;
    }
    v = av / norm;
    const double next = v.dot(a * v);
    if (std::abs(next - lambda) <= 1e-10 * std::max(1.0, std::abs(next))) {
      *iterations = it;
      *converged = true;
      return next;
    }
    lambda = next;
  }
  *iterations = max_iter;
  *converged = false;
  return lambda;
}

}  // namespace

SpectrumStats spectrum(const ReversedFIM& fstar, long long P,
                       bool full_spectrum, int dense_threshold) {
  if (P <= 0) throw std::invalid_argument("spectrum: P must be positive");
  const Matrix& m = fstar.spectral();
  SpectrumStats st;
  st.m_lambda = fstar.mat.trace() / static_cast<double>(P);
  st.s_lambda = fstar.mat.cwiseProduct(fstar.mat.transpose()).sum() /
                static_cast<double>(P);
  const Eigen::Index n = m.rows();
  if (n <= dense_threshold || full_spectrum) {
    Eigen::SelfAdjointEigenSolver<Matrix> solver(m);
    if (solver.info() != Eigen::Success)
      throw NumericError("spectrum: dense eigensolver failed");
    st.lambda_max = solver.eigenvalues()(n - 1);
    st.solver = "dense";
    if (full_spectrum)
      st.eigenvalues = std::vector<double>(
          solver.eigenvalues().data(), solver.eigenvalues().data() + n);
  } else {
    st.solver = "power";
    st.lambda_max = power_iteration(m, &st.iterations, &st.converged);
    if (!st.converged)
      throw NumericError("spectrum: power iteration did not converge after " +
                         std::to_string(st.iterations) + " iterations");
  }
  return st;
}

namespace {

AlignmentReport alignment_from_bases(Matrix top, Matrix targets) {
  AlignmentReport rep;
  rep.C = static_cast<int>(targets.cols());
  Eigen::HouseholderQR<Matrix> qr_top(top);
  Matrix q_top = qr_top.householderQ() * Matrix::Identity(top.rows(), top.cols());
  Eigen::HouseholderQR<Matrix> qr_tgt(targets);
  Matrix q_tgt =
      qr_tgt.householderQ() * Matrix::Identity(targets.rows(), targets.cols());
  Eigen::JacobiSVD<Matrix> svd(q_top.transpose() * q_tgt);
  for (int i = 0; i < svd.singularValues().size(); ++i) {
    const double c = std::clamp(svd.singularValues()(i), 0.0, 1.0);
    rep.cosines.push_back(c);
    rep.principal_angles.push_back(std::acos(c));
  }
  return rep;
}

// Eigenvectors of F* for the C largest eigenvalues, as a CT x C matrix.
Matrix top_eigvecs(const Matrix& m, int C) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(m);
  if (solver.info() != Eigen::Success)
    throw NumericError("top_eigvec_alignment: eigensolver failed");
  const Eigen::Index n = m.rows();
  Matrix v(n, C);
  for (int i = 0; i < C; ++i) v.col(i) = solver.eigenvectors().col(n - 1 - i);
  return v;
}

Matrix block_mean_vectors(int C, int T) {
  Matrix nu = Matrix::Zero(static_cast<long long>(C) * T, C);
  for (int k = 0; k < C; ++k)
    nu.block(k * T, k, T, 1).setConstant(1.0 / std::sqrt(static_cast<double>(T)));
  return nu;
}

}  // namespace

AlignmentReport top_eigvec_alignment(const JacobianBlock& jb,
                                     const ReversedFIM& fstar) {
  const int C = jb.C, T = jb.T;
  Matrix evecs = top_eigvecs(fstar.spectral(), C);
  Matrix nu = block_mean_vectors(C, T);
  // v = R nu maps F* eigenvectors to F eigenvectors; R nu_k = E[grad f_k].
  Matrix top = jb.R * evecs;
  Matrix targets = jb.R * nu;
  return alignment_from_bases(std::move(top), std::move(targets));
}

AlignmentReport top_eigvec_alignment(const Params& params, const Batch& batch,
                                     const gaussq::QuadratureGrid& grid) {
  meanfield::OrderParams op = meanfield::forward_order_params(params.spec, grid);
  meanfield::backward_order_params(params.spec, grid, op);
  const meanfield::KappaPair k = meanfield::kappas(params.spec, op);
  if (k.centered_warning)
    throw DegenerateError(
        "top_eigvec_alignment: centered network (kappa2 ~ 0); the eigenspace "
        "theorem requires a non-centered network");

  const int C = params.spec.C;
  const int T = batch.T();
  ReversedFIM fstar = reversed_fim_unnormalized(params, batch);
  Matrix evecs = top_eigvecs(fstar.mat, C);
  ForwardTrace tr = netlab::forward(params, batch, NormMode::none);
  Matrix top(params.param_count(), C), targets(params.param_count(), C);
  Matrix nu = block_mean_vectors(C, T);
  for (int i = 0; i < C; ++i) {
    top.col(i) = netlab::mix_columns(
        params, tr, Eigen::Map<const Matrix>(evecs.col(i).data(), T, C).transpose());
    targets.col(i) = netlab::mix_columns(
        params, tr, Eigen::Map<const Matrix>(nu.col(i).data(), T, C).transpose());
  }
  return alignment_from_bases(std::move(top), std::move(targets));
}

double hessian_fim_consistency(const meanfield::NetSpec& spec, int M, int T,
                               std::uint64_t seed, double label_shift,
                               double fd_epsilon) {
  Params params = netlab::init_params(spec, M, seed);
  if (params.param_count() > 2000)
    throw std::invalid_argument(
        "hessian_fim_consistency: meant for tiny networks (P <= 2000)");
  Batch batch = netlab::make_batch(spec, M, T, rng::substream(seed, rng::Purpose::batch));
  const NormMode mode = spec.norm_mode;
  Matrix Y = (netlab::forward(params, batch, mode).F.array() + label_shift).matrix();

  JacobianBlock jb = netlab::jacobian(params, batch, mode);
  Matrix F = jb.R * jb.R.transpose();

  // Loss Hessian by second-order central differences, evaluated through the
  // same parameter layout the Jacobian uses.
  const long long P = jb.P;
  std::vector<double*> slots;
  slots.reserve(P);
  for (int l = 1; l <= spec.L; ++l) {
    for (long long i = 0; i < params.W[l].size(); ++i)
      slots.push_back(params.W[l].data() + i);
    for (long long i = 0; i < params.b[l].size(); ++i)
      slots.push_back(params.b[l].data() + i);
  }
  auto loss = [&]() {
    const Matrix f = netlab::forward(params, batch, mode).F;
    return (Y - f).squaredNorm() / (2.0 * T);
  };
  const double e = fd_epsilon;
  Matrix H(P, P);
  const double base = loss();
  for (long long i = 0; i < P; ++i) {
    double& xi = *slots[i];
    const double si = xi;
    xi = si + e;
    const double lp = loss();
    xi = si - e;
    const double lm = loss();
    xi = si;
    H(i, i) = (lp - 2.0 * base + lm) / (e * e);
    for (long long j = i + 1; j < P; ++j) {
      double& xj = *slots[j];
      const double sj = xj;
      xi = si + e; xj = sj + e;
      const double lpp = loss();
      xj = sj - e;
      const double lpm = loss();
      xi = si - e; xj = sj + e;
      const double lmp = loss();
      xj = sj - e;
      const double lmm = loss();
      xi = si; xj = sj;
      H(i, j) = H(j, i) = (lpp - lpm - lmp + lmm) / (4.0 * e * e);
    }
  }
  return (H - F).cwiseAbs().maxCoeff() / F.cwiseAbs().maxCoeff();
}

NormalizationStats measure_normalization_stats(const ForwardTrace& trace,
                                               NormMode mode) {
  NormalizationStats out;
  if (mode != trace.mode)
    throw std::invalid_argument(
        "measure_normalization_stats: trace mode mismatch");
  if (mode == NormMode::bn_last_full || mode == NormMode::bn_last_meansub) {
    for (int k = 0; k < trace.last_sigma.size(); ++k) {
      if (!(trace.last_sigma(k) > 0.0))
        throw DegenerateError(
            "measure_normalization_stats: degenerate output variance");
      out.sigma_k.push_back(trace.last_sigma(k));
    }
    return out;
  }
  if (mode == NormMode::layernorm) {
    const int L = static_cast<int>(trace.U.size()) - 1;
    const Matrix& uL = trace.U[L];
    const int C = static_cast<int>(uL.rows());
    const int T = static_cast<int>(uL.cols());
    Matrix centered = uL.rowwise() - Eigen::RowVectorXd(uL.colwise().mean());
    const Vector& sigma = trace.ln_sigma[L];
    for (int t = 0; t < T; ++t)
      if (!(sigma(t) > 0.0))
        throw DegenerateError(
            "measure_normalization_stats: degenerate layer variance");
    Vector w = sigma.array().square().inverse();
    out.etas.eta1 = w.mean();
    out.etas.eta2 = w.array().square().mean();
    Matrix s = centered.transpose() * centered;
    out.etas.eta3 = w.dot(s * w) / (static_cast<double>(C) * T * T);
    return out;
  }
  throw std::invalid_argument(
      "measure_normalization_stats: no statistics for mode " +
      meanfield::norm_mode_name(mode));
}

}  // namespace widefim::fimlab
