// Reversed FIM F* = R^T R (the CT x CT Gram sharing the nonzero spectrum of
// the P x P FIM), its normalized variants, eigenvalue statistics, and the
// structural checks: top-eigenvector alignment and the Hessian/FIM identity
// at zero residual.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "netlab.hpp"

namespace widefim::fimlab {

using meanfield::NormMode;
using netlab::Batch;
using netlab::ForwardTrace;
using netlab::JacobianBlock;
using netlab::Matrix;
using netlab::Params;
using netlab::Vector;

struct ReversedFIM {
  Matrix mat;  // CT x CT
  int C = 0, T = 0;
  NormMode mode = NormMode::none;
  // The variance-projected matrix Q F*_mBN is not symmetric; `sym` then holds
  // the similarity-equivalent Q^{1/2} F*_mBN Q^{1/2} used for eigensolves.
  bool symmetric = true;
  Matrix sym;
  const Matrix& spectral() const { return symmetric ? mat : sym; }
};

// Gram matrix of an explicit Jacobian, symmetrized by averaging with its
// transpose.
ReversedFIM reversed_fim(const JacobianBlock& jb, NormMode mode);

// F* of the un-normalized network without materializing R: per layer
// F*(k,k')  =  (1/T) sum_l (D_k^l^T D_k'^l) .* (H^{l-1T} H^{l-1} + 1),
// where D are the backward sensitivities and the +1 carries the bias rows.
ReversedFIM reversed_fim_unnormalized(const Params& params, const Batch& batch);

// (I_C (x) G) F* (I_C (x) G) with G = I - 11^T/T, the last-layer mean
// subtraction as a projector on the un-normalized F*.
ReversedFIM project_mean_subtraction(const ReversedFIM& fstar);

// Q F*_mBN with the block projector Q(k,k) = (1/s_k^2)(I - u_k u_k^T/(T s_k^2))
// built from the mean-subtracted last-layer outputs ubar (C x T). The
// eigensolve runs on the symmetric similarity Q^{1/2} F*_mBN Q^{1/2}.
ReversedFIM apply_variance_projector(const ReversedFIM& meansub,
                                     const Matrix& ubar);

struct SpectrumStats {
  double m_lambda = 0.0;   // trace(F*)/P
  double s_lambda = 0.0;   // trace(F*^2)/P
  double lambda_max = 0.0;
  std::optional<std::vector<double>> eigenvalues;  // ascending, when requested
  std::string solver;      // "dense" or "power"
  int iterations = 0;
  bool converged = true;
};

// P is the parameter count used for the trace normalizations. Dense
// symmetric solve for CT <= dense_threshold, else power iteration at 1e-10
// relative tolerance (throws NumericError with the iteration count on
// stagnation).
SpectrumStats spectrum(const ReversedFIM& fstar, long long P,
                       bool full_spectrum = false, int dense_threshold = 4096);

struct AlignmentReport {
  std::vector<double> cosines;           // descending, one per output unit
  std::vector<double> principal_angles;  // radians
  int C = 0;
};

// Principal angles between the top-C eigenspace of F (recovered as R v from
// eigenvectors v of F*) and span{ E[grad f_k] }. Small-instance variant on an
// explicit Jacobian.
AlignmentReport top_eigvec_alignment(const JacobianBlock& jb,
                                     const ReversedFIM& fstar);

// Streaming variant that never materializes R; un-normalized mode only.
// Refuses centered networks (kappa2 ~ 0), where the theorem does not apply.
AlignmentReport top_eigvec_alignment(const Params& params, const Batch& batch,
                                     const gaussq::QuadratureGrid& grid);

// Max |H - F| / max |F| on a tiny network with labels y := f + label_shift
// (zero residual at label_shift = 0, where H = F must hold). H comes from
// second-order central differences of the loss.
double hessian_fim_consistency(const meanfield::NetSpec& spec, int M, int T,
                               std::uint64_t seed, double label_shift = 0.0,
                               double fd_epsilon = 1e-3);

struct NormalizationStats {
  std::vector<double> sigma_k;     // bn_last_full
  meanfield::LayerNormEtas etas;   // layernorm
};

NormalizationStats measure_normalization_stats(const ForwardTrace& trace,
                                               NormMode mode);

}  // namespace widefim::fimlab
