// Experiment orchestration: config ingestion, seeded ensemble execution, the
// gradient-descent harness, result persistence (JSON metadata + CSV tables +
// gnuplot scripts) and the self-check that recomputes theory overlays from
// the echoed config.
#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "fimlab.hpp"
#include "meanfield.hpp"
#include "netlab.hpp"

namespace widefim::experiments {

using meanfield::NetSpec;
using meanfield::NormMode;
using netlab::Batch;
using netlab::Matrix;
using netlab::Params;

enum class Kind {
  fig1_sharpness,
  convrate,
  phase_diagram,
  spectrum_once,
  predict_only,
};

std::string kind_name(Kind kind);
Kind parse_kind(const std::string& name);

enum class Profile { desk, full };

struct EtaGrid {
  double min = 1e-4;
  double max = 10.0;
  int per_decade = 40;
  std::vector<double> values() const;
};

struct ExperimentConfig {
  Kind kind = Kind::predict_only;
  NetSpec net;
  std::vector<int> M_grid;
  bool T_equals_M = false;
  int T_fixed = 100;
  EtaGrid eta;
  int ensembles = 50;
  int steps = 1000;
  std::uint64_t master_seed = 1;
  std::string out_dir;
  double explosion_threshold = 1e3;
  int trials = 1;
  int threads = 0;  // 0 = hardware concurrency
  Profile profile = Profile::desk;
  long mc_samples = 200000;
  std::vector<double> sigma_k;  // optional: supplied bn_last_full variances
  std::optional<meanfield::LayerNormEtas> ln_etas;  // optional: layer-norm etas

  int T_for(int M) const { return T_equals_M ? M : T_fixed; }
  void validate() const;
};

// Strict parse: unknown fields anywhere are rejected. Fields the file leaves
// out get kind/profile defaults.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig parse_config_file(const std::string& path);
std::string config_to_json(const ExperimentConfig& config);

std::uint64_t member_seed(std::uint64_t master, int grid_index, int member);

// --- gradient descent -------------------------------------------------------

struct GdResult {
  std::vector<double> loss;  // E(theta) per step, loss[0] = initial loss
  bool diverged = false;
  int steps_run = 0;
};

// Full-batch gradient descent on the squared loss. Divergence: non-finite
// loss always terminates; a finite stop_threshold also stops the trajectory
// once exceeded (the phase-diagram explosion rule).
GdResult gd_train(Params params, const Batch& batch, const Matrix& labels,
                  double eta, int steps, double norm_eps = 0.0,
                  double stop_threshold =
                      std::numeric_limits<double>::infinity());

// Teacher outputs on the given batch; teacher shares the spec and widths.
Matrix make_teacher_labels(const NetSpec& spec, int M,
                           const Batch& batch, std::uint64_t teacher_seed);

// --- runners -----------------------------------------------------------------

// Dispatches on config.kind and writes artifacts into config.out_dir.
// spectrum_once / predict_only return their result JSON (and also write it
// when out_dir is set); the others return the metadata JSON text.
std::string run(const ExperimentConfig& config);

std::string predict_only_json(const ExperimentConfig& config);
std::string spectrum_once_json(const ExperimentConfig& config);

// Per-member measurement used by run_fig1; exposed so a stored member row can
// be reproduced from its seed alone.
struct Fig1Member {
  std::uint64_t seed = 0;
  double lambda_max_none = 0.0, m_lambda_none = 0.0;
  double lambda_max_meansub = 0.0, m_lambda_meansub = 0.0;
};
Fig1Member fig1_member(const NetSpec& net, int M, int T, std::uint64_t seed);

// Recomputes every theory value stored in an artifact directory from the
// echoed config and compares; throws NumericError on mismatch.
void verify_artifacts(const std::string& dir);

}  // namespace widefim::experiments
