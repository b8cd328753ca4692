// widefim command-line interface. Thin shell over the C API: every subcommand
// loads a JSON config, applies the common flag overrides and executes.
//
//   widefim predict  --config cfg.json [--out dir]   theory predictions JSON
//   widefim spectrum --config cfg.json [--out dir]   one-shot spectrum JSON
//   widefim fig1     --config cfg.json --out dir     sharpness vs width
//   widefim convrate --config cfg.json --out dir     order-parameter rate
//   widefim phase    --config cfg.json --out dir [--trials N]
//
// Common flags: --seed <u64>, --out <dir>, --threads <n>, --profile desk|full.
// Exit codes: 0 ok, 2 config error, 3 degenerate regime, 4 numerical failure.
#include <cstdint>
#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "widefim/widefim.h"

namespace {

struct CommonOpts {
  std::string config;
  std::string out;
  std::string profile;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = -1;
  int trials = 0;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config, "JSON config file")->required();
  cmd->add_option("--out", opts.out, "output directory");
  cmd->add_option("--threads", opts.threads, "worker threads (0 = all cores)");
  cmd->add_option("--profile", opts.profile, "desk|full")
      ->check(CLI::IsMember({"desk", "full"}));
  cmd->add_option_function<std::uint64_t>(
      "--seed",
      [&opts](const std::uint64_t& s) {
        opts.seed = s;
        opts.seed_set = true;
      },
      "master seed override");
}

int execute(const char* kind, const CommonOpts& opts, bool print_result) {
  wf_run* run = nullptr;
  wf_status st = wf_run_create_from_file(opts.config.c_str(), &run);
  if (st != WF_OK) {
    std::fprintf(stderr, "widefim: cannot load config '%s' (%s)\n",
                 opts.config.c_str(), wf_status_name(st));
    return st;
  }
  auto fail = [&](wf_status s) {
    std::fprintf(stderr, "widefim: %s (%s)\n", wf_run_error(run),
                 wf_status_name(s));
    wf_run_destroy(run);
    return s;
  };
  if ((st = wf_run_set_kind(run, kind)) != WF_OK) return fail(st);
  if (opts.seed_set && (st = wf_run_set_seed(run, opts.seed)) != WF_OK)
    return fail(st);
  if (opts.threads >= 0 && (st = wf_run_set_threads(run, opts.threads)) != WF_OK)
    return fail(st);
  if (!opts.out.empty() &&
      (st = wf_run_set_output_dir(run, opts.out.c_str())) != WF_OK)
    return fail(st);
  if (!opts.profile.empty() &&
      (st = wf_run_set_profile(run, opts.profile.c_str())) != WF_OK)
    return fail(st);
  if (opts.trials > 0 && (st = wf_run_set_trials(run, opts.trials)) != WF_OK)
    return fail(st);
  if ((st = wf_run_execute(run)) != WF_OK) return fail(st);
  if (print_result) std::fputs(wf_run_result_json(run), stdout);
  wf_run_destroy(run);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fisher-information eigenvalue laboratory for wide networks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", wf_version());

  CommonOpts predict_opts, spectrum_opts, fig1_opts, convrate_opts, phase_opts;
  CLI::App* predict = app.add_subcommand("predict", "theory predictions");
  add_common(predict, predict_opts);
  CLI::App* spectrum =
      app.add_subcommand("spectrum", "one-shot empirical spectrum");
  add_common(spectrum, spectrum_opts);
  CLI::App* fig1 =
      app.add_subcommand("fig1", "largest eigenvalue vs width, T = M");
  add_common(fig1, fig1_opts);
  CLI::App* convrate =
      app.add_subcommand("convrate", "backward order-parameter convergence");
  add_common(convrate, convrate_opts);
  CLI::App* phase =
      app.add_subcommand("phase", "gradient-descent phase diagram");
  add_common(phase, phase_opts);
  phase->add_option("--trials", phase_opts.trials,
                    "independent trials per cell");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (predict->parsed()) return execute("predict_only", predict_opts, true);
  if (spectrum->parsed()) return execute("spectrum_once", spectrum_opts, true);
  if (fig1->parsed()) return execute("fig1_sharpness", fig1_opts, false);
  if (convrate->parsed()) return execute("convrate", convrate_opts, false);
  if (phase->parsed()) return execute("phase_diagram", phase_opts, false);
  return 2;
}
