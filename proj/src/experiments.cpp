#include "experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "parallel.hpp"
#include "rng.hpp"

namespace widefim::experiments {

using json = nlohmann::json;
using gaussq::default_grid;

namespace {

std::string fmt(double x) {
  char buffer[40];
  std::snprintf(buffer, sizeof(buffer), "%.17g", x);
  return buffer;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void reject_unknown(const json& j, const std::set<std::string>& known,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("unknown field '" + it.key() + "' in " + where);
}

}  // namespace

std::string kind_name(Kind kind) {
  switch (kind) {
    case Kind::fig1_sharpness: return "fig1_sharpness";
    case Kind::convrate: return "convrate";
    case Kind::phase_diagram: return "phase_diagram";
    case Kind::spectrum_once: return "spectrum_once";
    case Kind::predict_only: return "predict_only";
  }
  return "?";
}

Kind parse_kind(const std::string& name) {
  if (name == "fig1_sharpness") return Kind::fig1_sharpness;
  if (name == "convrate") return Kind::convrate;
  if (name == "phase_diagram") return Kind::phase_diagram;
  if (name == "spectrum_once") return Kind::spectrum_once;
  if (name == "predict_only") return Kind::predict_only;
  throw ConfigError("unknown experiment kind: " + name);
}

std::vector<double> EtaGrid::values() const {
  std::vector<double> v;
  const double decades = std::log10(max / min);
  const int n = static_cast<int>(std::floor(decades * per_decade + 1e-9)) + 1;
  for (int i = 0; i < n; ++i)
    v.push_back(min * std::pow(10.0, static_cast<double>(i) / per_decade));
  return v;
}

void ExperimentConfig::validate() const {
  net.validate();
  if (M_grid.empty()) throw ConfigError("config: empty M grid");
  for (int m : M_grid)
    if (m < 1) throw ConfigError("config: M entries must be >= 1");
  if (!T_equals_M && T_fixed < 1) throw ConfigError("config: T must be >= 1");
  if (ensembles < 1) throw ConfigError("config: ensembles must be >= 1");
  if (trials < 1) throw ConfigError("config: trials must be >= 1");
  if (steps < 0) throw ConfigError("config: steps must be >= 0");
  if (!(explosion_threshold > 0.0))
    throw ConfigError("config: explosion_threshold must be > 0");
  if (!(eta.min > 0.0) || eta.max < eta.min || eta.per_decade < 1)
    throw ConfigError("config: bad eta grid");
  if (mc_samples < 10000) throw ConfigError("config: mc_samples must be >= 1e4");
}

namespace {

NetSpec parse_net(const json& j) {
  reject_unknown(j,
                 {"L", "alpha", "alpha0", "C", "sigma_w2", "sigma_b2",
                  "activations", "norm_mode"},
                 "net");
  NetSpec net;
  net.L = j.value("L", 3);
  if (j.contains("alpha"))
    net.alpha = j.at("alpha").get<std::vector<double>>();
  else
    net.alpha.assign(std::max(0, net.L - 1), 1.0);
  net.alpha0 = j.value("alpha0", 1.0);
  net.C = j.value("C", 1);
  net.sigma_w2 = j.value("sigma_w2", 2.0);
  net.sigma_b2 = j.value("sigma_b2", 0.0);
  std::vector<std::string> acts;
  if (j.contains("activations")) {
    if (j.at("activations").is_string())
      acts.assign(std::max(0, net.L - 1), j.at("activations").get<std::string>());
    else
      acts = j.at("activations").get<std::vector<std::string>>();
  } else {
    acts.assign(std::max(0, net.L - 1), "relu");
  }
  for (const auto& a : acts) {
    try {
      net.activations.push_back(meanfield::Activation::parse(a));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  net.norm_mode = meanfield::parse_norm_mode(j.value("norm_mode", "none"));
  return net;
}

void apply_defaults(ExperimentConfig& c, bool have_M, bool have_T,
                    bool have_per_decade, bool have_ensembles,
                    bool have_steps) {
  const bool desk = c.profile == Profile::desk;
  switch (c.kind) {
    case Kind::fig1_sharpness:
      if (!have_M)
        c.M_grid = desk ? std::vector<int>{64, 128, 256, 512}
                        : std::vector<int>{64, 128, 256, 512, 1024, 2048, 4096};
      if (!have_T) c.T_equals_M = true;
      if (!have_ensembles) c.ensembles = desk ? 50 : 100;
      break;
    case Kind::convrate:
      if (!have_M)
        c.M_grid = desk ? std::vector<int>{64, 256, 1024}
                        : std::vector<int>{64, 128, 256, 512, 1024, 2048};
      if (!have_T) c.T_fixed = 100;
      if (!have_ensembles) c.ensembles = 100;
      break;
    case Kind::phase_diagram:
      if (!have_M)
        c.M_grid = desk ? std::vector<int>{64, 128, 256}
                        : std::vector<int>{64, 128, 256, 512, 1024};
      if (!have_T) c.T_fixed = 1000;
      if (!have_per_decade) c.eta.per_decade = desk ? 8 : 40;
      if (!have_steps) c.steps = desk ? 200 : 1000;
      break;
    case Kind::spectrum_once:
    case Kind::predict_only:
      if (!have_M) c.M_grid = {256};
      if (!have_T) c.T_fixed = 100;
      break;
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown(j,
                 {"experiment", "net", "grid", "ensembles", "steps",
                  "master_seed", "out", "explosion_threshold", "trials",
                  "threads", "profile", "mc_samples", "sigma_k", "ln_etas"},
                 "config");
  ExperimentConfig c;
  try {
    if (!j.contains("experiment"))
      throw ConfigError("config: missing 'experiment'");
    c.kind = parse_kind(j.at("experiment").get<std::string>());
    c.net = j.contains("net") ? parse_net(j.at("net")) : parse_net(json::object());

    bool have_M = false, have_T = false, have_per_decade = false;
    if (j.contains("grid")) {
      const json& g = j.at("grid");
      reject_unknown(g, {"M", "T", "eta"}, "grid");
      if (g.contains("M")) {
        c.M_grid = g.at("M").get<std::vector<int>>();
        have_M = true;
      }
      if (g.contains("T")) {
        have_T = true;
        if (g.at("T").is_string()) {
          if (g.at("T").get<std::string>() != "M")
            throw ConfigError("grid.T must be an integer or \"M\"");
          c.T_equals_M = true;
        } else {
          c.T_fixed = g.at("T").get<int>();
        }
      }
      if (g.contains("eta")) {
        const json& e = g.at("eta");
        reject_unknown(e, {"min", "max", "per_decade"}, "grid.eta");
        c.eta.min = e.value("min", c.eta.min);
        c.eta.max = e.value("max", c.eta.max);
        if (e.contains("per_decade")) {
          c.eta.per_decade = e.at("per_decade").get<int>();
          have_per_decade = true;
        }
      }
    }
    const bool have_ensembles = j.contains("ensembles");
    if (have_ensembles) c.ensembles = j.at("ensembles").get<int>();
    const bool have_steps = j.contains("steps");
    if (have_steps) c.steps = j.at("steps").get<int>();
    c.master_seed = j.value("master_seed", std::uint64_t{1});
    c.out_dir = j.value("out", std::string{});
    c.explosion_threshold = j.value("explosion_threshold", 1e3);
    c.trials = j.value("trials", 1);
    c.threads = j.value("threads", 0);
    if (j.contains("profile")) {
      const std::string p = j.at("profile").get<std::string>();
      if (p == "desk")
        c.profile = Profile::desk;
      else if (p == "full")
        c.profile = Profile::full;
      else
        throw ConfigError("profile must be 'desk' or 'full'");
    }
    c.mc_samples = j.value("mc_samples", 200000L);
    if (j.contains("sigma_k"))
      c.sigma_k = j.at("sigma_k").get<std::vector<double>>();
    if (j.contains("ln_etas")) {
      const json& e = j.at("ln_etas");
      reject_unknown(e, {"eta1", "eta2", "eta3"}, "ln_etas");
      meanfield::LayerNormEtas etas;
      etas.eta1 = e.at("eta1").get<double>();
      etas.eta2 = e.at("eta2").get<double>();
      etas.eta3 = e.at("eta3").get<double>();
      c.ln_etas = etas;
    }
    apply_defaults(c, have_M, have_T, have_per_decade, have_ensembles,
                   have_steps);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig parse_config_file(const std::string& path) {
  return parse_config(read_file(path));
}

namespace {

json net_to_json(const NetSpec& net) {
  json j;
  j["L"] = net.L;
  j["alpha"] = net.alpha;
  j["alpha0"] = net.alpha0;
  j["C"] = net.C;
  j["sigma_w2"] = net.sigma_w2;
  j["sigma_b2"] = net.sigma_b2;
  std::vector<std::string> acts;
  for (const auto& a : net.activations) acts.push_back(a.name());
  j["activations"] = acts;
  j["norm_mode"] = meanfield::norm_mode_name(net.norm_mode);
  return j;
}

json config_to_json_obj(const ExperimentConfig& c) {
  json j;
  j["experiment"] = kind_name(c.kind);
  j["net"] = net_to_json(c.net);
  j["grid"]["M"] = c.M_grid;
  if (c.T_equals_M)
    j["grid"]["T"] = "M";
  else
    j["grid"]["T"] = c.T_fixed;
  j["grid"]["eta"] = {{"min", c.eta.min},
                      {"max", c.eta.max},
                      {"per_decade", c.eta.per_decade}};
  j["ensembles"] = c.ensembles;
  j["steps"] = c.steps;
  j["master_seed"] = c.master_seed;
  j["out"] = c.out_dir;
  j["explosion_threshold"] = c.explosion_threshold;
  j["trials"] = c.trials;
  j["threads"] = c.threads;
  j["profile"] = c.profile == Profile::desk ? "desk" : "full";
  j["mc_samples"] = c.mc_samples;
  if (!c.sigma_k.empty()) j["sigma_k"] = c.sigma_k;
  if (c.ln_etas)
    j["ln_etas"] = {{"eta1", c.ln_etas->eta1},
                    {"eta2", c.ln_etas->eta2},
                    {"eta3", c.ln_etas->eta3}};
  return j;
}

json prediction_to_json(const meanfield::TheoryPrediction& p) {
  json j;
  j["regime"] = meanfield::regime_name(p.regime);
  j["M"] = p.M;
  j["T"] = p.T;
  j["rho"] = p.rho;
  j["m_lambda"] = p.m_lambda ? json(*p.m_lambda) : json();
  j["lambda_max_point"] =
      p.lambda_max_point ? json(*p.lambda_max_point) : json();
  j["lambda_max_lower"] =
      p.lambda_max_lower ? json(*p.lambda_max_lower) : json();
  j["lambda_max_upper"] =
      p.lambda_max_upper ? json(*p.lambda_max_upper) : json();
  j["bound_modulo_constant"] = p.bound_modulo_constant;
  j["kappa1"] = p.kappa1;
  j["kappa2"] = p.kappa2;
  return j;
}

json order_params_to_json(const meanfield::OrderParams& op) {
  json j;
  j["mode"] = meanfield::norm_mode_name(op.mode);
  j["q_t"] = op.q_t;
  j["q_st"] = op.q_st;
  j["qhat_t"] = op.qhat_t;
  j["qhat_st"] = op.qhat_st;
  j["qtilde_t"] = op.qtilde_t;
  j["qtilde_st"] = op.qtilde_st;
  return j;
}

}  // namespace

std::string config_to_json(const ExperimentConfig& config) {
  return config_to_json_obj(config).dump(2);
}

std::uint64_t member_seed(std::uint64_t master, int grid_index, int member) {
  return rng::substream(master, rng::Purpose::member,
                        static_cast<std::uint64_t>(grid_index),
                        static_cast<std::uint64_t>(member));
}

GdResult gd_train(Params params, const Batch& batch, const Matrix& labels,
                  double eta, int steps, double norm_eps,
                  double stop_threshold) {
  if (eta < 0.0) throw std::invalid_argument("gd_train: eta must be >= 0");
  const NormMode mode = params.spec.norm_mode;
  GdResult res;
  res.loss.reserve(steps + 1);
  netlab::LossGrad lg = netlab::loss_gradient(params, batch, labels, mode, norm_eps);
  res.loss.push_back(lg.loss);
  for (int step = 0; step < steps; ++step) {
    for (int l = 1; l <= params.spec.L; ++l) {
      params.W[l].noalias() -= eta * lg.dW[l];
      params.b[l].noalias() -= eta * lg.db[l];
    }
    lg = netlab::loss_gradient(params, batch, labels, mode, norm_eps);
    res.loss.push_back(lg.loss);
    res.steps_run = step + 1;
    if (!std::isfinite(lg.loss)) {
      res.diverged = true;
      break;
    }
    if (lg.loss > stop_threshold) {
      res.diverged = true;
      break;
    }
  }
  return res;
}

Matrix make_teacher_labels(const NetSpec& spec, int M, const Batch& batch,
                           std::uint64_t teacher_seed) {
  Params teacher = netlab::init_params(spec, M, teacher_seed);
  return netlab::forward(teacher, batch, spec.norm_mode).F;
}

Fig1Member fig1_member(const NetSpec& net, int M, int T, std::uint64_t seed) {
  Params params = netlab::init_params(net, M, seed);
  Batch batch = netlab::make_batch(net, M, T, seed);
  fimlab::ReversedFIM fstar = fimlab::reversed_fim_unnormalized(params, batch);
  const long long P = params.param_count();
  fimlab::SpectrumStats none = fimlab::spectrum(fstar, P);
  fimlab::ReversedFIM meansub = fimlab::project_mean_subtraction(fstar);
  fimlab::SpectrumStats ms = fimlab::spectrum(meansub, P);
  Fig1Member m;
  m.seed = seed;
  m.lambda_max_none = none.lambda_max;
  m.m_lambda_none = none.m_lambda;
  m.lambda_max_meansub = ms.lambda_max;
  m.m_lambda_meansub = ms.m_lambda;
  return m;
}

namespace {

struct Agg {
  double mean = 0.0, stddev = 0.0, minimum = 0.0;
};

Agg aggregate(const std::vector<double>& xs) {
  Agg a;
  const double n = static_cast<double>(xs.size());
  for (double x : xs) a.mean += x;
  a.mean /= n;
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - a.mean) * (x - a.mean);
    a.stddev = std::sqrt(ss / (n - 1.0));
  }
  a.minimum = *std::min_element(xs.begin(), xs.end());
  return a;
}

struct LineFit {
  double slope = 0.0, intercept = 0.0, slope_stderr = 0.0;
};

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  LineFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  if (n > 2) {
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = y[i] - fit.intercept - fit.slope * x[i];
      ss += r * r;
    }
    fit.slope_stderr = std::sqrt(ss / (static_cast<double>(n) - 2.0) / sxx);
  }
  return fit;
}

void ensure_out_dir(const ExperimentConfig& c) {
  if (c.out_dir.empty())
    throw ConfigError("config: 'out' directory required for " +
                      kind_name(c.kind));
  std::filesystem::create_directories(c.out_dir);
}

std::string run_fig1(const ExperimentConfig& c) {
  if (!c.T_equals_M)
    throw ConfigError("fig1_sharpness: requires the T = M rule (grid.T = \"M\")");
  ensure_out_dir(c);
  const auto& grid = default_grid();

  const std::size_t points = c.M_grid.size();
  std::vector<std::vector<Fig1Member>> members(points);
  for (auto& v : members) v.resize(c.ensembles);
  parallel_for(points * c.ensembles, c.threads, [&](std::size_t idx) {
    const int gi = static_cast<int>(idx / c.ensembles);
    const int j = static_cast<int>(idx % c.ensembles);
    const int M = c.M_grid[gi];
    members[gi][j] =
        fig1_member(c.net, M, c.T_for(M), member_seed(c.master_seed, gi, j));
  });

  json theory = json::array();
  json aggregates = json::array();
  std::ostringstream csv, mcsv;
  csv << "M,T,mode,ensemble_mean_lambda_max,ensemble_std,theory_value,theory_kind\n";
  mcsv << "M,T,member,seed,lambda_max_none,m_lambda_none,lambda_max_meansub,"
          "m_lambda_meansub\n";
  for (std::size_t gi = 0; gi < points; ++gi) {
    const int M = c.M_grid[gi];
    const int T = c.T_for(M);
    std::vector<double> none, ms;
    for (int j = 0; j < c.ensembles; ++j) {
      const Fig1Member& m = members[gi][j];
      none.push_back(m.lambda_max_none);
      ms.push_back(m.lambda_max_meansub);
      mcsv << M << ',' << T << ',' << j << ',' << m.seed << ','
           << fmt(m.lambda_max_none) << ',' << fmt(m.m_lambda_none) << ','
           << fmt(m.lambda_max_meansub) << ',' << fmt(m.m_lambda_meansub)
           << '\n';
    }
    const Agg agg_none = aggregate(none);
    const Agg agg_ms = aggregate(ms);
    for (const auto& [mode, agg] :
         {std::pair<const char*, const Agg&>{"none", agg_none},
          {"bn_last_meansub", agg_ms}})
      aggregates.push_back({{"M", M},
                            {"T", T},
                            {"mode", mode},
                            {"mean", agg.mean},
                            {"std", agg.stddev},
                            {"min", agg.minimum}});
    const auto pred_none = meanfield::predict_unnormalized(c.net, M, T, grid);
    const auto pred_ms = meanfield::predict_bn_last_meansub(
        c.net, M, T, meanfield::TScaling::big_T, grid);
    csv << M << ',' << T << ",none," << fmt(agg_none.mean) << ','
        << fmt(agg_none.stddev) << ',' << fmt(*pred_none.lambda_max_point)
        << ",thm22_lambda_max\n";
    csv << M << ',' << T << ",bn_last_meansub," << fmt(agg_ms.mean) << ','
        << fmt(agg_ms.stddev) << ',' << fmt(*pred_ms.lambda_max_lower)
        << ",thm33_lower_bound\n";
    theory.push_back({{"M", M},
                      {"T", T},
                      {"mode", "none"},
                      {"kind", "thm22_lambda_max"},
                      {"value", *pred_none.lambda_max_point}});
    theory.push_back({{"M", M},
                      {"T", T},
                      {"mode", "bn_last_meansub"},
                      {"kind", "thm33_lower_bound"},
                      {"value", *pred_ms.lambda_max_lower}});
  }

  json meta;
  meta["config"] = config_to_json_obj(c);
  meta["version"] = "0.1.0";
  meta["seed_scheme"] =
      "member_seed = splitmix64 chain over (master ^ MEMBER, grid_index, member)";
  meta["theory"] = theory;
  meta["aggregates"] = aggregates;
  const std::string meta_text = meta.dump(2) + "\n";
  write_file(c.out_dir + "/metadata.json", meta_text);
  write_file(c.out_dir + "/fig1.csv", csv.str());
  write_file(c.out_dir + "/fig1_members.csv", mcsv.str());
  write_file(c.out_dir + "/fig1.gp",
             "set datafile separator comma\n"
             "set logscale xy\n"
             "set xlabel 'M'\nset ylabel 'largest eigenvalue'\n"
             "plot 'fig1.csv' every ::1 using (strcol(3) eq 'none'?$1:NaN):4:5 "
             "with yerrorbars title 'no normalization', \\\n"
             "     'fig1.csv' every ::1 using (strcol(3) eq 'none'?$1:NaN):6 "
             "with lines title 'theory', \\\n"
             "     'fig1.csv' every ::1 using (strcol(3) eq "
             "'bn_last_meansub'?$1:NaN):4:5 with yerrorbars title 'mean "
             "subtraction', \\\n"
             "     'fig1.csv' every ::1 using (strcol(3) eq "
             "'bn_last_meansub'?$1:NaN):6 with lines title 'lower bound'\n");
  return meta_text;
}

std::string run_convrate(const ExperimentConfig& c) {
  if (c.net.norm_mode != NormMode::none)
    throw ConfigError("convrate: norm_mode must be 'none'");
  if (c.T_equals_M) throw ConfigError("convrate: requires a fixed T");
  if (c.ensembles < 100)
    throw ConfigError("convrate: at least 100 ensembles required");
  ensure_out_dir(c);

  const std::size_t points = c.M_grid.size();
  std::vector<std::vector<double>> qst(points), qt(points);
  for (auto& v : qst) v.resize(c.ensembles);
  for (auto& v : qt) v.resize(c.ensembles);
  parallel_for(points * c.ensembles, c.threads, [&](std::size_t idx) {
    const int gi = static_cast<int>(idx / c.ensembles);
    const int j = static_cast<int>(idx % c.ensembles);
    const int M = c.M_grid[gi];
    const std::uint64_t seed = member_seed(c.master_seed, gi, j);
    Params params = netlab::init_params(c.net, M, seed);
    Batch batch = netlab::make_batch(c.net, M, c.T_for(M), seed);
    const auto eb = netlab::empirical_backward_order_params(params, batch);
    qst[gi][j] = eb.qtilde_M_st[1];
    qt[gi][j] = eb.qtilde_M_t[1];
  });

  std::ostringstream csv, mcsv;
  csv << "M,T,ensembles,std_qtilde1_st\n";
  mcsv << "M,T,member,seed,qtilde1_st,qtilde1_t\n";
  std::vector<double> logm, logstd;
  for (std::size_t gi = 0; gi < points; ++gi) {
    const int M = c.M_grid[gi];
    const Agg agg = aggregate(qst[gi]);
    csv << M << ',' << c.T_for(M) << ',' << c.ensembles << ','
        << fmt(agg.stddev) << '\n';
    logm.push_back(std::log(static_cast<double>(M)));
    logstd.push_back(std::log(agg.stddev));
    for (int j = 0; j < c.ensembles; ++j)
      mcsv << M << ',' << c.T_for(M) << ',' << j << ','
           << member_seed(c.master_seed, static_cast<int>(gi), j) << ','
           << fmt(qst[gi][j]) << ',' << fmt(qt[gi][j]) << '\n';
  }
  const LineFit fit = fit_line(logm, logstd);

  json meta;
  meta["config"] = config_to_json_obj(c);
  meta["version"] = "0.1.0";
  meta["seed_scheme"] =
      "member_seed = splitmix64 chain over (master ^ MEMBER, grid_index, member)";
  meta["fit"] = {{"slope", fit.slope},
                 {"intercept", fit.intercept},
                 {"slope_stderr", fit.slope_stderr}};
  const std::string meta_text = meta.dump(2) + "\n";
  write_file(c.out_dir + "/metadata.json", meta_text);
  write_file(c.out_dir + "/convrate.csv", csv.str());
  write_file(c.out_dir + "/convrate_members.csv", mcsv.str());
  write_file(c.out_dir + "/convrate.gp",
             "set datafile separator comma\n"
             "set logscale xy\n"
             "set xlabel 'M'\nset ylabel 'std of qtilde^1_st'\n"
             "plot 'convrate.csv' every ::1 using 1:4 with linespoints title "
             "'measured'\n");
  return meta_text;
}

std::string run_phase(const ExperimentConfig& c) {
  ensure_out_dir(c);
  const auto& grid = default_grid();
  const std::vector<double> etas = c.eta.values();
  const std::array<NormMode, 2> modes = {NormMode::none,
                                         NormMode::bn_last_meansub};

  // One network/batch/teacher per (M, trial), shared across the eta row and
  // both panels; the un-normalized lambda_max at initialization feeds the
  // 2/lambda_max overlay.
  struct Shared {
    Params params_none, params_meansub;
    Batch batch;
    Matrix labels_none, labels_meansub;
    double lambda_max_init = 0.0;
    std::uint64_t seed = 0;
  };
  const std::size_t rows = c.M_grid.size() * c.trials;
  std::vector<Shared> shared(rows);
  parallel_for(rows, c.threads, [&](std::size_t r) {
    const int gi = static_cast<int>(r / c.trials);
    const int trial = static_cast<int>(r % c.trials);
    const int M = c.M_grid[gi];
    const int T = c.T_for(M);
    Shared& s = shared[r];
    s.seed = member_seed(c.master_seed, gi, trial);
    NetSpec spec_none = c.net;
    spec_none.norm_mode = NormMode::none;
    NetSpec spec_ms = c.net;
    spec_ms.norm_mode = NormMode::bn_last_meansub;
    s.params_none = netlab::init_params(spec_none, M, s.seed);
    s.params_meansub = s.params_none;
    s.params_meansub.spec = spec_ms;
    s.batch = netlab::make_batch(spec_none, M, T, s.seed);
    const std::uint64_t tseed = rng::substream(s.seed, rng::Purpose::teacher);
    s.labels_none = make_teacher_labels(spec_none, M, s.batch, tseed);
    s.labels_meansub = make_teacher_labels(spec_ms, M, s.batch, tseed);
    fimlab::ReversedFIM fstar =
        fimlab::reversed_fim_unnormalized(s.params_none, s.batch);
    s.lambda_max_init =
        fimlab::spectrum(fstar, s.params_none.param_count()).lambda_max;
  });

  struct Cell {
    double final_loss = 0.0;
    bool diverged = false;
    int steps_run = 0;
  };
  const std::size_t cells_per_mode = rows * etas.size();
  std::vector<Cell> cells(2 * cells_per_mode);
  parallel_for(2 * cells_per_mode, c.threads, [&](std::size_t idx) {
    const int mode_i = static_cast<int>(idx / cells_per_mode);
    const std::size_t rest = idx % cells_per_mode;
    const std::size_t r = rest / etas.size();
    const std::size_t ei = rest % etas.size();
    const Shared& s = shared[r];
    const Params& p = mode_i == 0 ? s.params_none : s.params_meansub;
    const Matrix& y = mode_i == 0 ? s.labels_none : s.labels_meansub;
    GdResult gd = gd_train(p, s.batch, y, etas[ei], c.steps, 0.0,
                           c.explosion_threshold);
    Cell& cell = cells[idx];
    cell.final_loss = gd.loss.back();
    cell.diverged = gd.diverged;
    cell.steps_run = gd.steps_run;
  });

  std::ostringstream csv, tcsv;
  csv << "mode,M,T,trial,seed,eta,final_loss,diverged,steps_run\n";
  // min over trials per cell, the accumulated multi-trial view
  std::map<std::tuple<int, int, std::size_t>, double> min_loss;
  for (std::size_t idx = 0; idx < cells.size(); ++idx) {
    const int mode_i = static_cast<int>(idx / cells_per_mode);
    const std::size_t rest = idx % cells_per_mode;
    const std::size_t r = rest / etas.size();
    const std::size_t ei = rest % etas.size();
    const int gi = static_cast<int>(r / c.trials);
    const int trial = static_cast<int>(r % c.trials);
    const int M = c.M_grid[gi];
    const Cell& cell = cells[idx];
    csv << meanfield::norm_mode_name(modes[mode_i]) << ',' << M << ','
        << c.T_for(M) << ',' << trial << ',' << shared[r].seed << ','
        << fmt(etas[ei]) << ',' << fmt(cell.final_loss) << ','
        << (cell.diverged ? 1 : 0) << ',' << cell.steps_run << '\n';
    const auto key = std::make_tuple(mode_i, gi, ei);
    auto it = min_loss.find(key);
    if (it == min_loss.end() || cell.final_loss < it->second)
      min_loss[key] = cell.final_loss;
  }
  std::ostringstream mincsv;
  if (c.trials > 1) {
    mincsv << "mode,M,T,eta,min_final_loss,diverged\n";
    for (const auto& [key, loss] : min_loss) {
      const auto [mode_i, gi, ei] = key;
      const int M = c.M_grid[gi];
      mincsv << meanfield::norm_mode_name(modes[mode_i]) << ',' << M << ','
             << c.T_for(M) << ',' << fmt(etas[ei]) << ',' << fmt(loss) << ','
             << (loss > c.explosion_threshold || !std::isfinite(loss) ? 1 : 0)
             << '\n';
    }
  }

  json theory = json::array();
  tcsv << "mode,M,trial,boundary_eta,kind\n";
  for (std::size_t gi = 0; gi < c.M_grid.size(); ++gi) {
    const int M = c.M_grid[gi];
    const int T = c.T_for(M);
    for (int trial = 0; trial < c.trials; ++trial) {
      const Shared& s = shared[gi * c.trials + trial];
      tcsv << "none," << M << ',' << trial << ','
           << fmt(2.0 / s.lambda_max_init) << ",two_over_lambda_max_measured\n";
    }
    const auto pred = meanfield::predict_bn_last_meansub(
        c.net, M, T, meanfield::TScaling::big_T, grid);
    const double boundary = 2.0 / *pred.lambda_max_lower;
    tcsv << "bn_last_meansub," << M << ",-1," << fmt(boundary)
         << ",two_over_meansub_lower_bound\n";
    theory.push_back({{"M", M},
                      {"T", T},
                      {"mode", "bn_last_meansub"},
                      {"kind", "two_over_meansub_lower_bound"},
                      {"value", boundary}});
  }

  json meta;
  meta["config"] = config_to_json_obj(c);
  meta["version"] = "0.1.0";
  meta["seed_scheme"] =
      "member_seed = splitmix64 chain over (master ^ MEMBER, M_index, trial)";
  meta["theory"] = theory;
  const std::string meta_text = meta.dump(2) + "\n";
  write_file(c.out_dir + "/metadata.json", meta_text);
  write_file(c.out_dir + "/phase.csv", csv.str());
  if (c.trials > 1) write_file(c.out_dir + "/phase_min.csv", mincsv.str());
  write_file(c.out_dir + "/phase_theory.csv", tcsv.str());
  write_file(c.out_dir + "/phase.gp",
             "set datafile separator comma\n"
             "set logscale y\n"
             "set xlabel 'M'\nset ylabel 'eta'\n"
             "set view map\n"
             "# final losses, un-normalized panel\n"
             "splot 'phase.csv' every ::1 using (strcol(1) eq "
             "'none'?$2:NaN):6:(log10($7)) with points pt 5 ps 2 palette\n");
  return meta_text;
}

}  // namespace

std::string predict_only_json(const ExperimentConfig& c) {
  const auto& grid = default_grid();
  json out;
  out["config"] = config_to_json_obj(c);
  {
    meanfield::OrderParams op = meanfield::forward_order_params(c.net, grid);
    meanfield::backward_order_params(c.net, grid, op);
    out["order_params"] = order_params_to_json(op);
    const auto k = meanfield::kappas(c.net, op);
    out["kappa"] = {{"kappa1", k.kappa1},
                    {"kappa2", k.kappa2},
                    {"centered_warning", k.centered_warning}};
  }
  json preds = json::array();
  auto push_error = [&preds](const std::string& regime, int M, int T,
                             const std::string& message) {
    preds.push_back(
        {{"regime", regime}, {"M", M}, {"T", T}, {"error", message}});
  };
  for (std::size_t gi = 0; gi < c.M_grid.size(); ++gi) {
    const int M = c.M_grid[gi];
    const int T = c.T_for(M);
    try {
      preds.push_back(
          prediction_to_json(meanfield::predict_unnormalized(c.net, M, T, grid)));
    } catch (const std::exception& e) {
      push_error("unnormalized", M, T, e.what());
    }
    try {
      preds.push_back(prediction_to_json(meanfield::predict_bn_last_meansub(
          c.net, M, T, meanfield::TScaling::small_T, grid)));
      preds.push_back(prediction_to_json(meanfield::predict_bn_last_meansub(
          c.net, M, T, meanfield::TScaling::big_T, grid)));
    } catch (const std::exception& e) {
      push_error("bn_last_meansub", M, T, e.what());
    }
    if (!c.sigma_k.empty()) {
      try {
        preds.push_back(prediction_to_json(
            meanfield::predict_bn_last_full(c.net, M, T, c.sigma_k, grid)));
      } catch (const std::exception& e) {
        push_error("bn_last_full_bigT", M, T, e.what());
      }
    }
    try {
      const auto bn = meanfield::bn_middle_order_params(
          c.net, T, c.mc_samples,
          rng::substream(c.master_seed, rng::Purpose::bn_montecarlo));
      preds.push_back(prediction_to_json(
          meanfield::predict_bn_middle_lower_bound(c.net, M, T, bn)));
    } catch (const std::exception& e) {
      push_error("bn_middle_bound", M, T, e.what());
    }
    if (c.net.C <= 2) {
      push_error("layernorm", M, T,
                 "degenerate: C <= 2 makes the layer-norm FIM a zero matrix");
    } else if (c.ln_etas) {
      try {
        preds.push_back(prediction_to_json(
            meanfield::predict_layernorm(c.net, M, T, *c.ln_etas, grid)));
      } catch (const std::exception& e) {
        push_error("layernorm", M, T, e.what());
      }
    }
  }
  if (c.net.norm_mode == NormMode::layernorm) {
    meanfield::OrderParams op = meanfield::layernorm_order_params(c.net, grid);
    out["layernorm_order_params"] = order_params_to_json(op);
  }
  out["predictions"] = preds;
  return out.dump(2) + "\n";
}

std::string spectrum_once_json(const ExperimentConfig& c) {
  const auto& grid = default_grid();
  const int M = c.M_grid.front();
  const int T = c.T_for(M);
  const NormMode mode = c.net.norm_mode;
  const std::uint64_t seed = member_seed(c.master_seed, 0, 0);
  Params params = netlab::init_params(c.net, M, seed);
  Batch batch = netlab::make_batch(c.net, M, T, seed);
  const long long P = params.param_count();
  const long long ct = static_cast<long long>(c.net.C) * T;
  const bool full = ct <= 1024;

  fimlab::SpectrumStats stats;
  json extra;
  switch (mode) {
    case NormMode::none: {
      auto fstar = fimlab::reversed_fim_unnormalized(params, batch);
      stats = fimlab::spectrum(fstar, P, full);
      break;
    }
    case NormMode::bn_last_meansub: {
      auto fstar = fimlab::reversed_fim_unnormalized(params, batch);
      stats = fimlab::spectrum(fimlab::project_mean_subtraction(fstar), P, full);
      break;
    }
    case NormMode::bn_last_full: {
      auto fstar = fimlab::reversed_fim_unnormalized(params, batch);
      auto meansub = fimlab::project_mean_subtraction(fstar);
      auto tr = netlab::forward(params, batch, NormMode::bn_last_meansub);
      stats = fimlab::spectrum(
          fimlab::apply_variance_projector(meansub, tr.F), P, full);
      auto full_tr = netlab::forward(params, batch, NormMode::bn_last_full);
      const auto ns =
          fimlab::measure_normalization_stats(full_tr, NormMode::bn_last_full);
      extra["sigma_k"] = ns.sigma_k;
      break;
    }
    case NormMode::bn_middle:
    case NormMode::layernorm: {
      auto jb = netlab::jacobian(params, batch, mode, 0.0, nullptr,
                                 effective_threads(c.threads));
      stats = fimlab::spectrum(fimlab::reversed_fim(jb, mode), P, full);
      if (mode == NormMode::layernorm) {
        auto tr = netlab::forward(params, batch, mode);
        const auto ns = fimlab::measure_normalization_stats(tr, mode);
        extra["etas"] = {{"eta1", ns.etas.eta1},
                         {"eta2", ns.etas.eta2},
                         {"eta3", ns.etas.eta3}};
      }
      break;
    }
  }

  json out;
  out["config"] = config_to_json_obj(c);
  out["M"] = M;
  out["T"] = T;
  out["mode"] = meanfield::norm_mode_name(mode);
  out["P"] = P;
  out["seed"] = seed;
  out["stats"] = {{"m_lambda", stats.m_lambda},
                  {"s_lambda", stats.s_lambda},
                  {"lambda_max", stats.lambda_max},
                  {"solver", stats.solver},
                  {"iterations", stats.iterations},
                  {"converged", stats.converged}};
  if (stats.eigenvalues) out["eigenvalues"] = *stats.eigenvalues;
  if (!extra.is_null())
    for (auto it = extra.begin(); it != extra.end(); ++it)
      out[it.key()] = it.value();

  if (mode == NormMode::none && c.net.non_centered(grid)) {
    const auto rep = fimlab::top_eigvec_alignment(params, batch, grid);
    out["alignment"] = {{"cosines", rep.cosines},
                        {"principal_angles", rep.principal_angles},
                        {"C", rep.C}};
  } else {
    out["alignment"] = nullptr;
  }
  return out.dump(2) + "\n";
}

std::string run(const ExperimentConfig& config) {
  switch (config.kind) {
    case Kind::fig1_sharpness: {
      const std::string meta = run_fig1(config);
      verify_artifacts(config.out_dir);
      return meta;
    }
    case Kind::convrate:
      return run_convrate(config);
    case Kind::phase_diagram: {
      const std::string meta = run_phase(config);
      verify_artifacts(config.out_dir);
      return meta;
    }
    case Kind::spectrum_once: {
      const std::string text = spectrum_once_json(config);
      if (!config.out_dir.empty()) {
        std::filesystem::create_directories(config.out_dir);
        write_file(config.out_dir + "/spectrum.json", text);
      }
      return text;
    }
    case Kind::predict_only: {
      const std::string text = predict_only_json(config);
      if (!config.out_dir.empty()) {
        std::filesystem::create_directories(config.out_dir);
        write_file(config.out_dir + "/predictions.json", text);
      }
      return text;
    }
  }
  throw std::logic_error("run: unreachable");
}

void verify_artifacts(const std::string& dir) {
  const json meta = json::parse(read_file(dir + "/metadata.json"));
  const ExperimentConfig c = parse_config(meta.at("config").dump());
  if (!meta.contains("theory")) return;
  const auto& grid = default_grid();
  for (const auto& row : meta.at("theory")) {
    const int M = row.at("M").get<int>();
    const int T = row.at("T").get<int>();
    const std::string kind = row.at("kind").get<std::string>();
    const double stored = row.at("value").get<double>();
    double recomputed = 0.0;
    if (kind == "thm22_lambda_max") {
      recomputed =
          *meanfield::predict_unnormalized(c.net, M, T, grid).lambda_max_point;
    } else if (kind == "thm33_lower_bound") {
      recomputed = *meanfield::predict_bn_last_meansub(
                        c.net, M, T, meanfield::TScaling::big_T, grid)
                        .lambda_max_lower;
    } else if (kind == "two_over_meansub_lower_bound") {
      recomputed = 2.0 / *meanfield::predict_bn_last_meansub(
                              c.net, M, T, meanfield::TScaling::big_T, grid)
                              .lambda_max_lower;
    } else {
      throw NumericError("verify_artifacts: unknown theory kind " + kind);
    }
    if (!(std::abs(recomputed - stored) <=
          1e-12 * std::max(1.0, std::abs(recomputed))))
      throw NumericError("verify_artifacts: stale theory value for " + kind +
                         " at M=" + std::to_string(M));
  }
}

}  // namespace widefim::experiments
