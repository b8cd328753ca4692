#include "widefim/widefim.h"

#include <exception>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <json.hpp>

#include "experiments.hpp"

using widefim::ConfigError;
using widefim::DegenerateError;
using widefim::NumericError;

// The handle keeps the raw config text and applies overrides as a JSON patch
// when executing, so kind/profile-dependent defaults resolve after every
// override is known.
struct wf_run {
  std::string config_text;
  std::optional<std::string> kind, profile, out_dir;
  std::optional<uint64_t> seed;
  std::optional<int> threads, trials;
  std::string result;
  std::string error;
};

namespace {

template <class Fn>
wf_status guarded(wf_run* run, Fn&& fn) {
  if (!run) return WF_ERROR;
  run->error.clear();
  try {
    fn();
    return WF_OK;
  } catch (const ConfigError& e) {
    run->error = e.what();
    return WF_CONFIG_ERROR;
  } catch (const DegenerateError& e) {
    run->error = e.what();
    return WF_DEGENERATE;
  } catch (const NumericError& e) {
    run->error = e.what();
    return WF_NUMERIC_ERROR;
  } catch (const std::exception& e) {
    run->error = e.what();
    return WF_ERROR;
  }
}

wf_status create_common(std::string text, wf_run** out) {
  if (!out) return WF_ERROR;
  *out = nullptr;
  auto run = new wf_run();
  run->config_text = std::move(text);
  const wf_status st = guarded(run, [&] {
    // Early syntax check; semantic validation happens at execute.
    try {
      const auto parsed = nlohmann::json::parse(run->config_text);
      (void)parsed;
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  });
  if (st != WF_OK) {
    delete run;
    return st;
  }
  *out = run;
  return WF_OK;
}

}  // namespace

extern "C" {

const char* wf_status_name(wf_status status) {
  switch (status) {
    case WF_OK: return "ok";
    case WF_ERROR: return "error";
    case WF_CONFIG_ERROR: return "config_error";
    case WF_DEGENERATE: return "degenerate_regime";
    case WF_NUMERIC_ERROR: return "numeric_error";
  }
  return "?";
}

const char* wf_version(void) { return "0.1.0"; }

wf_status wf_run_create(const char* config_json, wf_run** out) {
  if (!config_json) return WF_CONFIG_ERROR;
  return create_common(config_json, out);
}

wf_status wf_run_create_from_file(const char* path, wf_run** out) {
  if (!path) return WF_CONFIG_ERROR;
  std::ifstream in(path, std::ios::binary);
  if (!in) return WF_CONFIG_ERROR;
  std::ostringstream ss;
  ss << in.rdbuf();
  return create_common(ss.str(), out);
}

void wf_run_destroy(wf_run* run) { delete run; }

wf_status wf_run_set_kind(wf_run* run, const char* kind) {
  return guarded(run, [&] {
    if (!kind) throw ConfigError("kind is null");
    (void)widefim::experiments::parse_kind(kind);
    run->kind = kind;
  });
}

wf_status wf_run_set_seed(wf_run* run, uint64_t seed) {
  return guarded(run, [&] { run->seed = seed; });
}

wf_status wf_run_set_threads(wf_run* run, int threads) {
  return guarded(run, [&] {
    if (threads < 0) throw ConfigError("threads must be >= 0");
    run->threads = threads;
  });
}

wf_status wf_run_set_output_dir(wf_run* run, const char* dir) {
  return guarded(run, [&] {
    if (!dir) throw ConfigError("output dir is null");
    run->out_dir = dir;
  });
}

wf_status wf_run_set_profile(wf_run* run, const char* profile) {
  return guarded(run, [&] {
    const std::string p = profile ? profile : "";
    if (p != "desk" && p != "full")
      throw ConfigError("profile must be 'desk' or 'full'");
    run->profile = p;
  });
}

wf_status wf_run_set_trials(wf_run* run, int trials) {
  return guarded(run, [&] {
    if (trials < 1) throw ConfigError("trials must be >= 1");
    run->trials = trials;
  });
}

wf_status wf_run_execute(wf_run* run) {
  return guarded(run, [&] {
    nlohmann::json j = nlohmann::json::parse(run->config_text);
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    if (run->kind) {
      if (j.contains("experiment") &&
          j.at("experiment").get<std::string>() != *run->kind)
        throw ConfigError("experiment kind '" + *run->kind +
                          "' does not match the config file ('" +
                          j.at("experiment").get<std::string>() + "')");
      j["experiment"] = *run->kind;
    }
    if (run->profile) j["profile"] = *run->profile;
    if (run->seed) j["master_seed"] = *run->seed;
    if (run->threads) j["threads"] = *run->threads;
    if (run->trials) j["trials"] = *run->trials;
    if (run->out_dir) j["out"] = *run->out_dir;
    const auto config = widefim::experiments::parse_config(j.dump());
    run->result = widefim::experiments::run(config);
  });
}

const char* wf_run_result_json(const wf_run* run) {
  return run ? run->result.c_str() : "";
}

const char* wf_run_error(const wf_run* run) {
  return run ? run->error.c_str() : "";
}

}  // extern "C"
