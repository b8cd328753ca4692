/* widefim C API.
 *
 * A numerical laboratory for Fisher-information eigenvalue statistics of
 * wide random neural networks under batch/layer normalization. Experiments
 * are described by a JSON config (see README); runs write their artifacts
 * (metadata JSON, CSV tables, gnuplot scripts) into an output directory,
 * while the one-shot kinds (predict_only, spectrum_once) also return their
 * result as a JSON string.
 *
 * All functions are thread-compatible: distinct handles may be used from
 * distinct threads; a single handle must not be shared concurrently.
 */
#ifndef WIDEFIM_H
#define WIDEFIM_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum wf_status {
  WF_OK = 0,
  WF_ERROR = 1,           /* unexpected failure / bad call */
  WF_CONFIG_ERROR = 2,    /* invalid configuration */
  WF_DEGENERATE = 3,      /* degenerate regime (T<=2 batch norm, C<=2 layer
                             norm, centered network, zero variance, ...) */
  WF_NUMERIC_ERROR = 4    /* solver failure, non-finite values */
} wf_status;

const char* wf_status_name(wf_status status);
const char* wf_version(void);

/* Opaque experiment run. */
typedef struct wf_run wf_run;

wf_status wf_run_create(const char* config_json, wf_run** out);
wf_status wf_run_create_from_file(const char* path, wf_run** out);
void wf_run_destroy(wf_run* run);

/* Optional overrides applied on top of the parsed config. `kind` must match
 * the config's experiment field when that field is present. */
wf_status wf_run_set_kind(wf_run* run, const char* kind);
wf_status wf_run_set_seed(wf_run* run, uint64_t seed);
wf_status wf_run_set_threads(wf_run* run, int threads);
wf_status wf_run_set_output_dir(wf_run* run, const char* dir);
wf_status wf_run_set_profile(wf_run* run, const char* profile); /* desk|full */
wf_status wf_run_set_trials(wf_run* run, int trials);

/* Executes the experiment. Artifacts go to the output directory (when set);
 * the result JSON of the run is retained on the handle. */
wf_status wf_run_execute(wf_run* run);

/* Result JSON of the last successful execute (predict_only/spectrum_once:
 * the prediction/spectrum document; other kinds: the metadata document).
 * Owned by the handle; valid until destroy or the next execute. */
const char* wf_run_result_json(const wf_run* run);

/* Message of the last error on this handle ("" if none). */
const char* wf_run_error(const wf_run* run);

#ifdef __cplusplus
}
#endif

#endif /* WIDEFIM_H */
