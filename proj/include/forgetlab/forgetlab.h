/* Copyright (c) 2026, The forgetlab Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface of libforgetlab. Every call returns FL_OK or an error status;
 * the message of the last failure on the calling thread is available from
 * fl_last_error(). Calls that produce text (a directory, a JSON report)
 * leave it in fl_last_output() on success.
 */

#ifndef FORGETLAB_H_
#define FORGETLAB_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define FL_API __declspec(dllexport)
#else
#define FL_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fl_status {
  FL_OK = 0,
  FL_ERR_RUNTIME = 1,
  FL_ERR_SCHEMA = 2,
  FL_ERR_IO = 3,
  FL_ERR_DATA = 4,
  FL_ERR_NUMERIC = 5,
  FL_ERR_CONFIG = 6,
  FL_ERR_INPUT = 7,
  FL_ERR_UNDEFINED_VALUE = 8,
  FL_ERR_DIVERGENCE = 9,
  FL_ERR_CONDITIONING = 10,
  FL_ERR_PARSE = 11,
  FL_ERR_SHAPE = 12
} fl_status;

FL_API const char* fl_version(void);
FL_API const char* fl_status_name(fl_status status);
FL_API const char* fl_last_error(void);
FL_API const char* fl_last_output(void);

/* Output: the experiment directory. */
FL_API fl_status fl_run(const char* config_path, int64_t seed_offset, size_t jobs);

/* metrics: comma-separated selectors ("all", "cka,spectrum", ...).
 * spectrum_k / spectrum_m / spectrum_probes of 0 keep the configured value. */
FL_API fl_status fl_analyze(const char* experiment_dir, const char* metrics, size_t spectrum_k,
                            size_t spectrum_m, size_t spectrum_probes, size_t jobs);

/* kind: "ablate", "realign" or "both"; layer < 0 selects n_layers / 2.
 * Output: the report JSON. */
FL_API fl_status fl_intervene(const char* experiment_dir, const char* kind, double fraction, int64_t layer,
                              size_t task);

FL_API fl_status fl_report(const char* experiment_dir);

/* Either spec_path (a sweep JSON) or n_dirs completed experiment
 * directories. out_dir may be NULL when spec_path names one.
 * Output: the summary JSON. */
FL_API fl_status fl_sweep(const char* spec_path, const char* const* experiment_dirs, size_t n_dirs,
                          const char* out_dir, size_t jobs);

typedef struct fl_checkpoint fl_checkpoint;

FL_API fl_status fl_checkpoint_load(const char* checkpoint_dir, fl_checkpoint** out);
FL_API void fl_checkpoint_free(fl_checkpoint* checkpoint);
FL_API size_t fl_checkpoint_num_params(const fl_checkpoint* checkpoint);
FL_API const char* fl_checkpoint_id(const fl_checkpoint* checkpoint);
FL_API uint64_t fl_checkpoint_global_step(const fl_checkpoint* checkpoint);
/* Copies the flat parameter vector in canonical order; n must equal
 * fl_checkpoint_num_params. */
FL_API fl_status fl_checkpoint_copy_params(const fl_checkpoint* checkpoint, double* out, size_t n);

#ifdef __cplusplus
}
#endif

#endif /* FORGETLAB_H_ */
