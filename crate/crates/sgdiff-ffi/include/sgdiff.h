#ifndef SGDIFF_H
#define SGDIFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible call.
typedef enum {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_ARGUMENT = 1,
  SG_STATUS_INVALID_UTF8 = 2,
  SG_STATUS_CONFIG_ERROR = 3,
  SG_STATUS_NUMERICAL_ERROR = 4,
  SG_STATUS_IO_ERROR = 5,
  SG_STATUS_BUFFER_TOO_SMALL = 6,
  SG_STATUS_INTERNAL_ERROR = 7,
} SgStatus;

// Pipeline stage selector for `sg_run_stage`.
typedef enum {
  SG_STAGE_SAMPLE = 0,
  SG_STAGE_OPTIMIZE_SCHEDULE = 1,
  SG_STAGE_FIT_CALIBRATION = 2,
  SG_STAGE_OPTIMIZE_RANKS = 3,
  SG_STAGE_REPRO_FIG2 = 4,
  SG_STAGE_BENCH = 5,
} SgStage;

// Opaque experiment configuration handle.
typedef struct SgConfig SgConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Version string of the library; static storage, do not free.
const char *sg_version(void);

// Message for the most recent failure on this thread; valid until the next
// failing call. Do not free.
const char *sg_last_error_message(void);

// Fresh configuration with every field at its default.
SgConfig *sg_config_new(void);

// Parse a TOML config file into a new handle.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
SgStatus sg_config_from_file(const char *path, SgConfig **out);

// Parse TOML text into a new handle.
//
// # Safety
// `text` must be a valid NUL-terminated string and `out` a valid pointer.
SgStatus sg_config_from_toml(const char *text, SgConfig **out);

// Set one dotted key (e.g. "grid.steps") to a TOML literal (e.g. "25",
// "\"name\"", "true"). Validation happens immediately.
//
// # Safety
// `cfg` must be a live handle from this library; `key`/`value` valid
// NUL-terminated strings.
SgStatus sg_config_set(SgConfig *cfg, const char *key, const char *value);

// Serialize the effective configuration as TOML into `buf`. `written`
// receives the full length (excluding NUL) even when the buffer is too
// small.
//
// # Safety
// `cfg` must be a live handle; `buf` must point to `cap` writable bytes.
SgStatus sg_config_to_toml(const SgConfig *cfg, char *buf, size_t cap, size_t *written);

// Release a configuration handle.
//
// # Safety
// `cfg` must be a handle from this library, not yet freed; null is a no-op.
void sg_config_free(SgConfig *cfg);

// Run one pipeline stage; artifacts are written under
// `<out_dir>/<name>/` exactly as the CLI writes them. Optional paths may be
// null where a stage does not need them.
//
// # Safety
// `cfg` must be a live handle; path arguments must be null or valid
// NUL-terminated strings.
SgStatus sg_run_stage(const SgConfig *cfg,
                      SgStage stage,
                      const char *schedule_path,
                      const char *bank_path,
                      const char *ranks_path);

// Sample `n` final outputs from the configured mixture model under a
// constant guidance schedule, filling `out` with n * data_dim doubles in
// sample-major order.
//
// # Safety
// `cfg` must be a live handle; `out` must point to `out_len` writable
// doubles with `out_len >= n * data_dim`.
SgStatus sg_sample_final(const SgConfig *cfg, size_t n, double *out, size_t out_len);

// Exact 1D Wasserstein-1 distance between two sample buffers.
//
// # Safety
// `a` and `b` must point to `len_a`/`len_b` readable doubles; `out` must be
// a valid pointer.
SgStatus sg_wasserstein_1d(const double *a,
                           size_t len_a,
                           const double *b,
                           size_t len_b,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SGDIFF_H */
