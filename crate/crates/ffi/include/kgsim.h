/* SPDX-License-Identifier: Apache-2.0 */

#ifndef KGSIM_H
#define KGSIM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KgsimStatus {
  KGSIM_STATUS_OK = 0,
  KGSIM_STATUS_NULL_ARGUMENT = 1,
  KGSIM_STATUS_INVALID_UTF8 = 2,
  KGSIM_STATUS_CONFIG = 3,
  KGSIM_STATUS_UNKNOWN_PRESET = 4,
  KGSIM_STATUS_RUN = 5,
  KGSIM_STATUS_IO = 6,
  KGSIM_STATUS_INVALID_ARGUMENT = 7,
  KGSIM_STATUS_NOT_AVAILABLE = 8,
  KGSIM_STATUS_PANIC = 9,
} KgsimStatus;

/**
 * The result of running a scenario.
 */
typedef struct KgsimReport KgsimReport;

/**
 * A parsed and validated scenario.
 */
typedef struct KgsimScenario KgsimScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. Valid until the
 * next kgsim call on the same thread.
 */
const char *kgsim_last_error(void);

/**
 * Library version, static string.
 */
const char *kgsim_version(void);

/**
 * Number of built-in presets.
 */
size_t kgsim_preset_count(void);

/**
 * Name of preset `index` as a static string, or null when out of range.
 */
const char *kgsim_preset_name(size_t index);

/**
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum KgsimStatus kgsim_scenario_from_preset(const char *name, struct KgsimScenario **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum KgsimStatus kgsim_scenario_from_file(const char *path, struct KgsimScenario **out);

/**
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum KgsimStatus kgsim_scenario_from_toml(const char *toml, struct KgsimScenario **out);

/**
 * Override the scenario's seeds for later runs.
 *
 * # Safety
 * `scenario` must be a live handle; `seeds` must point to `len` values.
 */
enum KgsimStatus kgsim_scenario_set_seeds(struct KgsimScenario *scenario,
                                          const uint64_t *seeds,
                                          size_t len);

/**
 * # Safety
 * `scenario` must be null or a handle not yet freed.
 */
void kgsim_scenario_free(struct KgsimScenario *scenario);

/**
 * Run a scenario, including any presets its assertions compare against.
 *
 * # Safety
 * `scenario` must be a live handle; `out` must be writable.
 */
enum KgsimStatus kgsim_run(const struct KgsimScenario *scenario, struct KgsimReport **out);

/**
 * Write the CSV, summary and resolved-scenario files into `dir`, creating it.
 *
 * # Safety
 * `report` must be a live handle; `dir` must be a NUL-terminated string.
 */
enum KgsimStatus kgsim_report_write(const struct KgsimReport *report, const char *dir);

/**
 * Count assertions and failures. Either output may be null.
 *
 * # Safety
 * `report` must be a live handle.
 */
enum KgsimStatus kgsim_report_assertions(const struct KgsimReport *report,
                                         size_t *total,
                                         size_t *failed);

/**
 * Median makespan across seeds. `KGSIM_STATUS_NOT_AVAILABLE` for serving scenarios.
 *
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum KgsimStatus kgsim_report_makespan_median_ms(const struct KgsimReport *report, uint64_t *out);

/**
 * Hex SHA-256 of the resolved scenario; owned by the report.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
const char *kgsim_report_config_digest(const struct KgsimReport *report);

/**
 * # Safety
 * `report` must be null or a handle not yet freed.
 */
void kgsim_report_free(struct KgsimReport *report);

/**
 * Nearest-rank percentile of `len` samples, `p` in (0, 100].
 *
 * # Safety
 * `samples` must point to `len` values; `out` must be writable.
 */
enum KgsimStatus kgsim_percentile(const double *samples, size_t len, double p, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KGSIM_H */
