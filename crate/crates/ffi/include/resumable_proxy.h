#ifndef RESUMABLE_PROXY_H
#define RESUMABLE_PROXY_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RpDisposition {
  RP_DISPOSITION_RECOVERABLE_HANDOFF = 0,
  RP_DISPOSITION_PREEMPTIVE = 1,
  RP_DISPOSITION_IGNORE = 2,
} RpDisposition;

typedef enum RpInterfaceKind {
  RP_INTERFACE_KIND_CELLULAR = 0,
  RP_INTERFACE_KIND_WLAN = 1,
  RP_INTERFACE_KIND_ETHERNET = 2,
} RpInterfaceKind;

typedef enum RpStatus {
  RP_STATUS_OK = 0,
  RP_STATUS_NULL_POINTER = 1,
  RP_STATUS_INVALID_UTF8 = 2,
  RP_STATUS_INVALID_ARGUMENT = 3,
  RP_STATUS_PROTOCOL = 4,
  RP_STATUS_SCENARIO = 5,
  RP_STATUS_SIMULATION = 6,
  RP_STATUS_PANIC = 7,
} RpStatus;

/**
 * Opaque handle to the results of one simulation run.
 */
typedef struct RpReport RpReport;

/**
 * Opaque scenario handle.
 */
typedef struct RpScenario RpScenario;

/**
 * Parsed gateway request. Both strings are owned by the caller afterwards
 * and released with [`rp_gateway_request_clear`].
 */
typedef struct RpGatewayRequest {
  char *gateway_base;
  char *origin_url;
  uint64_t session_offset;
} RpGatewayRequest;

typedef struct RpDelayEstimate {
  double mean;
  double std_error;
  uint64_t cycles;
} RpDelayEstimate;

/**
 * Interface description for [`rp_should_preempt`].
 */
typedef struct RpInterface {
  /**
   * NUL-terminated identifier.
   */
  const char *id;
  enum RpInterfaceKind kind;
  /**
   * Bits per second.
   */
  double bandwidth_capacity;
  uint32_t cost_metric;
  /**
   * Round-trip latency in seconds.
   */
  double latency;
} RpInterface;

typedef struct RpHandoffDecision {
  bool preempt;
  double est_remaining_current;
  double est_remaining_candidate;
  double est_handoff_time;
} RpHandoffDecision;

typedef struct RpStackConfig {
  bool preemption;
  /**
   * Seconds between interface polls.
   */
  double poll_interval;
  uint32_t workers;
  /**
   * Restart from byte 0 on every attempt instead of resuming.
   */
  bool session_level;
  /**
   * Failures tolerated per transfer; negative means unlimited.
   */
  int64_t retry_budget;
} RpStackConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *rp_last_error_message(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void rp_string_free(char *s);

/**
 * Builds the gateway request block for fetching `origin_url` from `offset`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum RpStatus rp_rewrite_request(const char *origin_url,
                                 const char *gateway_base,
                                 uint64_t offset,
                                 char **out_request);

/**
 * Parses a gateway request block into `out_request`.
 *
 * # Safety
 * `raw` must be NUL-terminated; `out_request` must be writable.
 */
enum RpStatus rp_parse_gateway_request(const char *raw, struct RpGatewayRequest *out_request);

/**
 * Frees the strings inside `request` and nulls them.
 *
 * # Safety
 * `request` must be NULL or filled by [`rp_parse_gateway_request`].
 */
void rp_gateway_request_clear(struct RpGatewayRequest *request);

/**
 * Upper bound on the mean detection delay for polling interval `t` and
 * change rate `lambda`.
 *
 * # Safety
 * `out_bound` must be writable.
 */
enum RpStatus rp_delay_bound(double t, double lambda, double *out_bound);

/**
 * Expected delay at time `tau` measured from the `n`th change.
 *
 * # Safety
 * `out_delay` must be writable.
 */
enum RpStatus rp_expected_delay_nth(uint32_t n, double tau, double lambda, double *out_delay);

/**
 * Monte Carlo estimate of the mean detection delay.
 *
 * # Safety
 * `out_estimate` must be writable.
 */
enum RpStatus rp_simulate_detection_delay(double t,
                                          double lambda,
                                          uint64_t cycles,
                                          uint64_t seed,
                                          struct RpDelayEstimate *out_estimate);

enum RpDisposition rp_classify_failure(int32_t code);

/**
 * Decides whether to abandon `current` for `candidate` with
 * `remaining_bytes` still to fetch.
 *
 * # Safety
 * Pointers must be valid; interface ids must be NUL-terminated.
 */
enum RpStatus rp_should_preempt(uint64_t remaining_bytes,
                                const struct RpInterface *current,
                                const struct RpInterface *candidate,
                                double est_handoff_time,
                                struct RpHandoffDecision *out_decision);

struct RpStackConfig rp_stack_config_default(void);

/**
 * Loads a scenario from a TOML file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out_scenario` must be writable.
 */
enum RpStatus rp_scenario_load(const char *path, struct RpScenario **out_scenario);

/**
 * Parses a scenario from TOML text.
 *
 * # Safety
 * `toml` must be NUL-terminated; `out_scenario` must be writable.
 */
enum RpStatus rp_scenario_parse(const char *toml, struct RpScenario **out_scenario);

/**
 * Looks up a built-in scenario by name.
 *
 * # Safety
 * `name` must be NUL-terminated; `out_scenario` must be writable.
 */
enum RpStatus rp_scenario_canned(const char *name, struct RpScenario **out_scenario);

/**
 * # Safety
 * `scenario` must be NULL or a live handle from this library.
 */
void rp_scenario_free(struct RpScenario *scenario);

/**
 * Runs `scenario`. A NULL `config` means [`rp_stack_config_default`].
 *
 * # Safety
 * `scenario` must be a live handle; `out_report` must be writable.
 */
enum RpStatus rp_scenario_run(const struct RpScenario *scenario,
                              const struct RpStackConfig *config,
                              uint64_t seed,
                              struct RpReport **out_report);

/**
 * Number of transfers in the report; 0 for NULL.
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
size_t rp_report_transfer_count(const struct RpReport *report);

/**
 * # Safety
 * `report` must be NULL or a live handle.
 */
bool rp_report_all_completed(const struct RpReport *report);

/**
 * Per-transfer metrics as CSV. Free the result with [`rp_string_free`].
 *
 * # Safety
 * `report` must be a live handle; `out_text` must be writable.
 */
enum RpStatus rp_report_to_csv(const struct RpReport *report, char **out_text);

/**
 * Per-transfer metrics as a JSON array. Free the result with
 * [`rp_string_free`].
 *
 * # Safety
 * `report` must be a live handle; `out_text` must be writable.
 */
enum RpStatus rp_report_to_json(const struct RpReport *report, char **out_text);

/**
 * # Safety
 * `report` must be NULL or a live handle from this library.
 */
void rp_report_free(struct RpReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RESUMABLE_PROXY_H */
