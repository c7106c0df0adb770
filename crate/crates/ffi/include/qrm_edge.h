#ifndef QRM_EDGE_H
#define QRM_EDGE_H

/* Generated by cbindgen from crates/ffi/src; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum {
  QRM_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  QRM_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  QRM_STATUS_INVALID_UTF8 = 2,
  /**
   * Configuration could not be read, parsed or validated.
   */
  QRM_STATUS_CONFIG_ERROR = 3,
  QRM_STATUS_UNKNOWN_POLICY = 4,
  /**
   * A frame failed to decode or a message failed to encode.
   */
  QRM_STATUS_PROTOCOL_ERROR = 5,
  /**
   * Invalid input to a metrics or energy computation.
   */
  QRM_STATUS_INVALID_INPUT = 6,
  /**
   * The collector refused a message (unregistered node, stray ack, ...).
   */
  QRM_STATUS_COLLECTOR_ERROR = 7,
  /**
   * The output buffer is too small; the required size was written back.
   */
  QRM_STATUS_BUFFER_TOO_SMALL = 8,
  QRM_STATUS_IO = 9,
  /**
   * An internal panic was caught at the boundary.
   */
  QRM_STATUS_PANIC = 10,
} QrmStatus;

/**
 * Policy engine and registry for a fleet of nodes.
 */
typedef struct QrmCollector QrmCollector;

/**
 * Validated scenario configuration (modes, policies, nodes, classes).
 */
typedef struct QrmConfig QrmConfig;

/**
 * One decoded wire message.
 */
typedef struct QrmMessage QrmMessage;

/**
 * Closed-form outcome of running a policy on a full battery.
 */
typedef struct {
  double total_working_time_s;
  double weighted_f1_pct;
  uint32_t reconfiguration_count;
} QrmScenarioResult;

/**
 * Macro-averaged precision, recall and F1, plus accuracy, all in [0, 1].
 */
typedef struct {
  double precision;
  double recall;
  double f1;
  double accuracy;
} QrmMacroMetrics;

/**
 * Fields of a telemetry message. Strings are NUL-terminated UTF-8.
 */
typedef struct {
  const char *node_id;
  uint64_t timestamp_ms;
  uint8_t mode;
  double gpu_power_w;
  double device_power_w;
  double temperature_c;
  double fps;
  double battery_pct;
  /**
   * Latest recognized action; may be null for none.
   */
  const char *label;
  double confidence;
} QrmTelemetry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Description of the last failure on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *qrm_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *qrm_version(void);

/**
 * The built-in scenarios.
 *
 * # Safety
 * `out` must be valid for writes.
 */
QrmStatus qrm_config_builtin(QrmConfig **out);

/**
 * Parse a TOML configuration from a NUL-terminated string.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` valid for writes.
 */
QrmStatus qrm_config_from_toml(const char *toml, QrmConfig **out);

/**
 * Load a TOML configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writes.
 */
QrmStatus qrm_config_load(const char *path, QrmConfig **out);

/**
 * Release a configuration. Null is ignored.
 *
 * # Safety
 * `config` must come from a `qrm_config_*` constructor and not be used again.
 */
void qrm_config_free(QrmConfig *config);

/**
 * Evaluate a named policy at the configured battery capacity.
 *
 * # Safety
 * `config` must be a live handle, `policy` a NUL-terminated string and
 * `out` valid for writes.
 */
QrmStatus qrm_evaluate_policy(const QrmConfig *config, const char *policy, QrmScenarioResult *out);

/**
 * Working-time extension of `policy` over `baseline`, in percent.
 *
 * # Safety
 * As for [`qrm_evaluate_policy`].
 */
QrmStatus qrm_extension_ratio(const QrmConfig *config,
                              const char *policy,
                              const char *baseline,
                              double *out_pct);

/**
 * Metrics of a `k` x `k` confusion matrix given row-major, rows indexed by
 * true class.
 *
 * # Safety
 * `counts` must point to `k * k` values and `out` be valid for writes.
 */
QrmStatus qrm_macro_metrics(const uint64_t *counts, size_t k, QrmMacroMetrics *out);

/**
 * Duration-weighted mean of per-segment F1 scores.
 *
 * # Safety
 * `durations_s` and `f1_pct` must each point to `n` values; `out` must be
 * valid for writes.
 */
QrmStatus qrm_time_weighted_f1(const double *durations_s,
                               const double *f1_pct,
                               size_t n,
                               double *out);

/**
 * Decode one LF-terminated frame.
 *
 * # Safety
 * `frame` must point to `len` bytes and `out` be valid for writes.
 */
QrmStatus qrm_message_decode(const uint8_t *frame, size_t len, QrmMessage **out);

/**
 * Build a telemetry message; it is validated when encoded.
 *
 * # Safety
 * `telemetry` must be valid for reads with live string pointers; `out`
 * must be valid for writes.
 */
QrmStatus qrm_message_new_telemetry(const QrmTelemetry *telemetry, QrmMessage **out);

/**
 * Encode a message as an LF-terminated frame into `buf`. `written` receives
 * the frame length, also when the buffer is too small.
 *
 * # Safety
 * `msg` must be a live handle, `buf` valid for `cap` bytes, `written` valid
 * for writes.
 */
QrmStatus qrm_message_encode(const QrmMessage *msg, uint8_t *buf, size_t cap, size_t *written);

/**
 * Message type (`hello`, `telemetry`, `reconfig`, `ack` or `bye`) as a
 * static string; null for a null handle.
 *
 * # Safety
 * `msg` must be null or a live handle.
 */
const char *qrm_message_type(const QrmMessage *msg);

/**
 * Read the fields of a reconfiguration command.
 *
 * # Safety
 * `msg` must be a live handle; outputs must be valid for writes.
 */
QrmStatus qrm_message_reconfig(const QrmMessage *msg,
                               uint64_t *command_id,
                               uint8_t *target_mode,
                               uint64_t *issued_at_ms);

/**
 * Release a message. Null is ignored.
 *
 * # Safety
 * `msg` must come from a `qrm_message_*` constructor and not be used again.
 */
void qrm_message_free(QrmMessage *msg);

/**
 * Create a collector using the configuration's policies. With a non-null
 * `log_path` the monitoring log is appended there as NDJSON.
 *
 * # Safety
 * `config` must be a live handle, `log_path` null or a NUL-terminated
 * string, `out` valid for writes.
 */
QrmStatus qrm_collector_new(const QrmConfig *config, const char *log_path, QrmCollector **out);

/**
 * Feed one inbound frame. Replies for the sending node (zero or more
 * LF-terminated frames) are written to `reply_buf`; `written` receives
 * their total length. If the buffer is too small the replies are lost, so
 * size it for at least one maximal frame (1024 bytes).
 *
 * # Safety
 * `collector` must be a live handle, `frame` valid for `len` bytes,
 * `reply_buf` valid for `cap` bytes and `written` valid for writes.
 */
QrmStatus qrm_collector_handle_frame(QrmCollector *collector,
                                     const uint8_t *frame,
                                     size_t len,
                                     uint64_t wall_ms,
                                     uint8_t *reply_buf,
                                     size_t cap,
                                     size_t *written);

/**
 * Number of monitoring-log entries written so far.
 *
 * # Safety
 * `collector` must be null or a live handle.
 */
uint64_t qrm_collector_log_len(const QrmCollector *collector);

/**
 * Flush the log and release the collector. Null is ignored.
 *
 * # Safety
 * `collector` must come from [`qrm_collector_new`] and not be used again.
 */
void qrm_collector_free(QrmCollector *collector);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QRM_EDGE_H */
