#ifndef FLDA_H
#define FLDA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum FldaStatus {
  FLDA_STATUS_OK = 0,
  FLDA_STATUS_NULL_POINTER = 1,
  FLDA_STATUS_INVALID_ARGUMENT = 2,
  FLDA_STATUS_CONFIG = 3,
  FLDA_STATUS_IO = 4,
  FLDA_STATUS_DATA = 5,
  FLDA_STATUS_OUT_OF_RANGE = 6,
  FLDA_STATUS_PANIC = 7,
} FldaStatus;

typedef struct FldaConfig FldaConfig;

typedef struct FldaSim FldaSim;

typedef struct FldaTrace FldaTrace;

/**
 * Inputs of the closed-form throughput model.
 */
typedef struct FldaThroughputQuery {
  double access_prob;
  size_t channels;
  double active_users;
  double lambda;
  uint64_t info_subpackets;
  double code_rate;
} FldaThroughputQuery;

typedef struct FldaSubpacketPlan {
  uint64_t bits;
  uint64_t info;
  uint64_t total;
} FldaSubpacketPlan;

typedef struct FldaIteration {
  uint64_t iteration;
  int32_t phase;
  uint64_t slots;
  size_t committed;
  size_t received;
  size_t broadcast_to;
} FldaIteration;

/**
 * `phase` is -1 for the initial evaluation, 0 for FD and 1 for FL.
 */
typedef struct FldaMetricsPoint {
  double time_s;
  uint64_t iteration;
  int32_t phase;
  double mean_accuracy;
  double mean_battery;
  double mean_energy_j;
  size_t updates_received;
} FldaMetricsPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *flda_last_error(void);

/**
 * Static, NUL-terminated crate version.
 */
const char *flda_version(void);

/**
 * Probability that a device's subpackets see no other active user.
 *
 * # Safety
 * `q` and `out` must be valid or null.
 */
enum FldaStatus flda_p_a(const struct FldaThroughputQuery *q, double *out_value);

/**
 * # Safety
 * `out_value` must be valid or null.
 */
enum FldaStatus flda_p_s(double lambda, size_t channels, double *out_value);

/**
 * # Safety
 * `q` and `out_value` must be valid or null.
 */
enum FldaStatus flda_p_ma(const struct FldaThroughputQuery *q, double *out_value);

/**
 * Expected successful updates per frame.
 *
 * # Safety
 * `q` and `out_value` must be valid or null.
 */
enum FldaStatus flda_rho(const struct FldaThroughputQuery *q, double *out_value);

double flda_rho_flda(double alpha, double rho_fd, double rho_fl);

/**
 * Expected number of active users among `num_users`.
 */
double flda_k_hat(size_t num_users, double p_active);

/**
 * Splits `bits` into `payload_bits` subpackets and codes them at rate `q`.
 *
 * # Safety
 * `out_plan` must be valid or null.
 */
enum FldaStatus flda_subpacket_plan(uint64_t bits,
                                    uint64_t payload_bits,
                                    double code_rate,
                                    struct FldaSubpacketPlan *out_plan);

/**
 * Default configuration.
 *
 * # Safety
 * `out_config` must be valid or null.
 */
enum FldaStatus flda_config_default(struct FldaConfig **out_config);

/**
 * Parses a TOML configuration; missing keys take their defaults.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out_config` valid or null.
 */
enum FldaStatus flda_config_from_toml(const char *toml, struct FldaConfig **out_config);

/**
 * Sets one `key` (e.g. `lambda` or `network.lambda`) from its TOML text.
 * The configuration is unchanged on failure.
 *
 * # Safety
 * All pointers must be valid or null.
 */
enum FldaStatus flda_config_set(struct FldaConfig *config, const char *key, const char *value);

/**
 * Serialises the configuration as TOML into `buf`. `out_len` receives the
 * length without the terminator; pass a null `buf` to query it.
 *
 * # Safety
 * `buf` must hold `buf_len` bytes or be null; other pointers valid or null.
 */
enum FldaStatus flda_config_to_toml(const struct FldaConfig *config,
                                    char *buf,
                                    size_t buf_len,
                                    size_t *out_len);

/**
 * # Safety
 * `config` must come from this library or be null.
 */
void flda_config_free(struct FldaConfig *config);

/**
 * Builds a simulation (data, partition, devices) from a configuration.
 *
 * # Safety
 * Pointers must be valid or null.
 */
enum FldaStatus flda_sim_new(const struct FldaConfig *config, struct FldaSim **out_sim);

/**
 * Runs one iteration, filling `out_report` if it is not null.
 *
 * # Safety
 * `sim` must be valid or null; `out_report` valid or null.
 */
enum FldaStatus flda_sim_step(struct FldaSim *sim, struct FldaIteration *out_report);

/**
 * Runs to the configured budget and returns the evaluation trace.
 *
 * # Safety
 * Pointers must be valid or null.
 */
enum FldaStatus flda_sim_run(struct FldaSim *sim, struct FldaTrace **out_trace);

/**
 * Current evaluation point of a simulation.
 *
 * # Safety
 * Pointers must be valid or null.
 */
enum FldaStatus flda_sim_metrics(const struct FldaSim *sim, struct FldaMetricsPoint *out_point);

/**
 * Simulated seconds elapsed; negative if `sim` is null.
 *
 * # Safety
 * `sim` must be valid or null.
 */
double flda_sim_time(const struct FldaSim *sim);

/**
 * Whether every device's battery matches its income minus spending.
 *
 * # Safety
 * `sim` must be valid or null.
 */
bool flda_sim_energy_conserved(const struct FldaSim *sim);

/**
 * # Safety
 * `sim` must come from this library or be null.
 */
void flda_sim_free(struct FldaSim *sim);

/**
 * # Safety
 * `trace` must be valid or null; 0 for null.
 */
size_t flda_trace_len(const struct FldaTrace *trace);

/**
 * # Safety
 * Pointers must be valid or null.
 */
enum FldaStatus flda_trace_get(const struct FldaTrace *trace,
                               size_t index,
                               struct FldaMetricsPoint *out_point);

/**
 * # Safety
 * `trace` must come from this library or be null.
 */
void flda_trace_free(struct FldaTrace *trace);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLDA_H */
