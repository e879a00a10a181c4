#ifndef SERVESIM_H
#define SERVESIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_ARGUMENT = 2,
  SS_STATUS_INVALID_UTF8 = 3,
  SS_STATUS_INVALID_CONFIG = 4,
  SS_STATUS_SIMULATION_FAILED = 5,
  SS_STATUS_PANIC = 6,
} SsStatus;

/**
 * Opaque online learner.
 */
typedef struct SsLearner SsLearner;

/**
 * Opaque request router.
 */
typedef struct SsRouter SsRouter;

/**
 * Latency-model coefficients. Latencies are ms, throughput tokens per ms.
 */
typedef struct SsPerfParams {
  double tau0;
  double w0;
  double ws;
  double tau_b;
  double tau_s;
  double p_max;
  double k_b;
  double k_s;
} SsPerfParams;

/**
 * Engine state as reported to the router.
 */
typedef struct SsStateVector {
  uint32_t engine_id;
  /**
   * Remaining predicted time of the in-flight step (ms).
   */
  double l_hat;
  /**
   * Pending workload (tokens).
   */
  double w_load;
  /**
   * Free KV tokens.
   */
  double m_free;
  /**
   * Effective token rate (tokens per ms).
   */
  double p_max;
  uint32_t queue_len;
  /**
   * Simulation or wall time of the report (ms).
   */
  double reported_at;
} SsStateVector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *ss_last_error(void);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void ss_string_free(char *s);

/**
 * Rejects coefficients outside their valid ranges.
 */
enum SsStatus ss_params_validate(const struct SsPerfParams *p);

/**
 * Predicted step latency (ms) for a batch of `b` requests and `s` tokens.
 */
enum SsStatus ss_predict_latency(const struct SsPerfParams *p,
                                 uint32_t b,
                                 uint32_t s,
                                 double *latency_ms);

/**
 * Effective throughput (tokens per ms) for a batch shape.
 */
enum SsStatus ss_throughput(const struct SsPerfParams *p,
                            uint32_t b,
                            uint32_t s,
                            double *tokens_per_ms);

/**
 * R² of the model against `n` observed `(b[i], s[i], observed_ms[i])` samples.
 *
 * # Safety
 * The three arrays must each hold `n` readable elements.
 */
enum SsStatus ss_goodness_of_fit(const struct SsPerfParams *p,
                                 const uint32_t *b,
                                 const uint32_t *s,
                                 const double *observed_ms,
                                 size_t n,
                                 double *r2);

/**
 * Largest token budget in `[b, m_max]` whose predicted latency fits
 * `target_ms`, or `b` if none does.
 */
enum SsStatus ss_search_budget(const struct SsPerfParams *p,
                               uint32_t b,
                               double target_ms,
                               uint32_t m_max,
                               uint32_t n_search_iters,
                               uint32_t *budget);

/**
 * Creates an online learner starting from `initial` with default windows.
 *
 * # Safety
 * `learner` must be valid for writes.
 */
enum SsStatus ss_learner_new(const struct SsPerfParams *initial, struct SsLearner **learner);

/**
 * Feeds one observed step latency to the learner.
 *
 * # Safety
 * `learner` must be a live handle from [`ss_learner_new`].
 */
enum SsStatus ss_learner_record(struct SsLearner *learner,
                                uint32_t b,
                                uint32_t s,
                                double observed_ms,
                                double time_ms);

/**
 * Current learned coefficients.
 *
 * # Safety
 * `learner` must be a live handle from [`ss_learner_new`].
 */
enum SsStatus ss_learner_params(const struct SsLearner *learner, struct SsPerfParams *params);

/**
 * # Safety
 * `learner` must be null or a live handle from [`ss_learner_new`].
 */
void ss_learner_free(struct SsLearner *learner);

/**
 * Creates a router over engines `engine_ids[0..n]`. `config_json` is a
 * router configuration object, e.g. `{"policy":"prism"}`. Weighted sampling
 * draws from the same seed substream a simulation run would use.
 *
 * # Safety
 * `engine_ids` must hold `n` readable elements; `router` must be valid for writes.
 */
enum SsStatus ss_router_new(const char *config_json,
                            double ttft_slo_ms,
                            double tpot_slo_ms,
                            const uint32_t *engine_ids,
                            size_t n,
                            uint64_t seed,
                            struct SsRouter **router);

/**
 * Delivers an engine state report.
 *
 * # Safety
 * `router` must be a live handle from [`ss_router_new`].
 */
enum SsStatus ss_router_update(struct SsRouter *router, const struct SsStateVector *state);

/**
 * Picks an engine for a request.
 *
 * # Safety
 * `router` must be a live handle from [`ss_router_new`].
 */
enum SsStatus ss_router_route(struct SsRouter *router,
                              uint64_t session_id,
                              uint32_t prompt_len,
                              double now_ms,
                              uint32_t *engine_id);

/**
 * # Safety
 * `router` must be null or a live handle from [`ss_router_new`].
 */
void ss_router_free(struct SsRouter *router);

/**
 * Runs a full simulation from a JSON run configuration and returns the
 * summary JSON in `*summary_json_out` (free with [`ss_string_free`]).
 *
 * # Safety
 * `summary_json_out` must be valid for writes.
 */
enum SsStatus ss_run_config_json(const char *config_json, char **summary_json_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SERVESIM_H */
