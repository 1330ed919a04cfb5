#ifndef EVCON_H
#define EVCON_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum EvconStatus {
  EVCON_STATUS_OK = 0,
  EVCON_STATUS_NULL_ARGUMENT = 1,
  EVCON_STATUS_INVALID_CONFIG = 2,
  EVCON_STATUS_NUMERIC_FAILURE = 3,
  EVCON_STATUS_GUARANTEE_VIOLATION = 4,
  EVCON_STATUS_IO_ERROR = 5,
  EVCON_STATUS_INTERNAL_ERROR = 6,
} EvconStatus;

/**
 * Opaque reference-signal batch handle.
 */
typedef struct EvconBatch EvconBatch;

/**
 * Opaque connected-graph handle.
 */
typedef struct EvconGraph EvconGraph;

/**
 * Opaque result of one linear-protocol rollout: trajectory metrics against
 * the full-communication baseline plus guarantee checks.
 */
typedef struct EvconRollout EvconRollout;

/**
 * Opaque shared-network parameter handle.
 */
typedef struct EvconWeights EvconWeights;

/**
 * Send-on-delta trigger parameters. With `use_network` set the threshold
 * signal comes from a weights handle, otherwise `eta_fixed` is used.
 */
typedef struct EvconTrigger {
  double sigma;
  double epsilon;
  double alpha;
  double eta_fixed;
  bool use_network;
} EvconTrigger;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message for this thread, or null if none was recorded.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *evcon_last_error(void);

/**
 * # Safety
 * `out` must be a valid pointer to a writable `EvconGraph*` slot.
 */
enum EvconStatus evcon_graph_complete(uintptr_t n, struct EvconGraph **out);

/**
 * # Safety
 * `out` must be a valid pointer to a writable `EvconGraph*` slot.
 */
enum EvconStatus evcon_graph_path(uintptr_t n, struct EvconGraph **out);

/**
 * # Safety
 * `out` must be a valid pointer to a writable `EvconGraph*` slot.
 */
enum EvconStatus evcon_graph_ring(uintptr_t n, struct EvconGraph **out);

/**
 * Build a graph from `n_edges` unordered pairs laid out as
 * `[a0, b0, a1, b1, ...]` (length `2 * n_edges`).
 *
 * # Safety
 * `endpoints` must point to `2 * n_edges` readable `usize` values and
 * `out` must be a valid out-pointer.
 */
enum EvconStatus evcon_graph_from_edges(uintptr_t n_agents,
                                        const uintptr_t *endpoints,
                                        uintptr_t n_edges,
                                        struct EvconGraph **out);

/**
 * # Safety
 * `g` must be a live handle from an `evcon_graph_*` constructor.
 */
uintptr_t evcon_graph_agents(const struct EvconGraph *g);

/**
 * # Safety
 * `g` must be a live handle from an `evcon_graph_*` constructor.
 */
double evcon_graph_lambda2(const struct EvconGraph *g);

/**
 * # Safety
 * `g` must be a live handle from an `evcon_graph_*` constructor.
 */
double evcon_graph_lambda_max(const struct EvconGraph *g);

/**
 * # Safety
 * `g` must be null or a live handle; it is invalid after this call.
 */
void evcon_graph_free(struct EvconGraph *g);

/**
 * Generate a sinusoid batch on the grid t = 0, step, ..., horizon.
 *
 * # Safety
 * `out` must be a valid out-pointer.
 */
enum EvconStatus evcon_batch_generate(uintptr_t batch_size,
                                      uintptr_t n_agents,
                                      double horizon,
                                      double step,
                                      double amp_min,
                                      double amp_max,
                                      double freq_min,
                                      double freq_max,
                                      uint64_t seed,
                                      struct EvconBatch **out);

/**
 * # Safety
 * `b` must be a live batch handle.
 */
uintptr_t evcon_batch_sequences(const struct EvconBatch *b);

/**
 * # Safety
 * `b` must be a live batch handle.
 */
uintptr_t evcon_batch_steps(const struct EvconBatch *b);

/**
 * # Safety
 * `b` must be a live batch handle.
 */
double evcon_batch_rate_bound(const struct EvconBatch *b);

/**
 * # Safety
 * `b` must be null or a live handle; it is invalid after this call.
 */
void evcon_batch_free(struct EvconBatch *b);

/**
 * Fresh uniformly initialized weights for the given layer sizes
 * (first 2, last 1).
 *
 * # Safety
 * `layer_dims` must point to `n_dims` readable values; `out` must be a
 * valid out-pointer.
 */
enum EvconStatus evcon_weights_init(const uintptr_t *layer_dims,
                                    uintptr_t n_dims,
                                    uint64_t seed,
                                    struct EvconWeights **out);

/**
 * # Safety
 * `path` must be a readable NUL-terminated string; `out` a valid
 * out-pointer.
 */
enum EvconStatus evcon_weights_load(const char *path, struct EvconWeights **out);

/**
 * # Safety
 * `w` must be a live weights handle; `path` a NUL-terminated string.
 */
enum EvconStatus evcon_weights_save(const struct EvconWeights *w, const char *path);

/**
 * # Safety
 * `w` must be a live weights handle.
 */
uintptr_t evcon_weights_param_count(const struct EvconWeights *w);

/**
 * Evaluate the network on one feature pair, writing eta in (0, 1).
 *
 * # Safety
 * `w` must be a live weights handle; `eta_out` a writable double slot.
 */
enum EvconStatus evcon_weights_eval(const struct EvconWeights *w,
                                    double neighbor_disagreement,
                                    double time_since_event,
                                    double *eta_out);

/**
 * # Safety
 * `w` must be null or a live handle; it is invalid after this call.
 */
void evcon_weights_free(struct EvconWeights *w);

/**
 * Run one hard-mode event-triggered rollout of `batch[seq]` under the
 * linear protocol, with the cost evaluated at the given lambda.
 *
 * # Safety
 * All handles must be live; `weights` may be null when
 * `trigger.use_network` is false; `out` must be a valid out-pointer.
 */
enum EvconStatus evcon_rollout_linear(const struct EvconGraph *graph,
                                      const struct EvconBatch *batch,
                                      uintptr_t seq,
                                      double kappa,
                                      struct EvconTrigger trigger,
                                      const struct EvconWeights *weights,
                                      double lambda,
                                      struct EvconRollout **out);

/**
 * # Safety
 * `r` must be a live rollout handle.
 */
double evcon_rollout_rel_error(const struct EvconRollout *r);

/**
 * # Safety
 * `r` must be a live rollout handle.
 */
double evcon_rollout_comm_rate(const struct EvconRollout *r);

/**
 * # Safety
 * `r` must be a live rollout handle.
 */
double evcon_rollout_total_cost(const struct EvconRollout *r);

/**
 * # Safety
 * `r` must be a live rollout handle.
 */
uintptr_t evcon_rollout_events(const struct EvconRollout *r);

/**
 * Worst value of disagreement minus envelope (negative = margin held).
 *
 * # Safety
 * `r` must be a live rollout handle.
 */
double evcon_rollout_bound_margin(const struct EvconRollout *r);

/**
 * True when the envelope held, delta stayed in range, and same-agent
 * events were at least one step apart.
 *
 * # Safety
 * `r` must be a live rollout handle.
 */
bool evcon_rollout_guarantees_ok(const struct EvconRollout *r);

/**
 * Number of grid points in the recorded disagreement trace.
 *
 * # Safety
 * `r` must be a live rollout handle.
 */
uintptr_t evcon_rollout_len(const struct EvconRollout *r);

/**
 * Copy the per-step disagreement norm into `buf` (length `len` must be at
 * least `evcon_rollout_len`).
 *
 * # Safety
 * `r` must be a live rollout handle and `buf` writable for `len` doubles.
 */
enum EvconStatus evcon_rollout_disagreement(const struct EvconRollout *r,
                                            double *buf,
                                            uintptr_t len);

/**
 * # Safety
 * `r` must be null or a live handle; it is invalid after this call.
 */
void evcon_rollout_free(struct EvconRollout *r);

/**
 * Run pretraining plus training as configured in a run-config file and
 * write the final weights. Equivalent to the CLI `train` command.
 *
 * # Safety
 * Both paths must be readable NUL-terminated strings.
 */
enum EvconStatus evcon_train_from_config(const char *config_path, const char *weights_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVCON_H */
