#ifndef CHOICECTL_H
#define CHOICECTL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>

/**
 * Result codes of every fallible call.
 */
typedef enum ChoicectlStatus {
  CHOICECTL_STATUS_OK = 0,
  CHOICECTL_STATUS_NULL_POINTER = 1,
  /**
   * Malformed input: bad JSON, wrong dimensions, empty horizon, bad index.
   */
  CHOICECTL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The target tensor violates the compatibility constraints.
   */
  CHOICECTL_STATUS_INCOMPATIBLE = 3,
  /**
   * Singular or uncontrollable system, non-finite result.
   */
  CHOICECTL_STATUS_NUMERIC = 4,
  /**
   * Output buffer shorter than the result.
   */
  CHOICECTL_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * An internal panic was caught at the boundary.
   */
  CHOICECTL_STATUS_PANIC = 6,
} ChoicectlStatus;

/**
 * Opaque open-loop law handle.
 */
typedef struct ChoicectlLaw ChoicectlLaw;

/**
 * Opaque scenario handle.
 */
typedef struct ChoicectlScenario ChoicectlScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or NULL if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *choicectl_last_error(void);

/**
 * Static description of a status code.
 */
const char *choicectl_status_string(enum ChoicectlStatus status);

/**
 * Parses a version-1 scenario document (JSON, UTF-8, NUL terminated).
 *
 * # Safety
 * `json` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum ChoicectlStatus choicectl_scenario_from_json(const char *json, struct ChoicectlScenario **out);

/**
 * Builds a scenario from flat row-major arrays.
 *
 * `a` holds n×n values; `inputs` holds the agents' input matrices back to
 * back, agent `l` being n×`input_dims[l]`; `targets` holds one n-vector per
 * choice tuple in row-major tuple order, with `dims` giving the choice count
 * of each agent (`agents` entries).
 *
 * # Safety
 * Every pointer must reference at least the number of elements implied above.
 */
enum ChoicectlStatus choicectl_scenario_new(size_t n,
                                            const double *a,
                                            size_t agents,
                                            const size_t *input_dims,
                                            const double *inputs,
                                            double t0,
                                            double t_final,
                                            const double *x0,
                                            const size_t *dims,
                                            const double *targets,
                                            struct ChoicectlScenario **out);

/**
 * Releases a scenario; NULL is ignored.
 *
 * # Safety
 * `scenario` must come from this library and not have been freed.
 */
void choicectl_scenario_free(struct ChoicectlScenario *scenario);

/**
 * Compatibility residual of the scenario's targets and the verdict at the default tolerance.
 *
 * # Safety
 * `scenario` must be a live handle; `residual` and `compatible` valid pointers.
 */
enum ChoicectlStatus choicectl_check(const struct ChoicectlScenario *scenario,
                                     double *residual,
                                     bool *compatible);

/**
 * Synthesizes the minimum-average-cost open-loop law.
 *
 * # Safety
 * `scenario` must be a live handle and `out` a valid pointer.
 */
enum ChoicectlStatus choicectl_synthesize(const struct ChoicectlScenario *scenario,
                                          struct ChoicectlLaw **out);

/**
 * Releases a law; NULL is ignored.
 *
 * # Safety
 * `law` must come from this library and not have been freed.
 */
void choicectl_law_free(struct ChoicectlLaw *law);

/**
 * Control of `agent` under `choice` at time `t`, written to `out`.
 *
 * # Safety
 * `law` must be a live handle and `out` must hold `out_len` doubles.
 */
enum ChoicectlStatus choicectl_law_control_value(const struct ChoicectlLaw *law,
                                                 size_t agent,
                                                 size_t choice,
                                                 double t,
                                                 double *out,
                                                 size_t out_len);

/**
 * Average control cost of the law.
 *
 * # Safety
 * `law` must be a live handle and `out` a valid pointer.
 */
enum ChoicectlStatus choicectl_law_average_cost(const struct ChoicectlLaw *law, double *out);

/**
 * Noise-free terminal state for the choice tuple `choices` (one index per agent).
 *
 * # Safety
 * `law` must be a live handle, `choices` must hold `n_choices` indices and
 * `out` must hold `out_len` doubles.
 */
enum ChoicectlStatus choicectl_law_terminal_state(const struct ChoicectlLaw *law,
                                                  const size_t *choices,
                                                  size_t n_choices,
                                                  double *out,
                                                  size_t out_len);

/**
 * Number of agents of the law's system.
 *
 * # Safety
 * `law` must be a live handle and `out` a valid pointer.
 */
enum ChoicectlStatus choicectl_law_agents(const struct ChoicectlLaw *law, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHOICECTL_H */
