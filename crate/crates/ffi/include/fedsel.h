#ifndef FEDSEL_H
#define FEDSEL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum FedselStatus {
  FEDSEL_STATUS_OK = 0,
  FEDSEL_STATUS_NULL_POINTER = 1,
  FEDSEL_STATUS_INVALID_UTF8 = 2,
  // Invalid configuration or input data.
  FEDSEL_STATUS_CONFIG_ERROR = 3,
  // The model diverged (non-finite gradient or parameters).
  FEDSEL_STATUS_DIVERGENCE = 4,
  // Degenerate or non-finite numeric input.
  FEDSEL_STATUS_NUMERIC_ERROR = 5,
  // All configured rounds have already run.
  FEDSEL_STATUS_FINISHED = 6,
  // Any other failure, including caught panics.
  FEDSEL_STATUS_INTERNAL_ERROR = 7,
} FedselStatus;

typedef enum FedselPolarization {
  // `(Σ|u+v|^p − Σ|u−v|^p) / 2^p`.
  FEDSEL_POLARIZATION_POWERED = 0,
  // `(‖u+v‖_p − ‖u−v‖_p) / 4`.
  FEDSEL_POLARIZATION_LITERAL = 1,
} FedselPolarization;

// One seed's simulation: setup plus the evolving round state.
typedef struct FedselSimulation FedselSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *fedsel_version(void);

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next failing call on the same thread.
const char *fedsel_last_error_message(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void fedsel_string_free(char *s);

// Builds a simulation for one seed from an experiment config JSON document.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum FedselStatus fedsel_simulation_new(const char *config_json,
                                        uint64_t seed,
                                        struct FedselSimulation **out);

// Runs one round. On success `*metrics_json` receives the round record
// (metrics plus selection diagnostics) as JSON.
//
// # Safety
// `sim` must be a live handle; `metrics_json` must be writable.
enum FedselStatus fedsel_simulation_step(struct FedselSimulation *sim, char **metrics_json);

// Number of rounds completed so far.
//
// # Safety
// `sim` must be a live handle; `out` must be writable.
enum FedselStatus fedsel_simulation_rounds_completed(const struct FedselSimulation *sim,
                                                     size_t *out);

// Releases a simulation. NULL is ignored.
//
// # Safety
// `sim` must come from [`fedsel_simulation_new`] and not have been freed.
void fedsel_simulation_free(struct FedselSimulation *sim);

// Power-norm cosine similarity of two length-`len` vectors.
//
// # Safety
// `u` and `v` must point to `len` readable doubles; `out` must be writable.
enum FedselStatus fedsel_cos_p(const double *u,
                               const double *v,
                               size_t len,
                               double p,
                               enum FedselPolarization variant,
                               double *out);

// Picks the `per_round` clients with the lowest mean pairwise similarity
// from a symmetric row-major `n × n` matrix. Client ids are `0..n`.
// Writes `per_round` ascending ids to `out_ids` and the subset score to
// `out_score` (may be NULL). Searches exhaustively when at most `budget`
// subsets exist, greedily otherwise.
//
// # Safety
// `matrix` must point to `n * n` readable doubles and `out_ids` to
// `per_round` writable slots.
enum FedselStatus fedsel_select_from_matrix(const double *matrix,
                                            size_t n,
                                            size_t per_round,
                                            size_t budget,
                                            size_t *out_ids,
                                            double *out_score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDSEL_H */
