/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef LABELPROP_H
#define LABELPROP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LpStatus {
  LP_STATUS_OK = 0,
  LP_STATUS_INVALID_ARGUMENT = 1,
  LP_STATUS_PARSE = 2,
  LP_STATUS_SPEC_MISMATCH = 3,
  LP_STATUS_CAPACITY = 4,
  LP_STATUS_BACKEND = 5,
  LP_STATUS_IO = 6,
  LP_STATUS_INTERNAL = 7,
} LpStatus;

// A dataset, backend and run configuration.
typedef struct LpEngine LpEngine;

// A lattice built from a TOML spec.
typedef struct LpLattice LpLattice;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *lp_last_error_message(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void lp_string_free(char *s);

// Parses a lattice spec written in TOML.
//
// # Safety
// `spec_toml` must be a NUL-terminated string; `out` must be writable.
enum LpStatus lp_lattice_new(const char *spec_toml, struct LpLattice **out);

// # Safety
// `lattice` must come from [`lp_lattice_new`] or be null.
void lp_lattice_free(struct LpLattice *lattice);

// Writes whether `a ⊑ b`.
//
// # Safety
// Pointers must be valid; label texts NUL-terminated.
enum LpStatus lp_label_leq(const struct LpLattice *lattice,
                           const char *a,
                           const char *b,
                           bool *out);

// Writes the canonical text of `a ⊔ b`.
//
// # Safety
// Pointers must be valid; free the result with [`lp_string_free`].
enum LpStatus lp_label_join(const struct LpLattice *lattice,
                            const char *a,
                            const char *b,
                            char **out);

// Writes the canonical text of `a ⊓ b`.
//
// # Safety
// Pointers must be valid; free the result with [`lp_string_free`].
enum LpStatus lp_label_meet(const struct LpLattice *lattice,
                            const char *a,
                            const char *b,
                            char **out);

// Builds an engine from run-configuration text. Relative paths in the
// configuration are resolved against `base_dir`, or the working directory
// when it is null.
//
// # Safety
// `config_toml` must be NUL-terminated; `base_dir` NUL-terminated or null.
enum LpStatus lp_engine_new(const char *config_toml, const char *base_dir, struct LpEngine **out);

// # Safety
// `engine` must come from [`lp_engine_new`] or be null.
void lp_engine_free(struct LpEngine *engine);

// Propagates labels for one dataset query and writes the outcome as JSON.
//
// # Safety
// Pointers must be valid; free the result with [`lp_string_free`].
enum LpStatus lp_engine_propagate(const struct LpEngine *engine,
                                  const char *query_id,
                                  char **out_json);

// Runs the label search for one query and writes the result as JSON.
//
// # Safety
// Pointers must be valid; free the result with [`lp_string_free`].
enum LpStatus lp_engine_find_labels(const struct LpEngine *engine,
                                    const char *query_id,
                                    char **out_json);

// Evaluates every query and writes the metrics report as JSON.
//
// # Safety
// Pointers must be valid; free the result with [`lp_string_free`].
enum LpStatus lp_engine_evaluate(const struct LpEngine *engine, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LABELPROP_H */
