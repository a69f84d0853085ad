#ifndef CGB_H
#define CGB_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum CgbStatus {
  CGB_STATUS_OK = 0,
  CGB_STATUS_NULL_POINTER = 1,
  CGB_STATUS_INVALID_ARGUMENT = 2,
  CGB_STATUS_IO = 3,
  CGB_STATUS_FORMAT = 4,
  CGB_STATUS_COMPUTATION = 5,
  CGB_STATUS_PANIC = 6,
} CgbStatus;

// Directed causal graph with its transfer entropy weights.
typedef struct CgbGraph CgbGraph;

// Channel signals, `n` rows of `t` samples.
typedef struct CgbSignals CgbSignals;

// Pairwise transfer entropy, indexed `(effect, cause)`.
typedef struct CgbTeMatrix CgbTeMatrix;

// Rewiring parameters. `max_iterations == 0` means one per node; removal
// runs only when `enable_removal` is set.
typedef struct CgbRewireOptions {
  double tau;
  size_t max_iterations;
  bool enable_removal;
  double c_plus;
  double c_minus;
  double curvature_floor;
  uint64_t seed;
} CgbRewireOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next `cgb_*` call on the same thread.
const char *cgb_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *cgb_version(void);

// Copies `n * t` row-major values (channel by channel) into a new handle.
//
// # Safety
// `data` must point to `n * t` readable doubles; `out` must be writable.
enum CgbStatus cgb_signals_new(const double *data, size_t n, size_t t, struct CgbSignals **out);

// Reads a signals CSV (`channel,t0,...` header, one channel per row).
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CgbStatus cgb_signals_load_csv(const char *path, struct CgbSignals **out);

// # Safety
// All pointers must be valid; `n` and `t` must be writable.
enum CgbStatus cgb_signals_shape(const struct CgbSignals *s, size_t *n, size_t *t);

// # Safety
// `s` must be null or a handle from this library, freed at most once.
void cgb_signals_free(struct CgbSignals *s);

// Transfer entropy between every ordered pair of channels with `bins`
// equal-width bins, target history `q` and source history `o`.
//
// # Safety
// `s` must be a valid handle; `out` must be writable.
enum CgbStatus cgb_te_compute(const struct CgbSignals *s,
                              size_t bins,
                              size_t q,
                              size_t o,
                              struct CgbTeMatrix **out);

// # Safety
// `te` must be a valid handle; `n` must be writable.
enum CgbStatus cgb_te_size(const struct CgbTeMatrix *te, size_t *n);

// Transfer entropy from `cause` to `effect`, in bits.
//
// # Safety
// `te` must be a valid handle; `value` must be writable.
enum CgbStatus cgb_te_get(const struct CgbTeMatrix *te, size_t effect, size_t cause, double *value);

// # Safety
// `te` must be null or a handle from this library, freed at most once.
void cgb_te_free(struct CgbTeMatrix *te);

// Keeps every directed edge whose transfer entropy exceeds `c`.
//
// # Safety
// `te` must be a valid handle; `out` must be writable.
enum CgbStatus cgb_graph_build(const struct CgbTeMatrix *te, double c, struct CgbGraph **out);

// # Safety
// `g` must be a valid handle; `nodes` and `edges` must be writable.
enum CgbStatus cgb_graph_size(const struct CgbGraph *g, size_t *nodes, size_t *edges);

// # Safety
// `g` must be a valid handle; `present` must be writable.
enum CgbStatus cgb_graph_has_edge(const struct CgbGraph *g,
                                  size_t cause,
                                  size_t effect,
                                  bool *present);

// Balanced Forman curvature of the undirected edge `{i, j}` of the
// symmetrised graph.
//
// # Safety
// `g` must be a valid handle; `value` must be writable.
enum CgbStatus cgb_graph_curvature(const struct CgbGraph *g, size_t i, size_t j, double *value);

struct CgbRewireOptions cgb_rewire_options_default(void);

// Rewires a copy of `g`; `g` is left unchanged. `iterations` may be null.
//
// # Safety
// `g` and `opts` must be valid; `out` must be writable.
enum CgbStatus cgb_graph_rewire(const struct CgbGraph *g,
                                const struct CgbRewireOptions *opts,
                                struct CgbGraph **out,
                                size_t *iterations);

// # Safety
// `g` must be a valid handle; `path` a NUL-terminated string.
enum CgbStatus cgb_graph_save(const struct CgbGraph *g, const char *path);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CgbStatus cgb_graph_load(const char *path, struct CgbGraph **out);

// # Safety
// `g` must be null or a handle from this library, freed at most once.
void cgb_graph_free(struct CgbGraph *g);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CGB_H */
