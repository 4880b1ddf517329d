#ifndef MEMPLAN_H
#define MEMPLAN_H

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum MpStatus {
  MP_STATUS_OK = 0,
  MP_STATUS_NULL_ARGUMENT = 1,
  MP_STATUS_INVALID_UTF8 = 2,
  MP_STATUS_PARSE = 3,
  MP_STATUS_BUILD = 4,
  MP_STATUS_INSTANTIATION = 5,
  MP_STATUS_ANALYSIS = 6,
  MP_STATUS_PLAN = 7,
  MP_STATUS_TOO_LARGE = 8,
  MP_STATUS_INFEASIBLE = 9,
  MP_STATUS_INPUT = 10,
  MP_STATUS_OUT_OF_RANGE = 11,
  MP_STATUS_PANIC = 12,
} MpStatus;

// Instantiated graph with its storage groups.
typedef struct MpGraph MpGraph;

// Static memory plan.
typedef struct MpPlan MpPlan;

// Frozen graph template.
typedef struct MpTemplate MpTemplate;

// One placed storage group.
typedef struct MpPlanEntry {
  size_t id;
  uint64_t offset;
  uint64_t size;
  size_t def;
  size_t last_use;
} MpPlanEntry;

// Chunk search result. `feasible` is 0 when no configuration fits, in which
// case `k_logits` and `k_ffn` hold the last configuration tried.
typedef struct MpChunkResult {
  uint32_t k_logits;
  uint32_t k_ffn;
  uint32_t evaluations;
  uint8_t feasible;
  uint64_t final_peak;
  uint64_t floor;
} MpChunkResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *mp_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *mp_version(void);

// Parses and freezes a JSON graph template.
//
// # Safety
// `json` must be a NUL-terminated string and `out_template` writable.
enum MpStatus mp_template_from_json(const char *json, struct MpTemplate **out_template);

// # Safety
// `t` must come from [`mp_template_from_json`] and not be used afterwards.
void mp_template_free(struct MpTemplate *t);

// Instantiates a template. `bindings_json` is an object mapping each symbol
// to a non-negative integer, e.g. `{"L": 4096}`.
//
// # Safety
// Pointers must be valid; `bindings_json` NUL-terminated.
enum MpStatus mp_graph_instantiate(const struct MpTemplate *t,
                                   const char *bindings_json,
                                   struct MpGraph **out_graph);

// # Safety
// `g` must come from [`mp_graph_instantiate`] and not be used afterwards.
void mp_graph_free(struct MpGraph *g);

// Number of storage groups in the graph.
//
// # Safety
// Pointers must be valid.
enum MpStatus mp_graph_group_count(const struct MpGraph *g, size_t *out_count);

// Number of ops after loop unrolling.
//
// # Safety
// Pointers must be valid.
enum MpStatus mp_graph_op_count(const struct MpGraph *g, size_t *out_count);

// Largest total size of storage groups live at one instant.
//
// # Safety
// Pointers must be valid.
enum MpStatus mp_graph_max_live(const struct MpGraph *g, uint64_t *out_bytes);

// Greedy first-fit plan.
//
// # Safety
// Pointers must be valid.
enum MpStatus mp_plan_first_fit(const struct MpGraph *g,
                                uint64_t alignment,
                                struct MpPlan **out_plan);

// Optimal plan for graphs of at most `limit` groups; `MP_STATUS_TOO_LARGE` otherwise.
//
// # Safety
// Pointers must be valid.
enum MpStatus mp_plan_exact(const struct MpGraph *g,
                            uint64_t alignment,
                            size_t limit,
                            struct MpPlan **out_plan);

// # Safety
// `p` must come from a planning call and not be used afterwards.
void mp_plan_free(struct MpPlan *p);

// # Safety
// Pointers must be valid.
enum MpStatus mp_plan_workspace_size(const struct MpPlan *p, uint64_t *out_bytes);

// # Safety
// Pointers must be valid.
enum MpStatus mp_plan_entry_count(const struct MpPlan *p, size_t *out_count);

// Entry `index`, in group id order.
//
// # Safety
// Pointers must be valid.
enum MpStatus mp_plan_entry(const struct MpPlan *p, size_t index, struct MpPlanEntry *out_entry);

// Counts pairs of lifetime-overlapping groups whose byte ranges intersect.
//
// # Safety
// Pointers must be valid.
enum MpStatus mp_plan_validate(const struct MpPlan *p,
                               const struct MpGraph *g,
                               size_t *out_violations);

// Plan as JSON; release the string with [`mp_string_free`].
//
// # Safety
// Pointers must be valid.
enum MpStatus mp_plan_to_json(const struct MpPlan *p, char **out_json);

// # Safety
// `s` must come from this library and not be used afterwards.
void mp_string_free(char *s);

// Bottleneck-driven chunk search on the layer template of a model given as
// JSON. `budget` covers activations only. Returns `MP_STATUS_INFEASIBLE`
// when nothing fits; `out_result` is filled either way.
//
// # Safety
// Pointers must be valid; `model_json` NUL-terminated.
enum MpStatus mp_chunk_search(const char *model_json,
                              uint64_t context_len,
                              double prompt_ratio,
                              uint64_t budget,
                              uint32_t max_k,
                              struct MpChunkResult *out_result);

// Tiled `out = H[idx, :] · W` in f64, row-major. `h` is `n×d`, `w` is `d×v`,
// `out` must hold `m×v` values. `out_scratch` (nullable) receives the peak
// scratch element count.
//
// # Safety
// Buffers must hold the stated number of elements.
enum MpStatus mp_gather_gemm_f64(const double *h,
                                 size_t n,
                                 size_t d,
                                 const double *w,
                                 size_t v,
                                 const size_t *idx,
                                 size_t m,
                                 size_t tm,
                                 size_t td,
                                 size_t tv,
                                 double *out_values,
                                 size_t *out_scratch);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEMPLAN_H */
