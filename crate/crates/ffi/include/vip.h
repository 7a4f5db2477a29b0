#ifndef VIP_H
#define VIP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum VipStatus {
  VIP_STATUS_OK = 0,
  VIP_STATUS_VALIDATION = 1,
  VIP_STATUS_NOT_FOUND = 2,
  VIP_STATUS_CONFLICT = 3,
  VIP_STATUS_INFEASIBLE = 4,
  VIP_STATUS_NUMERICAL = 5,
  VIP_STATUS_VERSION = 6,
  VIP_STATUS_NULL_POINTER = 7,
  VIP_STATUS_PANIC = 8,
} VipStatus;

typedef enum VipFamily {
  VIP_FAMILY_DR_GRPO = 0,
  VIP_FAMILY_RLOO = 1,
} VipFamily;

typedef enum VipLink {
  VIP_LINK_SIGMOID = 0,
  VIP_LINK_SOFTPLUS = 1,
} VipLink;

// Opaque belief handle.
typedef struct VipBelief VipBelief;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *vip_version(void);

// Message of the last failure on this thread, or null. Valid until the next
// failing call on the same thread.
const char *vip_last_error(void);

// Closed-form gradient variance for `n` rollouts with ±1 rewards.
//
// # Safety
// The output pointer must be valid for one write.
enum VipStatus vip_gradient_variance(enum VipFamily family,
                                     double p_hat,
                                     double sigma_z2,
                                     uint32_t n,
                                     double *out_variance);

// `4σ_Z² p̂(1−p̂)`.
//
// # Safety
// The output pointer must be valid for one write.
enum VipStatus vip_allocation_coefficient(double p_hat, double sigma_z2, double *out_a);

// Solves the allocation problem for `len` coefficients and writes the integer
// plan to `out_n_int`. `out_n_cont` (length `len`) and `out_lambda` may be
// null.
//
// # Safety
// `coeffs` and `out_n_int` must point to `len` elements; non-null optional
// outputs must be valid for their writes.
enum VipStatus vip_allocate(enum VipFamily family,
                            const double *coeffs,
                            size_t len,
                            uint64_t budget,
                            uint32_t min,
                            uint32_t max,
                            uint32_t *out_n_int,
                            double *out_n_cont,
                            double *out_lambda);

// Zero-mean belief over `num_prompts` row-major embeddings of dimension
// `dim`. A non-positive `bandwidth` selects the median pairwise distance.
//
// # Safety
// `embeddings` must point to `num_prompts * dim` values; `out_belief` must be
// valid for one write.
enum VipStatus vip_belief_new(const double *embeddings,
                              size_t num_prompts,
                              size_t dim,
                              double bandwidth,
                              enum VipLink link,
                              double clip_eps,
                              struct VipBelief **out_belief);

// Zero-mean belief over an explicit symmetric `q × q` row-major kernel.
//
// # Safety
// `kernel` must point to `q * q` values; `out_belief` must be valid for one
// write.
enum VipStatus vip_belief_from_kernel(const double *kernel,
                                      size_t q,
                                      enum VipLink link,
                                      double clip_eps,
                                      struct VipBelief **out_belief);

// Number of prompts covered by the belief, or 0 for a null handle.
//
// # Safety
// `belief` must be null or a live handle.
size_t vip_belief_len(const struct VipBelief *belief);

// Copies the latent mean into `out_mean` (length `len`, which must equal the
// number of prompts).
//
// # Safety
// `belief` must be a live handle and `out_mean` valid for `len` writes.
enum VipStatus vip_belief_mean(const struct VipBelief *belief, double *out_mean, size_t len);

// Linked predictions for `len` prompt indices.
//
// # Safety
// `belief` must be a live handle; `indices` and `out_pred` must hold `len`
// elements.
enum VipStatus vip_belief_predict(const struct VipBelief *belief,
                                  const size_t *indices,
                                  size_t len,
                                  double *out_pred);

// Conditions on one batch and writes a new handle to `out_belief`.
//
// Prompt `indices[k]` has `counts[k]` rewards; all rewards are concatenated in
// `rewards` in batch order.
//
// # Safety
// `belief` must be a live handle; `indices` and `counts` must hold
// `batch_len` elements and `rewards` their sum; `out_belief` must be valid
// for one write.
enum VipStatus vip_belief_update(const struct VipBelief *belief,
                                 const size_t *indices,
                                 const size_t *counts,
                                 size_t batch_len,
                                 const double *rewards,
                                 size_t rewards_len,
                                 struct VipBelief **out_belief);

// Releases a handle. Null is ignored.
//
// # Safety
// `belief` must be null or a handle not yet freed.
void vip_belief_free(struct VipBelief *belief);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIP_H */
