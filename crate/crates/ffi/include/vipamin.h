#ifndef VIPAMIN_H
#define VIPAMIN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum {
  VPT_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  VPT_STATUS_NULL_POINTER = 1,
  /**
   * A parameter, shape or configuration was rejected.
   */
  VPT_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A numerical routine failed (non-finite values, no convergence).
   */
  VPT_STATUS_NUMERIC = 3,
  /**
   * A file could not be read or written, or failed its integrity check.
   */
  VPT_STATUS_IO = 4,
  /**
   * The caller's buffer is too small.
   */
  VPT_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * An internal panic was caught at the boundary.
   */
  VPT_STATUS_PANIC = 6,
} VptStatus;

/**
 * Opaque frozen backbone.
 */
typedef struct VptBackbone VptBackbone;

/**
 * Opaque prompt set (`n_p x embed_dim`).
 */
typedef struct VptPrompts VptPrompts;

/**
 * Copies the last error message on this thread into `buf` (NUL-terminated,
 * truncated to fit) and returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes of writes.
 */
size_t vpt_last_error(char *buf, size_t len);

/**
 * Loads a backbone archive.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
VptStatus vpt_backbone_load(const char *path, VptBackbone **out);

/**
 * Builds a randomly initialized backbone (attention biases enabled).
 *
 * # Safety
 * `out` must be valid for a write.
 */
VptStatus vpt_backbone_random(size_t depth,
                              size_t embed_dim,
                              size_t num_heads,
                              size_t ffn_hidden,
                              size_t grid_rows,
                              size_t grid_cols,
                              size_t patch_dim,
                              size_t num_classes,
                              uint64_t seed,
                              VptBackbone **out);

/**
 * Releases a backbone. Null is ignored.
 *
 * # Safety
 * `h` must be null or a handle from this library not yet freed.
 */
void vpt_backbone_free(VptBackbone *h);

/**
 * Reports the image layout and embedding shape of a backbone. Any output
 * pointer may be null.
 *
 * # Safety
 * `h` must be a live handle; non-null outputs must be valid for writes.
 */
VptStatus vpt_backbone_dims(const VptBackbone *h,
                            size_t *num_patches,
                            size_t *patch_dim,
                            size_t *embed_dim,
                            size_t *depth);

/**
 * Backbone forward passes run so far on this handle.
 *
 * # Safety
 * `h` must be null or a live handle; null yields 0.
 */
uint64_t vpt_backbone_forward_count(const VptBackbone *h);

/**
 * VIPAMIN initialization of `n_p` shallow prompts from one forward pass
 * over the given images; `k` tokens per matched prompt, `lambda` weight on
 * the orthogonal component.
 *
 * # Safety
 * `images` must hold `n_images * num_patches * patch_dim` values; `out`
 * must be valid for a write.
 */
VptStatus vpt_vipamin_init(const VptBackbone *h,
                           const double *images,
                           size_t n_images,
                           size_t n_p,
                           size_t k,
                           double lambda,
                           uint64_t seed,
                           VptPrompts **out);

/**
 * Prompts copied from randomly chosen patch embeddings of the images.
 *
 * # Safety
 * As for [`vpt_vipamin_init`].
 */
VptStatus vpt_spt_rand_init(const VptBackbone *h,
                            const double *images,
                            size_t n_images,
                            size_t n_p,
                            uint64_t seed,
                            VptPrompts **out);

/**
 * Xavier-uniform prompts of width `embed_dim`.
 *
 * # Safety
 * `out` must be valid for a write.
 */
VptStatus vpt_xavier_init(size_t n_p, size_t embed_dim, uint64_t seed, VptPrompts **out);

/**
 * Share of the prompts' (bias-free) value-space mass inside the span of
 * the first block's self-attention output on the images' mean embedding.
 *
 * # Safety
 * As for [`vpt_vipamin_init`]; `out` must be valid for a write.
 */
VptStatus vpt_projection_energy(const VptBackbone *h,
                                const VptPrompts *prompts,
                                const double *images,
                                size_t n_images,
                                double *out);

/**
 * Releases a prompt set. Null is ignored.
 *
 * # Safety
 * `h` must be null or a handle from this library not yet freed.
 */
void vpt_prompts_free(VptPrompts *h);

/**
 * Shape of a prompt set.
 *
 * # Safety
 * `h` must be a live handle; outputs must be valid for writes.
 */
VptStatus vpt_prompts_shape(const VptPrompts *h, size_t *rows, size_t *cols);

/**
 * Copies the prompts row-major into `buf`, which must hold at least
 * `rows * cols` values.
 *
 * # Safety
 * `buf` must be valid for `len` writes.
 */
VptStatus vpt_prompts_copy(const VptPrompts *h, double *buf, size_t len);

/**
 * Writes the prompt set as a one-set prompt archive.
 *
 * # Safety
 * `h` must be a live handle; `path` a NUL-terminated string.
 */
VptStatus vpt_prompts_save(const VptPrompts *h, const char *path);

/**
 * Reads set `index` of a prompt archive (0 for shallow prompts, the block
 * index for deep ones).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
VptStatus vpt_prompts_load(const char *path, size_t index, VptPrompts **out);

#endif  /* VIPAMIN_H */
