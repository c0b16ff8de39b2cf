#ifndef FEDNMT_H
#define FEDNMT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FednmtStatus {
  FEDNMT_STATUS_OK = 0,
  FEDNMT_STATUS_NULL_ARGUMENT = 1,
  FEDNMT_STATUS_INVALID_UTF8 = 2,
  FEDNMT_STATUS_INVALID_INPUT = 3,
  FEDNMT_STATUS_CONFIG = 4,
  FEDNMT_STATUS_PARSE = 5,
  FEDNMT_STATUS_PROTOCOL = 6,
  FEDNMT_STATUS_IO = 7,
  FEDNMT_STATUS_FORMAT = 8,
  FEDNMT_STATUS_INTERNAL = 9,
  FEDNMT_STATUS_BUFFER_TOO_SMALL = 10,
  FEDNMT_STATUS_PANIC = 11,
} FednmtStatus;

// A parsed configuration label such as `8E-8D/C-C (2-6)`.
typedef struct FednmtLabel FednmtLabel;

// A trained model loaded from a checkpoint.
typedef struct FednmtModel FednmtModel;

// A joint BPE vocabulary.
typedef struct FednmtVocab FednmtVocab;

// Per-layer and embedding parameter counts used to price a label.
typedef struct FednmtCostPreset {
  uint64_t enc_layer;
  uint64_t dec_layer;
  uint64_t embedding;
} FednmtCostPreset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf`. Returns the
// number of bytes the full message needs including the terminator, or 0
// when there is no error. The message is truncated to fit `cap`.
//
// # Safety
// `buf` must be null or point to at least `cap` writable bytes.
size_t fednmt_last_error(char *buf, size_t cap);

// Counts of the full-size Transformer with published costs.
struct FednmtCostPreset fednmt_cost_preset_full_scale(void);

// # Safety
// `text` must be a NUL-terminated string and `out` a valid pointer.
enum FednmtStatus fednmt_label_parse(const char *text, struct FednmtLabel **out);

// # Safety
// `label` must be null or a handle from [`fednmt_label_parse`] not yet freed.
void fednmt_label_free(struct FednmtLabel *label);

// Canonical text of a label.
//
// # Safety
// `label` must be a live handle; `buf` must hold `cap` bytes.
enum FednmtStatus fednmt_label_format(const struct FednmtLabel *label,
                                      char *buf,
                                      size_t cap,
                                      size_t *needed);

// C-Cost and T-Cost of one client in one round, in parameters.
//
// # Safety
// `label` must be a live handle; `c_cost` and `t_cost` valid pointers.
enum FednmtStatus fednmt_label_price(const struct FednmtLabel *label,
                                     struct FednmtCostPreset preset,
                                     uint64_t *c_cost,
                                     uint64_t *t_cost);

// Sample-weighted average of `clients` equal-length vectors, correctly
// rounded. `values[m]` points to `len` doubles and `counts[m]` is its
// sample count.
//
// # Safety
// `values` and `counts` must hold `clients` entries, each vector `len`
// doubles, and `out` must have room for `len` doubles.
enum FednmtStatus fednmt_fedavg(const double *const *values,
                                const uint64_t *counts,
                                size_t clients,
                                size_t len,
                                double *out);

// Corpus BLEU (0-100) of `n` hypothesis/reference pairs, 4-gram, unsmoothed.
//
// # Safety
// `hyps` and `refs` must hold `n` NUL-terminated strings; `out` must be valid.
enum FednmtStatus fednmt_corpus_bleu(const char *const *hyps,
                                     const char *const *refs,
                                     size_t n,
                                     double *out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum FednmtStatus fednmt_vocab_load(const char *path, struct FednmtVocab **out);

// # Safety
// `vocab` must be null or a handle from [`fednmt_vocab_load`] not yet freed.
void fednmt_vocab_free(struct FednmtVocab *vocab);

// Number of tokens including the special ones; 0 for a null handle.
//
// # Safety
// `vocab` must be null or a live handle.
size_t fednmt_vocab_len(const struct FednmtVocab *vocab);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum FednmtStatus fednmt_model_load(const char *path, struct FednmtModel **out);

// # Safety
// `model` must be null or a handle from [`fednmt_model_load`] not yet freed.
void fednmt_model_free(struct FednmtModel *model);

// Number of scalar parameters; 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t fednmt_model_param_count(const struct FednmtModel *model);

// Greedy translation of one source line.
//
// # Safety
// `model` and `vocab` must be live handles, `src` a NUL-terminated string,
// `buf` must hold `cap` bytes and `needed` must be valid.
enum FednmtStatus fednmt_translate(const struct FednmtModel *model,
                                   const struct FednmtVocab *vocab,
                                   const char *src,
                                   char *buf,
                                   size_t cap,
                                   size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDNMT_H */
