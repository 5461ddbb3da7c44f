/* C API for the competesmoe sparse mixture-of-experts laboratory. */

#ifndef COMPETESMOE_H
#define COMPETESMOE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every API call.
 */
typedef enum CsmoeStatus {
  /**
   * Success.
   */
  CSMOE_OK = 0,
  /**
   * A null pointer, malformed UTF-8, or otherwise invalid argument.
   */
  CSMOE_INVALID_ARGUMENT = 1,
  /**
   * The configuration was rejected (schema or value error).
   */
  CSMOE_CONFIG_ERROR = 3,
  /**
   * The operation itself failed (I/O, numerics, incompatible data).
   */
  CSMOE_RUNTIME_ERROR = 4,
} CsmoeStatus;

/**
 * A loaded model plus the vocabulary it was trained with (needed to
 * encode raw bytes for scoring).
 */
typedef struct CsmoeModel CsmoeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread; empty string when
 * nothing failed yet. The pointer stays valid until the next failing
 * call on the same thread.
 */
const char *csmoe_last_error(void);

/**
 * Load a checkpoint file into a model handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_model` a valid pointer.
 */
enum CsmoeStatus csmoe_model_load(const char *path, struct CsmoeModel **out_model);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must have come from this library and not be freed twice.
 */
void csmoe_model_free(struct CsmoeModel *model);

/**
 * Vocabulary size of a loaded model.
 *
 * # Safety
 * `model` must be a live handle; `out_size` a valid pointer.
 */
enum CsmoeStatus csmoe_model_vocab_size(const struct CsmoeModel *model, uintptr_t *out_size);

/**
 * Context window length of a loaded model.
 *
 * # Safety
 * `model` must be a live handle; `out_context` a valid pointer.
 */
enum CsmoeStatus csmoe_model_context(const struct CsmoeModel *model, uintptr_t *out_context);

/**
 * Score raw bytes under the model: mean per-byte negative log-likelihood
 * (natural log) and bits per character. The bytes must all be in the
 * model's vocabulary.
 *
 * # Safety
 * `model` must be a live handle; `text` must point to `len` readable
 * bytes; the out pointers must be valid.
 */
enum CsmoeStatus csmoe_model_score(const struct CsmoeModel *model,
                                   const uint8_t *text,
                                   uintptr_t len,
                                   double *out_nll,
                                   double *out_bpc);

/**
 * Train from a JSON run configuration (the same schema the CLI reads).
 * Artifacts stream to `out_dir` when given; pass null to train without
 * writing anything. Reports the final validation and test bits per
 * character.
 *
 * # Safety
 * `config_json` must be NUL-terminated; `out_dir` may be null; the out
 * pointers must be valid.
 */
enum CsmoeStatus csmoe_train_run(const char *config_json,
                                 const char *out_dir,
                                 double *out_valid_bpc,
                                 double *out_test_bpc);

/**
 * Run the convergence-rate experiment from a JSON document with fields
 * `truth` (atom list) and `experiment` (grid/trials/fit knobs), and
 * return the summary JSON. Release the returned string with
 * [`csmoe_string_free`].
 *
 * # Safety
 * `config_json` must be NUL-terminated; `out_summary_json` must be a
 * valid pointer.
 */
enum CsmoeStatus csmoe_rates_run(const char *config_json, char **out_summary_json);

/**
 * Release a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must have been returned by this library and not be freed twice.
 */
void csmoe_string_free(char *s);

/**
 * Finite-difference gradient verification over every op and a two-block
 * model. Writes the worst relative error observed and succeeds only if
 * every check passed its tolerance.
 *
 * # Safety
 * `out_max_rel_err` must be a valid pointer.
 */
enum CsmoeStatus csmoe_gradcheck(uint64_t seed, double *out_max_rel_err);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* COMPETESMOE_H */
