#ifndef SERLM_H
#define SERLM_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values 1 to 4 mirror the command-line exit codes.
 */
typedef enum {
  SERLM_STATUS_OK = 0,
  SERLM_STATUS_INVALID_INPUT = 1,
  SERLM_STATUS_CONFIG = 2,
  SERLM_STATUS_DATA = 3,
  SERLM_STATUS_NUMERIC = 4,
  SERLM_STATUS_NULL_POINTER = 5,
  SERLM_STATUS_PANIC = 6,
} SerlmStatus;

typedef enum {
  SERLM_STRATEGY_SER_ONLY = 0,
  SERLM_STRATEGY_PROMPT_HINT = 1,
  SERLM_STRATEGY_JOINT_PREFIX = 2,
} SerlmStrategy;

typedef enum {
  SERLM_GENDER_UNKNOWN = 0,
  SERLM_GENDER_MALE = 1,
  SERLM_GENDER_FEMALE = 2,
} SerlmGender;

/**
 * A decoded or parsed answer.
 */
typedef struct SerlmAnswer SerlmAnswer;

/**
 * A loaded checkpoint.
 */
typedef struct SerlmModel SerlmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *serlm_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *serlm_version(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
SerlmStatus serlm_model_load(const char *path, SerlmModel **out);

/**
 * # Safety
 * `model` must come from [`serlm_model_load`] and not be used afterwards.
 */
void serlm_model_free(SerlmModel *model);

/**
 * Number of audio query rows the model feeds to its LM.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t serlm_model_num_queries(const SerlmModel *model);

/**
 * Decodes mono PCM samples in [-1, 1]. `transcript` may be null for
 * [`SerlmStrategy::SerOnly`]. A malformed model answer is still a success;
 * check [`serlm_answer_is_malformed`].
 *
 * # Safety
 * `samples` must point to `n_samples` floats; string arguments must be
 * null or NUL-terminated; `out` must be valid.
 */
SerlmStatus serlm_infer_pcm(const SerlmModel *model,
                            const float *samples,
                            size_t n_samples,
                            uint32_t sample_rate,
                            SerlmStrategy strategy,
                            const char *transcript,
                            SerlmGender gender,
                            uint64_t seed,
                            SerlmAnswer **out);

/**
 * Decodes a WAV file.
 *
 * # Safety
 * As for [`serlm_infer_pcm`], with `wav_path` NUL-terminated.
 */
SerlmStatus serlm_infer_wav(const SerlmModel *model,
                            const char *wav_path,
                            SerlmStrategy strategy,
                            const char *transcript,
                            SerlmGender gender,
                            uint64_t seed,
                            SerlmAnswer **out);

/**
 * Parses an answer string such as `| ASR: ... | Emotion: X |`.
 *
 * # Safety
 * `text` must be NUL-terminated and `out` valid.
 */
SerlmStatus serlm_parse_answer(const char *text, SerlmAnswer **out);

/**
 * # Safety
 * `answer` must be null or a live handle.
 */
const char *serlm_answer_text(const SerlmAnswer *answer);

/**
 * Parsed transcript field, or null when absent or malformed.
 *
 * # Safety
 * `answer` must be null or a live handle.
 */
const char *serlm_answer_transcript(const SerlmAnswer *answer);

/**
 * Emotion code letter (`'A'`, `'S'`, ...), or 0 when absent or malformed.
 *
 * # Safety
 * `answer` must be null or a live handle.
 */
char serlm_answer_emotion(const SerlmAnswer *answer);

/**
 * # Safety
 * `answer` must be null or a live handle.
 */
bool serlm_answer_is_malformed(const SerlmAnswer *answer);

/**
 * # Safety
 * `answer` must come from this library and not be used afterwards.
 */
void serlm_answer_free(SerlmAnswer *answer);

/**
 * Word error rate of `hypothesis` against a non-empty `reference`.
 *
 * # Safety
 * Both strings must be NUL-terminated and `out` valid.
 */
SerlmStatus serlm_word_error_rate(const char *reference, const char *hypothesis, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SERLM_H */
