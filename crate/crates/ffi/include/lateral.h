#ifndef LATERAL_H
#define LATERAL_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Status codes returned by every fallible function.
typedef enum LateralStatus {
  LATERAL_STATUS_OK = 0,
  LATERAL_STATUS_NULL_POINTER = 1,
  LATERAL_STATUS_INVALID_ARGUMENT = 2,
  LATERAL_STATUS_STRUCTURAL = 3,
  LATERAL_STATUS_CONTRACT = 4,
  LATERAL_STATUS_CONFIG = 5,
  LATERAL_STATUS_DECODE = 6,
  LATERAL_STATUS_NUMERIC = 7,
  LATERAL_STATUS_FROZEN_MODIFIED = 8,
  LATERAL_STATUS_JUDGE = 9,
  LATERAL_STATUS_IO = 10,
  LATERAL_STATUS_PANIC = 11,
} LateralStatus;

// Adapter family selector.
typedef enum LateralVariant {
  LATERAL_VARIANT_SHARED = 0,
  LATERAL_VARIANT_MOE = 1,
  LATERAL_VARIANT_LATERAL = 2,
} LateralVariant;

// Opaque corpus handle.
typedef struct LateralCorpus LateralCorpus;

// Opaque model handle.
typedef struct LateralModel LateralModel;

// Fine-tuning knobs. Obtain defaults from [`lateral_train_options_default`].
typedef struct LateralTrainOptions {
  size_t steps;
  double learning_rate;
  size_t batch_size;
  size_t grad_accum_steps;
  double weight_decay;
  // Global gradient-norm clip; 0 disables clipping.
  double clip_norm;
  uint64_t seed;
} LateralTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, static storage.
const char *lateral_version(void);

// Message for the last failure on this thread, or NULL after a success.
// Valid until the next call into the library from this thread.
const char *lateral_last_error(void);

// Release a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed already.
void lateral_string_free(char *s);

// Fresh base model from a TOML config, or the toy config when `config_toml`
// is NULL.
//
// # Safety
// `config_toml` is NULL or a valid C string; `out_model` is writable.
enum LateralStatus lateral_model_new(const char *config_toml,
                                     uint64_t seed,
                                     struct LateralModel **out_model);

// Load a full model checkpoint.
//
// # Safety
// `path` is a valid C string; `out_model` is writable.
enum LateralStatus lateral_model_load(const char *path, struct LateralModel **out_model);

// Save the full model (base and any adapters).
//
// # Safety
// `model` is a live handle; `path` is a valid C string.
enum LateralStatus lateral_model_save(const struct LateralModel *model, const char *path);

// Write only the adapter parameters of `model`.
//
// # Safety
// `model` is a live handle; `path` is a valid C string.
enum LateralStatus lateral_model_save_adapters(const struct LateralModel *model, const char *path);

// New model: `base` with the adapters stored at `path` attached.
//
// # Safety
// `base` is a live handle; `path` is a valid C string; `out_model` is writable.
enum LateralStatus lateral_model_apply_adapters(const struct LateralModel *base,
                                                const char *path,
                                                struct LateralModel **out_model);

// Attach zero-initialized adapters of `variant` (a [`LateralVariant`]),
// replacing any present.
//
// # Safety
// `model` is a live handle.
enum LateralStatus lateral_model_attach_adapters(struct LateralModel *model,
                                                 uint32_t variant,
                                                 uint64_t seed);

// Number of scalar parameters, optionally trainable ones only.
//
// # Safety
// `model` is a live handle; `out_count` is writable.
enum LateralStatus lateral_model_param_count(const struct LateralModel *model,
                                             bool trainable_only,
                                             size_t *out_count);

// Hex SHA-256 of the frozen parameters. Free with [`lateral_string_free`].
//
// # Safety
// `model` is a live handle; `out_digest` is writable.
enum LateralStatus lateral_model_frozen_digest(const struct LateralModel *model, char **out_digest);

// # Safety
// `model` is NULL or a handle not yet freed.
void lateral_model_free(struct LateralModel *model);

// Read a corpus file (and its sidecar, if any).
//
// # Safety
// `path` is a valid C string; `out_corpus` is writable.
enum LateralStatus lateral_corpus_read(const char *path, struct LateralCorpus **out_corpus);

// Write a corpus, with patch values in a binary sidecar when `sidecar`.
//
// # Safety
// `corpus` is a live handle; `path` is a valid C string.
enum LateralStatus lateral_corpus_write(const struct LateralCorpus *corpus,
                                        const char *path,
                                        bool sidecar);

// Synthetic corpus from a TOML spec (defaults when NULL).
//
// # Safety
// `spec_toml` is NULL or a valid C string; `out_corpus` is writable.
enum LateralStatus lateral_corpus_synth(const char *spec_toml, struct LateralCorpus **out_corpus);

// # Safety
// `corpus` is a live handle; `out_len` is writable.
enum LateralStatus lateral_corpus_len(const struct LateralCorpus *corpus, size_t *out_len);

// # Safety
// `corpus` is NULL or a handle not yet freed.
void lateral_corpus_free(struct LateralCorpus *corpus);

struct LateralTrainOptions lateral_train_options_default(void);

// Fine-tune fresh adapters of `variant` (a [`LateralVariant`]) on a frozen
// copy of `base`.
// The base handle is left untouched.
//
// # Safety
// `base` and `corpus` are live handles; `options` is readable; `out_model`
// is writable.
enum LateralStatus lateral_finetune(const struct LateralModel *base,
                                    uint32_t variant,
                                    const struct LateralCorpus *corpus,
                                    const struct LateralTrainOptions *options,
                                    struct LateralModel **out_model);

// Greedy (or, for `temperature > 0`, sampled) continuation of the prompt of
// instance `index`. The transcript is written to `out_transcript`.
//
// # Safety
// `model` and `corpus` are live handles; `out_transcript` is writable.
enum LateralStatus lateral_generate(const struct LateralModel *model,
                                    const struct LateralCorpus *corpus,
                                    size_t index,
                                    size_t max_steps,
                                    double temperature,
                                    uint64_t seed,
                                    char **out_transcript);

// Run the command-line interface with `argv[0..argc]` and return its exit
// code (0 success, 1 failure, 2 usage error).
//
// # Safety
// `argv` points to `argc` valid C strings.
int32_t lateral_cli_run(size_t argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATERAL_H */
