#ifndef QAA_H
#define QAA_H

/* Generated by cbindgen from the qaa-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Attack family selector for [`qaa_attack_run`].
 */
typedef enum QaaAttackFamily {
  QAA_ATTACK_FAMILY_PGD = 0,
  QAA_ATTACK_FAMILY_MIM = 1,
  /**
   * State-alternating attack on a quantization-aware-trained substitute.
   */
  QAA_ATTACK_FAMILY_QAA_QAT = 2,
  /**
   * State-alternating attack on a post-training-quantized substitute.
   */
  QAA_ATTACK_FAMILY_QAA_PTQ = 3,
} QaaAttackFamily;

/**
 * Quantization state selector for inference and attacks.
 */
typedef enum QaaState {
  /**
   * Both sites bypassed.
   */
  QAA_STATE_FULL = 0,
  /**
   * Both sites quantized.
   */
  QAA_STATE_QUANTIZED = 1,
  /**
   * Quantized weights, full-precision activations.
   */
  QAA_STATE_WEIGHTS_ONLY = 2,
  /**
   * Quantized when the model carries active quantizers, full otherwise.
   */
  QAA_STATE_NATURAL = 3,
} QaaState;

/**
 * Status codes returned by every fallible call.
 */
typedef enum QaaStatus {
  QAA_STATUS_OK = 0,
  QAA_STATUS_INVALID_ARGUMENT = 1,
  QAA_STATUS_IO = 2,
  QAA_STATUS_NUMERIC = 3,
  QAA_STATUS_UNSUPPORTED = 4,
  QAA_STATUS_INTERNAL = 5,
} QaaStatus;

/**
 * Opaque adversarial-set handle.
 */
typedef struct QaaAdvSet QaaAdvSet;

/**
 * Opaque dataset handle.
 */
typedef struct QaaDataset QaaDataset;

/**
 * Opaque model handle.
 */
typedef struct QaaModel QaaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; never freed.
 */
const char *qaa_version(void);

/**
 * Message of the most recent error on this thread. The pointer stays valid
 * until the next failing call on the same thread; do not free it.
 */
const char *qaa_last_error_message(void);

/**
 * Frees a string returned by this library.
 */
void qaa_string_free(char *s);

/**
 * Synthesizes a class-conditional Gaussian blob dataset.
 */
enum QaaStatus qaa_dataset_synth(uintptr_t classes,
                                 uintptr_t n,
                                 uintptr_t height,
                                 uintptr_t width,
                                 float sigma,
                                 uint64_t seed,
                                 struct QaaDataset **out);

/**
 * Parses an IDX image/label file pair.
 */
enum QaaStatus qaa_dataset_load_idx(const char *images_path,
                                    const char *labels_path,
                                    struct QaaDataset **out);

/**
 * Number of examples in a dataset; 0 for a null handle.
 */
uintptr_t qaa_dataset_len(const struct QaaDataset *ds);

void qaa_dataset_free(struct QaaDataset *ds);

/**
 * Loads a model container.
 */
enum QaaStatus qaa_model_load(const char *path, struct QaaModel **out);

/**
 * Saves a model container.
 */
enum QaaStatus qaa_model_save(const struct QaaModel *model, const char *path);

/**
 * Architecture id as an owned string (release with `qaa_string_free`).
 */
char *qaa_model_arch_id(const struct QaaModel *model);

/**
 * Nominal weight bitwidth (32 when no quantizer is active).
 */
uint8_t qaa_model_weight_bits(const struct QaaModel *model);

/**
 * Clean accuracy of `model` on `ds` in the given state, as a fraction.
 */
enum QaaStatus qaa_model_accuracy(const struct QaaModel *model,
                                  const struct QaaDataset *ds,
                                  enum QaaState state,
                                  double *out_accuracy);

void qaa_model_free(struct QaaModel *model);

/**
 * Standard full-precision training of a named architecture
 * ("convnet-a", "convnet-b", or "mlp-3").
 */
enum QaaStatus qaa_train_standard(const char *arch,
                                  const struct QaaDataset *ds,
                                  uintptr_t epochs,
                                  uintptr_t batch_size,
                                  float learning_rate,
                                  uint64_t seed,
                                  struct QaaModel **out);

/**
 * Quantization-aware training from scratch at the given bitwidth.
 */
enum QaaStatus qaa_train_qat(const char *arch,
                             const struct QaaDataset *ds,
                             uint8_t bitwidth,
                             uintptr_t epochs,
                             uintptr_t batch_size,
                             float learning_rate,
                             uint64_t seed,
                             struct QaaModel **out);

/**
 * Quantization-aware fine-tuning of an existing model at the given
 * bitwidth.
 */
enum QaaStatus qaa_train_qat_finetune(const struct QaaModel *model,
                                      const struct QaaDataset *ds,
                                      uint8_t bitwidth,
                                      uintptr_t epochs,
                                      uintptr_t batch_size,
                                      float learning_rate,
                                      uint64_t seed,
                                      struct QaaModel **out);

/**
 * Alternating multi-bitwidth fine-tuning of a quantized substitute.
 */
enum QaaStatus qaa_finetune_qaa(const struct QaaModel *model,
                                const struct QaaDataset *ds,
                                uintptr_t epochs,
                                uintptr_t batch_size,
                                float learning_rate,
                                uint64_t seed,
                                struct QaaModel **out);

/**
 * Post-training quantization with "minmax" or "mse" calibration.
 */
enum QaaStatus qaa_ptq(const struct QaaModel *model,
                       const struct QaaDataset *calibration,
                       uint8_t bitwidth,
                       const char *method,
                       struct QaaModel **out);

/**
 * Generates adversarial examples for the first `max_examples` of `ds`
 * (0 = all). The substitute runs in `state` for the fixed-state families;
 * the alternating families toggle states per iteration.
 */
enum QaaStatus qaa_attack_run(const struct QaaModel *model,
                              const struct QaaDataset *ds,
                              enum QaaAttackFamily family,
                              float epsilon,
                              uintptr_t iterations,
                              uint64_t seed,
                              enum QaaState state,
                              uintptr_t max_examples,
                              struct QaaAdvSet **out);

/**
 * Number of examples in an adversarial set; 0 for a null handle.
 */
uintptr_t qaa_advset_len(const struct QaaAdvSet *adv);

/**
 * Persists an adversarial set to the dataset container format.
 */
enum QaaStatus qaa_advset_save(const struct QaaAdvSet *adv,
                               const char *path,
                               const char *substitute_id);

/**
 * Loads an adversarial set saved by [`qaa_advset_save`].
 */
enum QaaStatus qaa_advset_load(const char *path, struct QaaAdvSet **out);

void qaa_advset_free(struct QaaAdvSet *adv);

/**
 * Attack success rate (percent, clean-correct convention) of an
 * adversarial set against a target model. Writes -1 when the target gets
 * no clean example right.
 */
enum QaaStatus qaa_evaluate_asr(const struct QaaAdvSet *adv,
                                const struct QaaModel *target,
                                enum QaaState state,
                                double *out_asr,
                                uintptr_t *out_clean_correct);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* QAA_H */
