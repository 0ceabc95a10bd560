#ifndef DDTA_DDTA_H
#define DDTA_DDTA_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define DDTA_API __declspec(dllexport)
#else
#define DDTA_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ddta_status {
  DDTA_OK = 0,
  DDTA_ERR_INVALID_ARGUMENT = 1,
  DDTA_ERR_DATA = 2,
  DDTA_ERR_RUNTIME = 3
} ddta_status;

typedef enum ddta_norm { DDTA_NORM_L0 = 0, DDTA_NORM_L2 = 1, DDTA_NORM_LINF = 2 } ddta_norm;
typedef enum ddta_mode { DDTA_TARGETED = 0, DDTA_UNTARGETED = 1 } ddta_mode;
typedef enum ddta_split { DDTA_SPLIT_TRAIN = 0, DDTA_SPLIT_TEST = 1 } ddta_split;

typedef struct ddta_model ddta_model;
typedef struct ddta_dataset ddta_dataset;

/* Message of the last failed call on this thread; never NULL. */
DDTA_API const char* ddta_last_error(void);
DDTA_API const char* ddta_version(void);

/* Datasets. `name` is "mnist" or "cifar10"; NULL or empty `dir` falls back
 * to $DDTA_DATA_DIR. A limit of 0 keeps the whole split. */
DDTA_API ddta_status ddta_dataset_load(const char* name, const char* dir, uint64_t train_limit,
                                       uint64_t test_limit, ddta_dataset** out);
DDTA_API void ddta_dataset_free(ddta_dataset* data);
DDTA_API ddta_status ddta_dataset_size(const ddta_dataset* data, ddta_split split, uint64_t* out);

/* Models. */
DDTA_API ddta_status ddta_model_load(const char* path, ddta_model** out);
DDTA_API ddta_status ddta_model_save(const ddta_model* model, const char* path);
DDTA_API void ddta_model_free(ddta_model* model);

typedef struct ddta_model_info {
  double temperature;
  uint32_t classes;
  uint32_t chain_step;
  uint64_t input_size;
  uint64_t parameter_count;
  uint64_t seed;
  char provenance[16];
} ddta_model_info;

DDTA_API ddta_status ddta_model_info_get(const ddta_model* model, ddta_model_info* out);

/* Row-major [count, C, H, W] images in; [count, classes] out. */
DDTA_API ddta_status ddta_predict(const ddta_model* model, const float* images, uint64_t count,
                                  double temperature, float* probabilities);
DDTA_API ddta_status ddta_logits(const ddta_model* model, const float* images, uint64_t count,
                                 float* logits);

typedef struct ddta_train_params {
  uint64_t batch_size;
  double learning_rate;
  double decay;
  double momentum;
  uint64_t epochs;
  double temperature;
  double dropout_rate;
  uint64_t seed;
} ddta_train_params;

DDTA_API void ddta_train_params_default(ddta_train_params* out);

/* `preset` is "desk" or "paper"; architecture follows the dataset. */
DDTA_API ddta_status ddta_train_hard(const ddta_dataset* data, const char* preset,
                                     const ddta_train_params* params, ddta_model** out);

/* Extends `teacher` into a chain of `chain_length` models trained at the
 * teacher's temperature. Writes step<i>.ckpt and soft labels into out_dir. */
DDTA_API ddta_status ddta_distill(const ddta_model* teacher, const ddta_dataset* data,
                                  uint32_t chain_length, const ddta_train_params* params,
                                  const char* out_dir);

typedef struct ddta_attack_params {
  ddta_norm norm;
  ddta_mode mode;
  double kappa;
  double learning_rate;
  uint64_t max_iterations;
  double initial_c;
  double c_threshold;
  uint64_t random_starts;
  uint64_t seed;
  int abort_early;
} ddta_attack_params;

DDTA_API ddta_status ddta_attack_params_default(ddta_norm norm, ddta_attack_params* out);

typedef struct ddta_attack_summary {
  uint64_t attempted;
  uint64_t succeeded;
  double mean_perturbation; /* NaN when nothing succeeded */
  double max_perturbation;
} ddta_attack_summary;

/* Attacks the first `samples` correctly classified test images. Targeted
 * runs aim at (label + 1) mod classes. Writes the per-attack CSV. */
DDTA_API ddta_status ddta_attack(const ddta_model* model, const ddta_dataset* data,
                                 const ddta_attack_params* params, uint64_t samples,
                                 uint64_t workers, const char* out_csv,
                                 ddta_attack_summary* summary);

/* Evaluates every *.ckpt under models_dir on the test split. `metrics` is a
 * comma list of accuracy, confidence, sensitivity. */
DDTA_API ddta_status ddta_evaluate(const char* models_dir, const ddta_dataset* data,
                                   const char* metrics, const char* out_csv);

/* Runs a full experiment from a config file. */
DDTA_API ddta_status ddta_experiment(const char* config_path, int verbose);

/* Writes a NUL-terminated report of `run_dir` into buf (truncated to cap)
 * and sets *needed to the full length + 1. *intact is 1 when every manifest
 * hash matches. */
DDTA_API ddta_status ddta_report(const char* run_dir, char* buf, size_t cap, size_t* needed,
                                 int* intact);

#ifdef __cplusplus
}
#endif

#endif
