/* C interface of the ehtune library. All functions return EHT_OK or an error
 * status; eht_last_error() then holds a message for the calling thread.
 * Strings returned through char** are owned by the caller and released with
 * eht_string_free(). */
#ifndef EHTUNE_EHTUNE_H
#define EHTUNE_EHTUNE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define EHT_API __declspec(dllexport)
#else
#define EHT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum eht_status {
  EHT_OK = 0,
  EHT_ERR_ARGUMENT = 1,   /* null handle or malformed argument */
  EHT_ERR_CONFIG = 2,
  EHT_ERR_SHAPE = 3,
  EHT_ERR_INDEX = 4,
  EHT_ERR_CONTRACT = 5,
  EHT_ERR_TRAINING = 6,   /* divergence, non-finite values */
  EHT_ERR_CHECKPOINT = 7,
  EHT_ERR_IO = 8,
  EHT_ERR_INTERNAL = 9
} eht_status;

typedef struct eht_config eht_config;
typedef struct eht_backbone eht_backbone;
typedef struct eht_records eht_records;

typedef struct eht_run_summary {
  double final_metric;              /* dev metric in points */
  double param_distance_final;
  double feature_change_pre_final;
  double feature_change_stage1_final; /* NaN for single-stage strategies */
  int stage1_steps;
  int stage2_steps;
  int optimizer_steps;
  uint64_t seed;
} eht_run_summary;

EHT_API const char* eht_version(void);
EHT_API const char* eht_last_error(void);
EHT_API const char* eht_status_name(eht_status status);
EHT_API void eht_string_free(char* s);

/* Experiment configuration (JSON). */
EHT_API eht_status eht_config_load(const char* path, eht_config** out);
EHT_API eht_status eht_config_parse(const char* json_text, eht_config** out);
EHT_API eht_status eht_config_to_json(const eht_config* cfg, char** out);
EHT_API eht_status eht_config_output_dir(const eht_config* cfg, char** out);
EHT_API void eht_config_free(eht_config* cfg);

/* Masked-token pretraining of a fresh backbone (θ_f0). */
EHT_API eht_status eht_pretrain(const eht_config* cfg, eht_backbone** out);
/* Pretraining curve of a backbone produced by eht_pretrain: step,loss CSV. */
EHT_API eht_status eht_backbone_loss_csv(const eht_backbone* bb, char** out);
EHT_API eht_status eht_backbone_heldout(const eht_backbone* bb, double* initial, double* final_loss);
EHT_API eht_status eht_backbone_save(const eht_backbone* bb, const char* path);
/* `expect` may be null; otherwise tensor shapes must match its backbone config. */
EHT_API eht_status eht_backbone_load(const char* path, const eht_config* expect, eht_backbone** out);
EHT_API eht_status eht_backbone_param_count(const eht_backbone* bb, size_t* out);
EHT_API void eht_backbone_free(eht_backbone* bb);

/* Runs one strategy on one task for every seed (null seeds: the config's). */
EHT_API eht_status eht_run(const eht_config* cfg, const eht_backbone* bb, const char* strategy, const char* task,
                           const uint64_t* seeds, size_t n_seeds, int threads, eht_records** out);

/* Sweeps an axis ("stage1_fraction" or "lora_rank") over the config's
 * strategies, tasks and seeds. mode: "fixed-total" or "fixed-stage2".
 * Records are ordered value-major, then strategy, task, seed. */
EHT_API eht_status eht_sweep(const eht_config* cfg, const eht_backbone* bb, const char* axis, const char* mode,
                             const double* values, size_t n_values, int threads, eht_records** records,
                             char** sweep_csv);

EHT_API size_t eht_records_count(const eht_records* recs);
EHT_API eht_status eht_records_summary(const eht_records* recs, size_t index, eht_run_summary* out);
/* Writes <dir>/<task>__<strategy>__seed<k>[suffix].json plus a .meta.json sidecar. */
EHT_API eht_status eht_records_write(const eht_records* recs, const eht_config* cfg, const char* dir,
                                     const char* suffix);
/* Same for a single record. */
EHT_API eht_status eht_records_write_one(const eht_records* recs, size_t index, const eht_config* cfg, const char* dir,
                                         const char* suffix);
EHT_API eht_status eht_records_aggregate_csv(const eht_records* recs, char** out);
EHT_API void eht_records_free(eht_records* recs);

/* Reads every record in runs_dir (non-recursive) and writes the report
 * files under out_dir. */
EHT_API eht_status eht_report(const char* runs_dir, const char* out_dir, size_t* n_files);

#ifdef __cplusplus
}
#endif

#endif
