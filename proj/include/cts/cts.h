/* C interface to the ticket search library. All functions are thread-safe for
 * distinct handles. On failure a function returns a nonzero cts_status and
 * cts_last_error() describes the problem (per thread). */
#ifndef CTS_CTS_H_
#define CTS_CTS_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CTS_API __declspec(dllexport)
#else
#define CTS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cts_status {
  CTS_OK = 0,
  CTS_ERR_INVALID_ARGUMENT = 1,
  CTS_ERR_SHAPE_MISMATCH = 2,
  CTS_ERR_NON_FINITE = 3,
  CTS_ERR_UNSUPPORTED = 4,
  CTS_ERR_DIVERGENCE = 5,
  CTS_ERR_EMPTY_TICKET = 6,
  CTS_ERR_PARSE = 7,
  CTS_ERR_IO = 8,
  CTS_ERR_BUDGET_EXCEEDED = 9,
  CTS_ERR_STATE = 10,
  CTS_ERR_INTERNAL = 11
} cts_status;

typedef struct cts_config cts_config;
typedef struct cts_dataset cts_dataset;
typedef struct cts_model cts_model;
typedef struct cts_ticket cts_ticket;

CTS_API const char* cts_version(void);
CTS_API const char* cts_status_name(int status);
CTS_API const char* cts_last_error(void);
CTS_API void cts_string_free(char* s);

/* ---- configuration: "section.key" = value, see README ---- */
CTS_API cts_status cts_config_new(cts_config** out);
CTS_API void cts_config_free(cts_config* cfg);
/* Merges an INI file; later values win. */
CTS_API cts_status cts_config_load(cts_config* cfg, const char* path);
CTS_API cts_status cts_config_set(cts_config* cfg, const char* key, const char* value);
/* Copies the value (or "" if unset) into buf; *needed gets strlen + 1. */
CTS_API cts_status cts_config_get(const cts_config* cfg, const char* key, char* buf, size_t len,
                                  size_t* needed);
/* Checks that the settings form a valid experiment. */
CTS_API cts_status cts_config_validate(const cts_config* cfg);
CTS_API cts_status cts_config_write(const cts_config* cfg, const char* path);

/* ---- data, models, tickets ---- */
CTS_API cts_status cts_dataset_load(const char* spec, cts_dataset** out);
CTS_API void cts_dataset_free(cts_dataset* data);
CTS_API cts_status cts_dataset_info(const cts_dataset* data, int64_t* train_size, int64_t* test_size,
                                    int32_t* num_classes);

CTS_API cts_status cts_model_build(const char* arch, uint64_t seed, const cts_dataset* data, cts_model** out);
CTS_API cts_status cts_model_load(const char* path, cts_model** out);
CTS_API cts_status cts_model_save(const cts_model* model, const char* path);
CTS_API void cts_model_free(cts_model* model);
CTS_API cts_status cts_model_mask_size(const cts_model* model, int64_t* d);
CTS_API cts_status cts_model_step(const cts_model* model, int64_t* step);
/* Test accuracy and loss; ticket may be NULL for the dense network. */
CTS_API cts_status cts_model_evaluate(const cts_model* model, const cts_dataset* data, const cts_ticket* ticket,
                                      double* accuracy, double* loss);

CTS_API cts_status cts_ticket_load(const char* path, cts_ticket** out);
CTS_API cts_status cts_ticket_save(const cts_ticket* ticket, const char* path);
CTS_API void cts_ticket_free(cts_ticket* ticket);
CTS_API cts_status cts_ticket_info(const cts_ticket* ticket, int64_t* d, int64_t* retained, double* density);
/* Writes d bytes of 0/1; len must be at least d. */
CTS_API cts_status cts_ticket_mask(const cts_ticket* ticket, uint8_t* out, size_t len);

/* ---- commands; outputs go to output.dir ---- */
typedef struct cts_run_summary {
  double accuracy;
  double test_loss;
  double post_draw_loss;
  double density;
  int64_t retained;
  int64_t d;
  /* search only (0 otherwise) */
  double final_expected_density;
  int64_t overshoot_violations;
} cts_run_summary;

typedef struct cts_oracle_summary {
  int64_t masks;
  double best_value;
  double worst_value;
} cts_oracle_summary;

/* One CTS run at search.kappa. */
CTS_API cts_status cts_run_search(const cts_config* cfg, cts_run_summary* out);
/* One baseline.method run at baseline.kappa. */
CTS_API cts_status cts_run_baseline(const cts_config* cfg, cts_run_summary* out);
/* Full sweep; *failed_cells counts cells that raised. Progress goes to stderr when verbose. */
CTS_API cts_status cts_run_sweep(const cts_config* cfg, int verbose, int* failed_cells);
/* Ablation suite over a saved ticket and the checkpoint it was drawn from;
 * distribution_path may be NULL (inversion is then skipped). */
CTS_API cts_status cts_run_sanity(const cts_config* cfg, const char* ticket_path, const char* checkpoint_path,
                                  const char* distribution_path);
CTS_API cts_status cts_run_oracle(const cts_config* cfg, cts_oracle_summary* out);
/* Aggregates metrics CSVs into summary CSV at out_path; *table (may be NULL)
 * receives a text table to be released with cts_string_free. */
CTS_API cts_status cts_run_report(const char* const* csv_paths, size_t count, const char* out_path, char** table);

#ifdef __cplusplus
}
#endif

#endif /* CTS_CTS_H_ */
