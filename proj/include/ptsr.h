/* C interface to the ptsr library: interpretable sequential recommendation
 * with probabilistic pattern embeddings.
 *
 * All entry points take a JSON options document and report results as JSON
 * strings allocated by the library; release them with ptsr_string_free.
 * Functions return PTSR_OK (0) on success; on failure the returned status
 * doubles as a process exit code and ptsr_last_error() describes the
 * problem for the calling thread.
 */
#ifndef PTSR_H
#define PTSR_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ptsr_status {
  PTSR_OK = 0,
  PTSR_ERROR_USAGE = 2,   /* invalid options, flags, preconditions */
  PTSR_ERROR_IO = 3,      /* filesystem, parsing, serialization */
  PTSR_ERROR_NUMERIC = 4, /* non-finite losses, domain violations */
  PTSR_ERROR_INTERNAL = 5
} ptsr_status;

const char* ptsr_version(void);

/* Message for the most recent failure on this thread; empty when none. */
const char* ptsr_last_error(void);

void ptsr_string_free(char* s);

/* Dataset preparation: ingest -> 5-core filter -> leave-one-out split ->
 * evaluation candidates -> bundle file.
 * Options: {"input": path, "format": "tsv"|"csv"|"amazon", "output": path,
 *           "max_len": 20, "negatives": 100, "seed": 42,
 *           "user_col"/"item_col"/"time_col": optional column names}
 */
ptsr_status ptsr_prepare(const char* options_json, char** report_out);

/* Synthetic interaction log with planted rules.
 * Options: {"config": path-to-synth-config-json, "out_dir": path}
 * or the synth config inlined under "config_inline".
 */
ptsr_status ptsr_synth(const char* options_json, char** report_out);

/* Streaming per-epoch training records (JSON lines). */
typedef void (*ptsr_log_callback)(const char* record_json, void* user_data);

/* Training with early stopping on validation NDCG@10.
 * Options: {"data": bundle, "out_dir": dir, "d": 64, "levels": 2,
 *           "gamma": 2.0, "lambda": 0.4, "family": "gamma"|"beta",
 *           "lr": 5e-4, "weight_decay": 1e-8, "batch": 512,
 *           "epochs": 100, "patience": 10, "seed": 42,
 *           "ablate": ["w","b","kl","probe"], "resume": checkpoint-path}
 */
ptsr_status ptsr_train(const char* options_json, ptsr_log_callback log_cb,
                       void* user_data, char** report_out);

/* Ranking metrics under the real-plus-N protocol.
 * Options: {"checkpoint": path, "data": bundle, "k": [5,10],
 *           "split": "test"|"valid", "out": optional-report-path}
 */
ptsr_status ptsr_evaluate(const char* options_json, char** report_out);

/* Per-pattern explanation export, optionally with key-item recall.
 * Options: {"checkpoint": path, "data": bundle, "users": [names]|absent,
 *           "relations": optional-path, "importance": "aggregated"|"point",
 *           "recall_k": [1,2,3,5], "out": optional-jsonl-path}
 */
ptsr_status ptsr_explain(const char* options_json, char** report_out);

/* Opaque handles. */
typedef struct ptsr_model ptsr_model;
typedef struct ptsr_dataset ptsr_dataset;

ptsr_status ptsr_model_open(const char* checkpoint_path, ptsr_model** out);
void ptsr_model_close(ptsr_model* model);

/* Corrected score of `candidate` against the item sequence (dense ids,
 * chronological, most recent last). */
ptsr_status ptsr_model_score(const ptsr_model* model, const int32_t* items,
                             size_t n_items, int32_t candidate,
                             double* score_out);

/* Full per-pattern explanation as JSON. */
ptsr_status ptsr_model_explain(const ptsr_model* model, const int32_t* items,
                               size_t n_items, int32_t target,
                               char** explanation_json_out);

ptsr_status ptsr_dataset_open(const char* bundle_path, ptsr_dataset** out);
void ptsr_dataset_close(ptsr_dataset* dataset);
ptsr_status ptsr_dataset_summary(const ptsr_dataset* dataset, char** json_out);

#ifdef __cplusplus
}
#endif

#endif /* PTSR_H */
