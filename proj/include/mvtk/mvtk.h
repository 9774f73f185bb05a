#ifndef MVTK_H
#define MVTK_H

/* C interface to the multi-view try-on toolkit. Every entry point takes the
 * full pipeline configuration as a JSON object (see mvtk_config_schema_json
 * for the accepted keys; missing keys fall back to defaults) and reports
 * failures through the returned status plus mvtk_last_error. All functions
 * are deterministic for a fixed config. */

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mvtk_status {
    MVTK_OK = 0,
    MVTK_ERR_RUNTIME = 1, /* missing artifacts, IO failures, internal errors */
    MVTK_ERR_CONFIG = 2   /* malformed JSON, unknown keys, invalid values */
} mvtk_status;

/* Library version string, static storage. */
const char* mvtk_version(void);

/* Message of the most recent failure on this thread; empty string after any
 * successful call. The pointer stays valid until the next call. */
const char* mvtk_last_error(void);

/* JSON array describing every config key: {key, type, default, doc}.
 * Static storage. */
const char* mvtk_config_schema_json(void);

/* The same schema as one human-readable "key (type, default): doc" line per
 * key, for help output. Static storage. */
const char* mvtk_config_help(void);

/* Pipeline stages. Each validates the config, consumes artifacts written by
 * earlier stages, and writes its own under the configured directories. When
 * `summary` is non-NULL it receives a one-line result description of at most
 * summary_len - 1 bytes, always NUL terminated. */
mvtk_status mvtk_synth(const char* config_json, char* summary, size_t summary_len);
mvtk_status mvtk_train(const char* config_json, char* summary, size_t summary_len);
mvtk_status mvtk_edit(const char* config_json, char* summary, size_t summary_len);
mvtk_status mvtk_reconstruct(const char* config_json, char* summary, size_t summary_len);
mvtk_status mvtk_eval(const char* config_json, char* summary, size_t summary_len);
mvtk_status mvtk_turntable(const char* config_json, char* summary, size_t summary_len);

/* Trained-model inspection. */
typedef struct mvtk_model mvtk_model;

/* Loads a checkpoint; on success *out owns the model until mvtk_model_free. */
mvtk_status mvtk_model_load(const char* path, mvtk_model** out);
void mvtk_model_free(mvtk_model* model);

/* JSON summary of the loaded model: hyperparameters, optimizer step, and
 * parameter count. The string is owned by the handle. */
const char* mvtk_model_info_json(const mvtk_model* model);

#ifdef __cplusplus
}
#endif

#endif /* MVTK_H */
