/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef AUDIOTOOLAGENT_H
#define AUDIOTOOLAGENT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define ATA_OK 0

/**
 * A required pointer argument was null.
 */
#define ATA_ERR_NULL 1

/**
 * A string argument was not valid UTF-8.
 */
#define ATA_ERR_UTF8 2

/**
 * An argument was malformed or out of range.
 */
#define ATA_ERR_INVALID 3

/**
 * A file could not be read or parsed.
 */
#define ATA_ERR_LOAD 4

/**
 * A coalition value could not be computed.
 */
#define ATA_ERR_EVALUATION 5

/**
 * An internal panic was caught at the boundary.
 */
#define ATA_ERR_PANIC 6

/**
 * A loaded configuration: tool registry plus agent backend.
 */
typedef struct AtaAgent AtaAgent;

/**
 * A coalition value table.
 */
typedef struct AtaGame AtaGame;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call on this thread; do not free.
 */
const char *ata_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void ata_string_free(char *s);

/**
 * Parse one assistant message into `{"tool_calls", "answer", "free_text", "diagnostics"}`.
 *
 * # Safety
 * `text` must be a nul-terminated string; `out_json` must be writable.
 */
int32_t ata_parse_turn(const char *text, char **out_json);

/**
 * # Safety
 * `text` must be a nul-terminated string; `out` must be writable.
 */
int32_t ata_detect_refusal(const char *text, bool *out);

/**
 * Match an extracted answer against a JSON array of choices. `out_choice`
 * receives the resolved choice index or -1.
 *
 * # Safety
 * String arguments must be nul-terminated; out-pointers must be writable.
 */
int32_t ata_match_answer(const char *extracted,
                         const char *choices_json,
                         const char *gold,
                         bool *out_correct,
                         int32_t *out_choice);

/**
 * # Safety
 * `config_path` must be nul-terminated; `out` must be writable.
 */
int32_t ata_agent_load(const char *config_path, struct AtaAgent **out);

/**
 * # Safety
 * `agent` must be null or a handle from [`ata_agent_load`], not yet freed.
 */
void ata_agent_free(struct AtaAgent *agent);

/**
 * Number of registered tools.
 *
 * # Safety
 * `agent` must be a live handle; `out` must be writable.
 */
int32_t ata_agent_tool_count(const struct AtaAgent *agent, size_t *out);

/**
 * The system prompt sessions start with.
 *
 * # Safety
 * `agent` must be a live handle; `out` must be writable.
 */
int32_t ata_agent_system_prompt(const struct AtaAgent *agent, char **out);

/**
 * Run one session to completion. `task_json` is
 * `{"id", "audio_refs", "question", "choices"?}`; the trace is written as JSON.
 *
 * # Safety
 * `agent` must be a live handle; `task_json` nul-terminated; `out_trace_json` writable.
 */
int32_t ata_run_session(const struct AtaAgent *agent,
                        const char *task_json,
                        uint64_t seed,
                        char **out_trace_json);

/**
 * Load a game file (`tools = [...]`, `[[values]]` rows, optional `default`).
 *
 * # Safety
 * `path` must be nul-terminated; `out` must be writable.
 */
int32_t ata_game_load(const char *path, struct AtaGame **out);

/**
 * # Safety
 * `game` must be null or a handle from [`ata_game_load`], not yet freed.
 */
void ata_game_free(struct AtaGame *game);

/**
 * Exact attribution over all of the game's tools, as a JSON array of
 * `{"tool_name", "value", "std_error", "n_samples"}`.
 *
 * # Safety
 * `game` must be a live handle; `out_json` writable.
 */
int32_t ata_shapley_exact(const struct AtaGame *game, size_t min_predecessor_size, char **out_json);

/**
 * Sampled attribution from `n_permutations` seeded permutations.
 *
 * # Safety
 * `game` must be a live handle; `out_json` writable.
 */
int32_t ata_shapley_estimate(const struct AtaGame *game,
                             size_t n_permutations,
                             size_t min_predecessor_size,
                             uint64_t seed,
                             char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUDIOTOOLAGENT_H */
