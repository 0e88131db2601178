#ifndef MOBILEGO_H
#define MOBILEGO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Stone colours as integers: 0 empty, 1 black, 2 white.
#define MG_EMPTY 0

#define MG_BLACK 1

#define MG_WHITE 2

// Pass, in the flat move encoding where points are `row * size + col`.
#define MG_PASS -1

typedef enum mg_status {
  MG_STATUS_OK = 0,
  MG_STATUS_NULL_POINTER = 1,
  MG_STATUS_INVALID_ARGUMENT = 2,
  MG_STATUS_ILLEGAL_MOVE = 3,
  MG_STATUS_IO = 4,
  MG_STATUS_BAD_FORMAT = 5,
  MG_STATUS_GAME_OVER = 6,
  MG_STATUS_SEARCH_FAILED = 7,
  MG_STATUS_BUFFER_TOO_SMALL = 8,
  MG_STATUS_PANIC = 9,
} mg_status;

typedef struct mg_network mg_network;

typedef struct mg_position mg_position;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length in bytes.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t mg_last_error(char *buf, size_t len);

// Empty board of side `size`, Black to move.
//
// # Safety
// `out` must be valid for writing a pointer.
enum mg_status mg_position_new(uint32_t size, struct mg_position **out);

// # Safety
// `pos` must be null or a handle from `mg_position_new`/`mg_position_clone`
// not yet freed.
void mg_position_free(struct mg_position *pos);

// # Safety
// `pos` must be a live handle; `out` valid for writing a pointer.
enum mg_status mg_position_clone(const struct mg_position *pos, struct mg_position **out);

// Plays `code` (flat index or `MG_PASS`) for the side to move.
//
// # Safety
// `pos` must be a live handle.
enum mg_status mg_position_play(struct mg_position *pos, int32_t code);

// # Safety
// `pos` must be a live handle; `out` valid for one `bool`.
enum mg_status mg_position_is_legal(const struct mg_position *pos, int32_t code, bool *out);

// Board side, side to move (`MG_BLACK`/`MG_WHITE`) and whether two passes ended the game.
//
// # Safety
// `pos` must be a live handle; each output null or valid.
enum mg_status mg_position_info(const struct mg_position *pos,
                                uint32_t *size,
                                int32_t *to_move,
                                bool *over);

// Writes `size * size` colour codes in row-major order.
//
// # Safety
// `pos` must be a live handle; `out` valid for `len` integers.
enum mg_status mg_position_board(const struct mg_position *pos, int32_t *out, size_t len);

// Area score, positive when White leads after `komi`.
//
// # Safety
// `pos` must be a live handle; `out` valid for one float.
enum mg_status mg_position_score(const struct mg_position *pos, float komi, float *out);

// Parameter count of a network name at the given board size.
//
// # Safety
// `name` must be a NUL-terminated string; `out` valid for one integer.
enum mg_status mg_count_params(const char *name, uint32_t board, uint64_t *out);

// Freshly initialized network for a name and board size.
//
// # Safety
// `name` must be a NUL-terminated string; `out` valid for writing a pointer.
enum mg_status mg_network_new(const char *name,
                              uint32_t board,
                              uint64_t seed,
                              struct mg_network **out);

// # Safety
// `path` must be a NUL-terminated string; `out` valid for writing a pointer.
enum mg_status mg_network_load(const char *path, struct mg_network **out);

// # Safety
// `net` must be a live handle; `path` a NUL-terminated string.
enum mg_status mg_network_save(const struct mg_network *net, const char *path);

// # Safety
// `net` must be null or a live network handle.
void mg_network_free(struct mg_network *net);

// Move probabilities (`size * size` floats, row-major) and White's win
// probability for one position.
//
// # Safety
// Handles must be live; `policy` valid for `len` floats; `value` for one.
enum mg_status mg_network_evaluate(const struct mg_network *net,
                                   const struct mg_position *pos,
                                   float *policy,
                                   size_t len,
                                   float *value);

// Runs a search of `evaluations` network calls and writes the most-visited
// move (flat index or `MG_PASS`).
//
// # Safety
// Handles must be live; `out` valid for one integer.
enum mg_status mg_search(const struct mg_network *net,
                         const struct mg_position *pos,
                         uint32_t evaluations,
                         int32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOBILEGO_H */
