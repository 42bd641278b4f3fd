#ifndef MIXSEG_H
#define MIXSEG_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MixsegStatus {
  MIXSEG_STATUS_OK = 0,
  MIXSEG_STATUS_NULL_POINTER = 1,
  MIXSEG_STATUS_INVALID_ARGUMENT = 2,
  MIXSEG_STATUS_BUFFER_TOO_SMALL = 3,
  MIXSEG_STATUS_DIMENSION = 4,
  MIXSEG_STATUS_CORRUPT = 5,
  MIXSEG_STATUS_CONFIG = 6,
  MIXSEG_STATUS_DEGENERATE = 7,
  MIXSEG_STATUS_LABEL_SPACE = 8,
  MIXSEG_STATUS_INFEASIBLE = 9,
  MIXSEG_STATUS_FORMAT = 10,
  MIXSEG_STATUS_OTHER = 11,
  MIXSEG_STATUS_PANIC = 12,
} MixsegStatus;

typedef enum MixsegAlgorithm {
  MIXSEG_ALGORITHM_ORIGINAL = 0,
  MIXSEG_ALGORITHM_ESF_OMI = 1,
} MixsegAlgorithm;

/**
 * Scored masks awaiting fusion, all of one image size.
 */
typedef struct MixsegFusionInput MixsegFusionInput;

/**
 * Binary mask handle.
 */
typedef struct MixsegMask MixsegMask;

/**
 * Panoptic map handle.
 */
typedef struct MixsegPanopticMap MixsegPanopticMap;

typedef struct MixsegFusionConfig {
  double score_threshold;
  double nms_iou_threshold;
  double containment_slack;
  double min_visible_ratio;
  double binarize_threshold;
} MixsegFusionConfig;

/**
 * Entry of a panoptic map's segment table.
 */
typedef struct MixsegSegment {
  uint32_t id;
  uint32_t category_id;
  uint64_t area;
  bool is_thing;
} MixsegSegment;

/**
 * Category of a label space used for evaluation.
 */
typedef struct MixsegCategory {
  uint32_t id;
  bool is_thing;
} MixsegCategory;

typedef struct MixsegPq {
  double pq;
  double sq;
  double rq;
} MixsegPq;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call on the same thread.
 */
const char *mixseg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mixseg_version(void);

/**
 * Mask from `height * width` row-major bytes (nonzero = foreground).
 */
enum MixsegStatus mixseg_mask_from_bits(uint32_t height,
                                        uint32_t width,
                                        const uint8_t *bits,
                                        struct MixsegMask **out);

/**
 * Mask from column-major runs starting with a zero run.
 */
enum MixsegStatus mixseg_mask_from_rle(uint32_t height,
                                       uint32_t width,
                                       const uint32_t *runs,
                                       size_t num_runs,
                                       struct MixsegMask **out);

void mixseg_mask_free(struct MixsegMask *mask);

enum MixsegStatus mixseg_mask_area(const struct MixsegMask *mask, uint64_t *out);

/**
 * Copy the canonical runs into `buf`. `*len` receives the run count; when
 * `capacity` is too small nothing is copied and BUFFER_TOO_SMALL is returned.
 */
enum MixsegStatus mixseg_mask_runs(const struct MixsegMask *mask,
                                   uint32_t *buf,
                                   size_t capacity,
                                   size_t *len);

enum MixsegStatus mixseg_mask_iou(const struct MixsegMask *a,
                                  const struct MixsegMask *b,
                                  double *out);

/**
 * Whether at least `1 - slack` of `small` lies inside `big`.
 */
enum MixsegStatus mixseg_mask_contains(const struct MixsegMask *big,
                                       const struct MixsegMask *small,
                                       double slack,
                                       bool *out);

/**
 * Softmax over `dot(embedding, class) / tau` for `num_classes` row-major class
 * vectors plus the all-zero no-object entry. Writes `num_classes + 1` values.
 */
enum MixsegStatus mixseg_class_probabilities(const double *embedding,
                                             size_t dim,
                                             const double *classes,
                                             size_t num_classes,
                                             double tau,
                                             double *out);

/**
 * Minimum-cost assignment of `rows <= cols` rows of a row-major cost matrix.
 * Writes the chosen column of every row and the total cost.
 */
enum MixsegStatus mixseg_hungarian(const double *cost,
                                   size_t rows,
                                   size_t cols,
                                   size_t *assignment,
                                   double *total);

/**
 * Built-in defaults of an algorithm.
 */
enum MixsegStatus mixseg_fusion_config_default(enum MixsegAlgorithm algorithm,
                                               struct MixsegFusionConfig *out);

enum MixsegStatus mixseg_fusion_input_new(uint32_t height,
                                          uint32_t width,
                                          struct MixsegFusionInput **out);

/**
 * Add a mask whose most likely class is `category_id` with probability
 * `score`; `background_prob` is the no-object probability.
 */
enum MixsegStatus mixseg_fusion_input_add(struct MixsegFusionInput *input,
                                          const struct MixsegMask *mask,
                                          uint32_t category_id,
                                          bool is_thing,
                                          double score,
                                          double background_prob);

void mixseg_fusion_input_free(struct MixsegFusionInput *input);

/**
 * Fuse the collected masks. `config` may be NULL for the algorithm defaults.
 * An input without masks yields an all-void map.
 */
enum MixsegStatus mixseg_fuse(const struct MixsegFusionInput *input,
                              enum MixsegAlgorithm algorithm,
                              const struct MixsegFusionConfig *config,
                              struct MixsegPanopticMap **out);

/**
 * Map from row-major segment ids (0 = void) and its segment table.
 */
enum MixsegStatus mixseg_panoptic_map_new(uint32_t height,
                                          uint32_t width,
                                          const uint32_t *ids,
                                          const struct MixsegSegment *segments,
                                          size_t num_segments,
                                          struct MixsegPanopticMap **out);

void mixseg_panoptic_map_free(struct MixsegPanopticMap *map);

enum MixsegStatus mixseg_panoptic_map_size(const struct MixsegPanopticMap *map,
                                           uint32_t *height,
                                           uint32_t *width);

/**
 * Copy `height * width` segment ids into `buf`.
 */
enum MixsegStatus mixseg_panoptic_map_ids(const struct MixsegPanopticMap *map,
                                          uint32_t *buf,
                                          size_t capacity);

enum MixsegStatus mixseg_panoptic_map_num_segments(const struct MixsegPanopticMap *map,
                                                   size_t *out);

enum MixsegStatus mixseg_panoptic_map_segment(const struct MixsegPanopticMap *map,
                                              size_t index,
                                              struct MixsegSegment *out);

/**
 * PQ, SQ and RQ averaged over the categories present in either map.
 */
enum MixsegStatus mixseg_panoptic_quality(const struct MixsegPanopticMap *pred,
                                          const struct MixsegPanopticMap *gt,
                                          const struct MixsegCategory *categories,
                                          size_t num_categories,
                                          struct MixsegPq *out);

/**
 * `draws` dataset indices drawn with equal frequency over `num_datasets`.
 */
enum MixsegStatus mixseg_equal_frequency_sample(const size_t *sizes,
                                                size_t num_datasets,
                                                size_t draws,
                                                uint64_t seed,
                                                size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXSEG_H */
