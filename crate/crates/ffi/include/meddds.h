#ifndef MEDDDS_H
#define MEDDDS_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MdStatus {
  MD_STATUS_OK = 0,
  MD_STATUS_NULL_POINTER = 1,
  MD_STATUS_INVALID_ARGUMENT = 2,
  MD_STATUS_NOT_FOUND = 3,
  MD_STATUS_IO = 4,
  MD_STATUS_TIMEOUT = 5,
  MD_STATUS_PROTOCOL = 6,
  MD_STATUS_PANIC = 7,
} MdStatus;

typedef struct MdClassifier MdClassifier;

typedef struct MdConfusionMatrix MdConfusionMatrix;

typedef struct MdDoctorNode MdDoctorNode;

typedef struct MdLatencyRecorder MdLatencyRecorder;

typedef struct MdMetrics {
  double accuracy;
  double macro_precision;
  double macro_recall;
} MdMetrics;

typedef struct MdLatencyStats {
  uint64_t count;
  double mean_us;
  uint64_t p50_us;
  uint64_t p95_us;
  uint64_t max_us;
} MdLatencyStats;

typedef struct MdClassification {
  uint8_t sample_id[16];
  // 0 COVID19, 1 NORMAL, 2 LUNG_OPACITY, 3 VIRAL_PNEUMONIA.
  uint8_t label;
  double confidences[4];
  uint64_t inference_duration_us;
  // Round trip measured by the doctor node.
  uint64_t rtt_us;
} MdClassification;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *md_version(void);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`). Returns the full message length
// including the terminator, or 0 if there is no message.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t md_last_error_message(char *buf, size_t len);

// The built-in quadrant model.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum MdStatus md_classifier_new_builtin(struct MdClassifier **out);

// An external command; the PGM path is appended as its last argument.
// `timeout_ms == 0` keeps the default of 30 s.
//
// # Safety
// `command` must be a NUL-terminated string and `out` a valid handle slot.
enum MdStatus md_classifier_new_adapter(const char *command,
                                        uint64_t timeout_ms,
                                        struct MdClassifier **out);

// Classifies a row-major 8-bit grayscale image.
//
// # Safety
// `pixels` must point to `pixels_len` bytes, `confidences` to 4 doubles
// and `label` to one byte; `label` may be null.
enum MdStatus md_classifier_classify(const struct MdClassifier *classifier,
                                     uint32_t width,
                                     uint32_t height,
                                     const uint8_t *pixels,
                                     size_t pixels_len,
                                     double *confidences,
                                     uint8_t *label);

// # Safety
// `classifier` must be null or a handle not yet freed.
void md_classifier_free(struct MdClassifier *classifier);

struct MdConfusionMatrix *md_confusion_new(void);

// # Safety
// `cm` must be a live handle.
enum MdStatus md_confusion_add(struct MdConfusionMatrix *cm, uint8_t truth, uint8_t predicted);

// # Safety
// `cm` must be a live handle and `count` writable.
enum MdStatus md_confusion_count(const struct MdConfusionMatrix *cm,
                                 uint8_t truth,
                                 uint8_t predicted,
                                 uint64_t *count);

// Accuracy and macro precision/recall. Fails with
// `MD_STATUS_INVALID_ARGUMENT` on an empty matrix.
//
// # Safety
// `cm` must be a live handle and `out` writable.
enum MdStatus md_confusion_metrics(const struct MdConfusionMatrix *cm, struct MdMetrics *out);

// # Safety
// `cm` must be null or a handle not yet freed.
void md_confusion_free(struct MdConfusionMatrix *cm);

struct MdLatencyRecorder *md_recorder_new(void);

// # Safety
// `recorder` must be a live handle and `sample_id` point to 16 bytes.
enum MdStatus md_recorder_publish(const struct MdLatencyRecorder *recorder,
                                  const uint8_t *sample_id,
                                  uint64_t t_us);

// Matches a result to its publish. `MD_STATUS_NOT_FOUND` marks an orphan.
//
// # Safety
// `recorder` must be a live handle, `sample_id` point to 16 bytes and
// `rtt_us` be null or writable.
enum MdStatus md_recorder_result(const struct MdLatencyRecorder *recorder,
                                 const uint8_t *sample_id,
                                 uint64_t t_us,
                                 uint64_t *rtt_us);

// # Safety
// `recorder` must be a live handle and `out` writable.
enum MdStatus md_recorder_stats(const struct MdLatencyRecorder *recorder,
                                struct MdLatencyStats *out);

// # Safety
// `recorder` must be null or a handle not yet freed.
void md_recorder_free(struct MdLatencyRecorder *recorder);

// A doctor node on UDP. `group` ("a.b.c.d:port") and `interface`
// ("a.b.c.d") may be null for the defaults.
//
// # Safety
// Strings must be null or NUL-terminated; `out` must be a valid handle slot.
enum MdStatus md_doctor_new_udp(const char *group,
                                const char *interface,
                                bool reliable,
                                struct MdDoctorNode **out);

// A doctor node wired to a built-in inference node over an in-process
// simulated network with the given per-datagram loss.
//
// # Safety
// `out` must be a valid handle slot.
enum MdStatus md_doctor_new_simulated(double loss_probability,
                                      uint64_t seed,
                                      bool reliable,
                                      struct MdDoctorNode **out);

// Publishes one image and waits up to `timeout_ms` for its result.
//
// # Safety
// `doctor` must be a live handle, `pixels` point to `pixels_len` bytes and
// `out` be writable.
enum MdStatus md_doctor_send(const struct MdDoctorNode *doctor,
                             uint32_t width,
                             uint32_t height,
                             const uint8_t *pixels,
                             size_t pixels_len,
                             uint64_t timeout_ms,
                             struct MdClassification *out);

// # Safety
// `doctor` must be null or a handle not yet freed.
void md_doctor_free(struct MdDoctorNode *doctor);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEDDDS_H */
