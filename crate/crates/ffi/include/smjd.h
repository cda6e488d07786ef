#ifndef SMJD_H
#define SMJD_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SmjdStatus {
  SMJD_STATUS_OK = 0,
  SMJD_STATUS_NULL_POINTER = 1,
  SMJD_STATUS_INVALID_UTF8 = 2,
  // Invalid configuration or argument.
  SMJD_STATUS_INVALID_INPUT = 3,
  // A numerical routine failed.
  SMJD_STATUS_RUNTIME = 4,
  SMJD_STATUS_IO = 5,
  SMJD_STATUS_PANIC = 6,
} SmjdStatus;

typedef enum SmjdExperiment {
  SMJD_EXPERIMENT_SIMULATE = 0,
  SMJD_EXPERIMENT_RS_VERIFY = 1,
  SMJD_EXPERIMENT_QL_VERIFY = 2,
  SMJD_EXPERIMENT_DYNKIN = 3,
  SMJD_EXPERIMENT_HJB = 4,
  SMJD_EXPERIMENT_REDUCE_MARKOV = 5,
  SMJD_EXPERIMENT_POLICY_EVAL = 6,
} SmjdExperiment;

typedef enum SmjdHoldingLaw {
  // `a` is the rate.
  SMJD_HOLDING_LAW_EXPONENTIAL = 0,
  // `a` is the shape, `b` the scale.
  SMJD_HOLDING_LAW_WEIBULL = 1,
} SmjdHoldingLaw;

// Opaque experiment configuration.
typedef struct SmjdConfig SmjdConfig;

// Opaque semi-Markov regime model.
typedef struct SmjdRegimeModel SmjdRegimeModel;

// Opaque power-utility portfolio model.
typedef struct SmjdRsModel SmjdRsModel;

// Holding-time law of one regime.
typedef struct SmjdHolding {
  enum SmjdHoldingLaw law;
  double a;
  double b;
} SmjdHolding;

// Mean and standard error of a Monte Carlo estimate.
typedef struct SmjdEstimate {
  double mean;
  double se;
  uint64_t n;
} SmjdEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into the library on this thread.
const char *smjd_last_error_message(void);

// Library version as a static string.
const char *smjd_version(void);

// # Safety
// `s` must be null or a string returned by this library and not yet freed.
void smjd_string_free(char *s);

// Parse a JSON configuration.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum SmjdStatus smjd_config_from_json(const char *json, struct SmjdConfig **out);

// Default configuration of `experiment`.
//
// # Safety
// `out` must be a valid pointer.
enum SmjdStatus smjd_config_default(enum SmjdExperiment experiment,
                                    uint64_t seed,
                                    struct SmjdConfig **out);

// # Safety
// `config` must be a live handle.
enum SmjdStatus smjd_config_set_seed(struct SmjdConfig *config, uint64_t seed);

// Set the number of Monte Carlo paths.
//
// # Safety
// `config` must be a live handle.
enum SmjdStatus smjd_config_set_paths(struct SmjdConfig *config, uint64_t n_paths);

// Serialize the configuration; free the result with [`smjd_string_free`].
//
// # Safety
// `config` must be a live handle and `out` a valid pointer.
enum SmjdStatus smjd_config_to_json(const struct SmjdConfig *config, char **out);

// # Safety
// `config` must be null or a handle not yet freed.
void smjd_config_free(struct SmjdConfig *config);

// Run an experiment and write its result files into `out_dir`. `passed`
// receives the acceptance verdict when the run completes.
//
// # Safety
// `config` must be a live handle, `out_dir` a NUL-terminated path and
// `passed` a valid pointer.
enum SmjdStatus smjd_run(const struct SmjdConfig *config,
                         enum SmjdExperiment experiment,
                         const char *out_dir,
                         bool *passed);

// Regime model from a row-major `n × n` jump kernel and `n` holding laws.
//
// # Safety
// `kernel` must point to `n*n` doubles, `holding` to `n` entries and `out`
// must be valid.
enum SmjdStatus smjd_regime_model_new(size_t n,
                                      const double *kernel,
                                      const struct SmjdHolding *holding,
                                      struct SmjdRegimeModel **out);

// Hazard rate of `state` at `age`.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum SmjdStatus smjd_regime_hazard(const struct SmjdRegimeModel *model,
                                   size_t state,
                                   double age,
                                   double *out);

// # Safety
// `model` must be null or a handle not yet freed.
void smjd_regime_model_free(struct SmjdRegimeModel *model);

// Power-utility model with `regimes` entries in each of `r`, `mu`, `sigma`.
//
// # Safety
// `r`, `mu`, `sigma` must point to `regimes` doubles each and `out` must be
// valid.
enum SmjdStatus smjd_rs_model_new(size_t regimes,
                                  const double *r,
                                  const double *mu,
                                  const double *sigma,
                                  double gamma,
                                  double horizon,
                                  struct SmjdRsModel **out);

// Closed-form control at wealth `x` in `regime`.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum SmjdStatus smjd_rs_optimal_control(const struct SmjdRsModel *model,
                                        double t,
                                        double x,
                                        size_t regime,
                                        double *out);

// Monte Carlo `φ(t, i, y)` of the power-utility model (integral form).
//
// # Safety
// `model` and `regime_model` must be live handles and `out` a valid pointer.
enum SmjdStatus smjd_rs_phi(const struct SmjdRsModel *model,
                            const struct SmjdRegimeModel *regime_model,
                            double t,
                            size_t regime,
                            double age,
                            uint64_t n_paths,
                            uint64_t seed,
                            struct SmjdEstimate *out);

// # Safety
// `model` must be null or a handle not yet freed.
void smjd_rs_model_free(struct SmjdRsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SMJD_H */
