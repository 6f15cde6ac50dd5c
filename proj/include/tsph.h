#ifndef TSPH_H
#define TSPH_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define TSPH_API __declspec(dllexport)
#else
#define TSPH_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum tsph_status {
  TSPH_OK = 0,
  TSPH_ERR_CONFIG = 1,
  TSPH_ERR_RUNTIME = 2,
  TSPH_ERR_INVALID_ARGUMENT = 3,
  TSPH_ERR_IO = 4
} tsph_status;

typedef struct tsph_config tsph_config;
typedef struct tsph_run tsph_run;

/* Message of the last failed call on this thread; "" after a success. */
TSPH_API const char* tsph_last_error(void);
TSPH_API const char* tsph_status_name(tsph_status s);

TSPH_API tsph_status tsph_config_create(tsph_config** out);
TSPH_API void tsph_config_destroy(tsph_config* cfg);

/*
 * Integer keys: n, steps, repart_period, ranks, workers, seed, clumps,
 *   split_threshold, barriered (0/1).
 * Real keys: box, clump_radius, clump_fraction, jitter, gamma, eta_neigh,
 *   dt (0 selects the CFL estimate).
 * String keys: ic ("uniform" or "clustered").
 * Unknown keys and type mismatches give TSPH_ERR_INVALID_ARGUMENT.
 */
TSPH_API tsph_status tsph_config_set_int(tsph_config* cfg, const char* key, int64_t value);
TSPH_API tsph_status tsph_config_set_double(tsph_config* cfg, const char* key, double value);
TSPH_API tsph_status tsph_config_set_string(tsph_config* cfg, const char* key, const char* value);
TSPH_API tsph_status tsph_config_get_int(const tsph_config* cfg, const char* key, int64_t* value);
TSPH_API tsph_status tsph_config_get_double(const tsph_config* cfg, const char* key, double* value);
TSPH_API tsph_status tsph_config_validate(const tsph_config* cfg);

/* Generates ICs from the config and runs the timed step loop. */
TSPH_API tsph_status tsph_run_simulation(const tsph_config* cfg, tsph_run** out);
TSPH_API void tsph_run_destroy(tsph_run* run);

TSPH_API tsph_status tsph_run_step_count(const tsph_run* run, int* steps);
TSPH_API tsph_status tsph_run_step_wall_ms(const tsph_run* run, int index, double* ms);
TSPH_API tsph_status tsph_run_step_messages(const tsph_run* run, int index, int64_t* messages, int64_t* bytes);
/* Mean step wall time excluding the first and last steps. */
TSPH_API tsph_status tsph_run_mean_step_ms(const tsph_run* run, double* ms);
TSPH_API tsph_status tsph_run_imbalance(const tsph_run* run, double* ratio);
TSPH_API tsph_status tsph_run_timestep(const tsph_run* run, double* dt);
TSPH_API tsph_status tsph_run_repartition_count(const tsph_run* run, int* count);

typedef struct tsph_particle {
  uint64_t id;
  double x[3];
  double v[3];
  double m, h, u;
  double rho;
  double a[3];
  double u_dot;
} tsph_particle;

TSPH_API tsph_status tsph_run_particle_count(const tsph_run* run, int64_t* n);
/* Final state ordered by id. */
TSPH_API tsph_status tsph_run_particle(const tsph_run* run, int64_t index, tsph_particle* out);

/*
 * Writes timing.csv, ranks.csv, partition.csv, scaling.csv and snapshot.dat
 * into out_dir (created if missing), plus trace.csv when trace != 0.
 * baseline_timing may be NULL or the timing.csv of an earlier run; it adds
 * speed-up and efficiency columns to scaling.csv.
 */
TSPH_API tsph_status tsph_run_emit_reports(const tsph_run* run, const char* out_dir, int trace,
                                           const char* baseline_timing, int text_snapshot);

#ifdef __cplusplus
}
#endif

#endif
