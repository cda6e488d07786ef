#include <stdio.h>
#include "smjd.h"

int main(int argc, char **argv) {
    const char *out_dir = argc > 1 ? argv[1] : "smjd-c-out";
    double r[2] = {0.05, 0.02}, mu[2] = {0.13, 0.08}, sigma[2] = {0.2, 0.3};
    SmjdRsModel *model = NULL;
    if (smjd_rs_model_new(2, r, mu, sigma, 0.5, 1.0, &model) != SMJD_STATUS_OK) {
        fprintf(stderr, "%s\n", smjd_last_error_message());
        return 1;
    }
    double u = 0.0;
    smjd_rs_optimal_control(model, 0.0, 1.0, 0, &u);
    printf("u = %.6f\n", u);

    double kernel[4] = {0.0, 1.0, 1.0, 0.0};
    SmjdHolding laws[2] = {{SMJD_HOLDING_LAW_WEIBULL, 1.5, 0.8}, {SMJD_HOLDING_LAW_EXPONENTIAL, 1.0, 0.0}};
    SmjdRegimeModel *regime = NULL;
    smjd_regime_model_new(2, kernel, laws, &regime);
    SmjdEstimate phi;
    smjd_rs_phi(model, regime, 0.0, 0, 0.0, 2000, 7, &phi);
    printf("phi = %.6f (se %.2e)\n", phi.mean, phi.se);

    if (smjd_rs_optimal_control(model, 0.0, 1.0, 5, &u) != SMJD_STATUS_INVALID_INPUT) return 1;
    printf("error: %s\n", smjd_last_error_message());

    SmjdConfig *config = NULL;
    smjd_config_default(SMJD_EXPERIMENT_HJB, 1, &config);
    bool passed = false;
    SmjdStatus s = smjd_run(config, SMJD_EXPERIMENT_HJB, out_dir, &passed);
    printf("hjb: status %d, passed %d\n", (int)s, (int)passed);

    smjd_config_free(config);
    smjd_regime_model_free(regime);
    smjd_rs_model_free(model);
    return s == SMJD_STATUS_OK && passed ? 0 : 1;
}
