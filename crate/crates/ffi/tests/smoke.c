#include <math.h>
#include <stdio.h>
#include "tabb.h"

int main(void) {
    double scores[2] = {0.0, log(3.0)};
    double w[2];
    if (tabb_weights(scores, 2, 1.0, w) != TABB_STATUS_OK) return 1;
    if (fabs(w[0] - 0.75) > 1e-12 || fabs(w[1] - 0.25) > 1e-12) return 2;

    TabbConfig *cfg = NULL;
    if (tabb_config_new(1, &cfg) != TABB_STATUS_OK) return 3;
    if (tabb_config_set(cfg, "bogus") != TABB_STATUS_CONFIG) return 4;
    char msg[256];
    if (tabb_last_error(msg, sizeof msg) == 0) return 5;
    tabb_config_free(cfg);

    double s;
    if (tabb_normalized_score(1.0, 0.0, 2.0, &s) != TABB_STATUS_OK || s != 50.0) return 6;
    if (tabb_normalized_score(1.0, 0.0, 2.0, NULL) != TABB_STATUS_NULL_POINTER) return 7;
    printf("ok\n");
    return 0;
}
