#include <math.h>
#include <stdio.h>
#include "prolap.h"

int main(void) {
    double mu_a[2] = {1.0, 2.0}, lv_a[2] = {0.0, 0.0};
    double mu_t[2] = {0.5, -1.0}, lv_t[2] = {log(2.0), log(0.5)};
    double s = 0.0;
    if (prolap_csd_similarity(mu_a, lv_a, mu_t, lv_t, 2, &s) != PROLAP_STATUS_OK) return 1;
    /* 0.5 - 2 - (2 + 2.5) / 2 */
    if (fabs(s - (-3.75)) > 1e-12) return 2;

    if (prolap_csd_similarity(NULL, lv_a, mu_t, lv_t, 2, &s) != PROLAP_STATUS_NULL_POINTER) return 3;
    if (prolap_last_error() == NULL) return 4;

    ProlapDataset *ds = NULL;
    if (prolap_dataset_generate(16, 8, 1, &ds) != PROLAP_STATUS_OK) return 5;
    if (prolap_dataset_len(ds) != 16 || prolap_dataset_dim(ds) != 8) return 6;
    prolap_dataset_free(ds);
    printf("ok %s\n", prolap_version());
    return 0;
}
