#include <stdio.h>
#include <string.h>
#include "saliency_sanity.h"

/* Loads a checkpoint given as argv[1], explains a constant input with
 * gradient and GradCAM, and prints the self-similarity of the gradient map. */
int main(int argc, char **argv) {
    if (argc != 2) return 64;
    char err[256];
    SsModel *model = NULL;
    if (ss_model_load("/nonexistent/model.json", &model) != SS_STATUS_IO) return 10;
    if (ss_last_error(err, sizeof err) == 0) return 11;

    if (ss_model_load(argv[1], &model) != SS_STATUS_OK) {
        ss_last_error(err, sizeof err);
        fprintf(stderr, "%s\n", err);
        return 12;
    }
    size_t n = ss_model_input_len(model);
    double x[4096];
    if (n == 0 || n > 4096) return 13;
    for (size_t i = 0; i < n; i++) x[i] = (double)(i % 7) / 7.0;

    size_t cls = 99;
    if (ss_model_predict(model, x, n, &cls) != SS_STATUS_OK || cls >= ss_model_num_classes(model)) return 14;

    SsMap *map = NULL;
    if (ss_explain(model, x, n, "gradient", -1, 0, &map) != SS_STATUS_OK) return 15;
    double v[4096];
    if (ss_map_values(map, v, 1) != SS_STATUS_BUFFER_TOO_SMALL) return 16;
    if (ss_map_values(map, v, sizeof v / sizeof v[0]) != SS_STATUS_OK) return 17;

    double s = 0; bool deg = true;
    if (ss_compare(map, map, "spearman_abs", &s, &deg) != SS_STATUS_OK || deg) return 18;
    SsMap *bad = NULL;
    int gc = ss_explain(model, x, n, "gradcam", -1, 0, &bad);
    if (gc == SS_STATUS_OK) ss_map_free(bad);
    printf("version=%s len=%zu class=%zu self=%.6f gradcam=%d\n", ss_version(), ss_map_len(map), cls, s, gc);
    ss_map_free(map);
    ss_model_free(model);
    return 0;
}
