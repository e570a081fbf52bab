/* End-to-end drive of the mdunet C ABI. */
#include "mdunet.h"

#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#define CHECK(expr)                                                        \
    do {                                                                   \
        MduStatus s_ = (expr);                                             \
        if (s_ != MDU_STATUS_OK) {                                         \
            fprintf(stderr, "FAIL %s -> %d: %s\n", #expr, (int)s_,         \
                    mdu_last_error_message());                             \
            return 1;                                                      \
        }                                                                  \
    } while (0)

static const char *CFG =
    "{\"modalities\":[\"CBV\",\"CTP\"],\"base_width\":4,\"depth\":2,"
    "\"fusion\":\"hyperdense\",\"input_spatial\":[32,32]}";

int main(void) {
    MduNetwork *net = NULL;
    CHECK(mdu_network_from_config_json(CFG, 7, &net));

    size_t params = 0;
    CHECK(mdu_network_parameter_count(net, &params));
    printf("parameters: %zu\n", params);
    if (params == 0) return 1;

    size_t streams = 0, h = 0, w = 0;
    CHECK(mdu_network_input_geometry(net, &streams, &h, &w));
    printf("geometry: %zu streams, %zux%zu\n", streams, h, w);
    if (streams != 2 || h != 32 || w != 32) return 1;

    char *table = NULL;
    CHECK(mdu_network_shape_table_text(net, &table));
    if (strstr(table, "Softmax layer") == NULL) {
        fprintf(stderr, "FAIL shape table missing softmax row\n");
        return 1;
    }
    mdu_string_free(table);

    /* Deterministic pseudo-input: two modality planes. */
    size_t n = streams * h * w;
    float *inputs = malloc(n * sizeof(float));
    for (size_t i = 0; i < n; i++) inputs[i] = (float)((i * 2654435761u) % 997) / 997.0f;
    float *fg1 = malloc(h * w * sizeof(float));
    float *fg2 = malloc(h * w * sizeof(float));
    CHECK(mdu_network_predict_slice(net, inputs, n, fg1, h * w));
    for (size_t i = 0; i < h * w; i++) {
        if (!(fg1[i] >= 0.0f && fg1[i] <= 1.0f)) {
            fprintf(stderr, "FAIL probability out of range at %zu: %f\n", i, fg1[i]);
            return 1;
        }
    }

    /* Round-trip through a checkpoint: predictions must be bitwise equal. */
    CHECK(mdu_network_save_checkpoint(net, "roundtrip.mdtw"));
    MduNetwork *net2 = NULL;
    CHECK(mdu_network_load_checkpoint("roundtrip.mdtw", &net2));
    CHECK(mdu_network_predict_slice(net2, inputs, n, fg2, h * w));
    if (memcmp(fg1, fg2, h * w * sizeof(float)) != 0) {
        fprintf(stderr, "FAIL reload changed predictions\n");
        return 1;
    }
    printf("checkpoint round-trip: bitwise identical predictions\n");

    /* Volume metrics on a hand-checkable pair (one slice, 4x4). */
    unsigned char ref[16] = {0}, pred[16] = {0};
    ref[5] = 1; ref[6] = 1; pred[6] = 1; pred[7] = 1;
    double dsc = 0, mhd = 0, vs = 0;
    CHECK(mdu_mask_metrics(ref, pred, 1, 4, 4, NULL, &dsc, &mhd, &vs));
    printf("metrics: dsc %.4f mhd %.4f vs %.4f\n", dsc, mhd, vs);
    if (fabs(dsc - 0.5) > 1e-12 || fabs(vs - 1.0) > 1e-12) return 1;

    /* Error paths: null pointers and junk config must not crash. */
    if (mdu_network_parameter_count(NULL, &params) != MDU_STATUS_NULL_POINTER) return 1;
    MduNetwork *bad = NULL;
    if (mdu_network_from_config_json("{\"nope\":1}", 0, &bad) != MDU_STATUS_CONFIG_ERROR) return 1;
    if (strlen(mdu_last_error_message()) == 0) return 1;
    printf("error paths: null -> NULL_POINTER, junk config -> CONFIG_ERROR (%s)\n",
           mdu_last_error_message());

    mdu_network_free(net);
    mdu_network_free(net2);
    free(inputs); free(fg1); free(fg2);
    printf("C ABI drive: PASS\n");
    return 0;
}
