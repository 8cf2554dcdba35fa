#include <stdio.h>
#include <string.h>

#include "fedsel.h"

static const char *CONFIG =
    "{\"num_clients\": 4, \"rounds\": 2, \"clients_per_round\": 2,"
    " \"policy\": {\"kind\": \"pncs\", \"queue_len\": 2},"
    " \"partition\": {\"mode\": \"shard\", \"shards_per_client\": 1},"
    " \"model\": {\"arch\": \"linear\"},"
    " \"data\": {\"source\": \"synthetic\", \"classes\": 4, \"dim\": 5, \"per_class\": 20, \"spread\": 0.5},"
    " \"seeds\": [0]}";

int main(void) {
    double u[3] = {1.0, 2.0, 3.0};
    double v[3] = {-1.0, -2.0, -3.0};
    double c = 0.0;
    if (fedsel_cos_p(u, v, 3, 4.0, FEDSEL_POLARIZATION_POWERED, &c) != FEDSEL_STATUS_OK || c > -0.999999) {
        fprintf(stderr, "cos_p failed: %f\n", c);
        return 1;
    }

    FedselSimulation *sim = NULL;
    if (fedsel_simulation_new(CONFIG, 7, &sim) != FEDSEL_STATUS_OK) {
        fprintf(stderr, "new failed: %s\n", fedsel_last_error_message());
        return 1;
    }
    for (int i = 0; i < 2; i++) {
        char *json = NULL;
        if (fedsel_simulation_step(sim, &json) != FEDSEL_STATUS_OK) {
            fprintf(stderr, "step failed: %s\n", fedsel_last_error_message());
            return 1;
        }
        printf("%s\n", json);
        fedsel_string_free(json);
    }
    char *json = NULL;
    if (fedsel_simulation_step(sim, &json) != FEDSEL_STATUS_FINISHED || json != NULL) {
        return 1;
    }
    fedsel_simulation_free(sim);

    if (fedsel_simulation_new("{\"num_clients\": 1}", 0, &sim) != FEDSEL_STATUS_CONFIG_ERROR || sim != NULL) {
        return 1;
    }
    printf("ok\n");
    return 0;
}
