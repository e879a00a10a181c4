#include <math.h>
#include <stdio.h>
#include <string.h>
#include "servesim.h"

#define CHECK(cond) do { if (!(cond)) { fprintf(stderr, "line %d: %s\n", __LINE__, #cond); return 1; } } while (0)

int main(void) {
    SsPerfParams p = {4.5, 0.0, 1.0, 0.15, 0.0005, 20.0, 2.5, 0.025};
    double t = 0.0;
    CHECK(ss_predict_latency(&p, 8, 512, &t) == SS_STATUS_OK);
    CHECK(t > 4.5 && isfinite(t));
    CHECK(ss_predict_latency(&p, 0, 512, &t) == SS_STATUS_INVALID_ARGUMENT);
    CHECK(ss_last_error() != NULL && strlen(ss_last_error()) > 0);

    SsLearner *learner = NULL;
    CHECK(ss_learner_new(&p, &learner) == SS_STATUS_OK);
    CHECK(ss_learner_record(learner, 4, 256, 12.0, 1.0) == SS_STATUS_OK);
    SsPerfParams learned;
    CHECK(ss_learner_params(learner, &learned) == SS_STATUS_OK);
    ss_learner_free(learner);

    uint32_t ids[2] = {0, 1};
    SsRouter *router = NULL;
    CHECK(ss_router_new("{\"policy\":\"prism\"}", 2000.0, 50.0, ids, 2, 7, &router) == SS_STATUS_OK);
    SsStateVector busy = {0, 3000.0, 50000.0, 1e6, 20.0, 40, 0.0};
    SsStateVector idle = {1, 0.0, 0.0, 1e6, 20.0, 0, 0.0};
    CHECK(ss_router_update(router, &busy) == SS_STATUS_OK);
    CHECK(ss_router_update(router, &idle) == SS_STATUS_OK);
    uint32_t chosen = 99;
    CHECK(ss_router_route(router, 1, 100, 1.0, &chosen) == SS_STATUS_OK);
    CHECK(chosen == 1);
    ss_router_free(router);

    char *summary = NULL;
    CHECK(ss_run_config_json("{", &summary) == SS_STATUS_INVALID_CONFIG);
    CHECK(summary == NULL);
    puts("ok");
    return 0;
}
