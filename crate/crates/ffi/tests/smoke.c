#include <math.h>
#include <stdio.h>

#include "cssdf.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        CssdfStatus s_ = (call);                                           \
        if (s_ != CSSDF_STATUS_OK) {                                       \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_,              \
                    cssdf_last_error() ? cssdf_last_error() : "");         \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    CssdfRobot *robot = NULL;
    CssdfModel *model = NULL;
    CssdfField *field = NULL;
    CHECK(cssdf_robot_builtin(0, &robot));
    CHECK(cssdf_model_new(robot, 1, &model));

    double qs[4] = {0.1, 0.2, -0.4, 0.3};
    double ps[4] = {1.0, 0.5, 2.0, -1.0};
    double v[2], g[4];
    CHECK(cssdf_model_predict_with_grad(model, qs, ps, 2, v, g));
    if (!isfinite(v[0]) || !isfinite(g[3])) return 1;

    CHECK(cssdf_field_oracle(robot, NULL, 51, &field));
    double q[2] = {0.0, 0.0}, phi, grad[2];
    CHECK(cssdf_field_distance(field, q, 0.0, &phi, grad));
    if (!(phi > 0.0)) return 1;

    if (cssdf_robot_builtin(7, &robot) != CSSDF_STATUS_INVALID_INPUT) return 1;

    cssdf_field_free(field);
    cssdf_model_free(model);
    cssdf_robot_free(robot);
    printf("ok %s\n", cssdf_version());
    return 0;
}
