// Minimal library walkthrough: closed-loop MPPI holding a hover point,
// printing the position error and applied thrust every tenth step.

#include <cstdio>

#include "dmpo/mppi.hpp"
#include "dmpo/task.hpp"

int main() {
    using namespace dmpo;

    SimParams sim;
    MppiConfig cfg = MppiConfig::defaults_for(sim);
    cfg.samples = 128;
    CostWeights w = CostWeights::for_sim(sim);

    RefPoint hover_ref;  // origin, level attitude
    std::vector<RefPoint> refs(static_cast<size_t>(cfg.horizon), hover_ref);

    QuadState x;
    x.p = Vector3d(0.5, -0.3, 0.4);
    x.f_act = sim.hover_thrust();

    ControlMatrix base = halton_base(cfg);
    PlanParams plan = cfg.default_plan();

    for (int t = 0; t < 100; ++t) {
        MppiStepResult res = mppi_policy_step(x, plan, refs, cfg, sim, w, base);
        x = step(x, res.u, sim);
        plan = res.params;
        if (t % 10 == 0)
            std::printf("t=%4.2fs  |p|=%.3f m  thrust=%.3f N  ess=%.1f\n", t * sim.dt,
                        x.p.norm(), res.u.f_des, res.diag.ess);
    }
    std::printf("final position error: %.4f m\n", x.p.norm());
    return 0;
}
