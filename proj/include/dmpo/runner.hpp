#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "dmpo/dmpo.hpp"
#include "dmpo/env.hpp"
#include "dmpo/mppi.hpp"

namespace dmpo {

enum class ControllerKind { kMppi, kDmpo, kE2e };

inline std::string controller_name(ControllerKind kind) {
    switch (kind) {
        case ControllerKind::kMppi: return "mppi";
        case ControllerKind::kDmpo: return "dmpo";
        case ControllerKind::kE2e: return "e2e";
    }
    return "?";
}

// Per-step log row of a closed-loop episode.
struct EpisodeStep {
    double t = 0.0;
    QuadState state;
    ControlInput u;
    double stage_cost = 0.0;
    double pos_err = 0.0;   // |p - p_des|, m
    double ori_err = 0.0;   // 1 - <q, q_des>^2
    StepDiagnostics diag;   // zeros for e2e
};

struct EpisodeRecord {
    std::vector<EpisodeStep> steps;
    double episode_cost = 0.0;
    double median_pos_err = 0.0;
    double median_ori_err = 0.0;
    bool crashed = false;
    uint64_t seed = 0;
    std::string controller;
    int n_samples = 0;
};

// Everything a closed-loop evaluation needs. `model` is what the
// controller plans with (nominal, disturbance-free); `actual` is the
// simulated system, which may carry wind/drag the controller never sees.
struct RunnerSetup {
    SimParams model;
    SimParams actual;
    MppiConfig mppi;
    TaskConfig task;
    ControllerKind kind = ControllerKind::kMppi;
    const DmpoNets* nets = nullptr;  // required for kDmpo
    const Mlp* e2e_actor = nullptr;  // required for kE2e
    bool domain_randomization = false;
    double safety_box = 3.0;
    int threads = 1;
};

// Runs one episode in eval mode (deterministic given the seed) and
// records every step. Crashes terminate the episode and are flagged,
// never dropped.
inline EpisodeRecord run_episode(const RunnerSetup& setup, uint64_t seed) {
    EpisodeRecord rec;
    rec.seed = seed;
    rec.controller = controller_name(setup.kind);
    rec.n_samples = setup.mppi.samples;

    if (setup.kind == ControllerKind::kDmpo && setup.nets == nullptr)
        throw std::invalid_argument("run_episode: dmpo controller needs networks");
    if (setup.kind == ControllerKind::kE2e && setup.e2e_actor == nullptr)
        throw std::invalid_argument("run_episode: e2e controller needs an actor");

    SimParams model = setup.model;
    model.disturbance = DisturbanceSpec{};  // the internal model is nominal

    if (setup.kind == ControllerKind::kE2e) {
        PlainEnv env(setup.actual, setup.task, setup.safety_box);
        env.reset(seed, setup.domain_randomization);
        while (!env.done()) {
            Eigen::VectorXd out = forward(*setup.e2e_actor, env.obs());
            Eigen::RowVector4d action = out.head<4>().transpose();
            EpisodeStep row;
            row.t = static_cast<double>(env.t()) / env.traj().rate;
            row.state = env.state();
            row.u = to_control(action, setup.actual);
            const RefPoint& ref = env.traj().at(env.t());
            row.stage_cost = stage_cost(env.state(), row.u, ref, setup.task.weights);
            row.pos_err = (env.state().p - ref.p_des).norm();
            double dot = env.state().q.coeffs().dot(ref.q_des.coeffs());
            row.ori_err = 1.0 - dot * dot;
            rec.steps.push_back(row);
            rec.episode_cost += row.stage_cost;
            env.step(action);
        }
        rec.crashed = env.crashed();
    } else {
        AuxEnv env(model, setup.actual, setup.mppi, setup.task, setup.safety_box);
        env.reset(seed, setup.domain_randomization);
        ControlMatrix base = halton_base(setup.mppi);
        PlanParams params = env.aux().theta_prev;
        Rng eval_rng(0);  // unused in eval mode

        while (!env.done()) {
            const QuadState& x = env.aux().x;
            long t = env.aux().t;
            std::vector<RefPoint> refs = ref_window(env.traj(), t, setup.mppi.horizon);

            ControlInput u;
            PlanParams next_params;
            StepDiagnostics diag;
            if (setup.kind == ControllerKind::kMppi) {
                MppiStepResult res = mppi_policy_step(x, params, refs, setup.mppi, model,
                                                      setup.task.weights, base, setup.threads);
                u = res.u;
                next_params = res.params;
                diag = res.diag;
            } else {
                DmpoStepResult res =
                    dmpo_policy_step(x, params, refs, setup.mppi, model, setup.task.weights,
                                     base, *setup.nets, PolicyMode::kEval, eval_rng,
                                     setup.threads);
                u = res.u;
                next_params = res.params;
                diag = res.diag;
            }

            EpisodeStep row;
            row.t = static_cast<double>(t) / env.traj().rate;
            row.state = x;
            row.u = u;
            const RefPoint& ref = env.traj().at(t);
            row.stage_cost = stage_cost(x, u, ref, setup.task.weights);
            row.pos_err = (x.p - ref.p_des).norm();
            double dot = x.q.coeffs().dot(ref.q_des.coeffs());
            row.ori_err = 1.0 - dot * dot;
            row.diag = diag;
            rec.steps.push_back(row);
            rec.episode_cost += row.stage_cost;

            env.step_control(u, next_params);
            params = next_params;
        }
        rec.crashed = env.crashed();
    }

    std::vector<double> pe, oe;
    pe.reserve(rec.steps.size());
    oe.reserve(rec.steps.size());
    for (const auto& s : rec.steps) {
        pe.push_back(s.pos_err);
        oe.push_back(s.ori_err);
    }
    if (!pe.empty()) {
        rec.median_pos_err = median(pe);
        rec.median_ori_err = median(oe);
    }
    return rec;
}

}  // namespace dmpo
