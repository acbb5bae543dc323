#pragma once

#include <Eigen/Dense>

#include "dmpo/mppi.hpp"
#include "dmpo/sim.hpp"
#include "dmpo/task.hpp"

namespace dmpo {

struct TaskConfig {
    Vector3d vol_min = Vector3d(-1, -1, -1);
    Vector3d vol_max = Vector3d(1, 1, 1);
    double seg_time = 2.0;
    double duration = 10.0;
    bool yaw_flips = false;
    CostWeights weights;
};

inline ReferenceTraj gen_zigzag(uint64_t seed, const TaskConfig& task) {
    return gen_zigzag(seed, task.yaw_flips, task.vol_min, task.vol_max,
                      task.seg_time, task.duration);
}

// Critic conditioning: the next 32 reference steps with stride 4, each
// contributing (position, quaternion) -> 8 * 7 = 56 values.
inline Eigen::VectorXd critic_ref_window(const ReferenceTraj& traj, long t) {
    Eigen::VectorXd out(56);
    for (int j = 0; j < 8; ++j) {
        const RefPoint& r = traj.at(t + 4 * (j + 1));
        out.segment(7 * j, 3) = r.p_des;
        out(7 * j + 3) = r.q_des.w();
        out(7 * j + 4) = r.q_des.x();
        out(7 * j + 5) = r.q_des.y();
        out(7 * j + 6) = r.q_des.z();
    }
    return out;
}

// Policy conditioning for the end-to-end baseline: the 10 desired
// positions up to 0.6 s ahead, evenly spaced (steps t+3, t+6, ..., t+30
// at 50 Hz).
inline Eigen::VectorXd e2e_ref_window(const ReferenceTraj& traj, long t) {
    Eigen::VectorXd out(30);
    for (int j = 0; j < 10; ++j)
        out.segment(3 * j, 3) = traj.at(t + 3 * (j + 1)).p_des;
    return out;
}

// Auxiliary MDP state: system state, previous plan parameters, and the
// critic's reference conditioning vector.
struct AuxState {
    QuadState x;
    PlanParams theta_prev;
    Eigen::VectorXd ref_window;  // 56 values
    long t = 0;
};

// One training/evaluation episode environment over the auxiliary MDP.
// Owns the reference trajectory, the (possibly randomized) simulated
// system, and the episode RNG. The reward stays defined on the original
// state-control space.
class AuxEnv {
public:
    // `model` is the controller-facing nominal system; `actual_base` is
    // what actually gets stepped (it may carry disturbances) before any
    // per-episode randomization.
    AuxEnv(SimParams model, SimParams actual_base, MppiConfig mppi, TaskConfig task,
           double safety_box = 3.0)
        : nominal_(std::move(model)), actual_base_(std::move(actual_base)),
          actual_(actual_base_), mppi_(std::move(mppi)), task_(std::move(task)),
          safety_box_(safety_box) {
        nominal_.validate();
        actual_base_.validate();
        mppi_.validate();
    }

    AuxEnv(SimParams nominal, MppiConfig mppi, TaskConfig task, double safety_box = 3.0)
        : AuxEnv(nominal, nominal, std::move(mppi), std::move(task), safety_box) {}

    // Fresh zig-zag, fresh domain randomization, near-hover start with a
    // small Gaussian perturbation, default plan as theta_{-1}.
    const AuxState& reset(uint64_t seed, bool domain_randomization) {
        rng_.reseed(seed);
        traj_ = gen_zigzag(seed, task_);
        actual_ = randomize(actual_base_, rng_, domain_randomization);

        aux_.x = QuadState{};
        aux_.x.p = traj_.samples.front().p_des;
        for (int a = 0; a < 3; ++a) {
            aux_.x.p[a] += rng_.normal(0.0, 0.05);
            aux_.x.v[a] = rng_.normal(0.0, 0.05);
        }
        aux_.x.f_act = actual_.hover_thrust();
        aux_.x.omega_act.setZero();
        aux_.x.omega.setZero();
        aux_.theta_prev = mppi_.default_plan();
        aux_.ref_window = critic_ref_window(traj_, 0);
        aux_.t = 0;
        done_ = false;
        crashed_ = false;
        return aux_;
    }

    struct StepOut {
        double reward = 0.0;
        bool done = false;
        bool crashed = false;
    };

    // Applies the first control of the realized plan, advances the
    // simulated system, refreshes the auxiliary state. Termination is a
    // status, not an error: trajectory end, safety-box exit, or a
    // non-finite state.
    StepOut step(const PlanParams& action) {
        return step_control(to_control(action.mu.row(0), actual_), action);
    }

    // Lower-level entry for controllers whose applied control is not the
    // first row of the stored plan (plain MPPI warm-starts the plan
    // after extracting the control).
    StepOut step_control(const ControlInput& u, const PlanParams& action) {
        StepOut out;
        out.reward = -stage_cost(aux_.x, u, traj_.at(aux_.t), task_.weights);

        QuadState next;
        bool fault = false;
        try {
            next = dmpo::step(aux_.x, u, actual_);
        } catch (const SimFault&) {
            fault = true;
            next = aux_.x;
        }

        aux_.t += 1;
        aux_.x = next;
        aux_.theta_prev = action;
        aux_.ref_window = critic_ref_window(traj_, aux_.t);

        bool out_of_box = next.p.cwiseAbs().maxCoeff() > safety_box_;
        crashed_ = fault || out_of_box;
        done_ = crashed_ || aux_.t >= static_cast<long>(traj_.size());
        out.done = done_;
        out.crashed = crashed_;
        return out;
    }

    const AuxState& aux() const { return aux_; }
    const ReferenceTraj& traj() const { return traj_; }
    const SimParams& actual_sim() const { return actual_; }
    const SimParams& nominal_sim() const { return nominal_; }
    const MppiConfig& mppi() const { return mppi_; }
    const TaskConfig& task() const { return task_; }
    bool done() const { return done_; }
    bool crashed() const { return crashed_; }
    Rng& rng() { return rng_; }

private:
    SimParams nominal_;
    SimParams actual_base_;
    SimParams actual_;   // randomized per episode
    MppiConfig mppi_;
    TaskConfig task_;
    double safety_box_;
    Rng rng_{0};
    ReferenceTraj traj_;
    AuxState aux_;
    bool done_ = true;
    bool crashed_ = false;
};

// Plain-MDP environment for the end-to-end baseline: observations are
// (flattened state, 10 future desired positions), actions are normalized
// controls. Same dynamics, reward, and termination as the auxiliary env.
class PlainEnv {
public:
    PlainEnv(SimParams nominal, TaskConfig task, double safety_box = 3.0)
        : nominal_(std::move(nominal)), actual_(nominal_), task_(std::move(task)),
          safety_box_(safety_box) {
        nominal_.validate();
    }

    static constexpr int kObsDim = QuadState::kFlatDim + 30;

    Eigen::VectorXd reset(uint64_t seed, bool domain_randomization) {
        rng_.reseed(seed);
        traj_ = gen_zigzag(seed, task_);
        actual_ = randomize(nominal_, rng_, domain_randomization);
        x_ = QuadState{};
        x_.p = traj_.samples.front().p_des;
        for (int a = 0; a < 3; ++a) {
            x_.p[a] += rng_.normal(0.0, 0.05);
            x_.v[a] = rng_.normal(0.0, 0.05);
        }
        x_.f_act = actual_.hover_thrust();
        t_ = 0;
        done_ = false;
        crashed_ = false;
        return obs();
    }

    Eigen::VectorXd obs() const {
        Eigen::VectorXd out(kObsDim);
        out.head<QuadState::kFlatDim>() = x_.flatten();
        out.tail(30) = e2e_ref_window(traj_, t_);
        return out;
    }

    struct StepOut {
        double reward = 0.0;
        bool done = false;
        bool crashed = false;
    };

    StepOut step(const Eigen::RowVector4d& normalized_control) {
        StepOut out;
        ControlInput u = to_control(normalized_control, actual_);
        out.reward = -stage_cost(x_, u, traj_.at(t_), task_.weights);
        bool fault = false;
        try {
            x_ = dmpo::step(x_, u, actual_);
        } catch (const SimFault&) {
            fault = true;
        }
        t_ += 1;
        bool out_of_box = x_.p.cwiseAbs().maxCoeff() > safety_box_;
        crashed_ = fault || out_of_box;
        done_ = crashed_ || t_ >= static_cast<long>(traj_.size());
        out.done = done_;
        out.crashed = crashed_;
        return out;
    }

    const QuadState& state() const { return x_; }
    const ReferenceTraj& traj() const { return traj_; }
    const SimParams& actual_sim() const { return actual_; }
    long t() const { return t_; }
    bool done() const { return done_; }
    bool crashed() const { return crashed_; }

private:
    SimParams nominal_;
    SimParams actual_;
    TaskConfig task_;
    double safety_box_;
    Rng rng_{0};
    ReferenceTraj traj_;
    QuadState x_;
    long t_ = 0;
    bool done_ = true;
    bool crashed_ = false;
};

}  // namespace dmpo
