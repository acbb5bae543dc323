#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "dmpo/rng.hpp"
#include "dmpo/sim.hpp"

namespace dmpo {

// One reference sample: desired position and attitude.
struct RefPoint {
    Vector3d p_des = Vector3d::Zero();
    Quaterniond q_des = Quaterniond::Identity();
};

// Reference trajectory sampled at the control rate (50 Hz). Positions
// are piecewise linear between waypoints, so the implied velocity is
// discontinuous at the corners -- deliberately infeasible.
struct ReferenceTraj {
    std::vector<RefPoint> samples;
    double duration = 0.0;  // s
    double rate = 50.0;     // Hz

    size_t size() const { return samples.size(); }

    // Reference at step index; holds the last sample past the end.
    const RefPoint& at(long idx) const {
        if (idx < 0) idx = 0;
        if (idx >= static_cast<long>(samples.size()))
            idx = static_cast<long>(samples.size()) - 1;
        return samples[static_cast<size_t>(idx)];
    }
};

struct CostWeights {
    double w_p = 1.0;             // position tracking
    double w_q = 0.5;             // orientation tracking
    double w_u = 0.05;            // control penalty
    double terminal_scale = 1.0;  // multiplier on the final rollout step
    double f_hover = 0.04 * 9.81; // N, normalizes the thrust penalty
    double omega_scale = 10.0;    // rad/s, normalizes the rate penalty

    void validate() const {
        if (w_p < 0 || w_q < 0 || w_u < 0 || terminal_scale < 0)
            throw std::invalid_argument("CostWeights: weights must be >= 0");
        if (!(f_hover > 0) || !(omega_scale > 0))
            throw std::invalid_argument("CostWeights: scales must be > 0");
    }

    static CostWeights for_sim(const SimParams& sim) {
        CostWeights w;
        w.f_hover = sim.hover_thrust();
        w.omega_scale = sim.omega_max;
        return w;
    }
};

// Random zig-zag through uniform waypoints in `volume`, sampled at
// 50 Hz. With yaw_flips the desired yaw alternates by pi at every
// waypoint and is held constant along each segment.
inline ReferenceTraj gen_zigzag(uint64_t seed, bool yaw_flips,
                                const Vector3d& vol_min, const Vector3d& vol_max,
                                double seg_time, double duration) {
    if (!(seg_time > 0.0) || duration < seg_time)
        throw std::invalid_argument("gen_zigzag: need duration >= seg_time > 0");
    for (int a = 0; a < 3; ++a)
        if (!(vol_max[a] > vol_min[a]))
            throw std::invalid_argument("gen_zigzag: degenerate volume");

    Rng rng(seed);
    const double rate = 50.0;
    const size_t n_samples = static_cast<size_t>(std::llround(duration * rate));
    const int n_segments = static_cast<int>(std::ceil(duration / seg_time));

    std::vector<Vector3d> waypoints(static_cast<size_t>(n_segments) + 1);
    for (auto& wp : waypoints)
        for (int a = 0; a < 3; ++a) wp[a] = rng.uniform(vol_min[a], vol_max[a]);

    ReferenceTraj traj;
    traj.duration = duration;
    traj.rate = rate;
    traj.samples.resize(n_samples);
    for (size_t i = 0; i < n_samples; ++i) {
        double t = static_cast<double>(i) / rate;
        int seg = std::min(static_cast<int>(t / seg_time), n_segments - 1);
        double alpha = (t - seg * seg_time) / seg_time;
        RefPoint& s = traj.samples[i];
        s.p_des = (1.0 - alpha) * waypoints[seg] + alpha * waypoints[seg + 1];
        double yaw = yaw_flips ? (seg % 2) * kPi : 0.0;
        s.q_des = Quaterniond(Eigen::AngleAxisd(yaw, Vector3d::UnitZ()));
    }
    return traj;
}

// Quadratic tracking cost. The orientation term 1 - <q, q_des>^2 is
// invariant under the quaternion double cover; the control penalty
// measures deviation from hover thrust plus rate magnitude, both
// dimensionless.
inline double stage_cost(const QuadState& state, const ControlInput& u,
                         const RefPoint& ref, const CostWeights& w) {
    double pos = (state.p - ref.p_des).squaredNorm();
    double dot = state.q.coeffs().dot(ref.q_des.coeffs());
    double ori = 1.0 - dot * dot;
    double df = (u.f_des - w.f_hover) / w.f_hover;
    double ctrl = df * df + u.omega_des.squaredNorm() / (w.omega_scale * w.omega_scale);
    return w.w_p * pos + w.w_q * ori + w.w_u * ctrl;
}

// Sum of stage costs over a predicted trajectory, final step scaled by
// terminal_scale. states[h] pairs with controls[h] and ref_window[h].
inline double traj_cost(const std::vector<QuadState>& states,
                        const std::vector<ControlInput>& controls,
                        const std::vector<RefPoint>& ref_window,
                        const CostWeights& w) {
    if (states.size() != controls.size() || states.size() != ref_window.size())
        throw std::invalid_argument("traj_cost: sequence length mismatch");
    double total = 0.0;
    for (size_t h = 0; h < states.size(); ++h) {
        double c = stage_cost(states[h], controls[h], ref_window[h], w);
        if (h + 1 == states.size()) c *= w.terminal_scale;
        total += c;
    }
    return total;
}

// CSV export: t, p_des_xyz, q_des_wxyz.
inline void write_traj_csv(const ReferenceTraj& traj, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_traj_csv: cannot open " + path);
    out << "t,px,py,pz,qw,qx,qy,qz\n";
    for (size_t i = 0; i < traj.samples.size(); ++i) {
        const RefPoint& s = traj.samples[i];
        out << static_cast<double>(i) / traj.rate << ',' << s.p_des.x() << ','
            << s.p_des.y() << ',' << s.p_des.z() << ',' << s.q_des.w() << ','
            << s.q_des.x() << ',' << s.q_des.y() << ',' << s.q_des.z() << '\n';
    }
}

}  // namespace dmpo
