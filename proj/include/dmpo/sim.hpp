#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmpo/math_util.hpp"
#include "dmpo/rng.hpp"

namespace dmpo {

using Eigen::Quaterniond;
using Eigen::Vector3d;

// Thrown when an integrated state leaves the representable range.
// Callers in the control stack map this to a LARGE rollout cost or an
// episode termination rather than letting it escape.
struct SimFault : std::runtime_error {
    explicit SimFault(const std::string& field)
        : std::runtime_error("non-finite state component: " + field), field(field) {}
    std::string field;
};

// Rigid-body state plus the first-order actuation lag state. The lag
// state lives here so the simulator and the MPC rollout model share one
// layout. 17 scalars total when flattened.
struct QuadState {
    Vector3d p = Vector3d::Zero();        // position, m, world frame
    Vector3d v = Vector3d::Zero();        // velocity, m/s, world frame
    Quaterniond q = Quaterniond::Identity();  // world-from-body attitude
    Vector3d omega = Vector3d::Zero();    // body angular velocity, rad/s
    double f_act = 0.0;                   // actual collective thrust, N
    Vector3d omega_act = Vector3d::Zero();  // actual body rates, rad/s

    static constexpr int kFlatDim = 17;

    Eigen::Matrix<double, kFlatDim, 1> flatten() const {
        Eigen::Matrix<double, kFlatDim, 1> out;
        out << p, v, q.w(), q.x(), q.y(), q.z(), omega, f_act, omega_act;
        return out;
    }
};

// Checks every scalar of a state, returning the first offending field
// name, or empty when the state is finite.
inline std::string nonfinite_field(const QuadState& s) {
    auto bad3 = [](const Vector3d& x) {
        return !(std::isfinite(x.x()) && std::isfinite(x.y()) && std::isfinite(x.z()));
    };
    if (bad3(s.p)) return "p";
    if (bad3(s.v)) return "v";
    if (!(std::isfinite(s.q.w()) && std::isfinite(s.q.x()) &&
          std::isfinite(s.q.y()) && std::isfinite(s.q.z())))
        return "q";
    if (bad3(s.omega)) return "omega";
    if (!std::isfinite(s.f_act)) return "f_act";
    if (bad3(s.omega_act)) return "omega_act";
    return {};
}

// Desired thrust/body-rate command. Clamped to the actuator box at
// construction; everything downstream can assume the limits hold.
struct ControlInput {
    double f_des = 0.0;                // desired collective thrust, N
    Vector3d omega_des = Vector3d::Zero();  // desired body rates, rad/s

    ControlInput() = default;
    ControlInput(double f, const Vector3d& w, double f_max, double omega_max)
        : f_des(clamp(f, 0.0, f_max)),
          omega_des(w.cwiseMax(-omega_max).cwiseMin(omega_max)) {}
};

// World-frame disturbance model: constant force, quadratic drag against
// a gridded wind field. Stands in for unmodeled aerodynamics; the
// controller's internal model never sees it.
struct DisturbanceSpec {
    Vector3d const_force = Vector3d::Zero();  // N
    double drag_coeff = 0.0;                  // kg/m

    // Wind velocity grid over an axis-aligned box. Lookups outside the
    // box clamp to the nearest boundary cell. Empty grid means no wind.
    Vector3d box_min = Vector3d(-2, -2, -2);
    Vector3d box_max = Vector3d(2, 2, 2);
    int grid_n = 0;                           // cells per axis
    std::vector<Vector3d> wind;               // grid_n^3 entries, x-major

    bool active() const {
        return drag_coeff != 0.0 || const_force.squaredNorm() > 0.0 || grid_n > 0;
    }

    Vector3d wind_at(const Vector3d& p) const {
        if (grid_n <= 0 || wind.empty()) return Vector3d::Zero();
        Vector3d rel = p - box_min;
        Vector3d extent = box_max - box_min;
        int idx[3];
        for (int a = 0; a < 3; ++a) {
            double cell = extent[a] / grid_n;
            int i = static_cast<int>(std::floor(rel[a] / cell));
            idx[a] = std::min(std::max(i, 0), grid_n - 1);
        }
        return wind[(idx[0] * grid_n + idx[1]) * grid_n + idx[2]];
    }

    Vector3d force(const Vector3d& p, const Vector3d& v) const {
        Vector3d f = const_force;
        if (drag_coeff != 0.0 || grid_n > 0) {
            Vector3d v_rel = wind_at(p) - v;
            f += drag_coeff * v_rel.norm() * v_rel;
        }
        return f;
    }
};

struct SimParams {
    double mass = 0.04;                      // kg, Crazyflie-class
    Vector3d g = Vector3d(0, 0, -9.81);      // m/s^2
    double delay_k = 0.4;                    // first-order lag coefficient
    double dt = 0.02;                        // s
    double f_max = 2.0 * 0.04 * 9.81;        // N, twice hover weight
    double omega_max = 10.0;                 // rad/s
    double dr_force_max = 0.035;             // N per axis, episode-constant push
    DisturbanceSpec disturbance;

    double hover_thrust() const { return mass * 9.81; }

    void validate() const {
        if (!(dt > 0.0)) throw std::invalid_argument("SimParams: dt must be > 0");
        if (!(mass > 0.0)) throw std::invalid_argument("SimParams: mass must be > 0");
        if (delay_k < 0.0 || delay_k > 1.0)
            throw std::invalid_argument("SimParams: delay_k must be in [0,1]");
        if (!(f_max > 0.0) || !(omega_max > 0.0))
            throw std::invalid_argument("SimParams: control limits must be > 0");
    }
};

// First-order lag toward the commanded value: prev + k*(des - prev).
inline double apply_delay(double prev, double des, double k) {
    return prev + k * (des - prev);
}

inline Vector3d apply_delay(const Vector3d& prev, const Vector3d& des, double k) {
    return prev + k * (des - prev);
}

namespace detail {

// Unit quaternion for a rotation vector, i.e. the exponential map.
inline Quaterniond quat_exp(const Vector3d& phi) {
    double angle = phi.norm();
    if (angle < 1e-12) {
        Quaterniond q(1.0, 0.5 * phi.x(), 0.5 * phi.y(), 0.5 * phi.z());
        q.normalize();
        return q;
    }
    double half = 0.5 * angle;
    double s = std::sin(half) / angle;
    return Quaterniond(std::cos(half), s * phi.x(), s * phi.y(), s * phi.z());
}

}  // namespace detail

// Advances the state by one control period. The command passes through
// the actuation lag, then translation integrates with RK4 while the
// attitude follows the exact quaternion exponential for the (constant
// over dt) body rates. Pure function: no hidden state, no RNG.
//
// Throws SimFault when the resulting state has a non-finite component.
inline QuadState step(const QuadState& state, const ControlInput& u, const SimParams& params) {
    const double dt = params.dt;

    QuadState next;
    next.f_act = apply_delay(state.f_act, u.f_des, params.delay_k);
    next.f_act = std::max(next.f_act, 0.0);
    next.omega_act = apply_delay(state.omega_act, u.omega_des, params.delay_k);
    next.omega = next.omega_act;

    // Attitude at substep fractions, exact for constant omega.
    const Quaterniond q0 = state.q;
    const Quaterniond q_half = (q0 * detail::quat_exp(next.omega * (0.5 * dt))).normalized();
    const Quaterniond q_full = (q0 * detail::quat_exp(next.omega * dt)).normalized();

    const double f_over_m = next.f_act / params.mass;
    const Vector3d thrust0 = q0 * Vector3d(0, 0, f_over_m);
    const Vector3d thrust_h = q_half * Vector3d(0, 0, f_over_m);
    const Vector3d thrust_f = q_full * Vector3d(0, 0, f_over_m);

    const bool disturbed = params.disturbance.active();
    auto accel = [&](const Vector3d& p, const Vector3d& v, const Vector3d& thrust) {
        Vector3d a = params.g + thrust;
        if (disturbed) a += params.disturbance.force(p, v) / params.mass;
        return a;
    };

    // RK4 on (p, v) with the rotating thrust direction sampled at the
    // stage times.
    const Vector3d p0 = state.p, v0 = state.v;
    const Vector3d a1 = accel(p0, v0, thrust0);
    const Vector3d p_k2 = p0 + 0.5 * dt * v0;
    const Vector3d v_k2 = v0 + 0.5 * dt * a1;
    const Vector3d a2 = accel(p_k2, v_k2, thrust_h);
    const Vector3d p_k3 = p0 + 0.5 * dt * (v0 + 0.5 * dt * a1);
    const Vector3d v_k3 = v0 + 0.5 * dt * a2;
    const Vector3d a3 = accel(p_k3, v_k3, thrust_h);
    const Vector3d p_k4 = p0 + dt * v_k3;
    const Vector3d v_k4 = v0 + dt * a3;
    const Vector3d a4 = accel(p_k4, v_k4, thrust_f);

    next.p = p0 + (dt / 6.0) * (v0 + 2.0 * v_k2 + 2.0 * v_k3 + v_k4);
    next.v = v0 + (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
    next.q = q_full;

    std::string bad = nonfinite_field(next);
    if (!bad.empty()) throw SimFault(bad);
    return next;
}

// Per-episode domain randomization: mass scale in [0.7, 1.3], delay in
// [0.2, 0.6], constant world-frame force per axis in [-dr_force_max,
// dr_force_max]. The force default (0.035 N ~ 9% of hover weight) keeps
// randomized episodes flyable on this platform; several times the hover
// thrust would make most draws unrecoverable. Draw order is fixed so a
// seeded stream reproduces the same parameters.
inline SimParams randomize(const SimParams& nominal, Rng& rng, bool enabled = true) {
    if (!enabled) return nominal;
    SimParams out = nominal;
    out.mass = nominal.mass * rng.uniform(0.7, 1.3);
    out.delay_k = rng.uniform(0.2, 0.6);
    Vector3d f;
    for (int a = 0; a < 3; ++a) f[a] = rng.uniform(-nominal.dr_force_max, nominal.dr_force_max);
    out.disturbance.const_force = nominal.disturbance.const_force + f;
    return out;
}

}  // namespace dmpo
