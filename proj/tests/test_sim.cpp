#include <catch2/catch.hpp>

#include "dmpo/sim.hpp"

using namespace dmpo;

namespace {

// Independent fine-step integrator: plain explicit Euler on the same
// dynamics, quaternion renormalized every substep. Deliberately naive;
// with 1000 substeps per control period it is accurate to ~1e-6 and
// serves as the ground-truth oracle for the production step().
QuadState euler_oracle(const QuadState& state, const ControlInput& u, const SimParams& params,
                       int substeps) {
    QuadState s = state;
    s.f_act = apply_delay(state.f_act, u.f_des, params.delay_k);
    s.omega_act = apply_delay(state.omega_act, u.omega_des, params.delay_k);
    s.omega = s.omega_act;
    const double h = params.dt / substeps;
    for (int i = 0; i < substeps; ++i) {
        Vector3d thrust_dir = s.q * Vector3d(0, 0, 1);
        Vector3d a = params.g + thrust_dir * (s.f_act / params.mass);
        if (params.disturbance.active())
            a += params.disturbance.force(s.p, s.v) / params.mass;
        s.p += h * s.v;
        s.v += h * a;
        Quaterniond omega_q(0.0, s.omega.x(), s.omega.y(), s.omega.z());
        Quaterniond dq = s.q * omega_q;
        s.q.coeffs() += 0.5 * h * dq.coeffs();
        s.q.normalize();
    }
    return s;
}

SimParams default_params() {
    SimParams p;
    return p;
}

QuadState hover_state(const SimParams& p) {
    QuadState s;
    s.f_act = p.hover_thrust();
    return s;
}

}  // namespace

TEST_CASE("apply_delay matches the first-order lag", "[sim]") {
    CHECK(apply_delay(0.0, 1.0, 0.4) == Approx(0.4));
    CHECK(apply_delay(2.5, 2.5, 0.7) == 2.5);   // fixed point
    CHECK(apply_delay(2.0, 0.0, 1.0) == 0.0);   // instantaneous tracking
    Vector3d v = apply_delay(Vector3d(1, 2, 3), Vector3d(2, 2, 0), 0.5);
    CHECK(v.isApprox(Vector3d(1.5, 2.0, 1.5)));
}

TEST_CASE("repeated delay converges geometrically with ratio 1-k", "[sim]") {
    double k = 0.3, des = 5.0, x = 0.0;
    double prev_gap = des - x;
    for (int i = 0; i < 40; ++i) {
        x = apply_delay(x, des, k);
        double gap = des - x;
        CHECK(gap == Approx(prev_gap * (1.0 - k)).margin(1e-12));
        prev_gap = gap;
    }
    CHECK(std::abs(des - x) < 1e-5);
}

TEST_CASE("hover is an equilibrium to 1e-12", "[sim]") {
    SimParams p = default_params();
    QuadState s = hover_state(p);
    ControlInput u(p.hover_thrust(), Vector3d::Zero(), p.f_max, p.omega_max);
    QuadState next = s;
    for (int i = 0; i < 50; ++i) next = step(next, u, p);
    CHECK(next.p.norm() < 1e-12);
    CHECK(next.v.norm() < 1e-12);
    CHECK(next.f_act == Approx(p.hover_thrust()).margin(1e-12));
    CHECK(std::abs(next.q.w() - 1.0) < 1e-12);
}

TEST_CASE("free fall gains -0.1962 m/s in one step", "[sim]") {
    SimParams p = default_params();
    QuadState s;
    s.f_act = 0.0;
    ControlInput u(0.0, Vector3d::Zero(), p.f_max, p.omega_max);
    QuadState next = step(s, u, p);
    CHECK(next.v.z() == Approx(-9.81 * 0.02).margin(1e-12));
    CHECK(next.v.head<2>().norm() == 0.0);
}

TEST_CASE("pure yaw rotates pi/2 in half a second", "[sim]") {
    SimParams p = default_params();
    QuadState s = hover_state(p);
    s.omega_act = Vector3d(0, 0, kPi);
    ControlInput u(p.hover_thrust(), Vector3d(0, 0, kPi), p.f_max, p.omega_max);
    for (int i = 0; i < 25; ++i) s = step(s, u, p);
    double yaw = std::atan2(2.0 * (s.q.w() * s.q.z() + s.q.x() * s.q.y()),
                            1.0 - 2.0 * (s.q.y() * s.q.y() + s.q.z() * s.q.z()));
    CHECK(yaw == Approx(kPi / 2).margin(1e-6));
}

TEST_CASE("random steps match the 1000-substep Euler oracle", "[sim]") {
    SimParams p = default_params();
    p.disturbance.const_force = Vector3d(0.01, -0.02, 0.005);
    p.disturbance.drag_coeff = 0.01;
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        QuadState s;
        for (int a = 0; a < 3; ++a) {
            s.p[a] = rng.uniform(-1, 1);
            s.v[a] = rng.uniform(-2, 2);
            s.omega_act[a] = rng.uniform(-3, 3);
        }
        s.omega = s.omega_act;
        Vector3d axis(rng.normal(), rng.normal(), rng.normal());
        axis.normalize();
        s.q = Quaterniond(Eigen::AngleAxisd(rng.uniform(-1.5, 1.5), axis));
        s.f_act = rng.uniform(0.0, p.f_max);
        ControlInput u(rng.uniform(0.0, p.f_max),
                       Vector3d(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)),
                       p.f_max, p.omega_max);

        QuadState fast = step(s, u, p);
        QuadState fine = euler_oracle(s, u, p, 1000);
        for (int a = 0; a < 3; ++a) {
            CHECK(fast.p[a] == Approx(fine.p[a]).margin(1e-4));
            CHECK(fast.v[a] == Approx(fine.v[a]).margin(1e-4));
        }
        CHECK(std::abs(std::abs(fast.q.coeffs().dot(fine.q.coeffs())) - 1.0) < 1e-6);
    }
}

TEST_CASE("step is pure: identical inputs, bit-identical outputs", "[sim]") {
    SimParams p = default_params();
    QuadState s;
    s.p = Vector3d(0.3, -0.2, 0.5);
    s.v = Vector3d(1.0, 0.2, -0.4);
    s.omega_act = Vector3d(0.5, -1.0, 2.0);
    s.f_act = 0.3;
    ControlInput u(0.5, Vector3d(1, -2, 0.5), p.f_max, p.omega_max);
    QuadState a = step(s, u, p);
    QuadState b = step(s, u, p);
    CHECK(a.p == b.p);
    CHECK(a.v == b.v);
    CHECK(a.q.coeffs() == b.q.coeffs());
    CHECK(a.f_act == b.f_act);
}

TEST_CASE("quaternion norm stays unit through long rollouts", "[sim]") {
    SimParams p = default_params();
    Rng rng(7);
    QuadState s = hover_state(p);
    for (int i = 0; i < 2000; ++i) {
        ControlInput u(rng.uniform(0, p.f_max),
                       Vector3d(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)),
                       p.f_max, p.omega_max);
        s = step(s, u, p);
        s.p.setZero();  // keep positions bounded; attitude is what matters here
        s.v.setZero();
        REQUIRE(std::abs(s.q.norm() - 1.0) < 1e-9);
    }
}

TEST_CASE("ballistic mechanical energy drifts less than 1e-3 J over 500 steps", "[sim]") {
    SimParams p = default_params();
    QuadState s;
    s.p = Vector3d(0, 0, 100.0);
    s.v = Vector3d(1.0, -0.5, 2.0);
    ControlInput u(0.0, Vector3d::Zero(), p.f_max, p.omega_max);
    auto energy = [&](const QuadState& st) {
        return p.mass * (0.5 * st.v.squaredNorm() + 9.81 * st.p.z());
    };
    double e0 = energy(s);
    for (int i = 0; i < 500; ++i) s = step(s, u, p);
    CHECK(std::abs(energy(s) - e0) <= 1e-3);
}

TEST_CASE("non-finite states raise a fault naming the field", "[sim]") {
    SimParams p = default_params();
    QuadState s;
    s.v = Vector3d(1e308, 0, 0);  // one step multiplies into overflow
    s.p = Vector3d(1e308, 0, 0);
    ControlInput u(0.0, Vector3d::Zero(), p.f_max, p.omega_max);
    p.disturbance.drag_coeff = 1.0;  // quadratic drag of 1e308 overflows
    CHECK_THROWS_AS(step(s, u, p), SimFault);
}

TEST_CASE("control input clamps at construction", "[sim]") {
    SimParams p = default_params();
    ControlInput u(1e9, Vector3d(100, -100, 3), p.f_max, p.omega_max);
    CHECK(u.f_des == p.f_max);
    CHECK(u.omega_des.x() == p.omega_max);
    CHECK(u.omega_des.y() == -p.omega_max);
    CHECK(u.omega_des.z() == 3.0);
    ControlInput neg(-5.0, Vector3d::Zero(), p.f_max, p.omega_max);
    CHECK(neg.f_des == 0.0);
}

TEST_CASE("domain randomization stays in the documented ranges", "[sim]") {
    SimParams nominal = default_params();
    Rng rng(123);
    double mass_lo = 1e9, mass_hi = -1e9, k_lo = 1e9, k_hi = -1e9, f_hi = -1e9;
    for (int i = 0; i < 10000; ++i) {
        SimParams r = randomize(nominal, rng);
        double scale = r.mass / nominal.mass;
        mass_lo = std::min(mass_lo, scale);
        mass_hi = std::max(mass_hi, scale);
        k_lo = std::min(k_lo, r.delay_k);
        k_hi = std::max(k_hi, r.delay_k);
        f_hi = std::max(f_hi, r.disturbance.const_force.cwiseAbs().maxCoeff());
        REQUIRE(scale >= 0.7);
        REQUIRE(scale <= 1.3);
        REQUIRE(r.delay_k >= 0.2);
        REQUIRE(r.delay_k <= 0.6);
        REQUIRE(r.disturbance.const_force.cwiseAbs().maxCoeff() <= nominal.dr_force_max);
    }
    // The draws should actually fill the ranges.
    CHECK(mass_lo < 0.75);
    CHECK(mass_hi > 1.25);
    CHECK(k_lo < 0.25);
    CHECK(k_hi > 0.55);
    CHECK(f_hi > 0.9 * nominal.dr_force_max);
}

TEST_CASE("randomize is deterministic per seed and a no-op when disabled", "[sim]") {
    SimParams nominal = default_params();
    Rng a(9), b(9);
    SimParams ra = randomize(nominal, a);
    SimParams rb = randomize(nominal, b);
    CHECK(ra.mass == rb.mass);
    CHECK(ra.delay_k == rb.delay_k);
    CHECK(ra.disturbance.const_force == rb.disturbance.const_force);

    Rng c(10);
    SimParams off = randomize(nominal, c, false);
    CHECK(off.mass == nominal.mass);
    CHECK(off.delay_k == nominal.delay_k);
    CHECK(off.disturbance.const_force == nominal.disturbance.const_force);
}

TEST_CASE("wind field lookup clamps to the boundary cells", "[sim]") {
    DisturbanceSpec d;
    d.grid_n = 2;
    d.box_min = Vector3d(-1, -1, -1);
    d.box_max = Vector3d(1, 1, 1);
    d.wind.assign(8, Vector3d::Zero());
    d.wind[0] = Vector3d(1, 0, 0);  // cell (0,0,0)
    d.wind[7] = Vector3d(0, 2, 0);  // cell (1,1,1)
    CHECK(d.wind_at(Vector3d(-0.5, -0.5, -0.5)) == Vector3d(1, 0, 0));
    CHECK(d.wind_at(Vector3d(-100, -100, -100)) == Vector3d(1, 0, 0));
    CHECK(d.wind_at(Vector3d(100, 100, 100)) == Vector3d(0, 2, 0));
}
