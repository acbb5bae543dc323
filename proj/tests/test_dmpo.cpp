#include <catch2/catch.hpp>

#include <filesystem>

#include "dmpo/dmpo.hpp"
#include "dmpo/env.hpp"
#include "dmpo/runner.hpp"

using namespace dmpo;

namespace {

SimParams nominal_sim() { return SimParams{}; }

MppiConfig small_cfg(int n, int h) {
    MppiConfig cfg = MppiConfig::defaults_for(nominal_sim());
    cfg.samples = n;
    cfg.horizon = h;
    return cfg;
}

TaskConfig small_task(double duration = 4.0) {
    TaskConfig t;
    t.duration = duration;
    t.weights = CostWeights::for_sim(nominal_sim());
    return t;
}

PlanParams random_plan(const MppiConfig& cfg, Rng& rng) {
    PlanParams p = cfg.default_plan();
    for (int r = 0; r < cfg.horizon; ++r)
        for (int c = 0; c < kControlDim; ++c) {
            p.mu(r, c) = rng.uniform(-0.5, 0.8);
            p.sigma(r, c) = rng.uniform(0.02, 0.6);
        }
    return p;
}

}  // namespace

TEST_CASE("zeroed shift network reproduces shift_forward exactly", "[dmpo]") {
    MppiConfig cfg = small_cfg(16, 8);
    DmpoNets nets = DmpoNets::zeroed(cfg);
    Rng rng(1);
    PlanParams p = random_plan(cfg, rng);
    PlanParams tilde = shift_residual(nets, p, cfg);
    PlanParams plain = shift_forward(p, cfg);
    plain.sigma = plain.sigma.cwiseMax(cfg.sigma_min).cwiseMin(cfg.sigma_max);
    CHECK(tilde.mu == plain.mu);
    CHECK(tilde.sigma == plain.sigma);
}

TEST_CASE("freshly initialized residuals deviate from shift-forward by under 1%", "[dmpo]") {
    MppiConfig cfg = small_cfg(32, 16);
    DmpoConfig dcfg;
    Rng rng(3);
    DmpoNets nets = DmpoNets::init(cfg, dcfg, rng);

    double mu_dev = 0.0, sigma_dev = 0.0, mu_scale = 0.0;
    int trials = 20;
    for (int t = 0; t < trials; ++t) {
        PlanParams p = random_plan(cfg, rng);
        PlanParams tilde = shift_residual(nets, p, cfg);
        PlanParams plain = shift_forward(p, cfg);
        mu_dev += (tilde.mu - plain.mu).cwiseAbs().mean();
        mu_scale += plain.mu.cwiseAbs().mean();
        sigma_dev +=
            (tilde.sigma.cwiseQuotient(plain.sigma).array() - 1.0).abs().mean();
    }
    CHECK(mu_dev / mu_scale < 0.01);
    CHECK(sigma_dev / trials < 0.01);
}

TEST_CASE("a log 4 covariance residual quadruples the variance before clamping", "[dmpo]") {
    MppiConfig cfg = small_cfg(8, 4);
    cfg.sigma_max = 100.0;  // keep the clamp out of the way
    DmpoNets nets = DmpoNets::zeroed(cfg, false);
    const int hd = nets.plan_dim();
    // Bias the log-variance residual half of the shift output to log 4.
    nets.shift.b.back().segment(hd, hd).setConstant(std::log(4.0));

    Rng rng(5);
    PlanParams p = random_plan(cfg, rng);
    PlanParams tilde = shift_residual(nets, p, cfg);
    PlanParams plain = shift_forward(p, cfg);
    // Variance x4 means sigma x2.
    CHECK(tilde.sigma.cwiseQuotient(plain.sigma).array().isApproxToConstant(2.0, 1e-12));
    CHECK(tilde.mu == plain.mu);
}

TEST_CASE("gate endpoints blend fully toward MPC or the network mean", "[dmpo]") {
    MppiConfig cfg = small_cfg(8, 4);
    Rng rng(7);
    PlanParams tilde = random_plan(cfg, rng);
    PlanParams mpc = random_plan(cfg, rng);
    Eigen::VectorXd costs_std = standardize_costs(Eigen::VectorXd::LinSpaced(8, 0.0, 7.0));
    const int hd = 4 * kControlDim;

    DmpoNets gate_off = DmpoNets::zeroed(cfg, false);
    gate_off.mean_opt.b.back().segment(hd, hd).setConstant(-1e3);  // sigmoid -> 0
    Rng r1(0);
    OptimizerUpdate low = optimizer_update(gate_off, tilde, mpc, costs_std, cfg,
                                           PolicyMode::kEval, r1);
    CHECK(low.params.mu == mpc.mu);
    CHECK(low.params.sigma == mpc.sigma);

    DmpoNets gate_on = DmpoNets::zeroed(cfg, false);
    gate_on.mean_opt.b.back().segment(hd, hd).setConstant(1e3);  // sigmoid -> 1
    gate_on.mean_opt.b.back().head(hd).setConstant(0.25);        // network mean
    OptimizerUpdate high = optimizer_update(gate_on, tilde, mpc, costs_std, cfg,
                                            PolicyMode::kEval, r1);
    CHECK(high.params.mu.array().isApproxToConstant(0.25, 1e-12));
}

TEST_CASE("cost standardization is zero-mean unit-variance and order preserving", "[dmpo]") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::VectorXd costs(64);
        for (int i = 0; i < 64; ++i) costs(i) = std::exp(rng.uniform(-2, 6));
        Eigen::VectorXd z = standardize_costs(costs);
        CHECK(std::abs(z.mean()) < 1e-10);
        double var = (z.array() - z.mean()).square().mean();
        CHECK(std::sqrt(var) == Approx(1.0).margin(1e-6));
        for (int i = 0; i < 63; ++i)
            for (int j = i + 1; j < 64; ++j)
                if (costs(i) < costs(j)) REQUIRE(z(i) < z(j));
    }
    // Degenerate batch: all-equal costs standardize to zeros, not NaN.
    Eigen::VectorXd flat = standardize_costs(Eigen::VectorXd::Constant(8, 3.0));
    CHECK(flat.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("optimizer networks never see the system state", "[dmpo]") {
    // The optimizer update is a function of (shifted plan, standardized
    // costs, MPC proposal) alone; calling it twice with those fixed must
    // be bit-identical no matter what the simulator does in between.
    MppiConfig cfg = small_cfg(8, 4);
    DmpoConfig dcfg;
    Rng rng(13);
    DmpoNets nets = DmpoNets::init(cfg, dcfg, rng);
    PlanParams tilde = random_plan(cfg, rng);
    PlanParams mpc = random_plan(cfg, rng);
    Eigen::VectorXd costs_std = standardize_costs(Eigen::VectorXd::Random(8));

    Rng ra(99), rb(99);
    OptimizerUpdate a = optimizer_update(nets, tilde, mpc, costs_std, cfg,
                                         PolicyMode::kTrain, ra);
    OptimizerUpdate b = optimizer_update(nets, tilde, mpc, costs_std, cfg,
                                         PolicyMode::kTrain, rb);
    CHECK(a.params.mu == b.params.mu);
    CHECK(a.params.sigma == b.params.sigma);
    CHECK(a.log_prob == b.log_prob);
}

TEST_CASE("train-mode log-probability matches a head-level recomputation", "[dmpo]") {
    MppiConfig cfg = small_cfg(16, 8);
    DmpoConfig dcfg;
    Rng rng(17);
    DmpoNets nets = DmpoNets::init(cfg, dcfg, rng);
    PlanParams tilde = random_plan(cfg, rng);
    PlanParams mpc = random_plan(cfg, rng);
    Eigen::VectorXd raw_costs(16);
    for (int i = 0; i < 16; ++i) raw_costs(i) = rng.uniform(0, 20);
    Eigen::VectorXd costs_std = standardize_costs(raw_costs);

    Rng action_rng(23);
    OptimizerUpdate upd = optimizer_update(nets, tilde, mpc, costs_std, cfg,
                                           PolicyMode::kTrain, action_rng);

    const int hd = nets.plan_dim();
    Eigen::VectorXd in(2 * hd + 16);
    in << tilde.flatten(), costs_std;
    Eigen::VectorXd mo = forward(nets.mean_opt, in);
    Eigen::VectorXd co = forward(nets.cov_opt, in);
    Eigen::VectorXd gate(hd);
    for (int i = 0; i < hd; ++i) gate(i) = sigmoid(mo(hd + i));
    Eigen::VectorXd mu_t = (Eigen::VectorXd::Ones(hd) - gate)
                               .cwiseProduct(flatten_rows(mpc.mu)) +
                           gate.cwiseProduct(mo.head(hd));
    DiagGaussian head_mu(mu_t, mo.tail(hd));
    DiagGaussian head_cov(co.head(hd), co.tail(hd));
    double expected =
        head_mu.log_prob(upd.action_mu) + head_cov.log_prob(upd.action_delta);
    CHECK(upd.log_prob == Approx(expected).margin(1e-12));

    Rng eval_rng(0);
    OptimizerUpdate ev = optimizer_update(nets, tilde, mpc, costs_std, cfg,
                                          PolicyMode::kEval, eval_rng);
    CHECK(ev.log_prob == 0.0);
    CHECK(flatten_rows(ev.params.mu) == mu_t);
}

TEST_CASE("realized sigma stays inside its bounds in both modes", "[dmpo]") {
    MppiConfig cfg = small_cfg(8, 4);
    DmpoConfig dcfg;
    dcfg.log_std_init = 1.0;  // aggressive sampling noise
    Rng rng(29);
    DmpoNets nets = DmpoNets::init(cfg, dcfg, rng);
    for (int trial = 0; trial < 30; ++trial) {
        PlanParams tilde = random_plan(cfg, rng);
        PlanParams mpc = random_plan(cfg, rng);
        Eigen::VectorXd costs_std = standardize_costs(Eigen::VectorXd::Random(8));
        OptimizerUpdate upd = optimizer_update(nets, tilde, mpc, costs_std, cfg,
                                               PolicyMode::kTrain, rng);
        REQUIRE(upd.params.sigma.minCoeff() >= cfg.sigma_min);
        REQUIRE(upd.params.sigma.maxCoeff() <= cfg.sigma_max);
    }
}

TEST_CASE("zeroed networks with the gate forced reduce to plain MPPI bit for bit",
          "[dmpo]") {
    SimParams sim = nominal_sim();
    MppiConfig cfg = small_cfg(32, 8);
    TaskConfig task = small_task(3.0);
    ControlMatrix base = halton_base(cfg);
    DmpoNets nets = DmpoNets::zeroed(cfg, /*gate_zero=*/true);

    AuxEnv env_a(sim, cfg, task);
    AuxEnv env_b(sim, cfg, task);
    env_a.reset(4242, false);
    env_b.reset(4242, false);
    PlanParams pa = env_a.aux().theta_prev;
    PlanParams pb = env_b.aux().theta_prev;
    Rng eval_rng(0);

    int steps = 0;
    while (!env_a.done()) {
        std::vector<RefPoint> refs_a = ref_window(env_a.traj(), env_a.aux().t, cfg.horizon);
        MppiStepResult ra =
            mppi_policy_step(env_a.aux().x, pa, refs_a, cfg, sim, task.weights, base);

        std::vector<RefPoint> refs_b = ref_window(env_b.traj(), env_b.aux().t, cfg.horizon);
        DmpoStepResult rb =
            dmpo_policy_step(env_b.aux().x, pb, refs_b, cfg, sim, task.weights, base, nets,
                             PolicyMode::kEval, eval_rng);

        REQUIRE(ra.u.f_des == rb.u.f_des);
        REQUIRE(ra.u.omega_des == rb.u.omega_des);

        env_a.step_control(ra.u, ra.params);
        env_b.step_control(rb.u, rb.params);
        pa = ra.params;
        pb = rb.params;
        REQUIRE(env_a.aux().x.p == env_b.aux().x.p);
        ++steps;
    }
    CHECK(env_b.done());
    CHECK(env_a.crashed() == env_b.crashed());
    CHECK(steps > 50);
}

TEST_CASE("eval-mode policy steps are deterministic", "[dmpo]") {
    SimParams sim = nominal_sim();
    MppiConfig cfg = small_cfg(16, 8);
    TaskConfig task = small_task();
    ControlMatrix base = halton_base(cfg);
    DmpoConfig dcfg;
    Rng rng(31);
    DmpoNets nets = DmpoNets::init(cfg, dcfg, rng);

    QuadState x;
    x.p = Vector3d(0.2, 0.1, -0.3);
    x.f_act = sim.hover_thrust();
    PlanParams p = cfg.default_plan();
    std::vector<RefPoint> refs(8);
    Rng r1(0), r2(0);
    DmpoStepResult a =
        dmpo_policy_step(x, p, refs, cfg, sim, task.weights, base, nets, PolicyMode::kEval, r1);
    DmpoStepResult b =
        dmpo_policy_step(x, p, refs, cfg, sim, task.weights, base, nets, PolicyMode::kEval, r2);
    CHECK(a.u.f_des == b.u.f_des);
    CHECK(a.params.mu == b.params.mu);
    CHECK(a.params.sigma == b.params.sigma);
    CHECK(a.mean_gate == b.mean_gate);
}

TEST_CASE("freshly initialized optimizer tracks like plain MPPI", "[dmpo]") {
    // Paired episodes, same seeds and base samples. The 0.001-std head
    // init leaves a small pseudo-random residual on every plan, so the
    // comparison uses the median over seeds; the tolerance is the
    // measured desk-scale noise floor of that residual, not a learned
    // effect (training later has to beat its own iteration-0 by far
    // more than this).
    SimParams sim = nominal_sim();
    MppiConfig cfg = small_cfg(64, 32);
    TaskConfig task = small_task(6.0);

    RunnerSetup mppi_setup;
    mppi_setup.model = sim;
    mppi_setup.actual = sim;
    mppi_setup.mppi = cfg;
    mppi_setup.task = task;
    mppi_setup.kind = ControllerKind::kMppi;
    mppi_setup.threads = 2;

    DmpoConfig dcfg;
    Rng rng(37);
    DmpoNets nets = DmpoNets::init(cfg, dcfg, rng);
    RunnerSetup dmpo_setup = mppi_setup;
    dmpo_setup.kind = ControllerKind::kDmpo;
    dmpo_setup.nets = &nets;

    std::vector<double> dev;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        EpisodeRecord m = run_episode(mppi_setup, seed);
        EpisodeRecord d = run_episode(dmpo_setup, seed);
        REQUIRE_FALSE(m.crashed);
        REQUIRE_FALSE(d.crashed);
        dev.push_back(std::abs(d.episode_cost / m.episode_cost - 1.0));
    }
    CHECK(median(dev) < 0.10);
}

TEST_CASE("aux env: on-reference hover yields zero reward", "[dmpo]") {
    SimParams sim = nominal_sim();
    MppiConfig cfg = small_cfg(4, 4);
    TaskConfig task = small_task(2.0);
    AuxEnv env(sim, cfg, task);
    env.reset(3, false);

    // Pin the state exactly onto the reference with hover actuation.
    AuxState& aux = const_cast<AuxState&>(env.aux());
    aux.x.p = env.traj().at(0).p_des;
    aux.x.v.setZero();
    aux.x.q = env.traj().at(0).q_des;

    PlanParams action = cfg.default_plan();  // hover command rows
    auto out = env.step(action);
    CHECK(out.reward == Approx(0.0).margin(1e-12));
}

TEST_CASE("aux env: theta_prev carries the applied action", "[dmpo]") {
    SimParams sim = nominal_sim();
    MppiConfig cfg = small_cfg(4, 4);
    TaskConfig task = small_task(2.0);
    AuxEnv env(sim, cfg, task);
    env.reset(5, false);
    Rng rng(5);
    PlanParams action = random_plan(cfg, rng);
    env.step(action);
    CHECK(env.aux().theta_prev.mu == action.mu);
    CHECK(env.aux().theta_prev.sigma == action.sigma);
    CHECK(env.aux().t == 1);
}

TEST_CASE("aux env: episodes never exceed duration * 50 steps", "[dmpo]") {
    SimParams sim = nominal_sim();
    MppiConfig cfg = small_cfg(4, 4);
    TaskConfig task = small_task(2.0);
    AuxEnv env(sim, cfg, task);
    env.reset(9, false);
    PlanParams hover = cfg.default_plan();
    int steps = 0;
    while (!env.done()) {
        env.step(hover);
        ++steps;
        REQUIRE(steps <= 100);
    }
    CHECK(steps <= 100);
}

TEST_CASE("aux env: leaving the safety box terminates with a crash flag", "[dmpo]") {
    SimParams sim = nominal_sim();
    MppiConfig cfg = small_cfg(4, 4);
    TaskConfig task = small_task(10.0);
    AuxEnv env(sim, cfg, task, /*safety_box=*/0.5);
    env.reset(11, false);
    PlanParams full_tilt = cfg.default_plan();
    full_tilt.mu.col(0).setConstant(1.0);  // max thrust straight up
    int steps = 0;
    while (!env.done() && steps < 500) {
        env.step(full_tilt);
        ++steps;
    }
    CHECK(env.crashed());
    CHECK(steps < 500);
}

TEST_CASE("aux reset: deterministic without randomization, hover plan rows", "[dmpo]") {
    SimParams sim = nominal_sim();
    MppiConfig cfg = small_cfg(4, 6);
    TaskConfig task = small_task(2.0);
    AuxEnv a(sim, cfg, task), b(sim, cfg, task);
    a.reset(21, false);
    b.reset(21, false);
    CHECK(a.aux().x.p == b.aux().x.p);
    CHECK(a.aux().x.v == b.aux().x.v);
    CHECK(a.actual_sim().mass == sim.mass);

    for (int r = 0; r < 6; ++r)
        CHECK(a.aux().theta_prev.mu.row(r) == cfg.theta_bar_mean.transpose());
    CHECK(a.aux().ref_window.size() == 56);

    b.reset(22, false);
    CHECK(a.aux().x.p != b.aux().x.p);

    // Domain randomization changes the actual system, not the nominal.
    AuxEnv c(sim, cfg, task);
    c.reset(21, true);
    CHECK(c.actual_sim().mass != sim.mass);
    CHECK(c.nominal_sim().mass == sim.mass);
}

TEST_CASE("aux reset: start perturbation statistics match 0.05 std", "[dmpo]") {
    SimParams sim = nominal_sim();
    MppiConfig cfg = small_cfg(4, 4);
    TaskConfig task = small_task(2.0);
    AuxEnv env(sim, cfg, task);
    double sum_sq_p = 0.0, sum_sq_v = 0.0;
    const int n = 1000;
    for (int i = 0; i < n; ++i) {
        env.reset(static_cast<uint64_t>(i), false);
        sum_sq_p += (env.aux().x.p - env.traj().at(0).p_des).squaredNorm();
        sum_sq_v += env.aux().x.v.squaredNorm();
    }
    double std_p = std::sqrt(sum_sq_p / (3.0 * n));
    double std_v = std::sqrt(sum_sq_v / (3.0 * n));
    CHECK(std_p == Approx(0.05).epsilon(0.20));
    CHECK(std_v == Approx(0.05).epsilon(0.20));
}

TEST_CASE("critic and e2e reference windows have the documented layout", "[dmpo]") {
    TaskConfig task = small_task(4.0);
    ReferenceTraj traj = gen_zigzag(33, task);
    Eigen::VectorXd w = critic_ref_window(traj, 10);
    REQUIRE(w.size() == 56);
    // Entry block j holds the reference at step 10 + 4*(j+1).
    for (int j = 0; j < 8; ++j) {
        const RefPoint& r = traj.at(10 + 4 * (j + 1));
        CHECK(w(7 * j) == r.p_des.x());
        CHECK(w(7 * j + 3) == r.q_des.w());
    }
    Eigen::VectorXd e = e2e_ref_window(traj, 10);
    REQUIRE(e.size() == 30);
    for (int j = 0; j < 10; ++j)
        CHECK(e(3 * j + 1) == traj.at(10 + 3 * (j + 1)).p_des.y());
}

TEST_CASE("dmpo networks round-trip through the checkpoint format", "[dmpo]") {
    namespace fs = std::filesystem;
    MppiConfig cfg = small_cfg(16, 8);
    DmpoConfig dcfg;
    Rng rng(41);
    DmpoNets nets = DmpoNets::init(cfg, dcfg, rng);

    fs::path p = fs::temp_directory_path() / "dmpo_nets_roundtrip.dmpo";
    write_checkpoint(p.string(), nets.to_entries());
    DmpoNets back = DmpoNets::from_entries(read_checkpoint(p.string()), cfg);
    CHECK(back.shift.flatten_params() == nets.shift.flatten_params());
    CHECK(back.mean_opt.flatten_params() == nets.mean_opt.flatten_params());
    CHECK(back.cov_opt.flatten_params() == nets.cov_opt.flatten_params());

    // A mismatched sample count is rejected: the optimizer input width
    // is tied to N.
    MppiConfig other = small_cfg(32, 8);
    CHECK_THROWS(DmpoNets::from_entries(read_checkpoint(p.string()), other));
    fs::remove(p);
}
