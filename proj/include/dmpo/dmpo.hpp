#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

#include "dmpo/checkpoint.hpp"
#include "dmpo/mppi.hpp"
#include "dmpo/net.hpp"

namespace dmpo {

// Row-major reshape between a flat H*4 vector and an H x 4 plan block.
inline ControlMatrix unflatten_rows(const Eigen::VectorXd& v, int h) {
    if (v.size() != static_cast<long>(h) * kControlDim)
        throw std::invalid_argument("unflatten_rows: size mismatch");
    ControlMatrix out(h, kControlDim);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < kControlDim; ++c) out(r, c) = v(r * kControlDim + c);
    return out;
}

inline Eigen::VectorXd flatten_rows(const ControlMatrix& m) {
    Eigen::VectorXd out(m.rows() * kControlDim);
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < kControlDim; ++c) out(r * kControlDim + c) = m(r, c);
    return out;
}

struct DmpoConfig {
    int hidden = 256;
    double last_layer_std = 0.001;  // keeps every residual near zero at init
    double gate_bias = -5.0;        // sigmoid(-5) ~ 0.0067: start as almost-pure MPC
    double log_std_init = -3.0;     // initial exploration stddev of both heads
};

// The two learnable modules plus dimensions. The optimizer heads read
// (shifted plan, standardized costs) and never see the system state;
// only the rollout model touches it.
struct DmpoNets {
    Mlp shift;     // 2*H*4           -> (mu residual, log-variance residual)
    Mlp mean_opt;  // 2*H*4 + N       -> (mu hat, gate pre-act, log sigma mu)
    Mlp cov_opt;   // 2*H*4 + N       -> (log-variance hat, log sigma cov)
    int horizon = 0;
    int n_samples = 0;
    bool force_gate_zero = false;  // reduction switch: behave exactly like MPPI blending

    int plan_dim() const { return horizon * kControlDim; }

    static DmpoNets init(const MppiConfig& mppi, const DmpoConfig& cfg, Rng& rng) {
        DmpoNets nets;
        nets.horizon = mppi.horizon;
        nets.n_samples = mppi.samples;
        const int hd = nets.plan_dim();
        const int in_shift = 2 * hd;
        const int in_opt = 2 * hd + mppi.samples;

        nets.shift = init_mlp({in_shift, cfg.hidden, 2 * hd}, cfg.last_layer_std, rng);

        // The mean head starts at the hover operating point: the gate
        // never fully closes (sigmoid(gate_bias) stays positive), so a
        // zero-biased head would drag every applied control a couple of
        // percent toward zero thrust.
        VectorXd mean_bias = VectorXd::Zero(3 * hd);
        for (int r = 0; r < mppi.horizon; ++r)
            for (int c = 0; c < kControlDim; ++c)
                mean_bias(r * kControlDim + c) = mppi.theta_bar_mean(c);
        mean_bias.segment(hd, hd).setConstant(cfg.gate_bias);
        mean_bias.segment(2 * hd, hd).setConstant(cfg.log_std_init);
        nets.mean_opt = init_mlp({in_opt, cfg.hidden, 3 * hd}, cfg.last_layer_std,
                                 mean_bias, rng);

        VectorXd cov_bias = VectorXd::Zero(2 * hd);
        cov_bias.segment(hd, hd).setConstant(cfg.log_std_init);
        nets.cov_opt = init_mlp({in_opt, cfg.hidden, 2 * hd}, cfg.last_layer_std,
                                cov_bias, rng);
        return nets;
    }

    // All-zero parameters; with force_gate_zero this reproduces plain
    // MPPI bit for bit.
    static DmpoNets zeroed(const MppiConfig& mppi, bool gate_zero = true) {
        DmpoConfig cfg;
        cfg.last_layer_std = 0.0;
        cfg.gate_bias = 0.0;
        cfg.log_std_init = 0.0;
        Rng rng(0);
        DmpoNets nets = init(mppi, cfg, rng);
        for (Mlp* net : {&nets.shift, &nets.mean_opt, &nets.cov_opt})
            for (int l = 0; l < net->layers(); ++l) {
                net->W[static_cast<size_t>(l)].setZero();
                net->b[static_cast<size_t>(l)].setZero();
            }
        nets.force_gate_zero = gate_zero;
        return nets;
    }

    std::vector<CheckpointEntry> to_entries(const AdamState* shift_a = nullptr,
                                            const AdamState* mean_a = nullptr,
                                            const AdamState* cov_a = nullptr) const {
        return checkpoint_entries({{"shift", &shift, shift_a},
                                   {"mean_opt", &mean_opt, mean_a},
                                   {"cov_opt", &cov_opt, cov_a}});
    }

    static DmpoNets from_entries(const std::vector<CheckpointEntry>& entries,
                                 const MppiConfig& mppi) {
        DmpoNets nets;
        nets.shift = mlp_from_entries(entries, "shift");
        nets.mean_opt = mlp_from_entries(entries, "mean_opt");
        nets.cov_opt = mlp_from_entries(entries, "cov_opt");
        nets.horizon = mppi.horizon;
        nets.n_samples = mppi.samples;
        const int hd = nets.plan_dim();
        if (nets.shift.input_dim() != 2 * hd ||
            nets.mean_opt.input_dim() != 2 * hd + mppi.samples)
            throw std::runtime_error(
                "checkpoint: network dimensions do not match the configured H/N");
        return nets;
    }
};

// Learned warm start. The network proposes residuals on top of the
// plain shift-forward: additive on the mean, multiplicative on the
// variance via exp of a log-space residual (identity at zero output).
inline PlanParams shift_residual(const DmpoNets& nets, const PlanParams& params,
                                 const MppiConfig& cfg) {
    PlanParams shifted = shift_forward(params, cfg);
    VectorXd out = forward(nets.shift, params.flatten());
    const int hd = nets.plan_dim();
    ControlMatrix mu_res = unflatten_rows(out.head(hd), nets.horizon);
    ControlMatrix logvar_res = unflatten_rows(out.tail(hd), nets.horizon);

    PlanParams result;
    result.mu = shifted.mu + mu_res;
    result.sigma = shifted.sigma.cwiseProduct((0.5 * logvar_res.array()).exp().matrix());
    result.sigma = result.sigma.cwiseMax(cfg.sigma_min).cwiseMin(cfg.sigma_max);
    return result;
}

// Costs enter the optimizer networks standardized per batch; raw
// trajectory costs span orders of magnitude. Sample order is preserved
// (it is meaningful, the base samples are fixed).
inline Eigen::VectorXd standardize_costs(const Eigen::VectorXd& costs) {
    double mean = costs.mean();
    double var = (costs.array() - mean).square().mean();
    return (costs.array() - mean) / (std::sqrt(var) + 1e-8);
}

enum class PolicyMode { kTrain, kEval };

struct OptimizerUpdate {
    PlanParams params;        // realized plan theta_t
    double log_prob = 0.0;    // joint log-probability of the realized draw
    VectorXd action_mu;       // realized mean head draw, flat H*4
    VectorXd action_delta;    // realized log-variance residual draw, flat H*4
    VectorXd gate;            // sigmoid gate values, flat H*4
};

// The learned update: gated blend between the MPC mean proposal and the
// network mean, multiplicative scaling of the MPC covariance. In train
// mode the realized plan is drawn from the two diagonal-Gaussian heads
// and the joint log-probability is returned; eval mode uses the means.
inline OptimizerUpdate optimizer_update(const DmpoNets& nets, const PlanParams& theta_tilde,
                                        const PlanParams& theta_mpc,
                                        const Eigen::VectorXd& costs_std,
                                        const MppiConfig& cfg, PolicyMode mode, Rng& rng) {
    const int hd = nets.plan_dim();
    VectorXd in(2 * hd + costs_std.size());
    in << theta_tilde.flatten(), costs_std;

    VectorXd mean_out = forward(nets.mean_opt, in);
    VectorXd cov_out = forward(nets.cov_opt, in);

    VectorXd mu_hat = mean_out.head(hd);
    VectorXd gate_pre = mean_out.segment(hd, hd);
    VectorXd logvar_hat = cov_out.head(hd);

    OptimizerUpdate res;
    res.gate = VectorXd(hd);
    for (int i = 0; i < hd; ++i)
        res.gate(i) = nets.force_gate_zero ? 0.0 : sigmoid(gate_pre(i));

    VectorXd mpc_mu = flatten_rows(theta_mpc.mu);
    VectorXd mu_t = (VectorXd::Ones(hd) - res.gate).cwiseProduct(mpc_mu) +
                    res.gate.cwiseProduct(mu_hat);

    DiagGaussian head_mu(mu_t, mean_out.tail(hd));
    DiagGaussian head_cov(logvar_hat, cov_out.tail(hd));

    if (mode == PolicyMode::kTrain) {
        res.action_mu = head_mu.sample(rng);
        res.action_delta = head_cov.sample(rng);
        res.log_prob = head_mu.log_prob(res.action_mu) + head_cov.log_prob(res.action_delta);
    } else {
        res.action_mu = mu_t;
        res.action_delta = logvar_hat;
        res.log_prob = 0.0;
    }

    res.params.mu = unflatten_rows(res.action_mu, nets.horizon);
    ControlMatrix delta = unflatten_rows(res.action_delta, nets.horizon);
    res.params.sigma = theta_mpc.sigma.cwiseProduct((0.5 * delta.array()).exp().matrix());
    res.params.sigma = res.params.sigma.cwiseMax(cfg.sigma_min).cwiseMin(cfg.sigma_max);
    return res;
}

struct DmpoStepResult {
    ControlInput u;
    PlanParams params;  // realized theta_t, the next step's theta_prev
    RolloutBatch batch;
    StepDiagnostics diag;
    double log_prob = 0.0;
    double mean_gate = 0.0;
    // Stored for the PPO update. The policy distribution is recomputed
    // from theta_prev through the shift network and the MPC mean update
    // (weights and the fixed base treated as data), so everything needed
    // to rebuild that path at the collection point is kept here.
    Eigen::VectorXd costs_std;
    Eigen::VectorXd mpc_mu;
    Eigen::VectorXd mu_tilde;     // shifted plan mean at collection
    Eigen::VectorXd sigma_tilde;  // shifted plan stddev at collection
    Eigen::VectorXd s_z;          // weighted base average sum_i w_i z_i
    Eigen::VectorXd action_mu;
    Eigen::VectorXd action_delta;
};

// Full learned-controller cycle: learned shift, fixed-sample rollouts,
// MPPI proposal, learned optimizer update. The applied control is the
// first row of the realized plan.
inline DmpoStepResult dmpo_policy_step(const QuadState& state, const PlanParams& params,
                                       const std::vector<RefPoint>& refs,
                                       const MppiConfig& cfg, const SimParams& model,
                                       const CostWeights& w, const ControlMatrix& base,
                                       const DmpoNets& nets, PolicyMode mode, Rng& rng,
                                       int threads = 1) {
    DmpoStepResult res;
    PlanParams theta_tilde = shift_residual(nets, params, cfg);
    res.batch.controls = sample_controls(theta_tilde, base);
    res.batch.costs = rollout(state, res.batch.controls, refs, model, w,
                              cfg.large_cost, threads);
    res.batch.weights = mppi_weights(res.batch.costs, cfg.beta);
    PlanParams theta_mpc = mppi_update(theta_tilde, res.batch, cfg);

    res.costs_std = standardize_costs(res.batch.costs);
    OptimizerUpdate upd = optimizer_update(nets, theta_tilde, theta_mpc,
                                           res.costs_std, cfg, mode, rng);
    res.u = to_control(upd.params.mu.row(0), model);
    res.params = upd.params;
    res.log_prob = upd.log_prob;
    res.mean_gate = upd.gate.mean();
    res.mpc_mu = flatten_rows(theta_mpc.mu);
    res.mu_tilde = flatten_rows(theta_tilde.mu);
    res.sigma_tilde = flatten_rows(theta_tilde.sigma);
    res.action_mu = upd.action_mu;
    res.action_delta = upd.action_delta;

    // Sample 0 is the mean sequence, so its effective base row is zero.
    const int h = cfg.horizon;
    res.s_z = Eigen::VectorXd::Zero(h * kControlDim);
    for (int i = 1; i < cfg.samples; ++i) {
        double wi = res.batch.weights(i);
        if (wi == 0.0) continue;
        for (int k = 0; k < h; ++k)
            for (int c = 0; c < kControlDim; ++c)
                res.s_z(k * kControlDim + c) += wi * base(i * h + k, c);
    }
    res.diag.min_cost = res.batch.costs.minCoeff();
    res.diag.mean_cost = res.batch.costs.mean();
    res.diag.ess = effective_sample_size(res.batch.weights);
    return res;
}

}  // namespace dmpo
