#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "dmpo/halton.hpp"
#include "dmpo/parallel.hpp"
#include "dmpo/sim.hpp"
#include "dmpo/task.hpp"

namespace dmpo {

// Controls are planned in normalized units: column 0 is thrust / f_max
// in [0, 1], columns 1..3 are body rates / omega_max in [-1, 1].
inline constexpr int kControlDim = 4;

using ControlMatrix = Eigen::Matrix<double, Eigen::Dynamic, kControlDim>;

inline ControlInput to_control(const Eigen::RowVector4d& row, const SimParams& sim) {
    return ControlInput(row(0) * sim.f_max,
                        Vector3d(row(1), row(2), row(3)) * sim.omega_max,
                        sim.f_max, sim.omega_max);
}

// Factorized Gaussian plan over the horizon: per-step mean and standard
// deviation for each control dimension. These are the optimizee
// parameters the update rules act on.
struct PlanParams {
    ControlMatrix mu;     // H x 4
    ControlMatrix sigma;  // H x 4

    int horizon() const { return static_cast<int>(mu.rows()); }

    Eigen::VectorXd flatten() const {
        // [mu row-major, sigma row-major]; fixed layout so checkpoints
        // and network inputs stay portable.
        int h = horizon();
        Eigen::VectorXd out(2 * h * kControlDim);
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < kControlDim; ++c) {
                out(r * kControlDim + c) = mu(r, c);
                out(h * kControlDim + r * kControlDim + c) = sigma(r, c);
            }
        return out;
    }
};

// Defaults below come from a grid search on fixed zig-zag trajectories
// (beta x gamma_mu, then gamma_sigma x sigma_init, N = 512).
struct MppiConfig {
    int horizon = 32;           // H steps (0.64 s at 50 Hz)
    int samples = 256;          // N rollouts per step
    double beta = 0.1;          // temperature of the exponential utility
    double gamma_mu = 1.0;      // mean step size
    double gamma_sigma = 0.5;   // covariance step size
    Eigen::Vector4d sigma_init = Eigen::Vector4d(0.12, 0.2, 0.2, 0.2);
    Eigen::Vector4d theta_bar_mean = Eigen::Vector4d(0.5, 0.0, 0.0, 0.0);
    double sigma_min = 1e-3;
    double sigma_max = 1.0;
    int halton_skip = 32;
    double large_cost = 1e9;    // assigned to rollouts that blow up

    void validate() const {
        if (!(beta > 0)) throw std::invalid_argument("MppiConfig: beta must be > 0");
        if (gamma_mu < 0 || gamma_mu > 1 || gamma_sigma < 0 || gamma_sigma > 1)
            throw std::invalid_argument("MppiConfig: step sizes must be in [0,1]");
        if (samples < 1 || horizon < 1)
            throw std::invalid_argument("MppiConfig: need N >= 1 and H >= 1");
        if (!(sigma_min > 0) || !(sigma_max >= sigma_min))
            throw std::invalid_argument("MppiConfig: invalid sigma bounds");
    }

    // theta_bar's mean is the hover command for the given model.
    static MppiConfig defaults_for(const SimParams& sim) {
        MppiConfig cfg;
        cfg.theta_bar_mean(0) = sim.hover_thrust() / sim.f_max;
        return cfg;
    }

    PlanParams default_plan() const {
        PlanParams p;
        p.mu = theta_bar_mean.transpose().replicate(horizon, 1);
        p.sigma = sigma_init.transpose().replicate(horizon, 1);
        return p;
    }
};

// Sampled control sequences, their trajectory costs and softmax weights.
// Sample 0 is always the current mean sequence. controls stacks the N
// sequences vertically: sample i occupies rows [i*H, (i+1)*H).
struct RolloutBatch {
    ControlMatrix controls;   // (N*H) x 4, clamped to control limits
    Eigen::VectorXd costs;    // N
    Eigen::VectorXd weights;  // N, sums to 1

    int samples() const { return static_cast<int>(costs.size()); }
};

// Fixed quasi-random base: N*H points of a 4-dimensional Halton stream
// mapped to standard normals. Sample i, step h reads stream index
// h*N + i, so per step the N samples are consecutive (well stratified)
// while along the horizon each sample keeps a near-constant offset --
// the sustained-control exploration the weighted update needs.
// Consecutive indices along the horizon would instead give every sample
// high-frequency dither with almost no net displacement.
inline ControlMatrix halton_base(const MppiConfig& cfg) {
    const int n = cfg.samples, h = cfg.horizon;
    Eigen::MatrixXd stream = halton_gaussian(n * h, kControlDim, cfg.halton_skip);
    ControlMatrix base(n * h, kControlDim);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < h; ++k) base.row(i * h + k) = stream.row(k * n + i);
    return base;
}

inline void clamp_controls(Eigen::Ref<ControlMatrix> block) {
    block.col(0) = block.col(0).cwiseMax(0.0).cwiseMin(1.0);
    for (int c = 1; c < kControlDim; ++c)
        block.col(c) = block.col(c).cwiseMax(-1.0).cwiseMin(1.0);
}

// Reparameterized sampling: controls[i] = mu + sigma .* base[i], with
// sample 0 forced to the mean. Everything is clamped to the control box
// before rollout.
inline ControlMatrix sample_controls(const PlanParams& params, const ControlMatrix& base) {
    const int h = params.horizon();
    if (base.rows() % h != 0)
        throw std::invalid_argument("sample_controls: base rows not a multiple of H");
    const int n = static_cast<int>(base.rows()) / h;

    ControlMatrix controls(base.rows(), kControlDim);
    for (int i = 0; i < n; ++i) {
        auto block = controls.middleRows(i * h, h);
        if (i == 0)
            block = params.mu;
        else
            block = params.mu + params.sigma.cwiseProduct(base.middleRows(i * h, h));
    }
    clamp_controls(controls);
    return controls;
}

// Open-loop rollout of each control sequence through the nominal model,
// scoring with traj_cost against refs at t+1..t+H. Blowups and
// non-finite costs are mapped to cfg.large_cost so the weight stage
// never sees a NaN.
inline Eigen::VectorXd rollout(const QuadState& state, const ControlMatrix& controls,
                               const std::vector<RefPoint>& ref_window,
                               const SimParams& model, const CostWeights& w,
                               double large_cost = 1e9, int threads = 1) {
    const int h = static_cast<int>(ref_window.size());
    if (h == 0 || controls.rows() % h != 0)
        throw std::invalid_argument("rollout: ref window does not tile controls");
    const int n = static_cast<int>(controls.rows()) / h;

    Eigen::VectorXd costs(n);
    parallel_for(n, threads, [&](int i) {
        QuadState x = state;
        double cost = 0.0;
        for (int step_idx = 0; step_idx < h; ++step_idx) {
            ControlInput u = to_control(controls.row(i * h + step_idx), model);
            try {
                x = step(x, u, model);
            } catch (const SimFault&) {
                cost = large_cost;
                break;
            }
            double c = stage_cost(x, u, ref_window[static_cast<size_t>(step_idx)], w);
            if (step_idx + 1 == h) c *= w.terminal_scale;
            cost += c;
        }
        costs(i) = std::isfinite(cost) ? std::min(cost, large_cost) : large_cost;
    });
    return costs;
}

// Exponential-utility weights, min-shifted for numerical stability
// (identical to the unshifted softmax because the shift cancels).
inline Eigen::VectorXd mppi_weights(const Eigen::VectorXd& costs, double beta) {
    if (!(beta > 0)) throw std::invalid_argument("mppi_weights: beta must be > 0");
    double c_min = costs.minCoeff();
    Eigen::VectorXd w = (-(costs.array() - c_min) / beta).exp();
    return w / w.sum();
}

inline double effective_sample_size(const Eigen::VectorXd& weights) {
    return 1.0 / weights.squaredNorm();
}

// Dynamic-mirror-descent update of the plan: the mean moves toward the
// weighted sample average with step gamma_mu; the per-dimension variance
// blends toward the weighted spread around the pre-update mean with step
// gamma_sigma. sigma is clamped to [sigma_min, sigma_max].
inline PlanParams mppi_update(const PlanParams& params, const RolloutBatch& batch,
                              const MppiConfig& cfg) {
    const int h = params.horizon();
    const int n = batch.samples();

    ControlMatrix weighted_mean = ControlMatrix::Zero(h, kControlDim);
    ControlMatrix weighted_var = ControlMatrix::Zero(h, kControlDim);
    for (int i = 0; i < n; ++i) {
        auto block = batch.controls.middleRows(i * h, h);
        weighted_mean += batch.weights(i) * block;
        weighted_var += batch.weights(i) *
                        (block - params.mu).array().square().matrix();
    }

    PlanParams out;
    out.mu = (1.0 - cfg.gamma_mu) * params.mu + cfg.gamma_mu * weighted_mean;
    if (cfg.gamma_sigma == 0.0) {
        // Degenerate step: exact identity, not sqrt(sigma^2).
        out.sigma = params.sigma.cwiseMax(cfg.sigma_min).cwiseMin(cfg.sigma_max);
    } else {
        ControlMatrix variance =
            (1.0 - cfg.gamma_sigma) * params.sigma.array().square().matrix() +
            cfg.gamma_sigma * weighted_var;
        out.sigma = variance.array().sqrt().max(cfg.sigma_min).min(cfg.sigma_max);
    }
    return out;
}

// Warm start: rows move up one step, the freed last row takes theta_bar.
inline PlanParams shift_forward(const PlanParams& params, const MppiConfig& cfg) {
    const int h = params.horizon();
    PlanParams out;
    out.mu.resize(h, kControlDim);
    out.sigma.resize(h, kControlDim);
    if (h > 1) {
        out.mu.topRows(h - 1) = params.mu.bottomRows(h - 1);
        out.sigma.topRows(h - 1) = params.sigma.bottomRows(h - 1);
    }
    out.mu.row(h - 1) = cfg.theta_bar_mean.transpose();
    out.sigma.row(h - 1) = cfg.sigma_init.transpose();
    return out;
}

// Reference slice for a rollout starting at step t: refs t+1 .. t+H.
inline std::vector<RefPoint> ref_window(const ReferenceTraj& traj, long t, int horizon) {
    std::vector<RefPoint> window(static_cast<size_t>(horizon));
    for (int k = 0; k < horizon; ++k)
        window[static_cast<size_t>(k)] = traj.at(t + 1 + k);
    return window;
}

struct StepDiagnostics {
    double min_cost = 0.0;
    double mean_cost = 0.0;
    double ess = 0.0;  // effective sample size 1 / sum(w^2)
};

struct MppiStepResult {
    ControlInput u;
    PlanParams params;  // warm-started plan for the next step
    RolloutBatch batch;
    StepDiagnostics diag;
};

// One controller cycle: sample, rollout, weight, update, apply the
// updated mean's first row, then shift forward for the next problem.
// Deterministic given (state, params, base, config).
inline MppiStepResult mppi_policy_step(const QuadState& state, const PlanParams& params,
                                       const std::vector<RefPoint>& refs,
                                       const MppiConfig& cfg, const SimParams& model,
                                       const CostWeights& w, const ControlMatrix& base,
                                       int threads = 1) {
    MppiStepResult res;
    res.batch.controls = sample_controls(params, base);
    res.batch.costs = rollout(state, res.batch.controls, refs, model, w,
                              cfg.large_cost, threads);
    res.batch.weights = mppi_weights(res.batch.costs, cfg.beta);

    PlanParams updated = mppi_update(params, res.batch, cfg);
    res.u = to_control(updated.mu.row(0), model);
    res.params = shift_forward(updated, cfg);
    res.diag.min_cost = res.batch.costs.minCoeff();
    res.diag.mean_cost = res.batch.costs.mean();
    res.diag.ess = effective_sample_size(res.batch.weights);
    return res;
}

}  // namespace dmpo
