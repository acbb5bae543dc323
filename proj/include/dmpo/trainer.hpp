#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <thread>
#include <vector>

#include "dmpo/checkpoint.hpp"
#include "dmpo/dmpo.hpp"
#include "dmpo/env.hpp"
#include "dmpo/ppo.hpp"
#include "dmpo/runner.hpp"

namespace dmpo {

inline int critic_input_dim(int horizon) {
    return QuadState::kFlatDim + 2 * horizon * kControlDim + 56;
}

// Critic observation: (flattened state, previous plan parameters,
// reference conditioning window).
inline Eigen::VectorXd critic_obs(const AuxState& aux) {
    Eigen::VectorXd out(critic_input_dim(aux.theta_prev.horizon()));
    out << aux.x.flatten(), aux.theta_prev.flatten(), aux.ref_window;
    return out;
}

// Collected transitions, column per step; each environment's stream is
// stored contiguously so GAE can run per stream.
struct DmpoBuffer {
    Eigen::MatrixXd theta_prev;    // 2*H*4 x B
    Eigen::MatrixXd costs_std;     // N x B
    Eigen::MatrixXd mpc_mu;        // H*4 x B
    Eigen::MatrixXd mu_tilde;      // H*4 x B, shifted mean at collection
    Eigen::MatrixXd sigma_tilde;   // H*4 x B, shifted stddev at collection
    Eigen::MatrixXd s_z;           // H*4 x B, weighted base average
    Eigen::MatrixXd action_mu;     // H*4 x B
    Eigen::MatrixXd action_delta;  // H*4 x B
    Eigen::MatrixXd critic_in;     // critic_input_dim x B
    Eigen::MatrixXd bootstrap_in;  // critic_input_dim x envs
    Eigen::VectorXd logp_old, rewards, values, advantages, returns, gates;
    std::vector<uint8_t> dones;

    void resize(int hd, int n, int cdim, int envs, int steps) {
        const int b = envs * steps;
        theta_prev.resize(2 * hd, b);
        costs_std.resize(n, b);
        mpc_mu.resize(hd, b);
        mu_tilde.resize(hd, b);
        sigma_tilde.resize(hd, b);
        s_z.resize(hd, b);
        action_mu.resize(hd, b);
        action_delta.resize(hd, b);
        critic_in.resize(cdim, b);
        bootstrap_in.resize(cdim, envs);
        logp_old.resize(b);
        rewards.resize(b);
        values.resize(b);
        advantages.resize(b);
        returns.resize(b);
        gates.resize(b);
        dones.assign(static_cast<size_t>(b), 0);
    }

    int size() const { return static_cast<int>(logp_old.size()); }
};

// Batched recompute of the DMPO policy distribution for PPO: replays
// shift net -> shifted plan -> MPC mean update -> optimizer heads on
// stored transitions and pushes the surrogate-loss gradient back through
// all three networks. With fixed base samples the MPC mean proposal is a
// deterministic function of the shifted plan, mu_mpc = mu_tilde +
// gamma_mu * sigma_tilde .* sum_i(w_i z_i); it is rebuilt here with the
// collection-time weights as data plus a constant correction that makes
// it exact at the collection point (absorbing control clamping), so
// epoch-0 ratios stay at 1 while the graph carries the true unit
// sensitivity of the proposal to the shift output.
class DmpoActorGraph {
public:
    DmpoActorGraph(const DmpoNets& nets, const MppiConfig& cfg)
        : nets_(nets), cfg_(cfg), hd_(nets.plan_dim()) {}

    struct Forward {
        MlpCache shift_cache, mean_cache, cov_cache;
        Eigen::MatrixXd sig_pre, sig_mask;     // pre-clamp shifted sigma + pass mask
        Eigen::MatrixXd sig_tilde;
        Eigen::MatrixXd opt_in;
        Eigen::MatrixXd gate, mu_hat, mu_t;
        Eigen::MatrixXd mu_mpc, s_z;
        Eigen::MatrixXd lsm, lsm_mask, lsc, lsc_mask;
        Eigen::MatrixXd zm, zc, sm, sc;
        Eigen::VectorXd logp, entropy;
    };

    // theta_prev: 2HD x B; costs: N x B; everything else HD x B, stored
    // at collection time.
    void forward(const Eigen::MatrixXd& theta_prev, const Eigen::MatrixXd& costs,
                 const Eigen::MatrixXd& mpc_mu_st, const Eigen::MatrixXd& mu_tilde_st,
                 const Eigen::MatrixXd& sigma_tilde_st, const Eigen::MatrixXd& s_z,
                 const Eigen::MatrixXd& action_mu, const Eigen::MatrixXd& action_delta,
                 Forward& f) const {
        const int b = static_cast<int>(theta_prev.cols());
        const int hd = hd_;

        Eigen::MatrixXd shift_out = dmpo::forward(nets_.shift, theta_prev, &f.shift_cache);

        // shift-forward of the stored plan: a fixed row permutation with
        // theta_bar appended; constant w.r.t. the parameters.
        Eigen::MatrixXd mu_shift(hd, b), sig_shift(hd, b);
        mu_shift.topRows(hd - kControlDim) = theta_prev.middleRows(kControlDim, hd - kControlDim);
        sig_shift.topRows(hd - kControlDim) =
            theta_prev.middleRows(hd + kControlDim, hd - kControlDim);
        for (int c = 0; c < kControlDim; ++c) {
            mu_shift.row(hd - kControlDim + c).setConstant(cfg_.theta_bar_mean(c));
            sig_shift.row(hd - kControlDim + c).setConstant(cfg_.sigma_init(c));
        }

        Eigen::MatrixXd mu_tilde = mu_shift + shift_out.topRows(hd);
        f.sig_pre = sig_shift.cwiseProduct((0.5 * shift_out.bottomRows(hd).array()).exp().matrix());
        f.sig_mask = ((f.sig_pre.array() > cfg_.sigma_min) &&
                      (f.sig_pre.array() < cfg_.sigma_max))
                         .cast<double>();
        f.sig_tilde = f.sig_pre.cwiseMax(cfg_.sigma_min).cwiseMin(cfg_.sigma_max);

        f.opt_in.resize(2 * hd + costs.rows(), b);
        f.opt_in << mu_tilde, f.sig_tilde, costs;

        // MPC mean proposal, exact at the collection point: the constant
        // term absorbs whatever clamping did to the weighted average.
        f.s_z = s_z;
        f.mu_mpc = mu_tilde + cfg_.gamma_mu * f.sig_tilde.cwiseProduct(s_z) + mpc_mu_st -
                   mu_tilde_st - cfg_.gamma_mu * sigma_tilde_st.cwiseProduct(s_z);

        Eigen::MatrixXd mo = dmpo::forward(nets_.mean_opt, f.opt_in, &f.mean_cache);
        Eigen::MatrixXd co = dmpo::forward(nets_.cov_opt, f.opt_in, &f.cov_cache);

        f.mu_hat = mo.topRows(hd);
        Eigen::MatrixXd gate_pre = mo.middleRows(hd, hd);
        f.lsm_mask = ((mo.bottomRows(hd).array() > -5.0) && (mo.bottomRows(hd).array() < 2.0))
                         .cast<double>();
        f.lsm = mo.bottomRows(hd).cwiseMax(-5.0).cwiseMin(2.0);
        f.lsc_mask = ((co.bottomRows(hd).array() > -5.0) && (co.bottomRows(hd).array() < 2.0))
                         .cast<double>();
        f.lsc = co.bottomRows(hd).cwiseMax(-5.0).cwiseMin(2.0);

        f.gate = gate_pre.unaryExpr([](double v) { return sigmoid(v); });
        if (nets_.force_gate_zero) f.gate.setZero();
        f.mu_t = (1.0 - f.gate.array()).matrix().cwiseProduct(f.mu_mpc) +
                 f.gate.cwiseProduct(f.mu_hat);

        f.sm = f.lsm.array().exp();
        f.sc = f.lsc.array().exp();
        f.zm = (action_mu - f.mu_t).cwiseQuotient(f.sm);
        f.zc = (action_delta - co.topRows(hd)).cwiseQuotient(f.sc);

        const double log2pi = std::log(2.0 * kPi);
        Eigen::MatrixXd lp_mu = (-0.5 * f.zm.array().square() - f.lsm.array() - 0.5 * log2pi);
        Eigen::MatrixXd lp_cv = (-0.5 * f.zc.array().square() - f.lsc.array() - 0.5 * log2pi);
        f.logp = (lp_mu.colwise().sum() + lp_cv.colwise().sum()).transpose();
        f.entropy = (f.lsm.colwise().sum() + f.lsc.colwise().sum()).transpose();
        f.entropy.array() += 2.0 * hd * 0.5 * std::log(2.0 * kPi * std::exp(1.0));
    }

    // dlogp: per-sample gradient of the loss w.r.t. logp; dent: the same
    // for per-sample entropy. Accumulates into the three gradient sets.
    void backward(const Forward& f, const Eigen::VectorXd& dlogp, const Eigen::VectorXd& dent,
                  MlpGrads& g_shift, MlpGrads& g_mean, MlpGrads& g_cov) const {
        const int hd = hd_;
        Eigen::RowVectorXd de = dent.transpose();

        // Mean head. Column b of every local gradient scales by dlogp(b).
        Eigen::MatrixXd dmu_t = f.zm.cwiseQuotient(f.sm) * dlogp.asDiagonal();
        Eigen::MatrixXd dlsm =
            ((f.zm.array().square() - 1.0).matrix() * dlogp.asDiagonal()).rowwise() + de;
        dlsm = dlsm.cwiseProduct(f.lsm_mask);
        Eigen::MatrixXd dmu_hat = dmu_t.cwiseProduct(f.gate);
        Eigen::MatrixXd d_mu_mpc =
            dmu_t.cwiseProduct((1.0 - f.gate.array()).matrix());
        Eigen::MatrixXd dgate =
            dmu_t.cwiseProduct(f.mu_hat - f.mu_mpc)
                .cwiseProduct(f.gate.cwiseProduct((1.0 - f.gate.array()).matrix()));
        if (nets_.force_gate_zero) dgate.setZero();

        Eigen::MatrixXd d_mo(3 * hd, dmu_t.cols());
        d_mo << dmu_hat, dgate, dlsm;
        Eigen::MatrixXd d_in_mean = dmpo::backward(nets_.mean_opt, f.mean_cache, d_mo, g_mean);

        // Covariance head.
        Eigen::MatrixXd dlvh = f.zc.cwiseQuotient(f.sc) * dlogp.asDiagonal();
        Eigen::MatrixXd dlsc =
            ((f.zc.array().square() - 1.0).matrix() * dlogp.asDiagonal()).rowwise() + de;
        dlsc = dlsc.cwiseProduct(f.lsc_mask);
        Eigen::MatrixXd d_co(2 * hd, dmu_t.cols());
        d_co << dlvh, dlsc;
        Eigen::MatrixXd d_in_cov = dmpo::backward(nets_.cov_opt, f.cov_cache, d_co, g_cov);

        // Into the shifted plan: contributions from the optimizer inputs
        // and from the rebuilt MPC proposal, then through the shift net.
        Eigen::MatrixXd d_in = d_in_mean + d_in_cov;
        Eigen::MatrixXd dmu_tilde = d_in.topRows(hd) + d_mu_mpc;
        Eigen::MatrixXd dsig_tilde =
            d_in.middleRows(hd, hd) + cfg_.gamma_mu * f.s_z.cwiseProduct(d_mu_mpc);
        Eigen::MatrixXd dsig_pre = dsig_tilde.cwiseProduct(f.sig_mask);
        Eigen::MatrixXd d_shift_lv = dsig_pre.cwiseProduct(0.5 * f.sig_pre);

        Eigen::MatrixXd d_shift_out(2 * hd, dmu_t.cols());
        d_shift_out << dmu_tilde, d_shift_lv;
        dmpo::backward(nets_.shift, f.shift_cache, d_shift_out, g_shift);
    }

private:
    const DmpoNets& nets_;
    const MppiConfig& cfg_;
    int hd_;
};

struct TrainStats {
    int iter = 0;
    double mean_ep_cost = 0.0;
    double actor_loss = 0.0;
    double critic_loss = 0.0;
    double mean_gate = 0.0;
    double approx_kl = 0.0;
    double wall_s = 0.0;
};

struct TrainResult {
    std::vector<TrainStats> log;
    std::string checkpoint_final;
    std::string checkpoint_best;
    std::string log_csv;
    double iter0_median_cost = 0.0;
    double best_median_cost = 0.0;
    int iterations_run = 0;
    bool aborted = false;
};

inline void write_train_log(const std::string& path, const std::vector<TrainStats>& log) {
    std::ofstream out(path);
    out << "iter,mean_ep_cost,actor_loss,critic_loss,mean_gate,approx_kl,wall_s\n";
    char buf[256];
    for (const auto& s : log) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f\n", s.iter,
                      s.mean_ep_cost, s.actor_loss, s.critic_loss, s.mean_gate, s.approx_kl,
                      s.wall_s);
        out << buf;
    }
}

// PPO over the auxiliary MDP: collect with parallel environments,
// GAE with the reference-conditioned critic, clipped-surrogate epochs
// with Adam. Actor learning rate covers all three policy networks.
class DmpoTrainer {
public:
    DmpoTrainer(SimParams nominal, MppiConfig mppi, DmpoConfig dcfg, TaskConfig task,
                PpoConfig ppo)
        : nominal_(std::move(nominal)), mppi_(std::move(mppi)), task_(std::move(task)),
          eval_task_(task_), ppo_(ppo), dcfg_(dcfg) {
        nominal_.validate();
        mppi_.validate();
        ppo_.validate();
        task_.weights.validate();
        threads_ = ppo_.threads > 0 ? ppo_.threads : default_threads();

        Rng init_rng(ppo_.seed);
        nets_ = DmpoNets::init(mppi_, dcfg_, init_rng);
        const int cdim = critic_input_dim(mppi_.horizon);
        critic_ = init_mlp({cdim, dcfg_.hidden, 1}, dcfg_.last_layer_std, init_rng);

        adam_shift_ = AdamState(nets_.shift.n_params());
        adam_mean_ = AdamState(nets_.mean_opt.n_params());
        adam_cov_ = AdamState(nets_.cov_opt.n_params());
        adam_critic_ = AdamState(critic_.n_params());

        base_ = halton_base(mppi_);
        model_ = nominal_;
        model_.disturbance = DisturbanceSpec{};

        for (int e = 0; e < ppo_.envs; ++e) {
            envs_.emplace_back(model_, nominal_, mppi_, task_);
            act_rngs_.emplace_back(Rng(ppo_.seed).fork(0xac70 + static_cast<uint64_t>(e)));
            episode_counter_.push_back(0);
            ep_cost_.push_back(0.0);
            envs_.back().reset(episode_seed(e, 0), ppo_.domain_randomization);
        }
        buffer_.resize(nets_.plan_dim(), mppi_.samples, critic_input_dim(mppi_.horizon),
                       ppo_.envs, ppo_.steps_per_env);
        perm_rng_ = Rng(ppo_.seed).fork(0x9e37);
    }

    uint64_t episode_seed(int env, long k) const {
        return Rng(ppo_.seed).fork(0xe9 + static_cast<uint64_t>(env)).fork(
            static_cast<uint64_t>(k)).next_u64();
    }

    // One batch of experience from all environments. Deterministic for a
    // fixed seed regardless of the thread count: streams are independent
    // and land in disjoint buffer columns.
    void collect() {
        completed_costs_.clear();
        const int steps = ppo_.steps_per_env;
        std::vector<std::vector<double>> done_costs(static_cast<size_t>(ppo_.envs));

        parallel_for(ppo_.envs, threads_, [&](int e) {
            AuxEnv& env = envs_[static_cast<size_t>(e)];
            Rng& rng = act_rngs_[static_cast<size_t>(e)];
            for (int k = 0; k < steps; ++k) {
                const int idx = e * steps + k;
                const AuxState& aux = env.aux();
                std::vector<RefPoint> refs = ref_window(env.traj(), aux.t, mppi_.horizon);
                DmpoStepResult res =
                    dmpo_policy_step(aux.x, aux.theta_prev, refs, mppi_, model_,
                                     task_.weights, base_, nets_, PolicyMode::kTrain, rng, 1);

                buffer_.theta_prev.col(idx) = aux.theta_prev.flatten();
                buffer_.critic_in.col(idx) = critic_obs(aux);
                buffer_.costs_std.col(idx) = res.costs_std;
                buffer_.mpc_mu.col(idx) = res.mpc_mu;
                buffer_.mu_tilde.col(idx) = res.mu_tilde;
                buffer_.sigma_tilde.col(idx) = res.sigma_tilde;
                buffer_.s_z.col(idx) = res.s_z;
                buffer_.action_mu.col(idx) = res.action_mu;
                buffer_.action_delta.col(idx) = res.action_delta;
                buffer_.logp_old(idx) = res.log_prob;
                buffer_.gates(idx) = res.mean_gate;

                AuxEnv::StepOut out = env.step(res.params);
                buffer_.rewards(idx) = out.reward;
                buffer_.dones[static_cast<size_t>(idx)] = out.done ? 1 : 0;
                ep_cost_[static_cast<size_t>(e)] += -out.reward;
                if (out.done) {
                    done_costs[static_cast<size_t>(e)].push_back(ep_cost_[static_cast<size_t>(e)]);
                    ep_cost_[static_cast<size_t>(e)] = 0.0;
                    episode_counter_[static_cast<size_t>(e)] += 1;
                    env.reset(episode_seed(e, episode_counter_[static_cast<size_t>(e)]),
                              ppo_.domain_randomization);
                }
            }
            buffer_.bootstrap_in.col(e) = critic_obs(env.aux());
        });

        for (const auto& dc : done_costs)
            completed_costs_.insert(completed_costs_.end(), dc.begin(), dc.end());
    }

    // Values, GAE per stream, advantage standardization.
    void prepare_targets() {
        buffer_.values = dmpo::forward(critic_, buffer_.critic_in).row(0).transpose();
        Eigen::VectorXd boot = dmpo::forward(critic_, buffer_.bootstrap_in).row(0).transpose();

        const int steps = ppo_.steps_per_env;
        for (int e = 0; e < ppo_.envs; ++e) {
            Eigen::VectorXd rew = buffer_.rewards.segment(e * steps, steps);
            Eigen::VectorXd val(steps + 1);
            val.head(steps) = buffer_.values.segment(e * steps, steps);
            val(steps) = boot(e);
            std::vector<uint8_t> dn(buffer_.dones.begin() + e * steps,
                                    buffer_.dones.begin() + (e + 1) * steps);
            Eigen::VectorXd adv, ret;
            gae(rew, val, dn, ppo_.gamma, ppo_.lambda, adv, ret);
            // The critic cannot observe the per-episode randomization, so
            // whole streams carry difficulty offsets; removing them per
            // stream keeps the cross-env comparison fair.
            if (ppo_.per_env_advantages) standardize(adv);
            buffer_.advantages.segment(e * steps, steps) = adv;
            buffer_.returns.segment(e * steps, steps) = ret;
        }
        standardize(buffer_.advantages);
    }

    struct UpdateStats {
        double actor_loss = 0.0;
        double critic_loss = 0.0;
        double approx_kl = 0.0;
        double first_max_ratio_dev = 0.0;  // |ratio-1| on the first minibatch
    };

    UpdateStats update() {
        const int b = buffer_.size();
        std::vector<int> order(static_cast<size_t>(b));
        std::iota(order.begin(), order.end(), 0);

        UpdateStats stats;
        std::exception_ptr actor_err, critic_err;

        std::thread critic_thread([&] {
            try {
                stats.critic_loss = update_critic(order);
            } catch (...) {
                critic_err = std::current_exception();
            }
        });
        try {
            update_actor(order, stats);
        } catch (...) {
            actor_err = std::current_exception();
        }
        critic_thread.join();
        if (actor_err) std::rethrow_exception(actor_err);
        if (critic_err) std::rethrow_exception(critic_err);
        return stats;
    }

    TrainStats iterate() {
        auto t0 = std::chrono::steady_clock::now();
        collect();
        prepare_targets();
        UpdateStats us = update();

        TrainStats s;
        s.iter = iter_++;
        s.mean_ep_cost = completed_costs_.empty()
                             ? last_mean_ep_cost_
                             : std::accumulate(completed_costs_.begin(), completed_costs_.end(),
                                               0.0) /
                                   static_cast<double>(completed_costs_.size());
        last_mean_ep_cost_ = s.mean_ep_cost;
        s.actor_loss = us.actor_loss;
        s.critic_loss = us.critic_loss;
        s.mean_gate = buffer_.gates.mean();
        s.approx_kl = us.approx_kl;
        wall_s_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        s.wall_s = wall_s_;
        return s;
    }

    double eval_median_cost(const std::vector<uint64_t>& seeds) {
        RunnerSetup setup;
        setup.model = model_;
        setup.actual = nominal_;
        setup.mppi = mppi_;
        setup.task = eval_task_;
        setup.kind = ControllerKind::kDmpo;
        setup.nets = &nets_;
        setup.threads = 1;
        std::vector<double> costs(seeds.size());
        parallel_for(static_cast<int>(seeds.size()), threads_, [&](int i) {
            costs[static_cast<size_t>(i)] =
                run_episode(setup, seeds[static_cast<size_t>(i)]).episode_cost;
        });
        return median(costs);
    }

    void save_checkpoint(const std::string& path) const {
        auto entries = nets_.to_entries(&adam_shift_, &adam_mean_, &adam_cov_);
        auto critic_entries =
            checkpoint_entries({{"critic", &critic_, &adam_critic_}});
        entries.insert(entries.end(), critic_entries.begin(), critic_entries.end());
        write_checkpoint(path, entries);
    }

    void load_checkpoint(const std::string& path) {
        auto entries = read_checkpoint(path);
        nets_ = DmpoNets::from_entries(entries, mppi_);
        if (find_entry(entries, "critic.W0")) critic_ = mlp_from_entries(entries, "critic");
        restore_adam(entries, "shift", adam_shift_);
        restore_adam(entries, "mean_opt", adam_mean_);
        restore_adam(entries, "cov_opt", adam_cov_);
        restore_adam(entries, "critic", adam_critic_);
    }

    // Full run: iteration-0 evaluation, training with periodic eval and
    // checkpoints, best-checkpoint tracking, optional early stop at a
    // target improvement. Divergence aborts with the last finished
    // checkpoint.
    TrainResult train(const std::string& out_dir, const std::vector<uint64_t>& eval_seeds,
                      double target_improvement = 0.0, bool verbose = false,
                      const std::function<void(const TrainStats&)>& on_iter = {}) {
        namespace fs = std::filesystem;
        fs::create_directories(out_dir);
        TrainResult result;
        result.log_csv = (fs::path(out_dir) / "train_log.csv").string();
        result.checkpoint_final = (fs::path(out_dir) / "final.dmpo").string();
        result.checkpoint_best = (fs::path(out_dir) / "best.dmpo").string();

        result.iter0_median_cost = eval_median_cost(eval_seeds);
        result.best_median_cost = result.iter0_median_cost;
        save_checkpoint(result.checkpoint_best);
        std::ofstream eval_log(fs::path(out_dir) / "eval_log.csv");
        eval_log << "iter,median_eval_cost\n0," << result.iter0_median_cost << "\n";
        if (verbose)
            std::printf("iter 0 eval median cost: %.4f\n", result.iter0_median_cost);

        for (int it = 1; it <= ppo_.iterations; ++it) {
            TrainStats s;
            try {
                s = iterate();
            } catch (const std::exception& e) {
                if (verbose) std::printf("training aborted: %s\n", e.what());
                result.aborted = true;
                break;
            }
            result.log.push_back(s);
            result.iterations_run = it;
            if (on_iter) on_iter(s);
            if (verbose)
                std::printf("iter %d ep_cost %.3f actor %.5f critic %.5f gate %.4f kl %.2e\n",
                            s.iter, s.mean_ep_cost, s.actor_loss, s.critic_loss, s.mean_gate,
                            s.approx_kl);

            if (it % ppo_.checkpoint_every == 0)
                save_checkpoint((fs::path(out_dir) / ("ckpt_" + std::to_string(it) + ".dmpo"))
                                    .string());

            if (it % ppo_.eval_every == 0 || it == ppo_.iterations) {
                double med = eval_median_cost(eval_seeds);
                eval_log << it << ',' << med << '\n';
                eval_log.flush();
                if (verbose) std::printf("iter %d eval median cost: %.4f\n", it, med);
                if (med < result.best_median_cost) {
                    result.best_median_cost = med;
                    save_checkpoint(result.checkpoint_best);
                }
                if (target_improvement > 0.0 &&
                    result.best_median_cost <=
                        (1.0 - target_improvement) * result.iter0_median_cost)
                    break;
            }
            write_train_log(result.log_csv, result.log);
        }
        save_checkpoint(result.checkpoint_final);
        write_train_log(result.log_csv, result.log);
        return result;
    }

    // Evaluation may run on a different task variant than collection
    // (e.g. full-length episodes while training on shorter ones).
    void set_eval_task(const TaskConfig& task) { eval_task_ = task; }

    DmpoNets& nets() { return nets_; }
    Mlp& critic() { return critic_; }
    DmpoBuffer& buffer() { return buffer_; }
    const MppiConfig& mppi() const { return mppi_; }
    const PpoConfig& ppo() const { return ppo_; }

private:
    double update_critic(const std::vector<int>& order) {
        std::vector<int> idx = order;
        Rng rng = Rng(ppo_.seed).fork(0xc217);
        double last_loss = 0.0;
        for (int epoch = 0; epoch < ppo_.critic_epochs; ++epoch) {
            shuffle(idx, rng);
            for (size_t at = 0; at < idx.size(); at += static_cast<size_t>(ppo_.minibatch)) {
                size_t mb = std::min(static_cast<size_t>(ppo_.minibatch), idx.size() - at);
                Eigen::MatrixXd obs(buffer_.critic_in.rows(), mb);
                Eigen::VectorXd ret(mb);
                for (size_t j = 0; j < mb; ++j) {
                    obs.col(static_cast<long>(j)) = buffer_.critic_in.col(idx[at + j]);
                    ret(static_cast<long>(j)) = buffer_.returns(idx[at + j]);
                }
                MlpCache cache;
                Eigen::VectorXd v = dmpo::forward(critic_, obs, &cache).row(0).transpose();
                Eigen::VectorXd err = v - ret;
                last_loss = err.squaredNorm() / static_cast<double>(mb);
                Eigen::MatrixXd dv = (2.0 / static_cast<double>(mb)) * err.transpose();
                MlpGrads grads(critic_);
                dmpo::backward(critic_, cache, dv, grads);
                Eigen::VectorXd flat = critic_.flatten_params();
                adam_step(flat, adam_critic_, grads.flatten(), ppo_.critic_lr);
                critic_.set_params(flat);
            }
        }
        return last_loss;
    }

    void update_actor(const std::vector<int>& order, UpdateStats& stats) {
        std::vector<int> idx = order;
        Rng rng = Rng(ppo_.seed).fork(0xa5a5);
        DmpoActorGraph graph(nets_, mppi_);
        bool first = true;
        double kl_sum = 0.0;
        int kl_count = 0;
        double lr = ppo_.actor_lr;
        if (ppo_.anneal_lr)
            lr *= 1.0 - static_cast<double>(iter_ - 1) / std::max(1, ppo_.iterations);
        bool kl_stop = false;
        for (int epoch = 0; epoch < ppo_.epochs && !kl_stop; ++epoch) {
            shuffle(idx, rng);
            for (size_t at = 0; at < idx.size(); at += static_cast<size_t>(ppo_.minibatch)) {
                size_t mb = std::min(static_cast<size_t>(ppo_.minibatch), idx.size() - at);
                Eigen::MatrixXd thp(buffer_.theta_prev.rows(), mb);
                Eigen::MatrixXd cst(buffer_.costs_std.rows(), mb);
                Eigen::MatrixXd mpc(buffer_.mpc_mu.rows(), mb);
                Eigen::MatrixXd mtl(buffer_.mu_tilde.rows(), mb);
                Eigen::MatrixXd stl(buffer_.sigma_tilde.rows(), mb);
                Eigen::MatrixXd swz(buffer_.s_z.rows(), mb);
                Eigen::MatrixXd amu(buffer_.action_mu.rows(), mb);
                Eigen::MatrixXd adl(buffer_.action_delta.rows(), mb);
                Eigen::VectorXd lpo(mb), adv(mb);
                for (size_t j = 0; j < mb; ++j) {
                    int k = idx[at + j];
                    thp.col(static_cast<long>(j)) = buffer_.theta_prev.col(k);
                    cst.col(static_cast<long>(j)) = buffer_.costs_std.col(k);
                    mpc.col(static_cast<long>(j)) = buffer_.mpc_mu.col(k);
                    mtl.col(static_cast<long>(j)) = buffer_.mu_tilde.col(k);
                    stl.col(static_cast<long>(j)) = buffer_.sigma_tilde.col(k);
                    swz.col(static_cast<long>(j)) = buffer_.s_z.col(k);
                    amu.col(static_cast<long>(j)) = buffer_.action_mu.col(k);
                    adl.col(static_cast<long>(j)) = buffer_.action_delta.col(k);
                    lpo(static_cast<long>(j)) = buffer_.logp_old(k);
                    adv(static_cast<long>(j)) = buffer_.advantages(k);
                }

                DmpoActorGraph::Forward fwd;
                graph.forward(thp, cst, mpc, mtl, stl, swz, amu, adl, fwd);

                if (first) {
                    stats.first_max_ratio_dev =
                        ((fwd.logp - lpo).array().exp() - 1.0).abs().maxCoeff();
                    first = false;
                }

                Eigen::VectorXd dlogp;
                Eigen::VectorXd dummy_v = Eigen::VectorXd::Zero(static_cast<long>(mb));
                PpoLossStats ls =
                    ppo_loss(fwd.logp, lpo, adv, dummy_v, dummy_v, fwd.entropy,
                             ppo_.clip_eps, ppo_.entropy_coef, &dlogp);
                stats.actor_loss = ls.actor_loss;
                kl_sum += ls.approx_kl;
                kl_count += 1;
                if (ppo_.target_kl > 0.0 && std::abs(ls.approx_kl) > 1.5 * ppo_.target_kl) {
                    kl_stop = true;  // finish this minibatch, skip the rest
                }

                Eigen::VectorXd dent = Eigen::VectorXd::Constant(
                    static_cast<long>(mb), -ppo_.entropy_coef / static_cast<double>(mb));

                MlpGrads gs(nets_.shift), gm(nets_.mean_opt), gc(nets_.cov_opt);
                graph.backward(fwd, dlogp, dent, gs, gm, gc);

                auto apply = [&](Mlp& net, AdamState& st, const MlpGrads& g) {
                    Eigen::VectorXd flat = net.flatten_params();
                    adam_step(flat, st, g.flatten(), lr);
                    net.set_params(flat);
                };
                apply(nets_.shift, adam_shift_, gs);
                apply(nets_.mean_opt, adam_mean_, gm);
                apply(nets_.cov_opt, adam_cov_, gc);
                if (kl_stop) break;
            }
        }
        stats.approx_kl = kl_count > 0 ? kl_sum / kl_count : 0.0;
    }

    static void shuffle(std::vector<int>& idx, Rng& rng) {
        for (size_t i = idx.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(rng.next_u64() % i);
            std::swap(idx[i - 1], idx[j]);
        }
    }

    SimParams nominal_;
    SimParams model_;
    MppiConfig mppi_;
    TaskConfig task_;
    TaskConfig eval_task_;
    PpoConfig ppo_;
    DmpoConfig dcfg_;
    int threads_ = 1;

    DmpoNets nets_;
    Mlp critic_;
    AdamState adam_shift_{0}, adam_mean_{0}, adam_cov_{0}, adam_critic_{0};
    ControlMatrix base_;
    std::vector<AuxEnv> envs_;
    std::vector<Rng> act_rngs_;
    std::vector<long> episode_counter_;
    std::vector<double> ep_cost_;
    std::vector<double> completed_costs_;
    DmpoBuffer buffer_;
    Rng perm_rng_{0};
    int iter_ = 1;
    double wall_s_ = 0.0;
    double last_mean_ep_cost_ = 0.0;
};

}  // namespace dmpo
