#pragma once

#include <Eigen/Dense>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>
#include <vector>

#include "dmpo/checkpoint.hpp"
#include "dmpo/env.hpp"
#include "dmpo/ppo.hpp"
#include "dmpo/runner.hpp"
#include "dmpo/trainer.hpp"

namespace dmpo {

struct E2eConfig {
    std::vector<int> hidden = {256, 256};  // 3-layer MLP
    double last_layer_std = 0.001;
    double log_std_init = -2.0;
};

// End-to-end Gaussian policy over normalized controls, trained with the
// same PPO machinery as the learned optimizer but on the plain MDP.
class E2eTrainer {
public:
    E2eTrainer(SimParams nominal, TaskConfig task, PpoConfig ppo, E2eConfig cfg = {})
        : nominal_(std::move(nominal)), task_(std::move(task)), ppo_(ppo), cfg_(cfg) {
        nominal_.validate();
        ppo_.validate();
        threads_ = ppo_.threads > 0 ? ppo_.threads : default_threads();

        std::vector<int> actor_sizes{PlainEnv::kObsDim};
        std::vector<int> critic_sizes{PlainEnv::kObsDim};
        for (int h : cfg_.hidden) {
            actor_sizes.push_back(h);
            critic_sizes.push_back(h);
        }
        actor_sizes.push_back(2 * kControlDim);
        critic_sizes.push_back(1);

        Rng init_rng(ppo_.seed);
        VectorXd bias = VectorXd::Zero(2 * kControlDim);
        bias(0) = nominal_.hover_thrust() / nominal_.f_max;
        bias.tail(kControlDim).setConstant(cfg_.log_std_init);
        actor_ = init_mlp(actor_sizes, cfg_.last_layer_std, bias, init_rng);
        critic_ = init_mlp(critic_sizes, cfg_.last_layer_std, init_rng);
        adam_actor_ = AdamState(actor_.n_params());
        adam_critic_ = AdamState(critic_.n_params());

        for (int e = 0; e < ppo_.envs; ++e) {
            envs_.emplace_back(nominal_, task_);
            act_rngs_.emplace_back(Rng(ppo_.seed).fork(0xee + static_cast<uint64_t>(e)));
            episode_counter_.push_back(0);
            ep_cost_.push_back(0.0);
            envs_.back().reset(episode_seed(e, 0), ppo_.domain_randomization);
        }
        const int b = ppo_.envs * ppo_.steps_per_env;
        obs_.resize(PlainEnv::kObsDim, b);
        actions_.resize(kControlDim, b);
        bootstrap_.resize(PlainEnv::kObsDim, ppo_.envs);
        logp_old_.resize(b);
        rewards_.resize(b);
        values_.resize(b);
        advantages_.resize(b);
        returns_.resize(b);
        dones_.assign(static_cast<size_t>(b), 0);
    }

    uint64_t episode_seed(int env, long k) const {
        return Rng(ppo_.seed).fork(0x2e2e + static_cast<uint64_t>(env)).fork(
            static_cast<uint64_t>(k)).next_u64();
    }

    void collect() {
        completed_costs_.clear();
        const int steps = ppo_.steps_per_env;
        std::vector<std::vector<double>> done_costs(static_cast<size_t>(ppo_.envs));
        parallel_for(ppo_.envs, threads_, [&](int e) {
            PlainEnv& env = envs_[static_cast<size_t>(e)];
            Rng& rng = act_rngs_[static_cast<size_t>(e)];
            for (int k = 0; k < steps; ++k) {
                const int idx = e * steps + k;
                VectorXd ob = env.obs();
                VectorXd out = forward(actor_, ob);
                DiagGaussian head(out.head(kControlDim), out.tail(kControlDim));
                VectorXd action = head.sample(rng);
                obs_.col(idx) = ob;
                actions_.col(idx) = action;
                logp_old_(idx) = head.log_prob(action);

                auto res = env.step(action.transpose());
                rewards_(idx) = res.reward;
                dones_[static_cast<size_t>(idx)] = res.done ? 1 : 0;
                ep_cost_[static_cast<size_t>(e)] += -res.reward;
                if (res.done) {
                    done_costs[static_cast<size_t>(e)].push_back(
                        ep_cost_[static_cast<size_t>(e)]);
                    ep_cost_[static_cast<size_t>(e)] = 0.0;
                    episode_counter_[static_cast<size_t>(e)] += 1;
                    env.reset(episode_seed(e, episode_counter_[static_cast<size_t>(e)]),
                              ppo_.domain_randomization);
                }
            }
            bootstrap_.col(e) = env.obs();
        });
        for (const auto& dc : done_costs)
            completed_costs_.insert(completed_costs_.end(), dc.begin(), dc.end());
    }

    void prepare_targets() {
        values_ = forward(critic_, obs_).row(0).transpose();
        VectorXd boot = forward(critic_, bootstrap_).row(0).transpose();
        const int steps = ppo_.steps_per_env;
        for (int e = 0; e < ppo_.envs; ++e) {
            Eigen::VectorXd rew = rewards_.segment(e * steps, steps);
            Eigen::VectorXd val(steps + 1);
            val.head(steps) = values_.segment(e * steps, steps);
            val(steps) = boot(e);
            std::vector<uint8_t> dn(dones_.begin() + e * steps, dones_.begin() + (e + 1) * steps);
            Eigen::VectorXd adv, ret;
            gae(rew, val, dn, ppo_.gamma, ppo_.lambda, adv, ret);
            if (ppo_.per_env_advantages) standardize(adv);
            advantages_.segment(e * steps, steps) = adv;
            returns_.segment(e * steps, steps) = ret;
        }
        standardize(advantages_);
    }

    struct UpdateStats {
        double actor_loss = 0.0;
        double critic_loss = 0.0;
        double approx_kl = 0.0;
    };

    UpdateStats update() {
        const int b = static_cast<int>(logp_old_.size());
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
        s.mean_gate = 0.0;
        s.approx_kl = us.approx_kl;
        wall_s_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        s.wall_s = wall_s_;
        return s;
    }

    double eval_median_cost(const std::vector<uint64_t>& seeds) {
        RunnerSetup setup;
        setup.model = nominal_;
        setup.actual = nominal_;
        setup.task = task_;
        setup.kind = ControllerKind::kE2e;
        setup.e2e_actor = &actor_;
        std::vector<double> costs(seeds.size());
        parallel_for(static_cast<int>(seeds.size()), threads_, [&](int i) {
            costs[static_cast<size_t>(i)] =
                run_episode(setup, seeds[static_cast<size_t>(i)]).episode_cost;
        });
        return median(costs);
    }

    void save_checkpoint(const std::string& path) const {
        write_checkpoint(path, checkpoint_entries({{"e2e_actor", &actor_, &adam_actor_},
                                                   {"e2e_critic", &critic_, &adam_critic_}}));
    }

    TrainResult train(const std::string& out_dir, const std::vector<uint64_t>& eval_seeds,
                      double target_improvement = 0.0, bool verbose = false) {
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
            if (verbose && it % 10 == 0)
                std::printf("e2e iter %d ep_cost %.3f actor %.5f critic %.5f\n", s.iter,
                            s.mean_ep_cost, s.actor_loss, s.critic_loss);
            if (it % ppo_.checkpoint_every == 0)
                save_checkpoint(
                    (fs::path(out_dir) / ("ckpt_" + std::to_string(it) + ".dmpo")).string());
            if (it % ppo_.eval_every == 0 || it == ppo_.iterations) {
                double med = eval_median_cost(eval_seeds);
                eval_log << it << ',' << med << '\n';
                eval_log.flush();
                if (verbose) std::printf("e2e iter %d eval median cost: %.4f\n", it, med);
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

    Mlp& actor() { return actor_; }
    Mlp& critic() { return critic_; }

private:
    double update_critic(const std::vector<int>& order) {
        std::vector<int> idx = order;
        Rng rng = Rng(ppo_.seed).fork(0xc217);
        double last_loss = 0.0;
        for (int epoch = 0; epoch < ppo_.critic_epochs; ++epoch) {
            shuffle(idx, rng);
            for (size_t at = 0; at < idx.size(); at += static_cast<size_t>(ppo_.minibatch)) {
                size_t mb = std::min(static_cast<size_t>(ppo_.minibatch), idx.size() - at);
                Eigen::MatrixXd ob(obs_.rows(), mb);
                Eigen::VectorXd ret(mb);
                for (size_t j = 0; j < mb; ++j) {
                    ob.col(static_cast<long>(j)) = obs_.col(idx[at + j]);
                    ret(static_cast<long>(j)) = returns_(idx[at + j]);
                }
                MlpCache cache;
                Eigen::VectorXd v = forward(critic_, ob, &cache).row(0).transpose();
                Eigen::VectorXd err = v - ret;
                last_loss = err.squaredNorm() / static_cast<double>(mb);
                Eigen::MatrixXd dv = (2.0 / static_cast<double>(mb)) * err.transpose();
                MlpGrads grads(critic_);
                backward(critic_, cache, dv, grads);
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
                Eigen::MatrixXd ob(obs_.rows(), mb);
                Eigen::MatrixXd act(kControlDim, mb);
                Eigen::VectorXd lpo(mb), adv(mb);
                for (size_t j = 0; j < mb; ++j) {
                    int k = idx[at + j];
                    ob.col(static_cast<long>(j)) = obs_.col(k);
                    act.col(static_cast<long>(j)) = actions_.col(k);
                    lpo(static_cast<long>(j)) = logp_old_(k);
                    adv(static_cast<long>(j)) = advantages_(k);
                }
                MlpCache cache;
                Eigen::MatrixXd out = forward(actor_, ob, &cache);
                Eigen::MatrixXd mean = out.topRows(kControlDim);
                Eigen::MatrixXd ls_raw = out.bottomRows(kControlDim);
                Eigen::MatrixXd mask =
                    ((ls_raw.array() > -5.0) && (ls_raw.array() < 2.0)).cast<double>();
                Eigen::MatrixXd ls = ls_raw.cwiseMax(-5.0).cwiseMin(2.0);
                Eigen::MatrixXd sd = ls.array().exp();
                Eigen::MatrixXd z = (act - mean).cwiseQuotient(sd);

                const double log2pi = std::log(2.0 * kPi);
                Eigen::MatrixXd lp_terms =
                    (-0.5 * z.array().square() - ls.array() - 0.5 * log2pi);
                Eigen::VectorXd logp = lp_terms.colwise().sum().transpose();
                Eigen::VectorXd ent = ls.colwise().sum().transpose();
                ent.array() += kControlDim * 0.5 * std::log(2.0 * kPi * std::exp(1.0));

                Eigen::VectorXd dlogp;
                Eigen::VectorXd dummy = Eigen::VectorXd::Zero(static_cast<long>(mb));
                PpoLossStats ls_stats = ppo_loss(logp, lpo, adv, dummy, dummy, ent,
                                                 ppo_.clip_eps, ppo_.entropy_coef, &dlogp);
                stats.actor_loss = ls_stats.actor_loss;
                kl_sum += ls_stats.approx_kl;
                kl_count += 1;
                if (ppo_.target_kl > 0.0 && std::abs(ls_stats.approx_kl) > 1.5 * ppo_.target_kl)
                    kl_stop = true;

                Eigen::RowVectorXd de = Eigen::RowVectorXd::Constant(
                    static_cast<long>(mb), -ppo_.entropy_coef / static_cast<double>(mb));
                Eigen::MatrixXd dmean = z.cwiseQuotient(sd) * dlogp.asDiagonal();
                Eigen::MatrixXd dls =
                    ((z.array().square() - 1.0).matrix() * dlogp.asDiagonal()).rowwise() + de;
                dls = dls.cwiseProduct(mask);
                Eigen::MatrixXd d_out(2 * kControlDim, static_cast<long>(mb));
                d_out << dmean, dls;
                MlpGrads grads(actor_);
                backward(actor_, cache, d_out, grads);
                Eigen::VectorXd flat = actor_.flatten_params();
                adam_step(flat, adam_actor_, grads.flatten(), lr);
                actor_.set_params(flat);
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
    TaskConfig task_;
    PpoConfig ppo_;
    E2eConfig cfg_;
    int threads_ = 1;

    Mlp actor_, critic_;
    AdamState adam_actor_{0}, adam_critic_{0};
    std::vector<PlainEnv> envs_;
    std::vector<Rng> act_rngs_;
    std::vector<long> episode_counter_;
    std::vector<double> ep_cost_;
    std::vector<double> completed_costs_;

    Eigen::MatrixXd obs_, actions_, bootstrap_;
    Eigen::VectorXd logp_old_, rewards_, values_, advantages_, returns_;
    std::vector<uint8_t> dones_;
    int iter_ = 1;
    double wall_s_ = 0.0;
    double last_mean_ep_cost_ = 0.0;
};

}  // namespace dmpo
