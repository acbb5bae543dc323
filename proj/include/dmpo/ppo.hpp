#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "dmpo/math_util.hpp"

namespace dmpo {

struct PpoConfig {
    double gamma = 0.99;
    double lambda = 0.95;
    double clip_eps = 0.2;
    double actor_lr = 1e-6;
    double critic_lr = 1e-4;
    double entropy_coef = 1e-4;
    int epochs = 4;
    int critic_epochs = 8;   // value fitting gets extra passes per batch
    double target_kl = 0.02;  // stop actor epochs early past this KL; <=0 disables
    bool anneal_lr = true;    // linear actor-lr decay over the run
    bool domain_randomization = true;
    bool per_env_advantages = false; // optionally debias per-episode difficulty offsets
    int minibatch = 256;
    int envs = 8;
    int steps_per_env = 256;
    int iterations = 300;       // <= 1000 for the residual optimizers
    int checkpoint_every = 25;
    int eval_every = 10;
    uint64_t seed = 0;
    int threads = 0;            // 0 = hardware concurrency

    void validate() const {
        if (gamma < 0 || gamma >= 1 || lambda < 0 || lambda >= 1)
            throw std::invalid_argument("PpoConfig: gamma, lambda must be in [0,1)");
        if (!(clip_eps > 0)) throw std::invalid_argument("PpoConfig: clip_eps must be > 0");
        if (epochs < 1 || minibatch < 1 || envs < 1 || steps_per_env < 1 || iterations < 1)
            throw std::invalid_argument("PpoConfig: batch geometry must be positive");
    }
};

// Generalized advantage estimation over one trajectory stream.
// values has length T+1 (bootstrap at the end); done_t cuts both the TD
// target and the recursion.
inline void gae(const Eigen::VectorXd& rewards, const Eigen::VectorXd& values,
                const std::vector<uint8_t>& dones, double gamma, double lambda,
                Eigen::VectorXd& advantages, Eigen::VectorXd& returns) {
    const long t_max = rewards.size();
    if (values.size() != t_max + 1 || static_cast<long>(dones.size()) != t_max)
        throw std::invalid_argument("gae: length mismatch");
    advantages.resize(t_max);
    returns.resize(t_max);
    double running = 0.0;
    for (long t = t_max - 1; t >= 0; --t) {
        double not_done = dones[static_cast<size_t>(t)] ? 0.0 : 1.0;
        double delta = rewards(t) + gamma * values(t + 1) * not_done - values(t);
        running = delta + gamma * lambda * not_done * running;
        advantages(t) = running;
        returns(t) = advantages(t) + values(t);
    }
}

// In-place batch standardization used on advantages before the PPO
// epochs.
inline void standardize(Eigen::VectorXd& v) {
    double mean = v.mean();
    double var = (v.array() - mean).square().mean();
    v = (v.array() - mean) / (std::sqrt(var) + 1e-8);
}

struct PpoLossStats {
    double actor_loss = 0.0;
    double critic_loss = 0.0;
    double entropy = 0.0;
    double approx_kl = 0.0;
    double clip_frac = 0.0;
};

// Clipped-surrogate PPO loss on plain arrays. Returns per-sample
// gradients of the actor loss w.r.t. the new log-probabilities so the
// caller can push them through its network graph; the entropy bonus
// contributes -entropy_coef to every entropy gradient.
inline PpoLossStats ppo_loss(const Eigen::VectorXd& logp_new, const Eigen::VectorXd& logp_old,
                             const Eigen::VectorXd& advantages,
                             const Eigen::VectorXd& values_new, const Eigen::VectorXd& returns,
                             const Eigen::VectorXd& entropies, double clip_eps,
                             double entropy_coef, Eigen::VectorXd* dloss_dlogp = nullptr) {
    const long n = logp_new.size();
    if (logp_old.size() != n || advantages.size() != n)
        throw std::invalid_argument("ppo_loss: length mismatch");

    PpoLossStats stats;
    if (dloss_dlogp) dloss_dlogp->setZero(n);
    double surrogate = 0.0;
    for (long i = 0; i < n; ++i) {
        double ratio = std::exp(logp_new(i) - logp_old(i));
        double unclipped = ratio * advantages(i);
        double clipped = clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages(i);
        if (unclipped <= clipped) {
            surrogate += unclipped;
            if (dloss_dlogp) (*dloss_dlogp)(i) = -ratio * advantages(i) / static_cast<double>(n);
        } else {
            surrogate += clipped;
            // Clipped branch: flat in the ratio.
        }
        stats.approx_kl += (logp_old(i) - logp_new(i));
        if (std::abs(ratio - 1.0) > clip_eps) stats.clip_frac += 1.0;
    }
    stats.entropy = entropies.size() > 0 ? entropies.mean() : 0.0;
    stats.actor_loss = -surrogate / static_cast<double>(n) - entropy_coef * stats.entropy;
    stats.critic_loss = (values_new - returns).array().square().mean();
    stats.approx_kl /= static_cast<double>(n);
    stats.clip_frac /= static_cast<double>(n);
    if (!std::isfinite(stats.actor_loss) || !std::isfinite(stats.critic_loss))
        throw std::runtime_error("ppo_loss: non-finite loss (training divergence)");
    return stats;
}

}  // namespace dmpo
