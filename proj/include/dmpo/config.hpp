#pragma once

#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmpo/dmpo.hpp"
#include "dmpo/env.hpp"
#include "dmpo/mppi.hpp"
#include "dmpo/ppo.hpp"
#include "dmpo/sim.hpp"

namespace dmpo {

// Raised on malformed or out-of-range configuration; the CLI maps it to
// exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EvalConfig {
    std::string controller = "mppi";   // mppi | dmpo | e2e
    int samples = 256;
    std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
    std::string task = "zigzag";       // zigzag | zigzag_yaw
    std::string disturbance = "none";  // none | wind_drag
    std::string checkpoint;
    uint64_t wind_seed = 7;
    double wind_speed = 0.75;   // m/s scale of the gridded wind field
    double drag_coeff = 0.005;  // kg/m
};

struct ExperimentConfig {
    uint64_t seed = 1;
    std::string out_dir = "out";
    int threads = 0;
    SimParams sim;
    TaskConfig task;
    MppiConfig mppi;
    DmpoConfig dmpo;
    PpoConfig ppo;
    double e2e_lr = 3e-4;
    double e2e_log_std_init = -2.0;
    double target_improvement = 0.0;  // early-stop threshold for train, 0 = off
    EvalConfig eval;
};

// Static wind field over a box: per-cell direction and magnitude drawn
// from a fixed seed, so the disturbance is reproducible but never part
// of the training distribution.
inline DisturbanceSpec make_wind_disturbance(uint64_t seed, double speed, double drag_coeff) {
    DisturbanceSpec spec;
    spec.drag_coeff = drag_coeff;
    spec.grid_n = 5;
    spec.box_min = Vector3d(-2, -2, -2);
    spec.box_max = Vector3d(2, 2, 2);
    Rng rng(seed);
    spec.wind.resize(static_cast<size_t>(spec.grid_n * spec.grid_n * spec.grid_n));
    for (auto& w : spec.wind) {
        Vector3d dir(rng.normal(), rng.normal(), rng.normal());
        double n = dir.norm();
        if (n < 1e-9) dir = Vector3d::UnitX();
        else dir /= n;
        w = dir * (speed * rng.uniform(0.3, 1.0));
    }
    return spec;
}

namespace detail {

inline Vector3d vec3_from(const nlohmann::json& j, const char* key, const Vector3d& fallback) {
    if (!j.contains(key)) return fallback;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != 3) throw ConfigError(std::string(key) + " must be [x,y,z]");
    return Vector3d(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("bad value for ") + key);
    }
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    ExperimentConfig cfg;
    cfg.seed = detail::get_or<uint64_t>(j, "seed", cfg.seed);
    cfg.out_dir = detail::get_or<std::string>(j, "out_dir", cfg.out_dir);
    cfg.threads = detail::get_or<int>(j, "threads", cfg.threads);

    if (j.contains("sim")) {
        const auto& s = j.at("sim");
        cfg.sim.mass = detail::get_or(s, "mass", cfg.sim.mass);
        cfg.sim.g = detail::vec3_from(s, "gravity", cfg.sim.g);
        cfg.sim.delay_k = detail::get_or(s, "delay_k", cfg.sim.delay_k);
        cfg.sim.dt = detail::get_or(s, "dt", cfg.sim.dt);
        cfg.sim.f_max = detail::get_or(s, "f_max", 2.0 * cfg.sim.mass * 9.81);
        cfg.sim.omega_max = detail::get_or(s, "omega_max", cfg.sim.omega_max);
        cfg.sim.dr_force_max = detail::get_or(s, "dr_force_max", cfg.sim.dr_force_max);
    }
    if (j.contains("task")) {
        const auto& t = j.at("task");
        cfg.task.vol_min = detail::vec3_from(t, "volume_min", cfg.task.vol_min);
        cfg.task.vol_max = detail::vec3_from(t, "volume_max", cfg.task.vol_max);
        cfg.task.seg_time = detail::get_or(t, "seg_time", cfg.task.seg_time);
        cfg.task.duration = detail::get_or(t, "duration", cfg.task.duration);
        cfg.task.yaw_flips = detail::get_or(t, "yaw_flips", cfg.task.yaw_flips);
        cfg.task.weights.w_p = detail::get_or(t, "w_p", cfg.task.weights.w_p);
        cfg.task.weights.w_q = detail::get_or(t, "w_q", cfg.task.weights.w_q);
        cfg.task.weights.w_u = detail::get_or(t, "w_u", cfg.task.weights.w_u);
        cfg.task.weights.terminal_scale =
            detail::get_or(t, "terminal_scale", cfg.task.weights.terminal_scale);
    }
    cfg.task.weights.f_hover = cfg.sim.hover_thrust();
    cfg.task.weights.omega_scale = cfg.sim.omega_max;

    cfg.mppi = MppiConfig::defaults_for(cfg.sim);
    if (j.contains("mppi")) {
        const auto& m = j.at("mppi");
        cfg.mppi.horizon = detail::get_or(m, "horizon", cfg.mppi.horizon);
        cfg.mppi.samples = detail::get_or(m, "samples", cfg.mppi.samples);
        cfg.mppi.beta = detail::get_or(m, "beta", cfg.mppi.beta);
        cfg.mppi.gamma_mu = detail::get_or(m, "gamma_mu", cfg.mppi.gamma_mu);
        cfg.mppi.gamma_sigma = detail::get_or(m, "gamma_sigma", cfg.mppi.gamma_sigma);
        cfg.mppi.halton_skip = detail::get_or(m, "halton_skip", cfg.mppi.halton_skip);
        cfg.mppi.sigma_min = detail::get_or(m, "sigma_min", cfg.mppi.sigma_min);
        cfg.mppi.sigma_max = detail::get_or(m, "sigma_max", cfg.mppi.sigma_max);
        if (m.contains("sigma_init")) {
            const auto& a = m.at("sigma_init");
            if (!a.is_array() || a.size() != 4)
                throw ConfigError("mppi.sigma_init must have 4 entries");
            for (int i = 0; i < 4; ++i) cfg.mppi.sigma_init(i) = a[static_cast<size_t>(i)].get<double>();
        }
    }

    if (j.contains("dmpo")) {
        const auto& d = j.at("dmpo");
        cfg.dmpo.hidden = detail::get_or(d, "hidden", cfg.dmpo.hidden);
        cfg.dmpo.last_layer_std = detail::get_or(d, "last_layer_std", cfg.dmpo.last_layer_std);
        cfg.dmpo.gate_bias = detail::get_or(d, "gate_bias", cfg.dmpo.gate_bias);
        cfg.dmpo.log_std_init = detail::get_or(d, "log_std_init", cfg.dmpo.log_std_init);
    }

    if (j.contains("ppo")) {
        const auto& p = j.at("ppo");
        cfg.ppo.gamma = detail::get_or(p, "gamma", cfg.ppo.gamma);
        cfg.ppo.lambda = detail::get_or(p, "lambda", cfg.ppo.lambda);
        cfg.ppo.clip_eps = detail::get_or(p, "clip_eps", cfg.ppo.clip_eps);
        cfg.ppo.actor_lr = detail::get_or(p, "actor_lr", cfg.ppo.actor_lr);
        cfg.ppo.critic_lr = detail::get_or(p, "critic_lr", cfg.ppo.critic_lr);
        cfg.ppo.entropy_coef = detail::get_or(p, "entropy_coef", cfg.ppo.entropy_coef);
        cfg.ppo.epochs = detail::get_or(p, "epochs", cfg.ppo.epochs);
        cfg.ppo.critic_epochs = detail::get_or(p, "critic_epochs", cfg.ppo.critic_epochs);
        cfg.ppo.target_kl = detail::get_or(p, "target_kl", cfg.ppo.target_kl);
        cfg.ppo.anneal_lr = detail::get_or(p, "anneal_lr", cfg.ppo.anneal_lr);
        cfg.ppo.domain_randomization =
            detail::get_or(p, "domain_randomization", cfg.ppo.domain_randomization);
        cfg.ppo.per_env_advantages =
            detail::get_or(p, "per_env_advantages", cfg.ppo.per_env_advantages);
        cfg.ppo.minibatch = detail::get_or(p, "minibatch", cfg.ppo.minibatch);
        cfg.ppo.envs = detail::get_or(p, "envs", cfg.ppo.envs);
        cfg.ppo.steps_per_env = detail::get_or(p, "steps_per_env", cfg.ppo.steps_per_env);
        cfg.ppo.iterations = detail::get_or(p, "iterations", cfg.ppo.iterations);
        cfg.ppo.checkpoint_every = detail::get_or(p, "checkpoint_every", cfg.ppo.checkpoint_every);
        cfg.ppo.eval_every = detail::get_or(p, "eval_every", cfg.ppo.eval_every);
        cfg.e2e_lr = detail::get_or(p, "e2e_lr", cfg.e2e_lr);
        cfg.e2e_log_std_init = detail::get_or(p, "e2e_log_std_init", cfg.e2e_log_std_init);
        cfg.target_improvement =
            detail::get_or(p, "target_improvement", cfg.target_improvement);
    }
    cfg.ppo.seed = cfg.seed;
    cfg.ppo.threads = cfg.threads;

    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        cfg.eval.controller = detail::get_or<std::string>(e, "controller", cfg.eval.controller);
        cfg.eval.samples = detail::get_or(e, "samples", cfg.eval.samples);
        cfg.eval.task = detail::get_or<std::string>(e, "task", cfg.eval.task);
        cfg.eval.disturbance =
            detail::get_or<std::string>(e, "disturbance", cfg.eval.disturbance);
        cfg.eval.checkpoint = detail::get_or<std::string>(e, "checkpoint", cfg.eval.checkpoint);
        cfg.eval.wind_seed = detail::get_or(e, "wind_seed", cfg.eval.wind_seed);
        cfg.eval.wind_speed = detail::get_or(e, "wind_speed", cfg.eval.wind_speed);
        cfg.eval.drag_coeff = detail::get_or(e, "drag_coeff", cfg.eval.drag_coeff);
        if (e.contains("seeds")) {
            cfg.eval.seeds.clear();
            for (const auto& s : e.at("seeds")) cfg.eval.seeds.push_back(s.get<uint64_t>());
        }
    }
    if (!j.contains("eval") || !j.at("eval").contains("seeds")) {
        cfg.eval.seeds.clear();
        for (uint64_t k = 0; k < 5; ++k) cfg.eval.seeds.push_back(cfg.seed + k);
    }

    // DMPO_SEED wins over the config's seed and everything derived from it.
    if (const char* env_seed = std::getenv("DMPO_SEED")) {
        cfg.seed = std::strtoull(env_seed, nullptr, 10);
        cfg.ppo.seed = cfg.seed;
        cfg.eval.seeds.clear();
        for (uint64_t k = 0; k < 5; ++k) cfg.eval.seeds.push_back(cfg.seed + k);
    }
    return cfg;
}

inline void validate_config(const ExperimentConfig& cfg) {
    try {
        cfg.sim.validate();
        cfg.mppi.validate();
        cfg.ppo.validate();
        cfg.task.weights.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (cfg.eval.controller != "mppi" && cfg.eval.controller != "dmpo" &&
        cfg.eval.controller != "e2e")
        throw ConfigError("eval.controller must be mppi, dmpo, or e2e");
    if (cfg.eval.task != "zigzag" && cfg.eval.task != "zigzag_yaw")
        throw ConfigError("eval.task must be zigzag or zigzag_yaw");
    if (cfg.eval.disturbance != "none" && cfg.eval.disturbance != "wind_drag")
        throw ConfigError("eval.disturbance must be none or wind_drag");
    if (cfg.eval.seeds.empty()) throw ConfigError("eval.seeds must be non-empty");
    static const int allowed[] = {64, 128, 256, 512, 1024, 2048, 4096, 8192};
    bool ok = false;
    for (int n : allowed) ok = ok || (cfg.eval.samples == n);
    if (!ok) throw ConfigError("eval.samples must be one of 64..8192 (powers of two)");
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    ExperimentConfig cfg = parse_config(j);
    validate_config(cfg);
    return cfg;
}

}  // namespace dmpo
