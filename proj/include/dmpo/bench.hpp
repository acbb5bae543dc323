#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dmpo/config.hpp"
#include "dmpo/report.hpp"
#include "dmpo/runner.hpp"

namespace dmpo {

struct EvalSummary {
    double cost_median = 0.0, cost_q1 = 0.0, cost_q3 = 0.0;
    double pos_err_median = 0.0;
    double ori_err_median = 0.0;
    int crashes = 0;
    int episodes = 0;
    bool no_data = false;
};

struct EvalResult {
    std::vector<EpisodeRecord> records;
    EvalSummary summary;
};

// Assembles the closed-loop setup implied by a config: nominal model for
// the controller, actual system with the configured disturbance, task
// variant, checkpoint-backed networks where needed.
struct EvalContext {
    RunnerSetup setup;
    DmpoNets nets;   // owned storage when controller == dmpo
    Mlp e2e_actor;   // owned storage when controller == e2e
};

inline EvalContext make_eval_context(const ExperimentConfig& cfg) {
    EvalContext ctx;
    ctx.setup.model = cfg.sim;
    ctx.setup.model.disturbance = DisturbanceSpec{};
    ctx.setup.actual = cfg.sim;
    if (cfg.eval.disturbance == "wind_drag")
        ctx.setup.actual.disturbance =
            make_wind_disturbance(cfg.eval.wind_seed, cfg.eval.wind_speed, cfg.eval.drag_coeff);
    ctx.setup.task = cfg.task;
    ctx.setup.task.yaw_flips = (cfg.eval.task == "zigzag_yaw");
    ctx.setup.mppi = cfg.mppi;
    ctx.setup.mppi.samples = cfg.eval.samples;
    ctx.setup.threads = 1;

    if (cfg.eval.controller == "mppi") {
        ctx.setup.kind = ControllerKind::kMppi;
    } else if (cfg.eval.controller == "dmpo") {
        ctx.setup.kind = ControllerKind::kDmpo;
        if (cfg.eval.checkpoint.empty())
            throw std::runtime_error("eval: dmpo controller requires eval.checkpoint");
        ctx.nets = DmpoNets::from_entries(read_checkpoint(cfg.eval.checkpoint), ctx.setup.mppi);
        ctx.setup.nets = &ctx.nets;
    } else {
        ctx.setup.kind = ControllerKind::kE2e;
        if (cfg.eval.checkpoint.empty())
            throw std::runtime_error("eval: e2e controller requires eval.checkpoint");
        auto entries = read_checkpoint(cfg.eval.checkpoint);
        ctx.e2e_actor = mlp_from_entries(entries, "e2e_actor");
        ctx.setup.e2e_actor = &ctx.e2e_actor;
    }
    return ctx;
}

inline EvalSummary summarize_records(const std::vector<EpisodeRecord>& records) {
    EvalSummary s;
    s.episodes = static_cast<int>(records.size());
    if (records.empty()) {
        s.no_data = true;
        return s;
    }
    std::vector<double> costs, pe, oe;
    for (const auto& r : records) {
        costs.push_back(r.episode_cost);
        pe.push_back(r.median_pos_err);
        oe.push_back(r.median_ori_err);
        if (r.crashed) s.crashes += 1;
    }
    s.cost_median = quantile(costs, 0.5);
    s.cost_q1 = quantile(costs, 0.25);
    s.cost_q3 = quantile(costs, 0.75);
    s.pos_err_median = quantile(pe, 0.5);
    s.ori_err_median = quantile(oe, 0.5);
    return s;
}

// Seeded episode sweep for one configuration. A zero-duration task is a
// degenerate input, not an error: it yields no records and a summary
// flagged no_data.
inline EvalResult run_eval(const ExperimentConfig& cfg) {
    EvalResult result;
    if (cfg.task.duration <= 0.0) {
        result.summary.no_data = true;
        return result;
    }
    EvalContext ctx = make_eval_context(cfg);
    int threads = cfg.threads > 0 ? cfg.threads : default_threads();
    result.records.resize(cfg.eval.seeds.size());
    parallel_for(static_cast<int>(cfg.eval.seeds.size()), threads, [&](int i) {
        result.records[static_cast<size_t>(i)] =
            run_episode(ctx.setup, cfg.eval.seeds[static_cast<size_t>(i)]);
    });
    result.summary = summarize_records(result.records);
    return result;
}

// Writes the raw artifacts of one eval run into out_dir: per-episode
// rows, per-step logs, the reference trajectories, and a summary.
inline void write_eval_artifacts(const std::string& out_dir, const ExperimentConfig& cfg,
                                 const EvalResult& result) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::vector<EpisodeRow> rows;
    for (const auto& rec : result.records) {
        rows.push_back(to_row(rec));
        std::string tag = rec.controller + "_" + std::to_string(rec.n_samples) + "_" +
                          std::to_string(rec.seed);
        write_episode_steps_csv((fs::path(out_dir) / ("steps_" + tag + ".csv")).string(), rec);
    }
    write_episodes_csv((fs::path(out_dir) / "episodes.csv").string(), rows);
    if (!rows.empty())
        write_summary_csv((fs::path(out_dir) / "summary.csv").string(), summarize(rows));
    TaskConfig task = cfg.task;
    task.yaw_flips = (cfg.eval.task == "zigzag_yaw");
    if (task.duration > 0.0)
        for (uint64_t seed : cfg.eval.seeds)
            write_traj_csv(gen_zigzag(seed, task),
                           (fs::path(out_dir) / ("ref_" + std::to_string(seed) + ".csv")).string());
}

struct SweepCell {
    std::string controller;
    int n_samples = 0;
    EvalSummary summary;
};

struct SweepResult {
    std::vector<SweepCell> cells;
    std::vector<EpisodeRow> rows;  // all episodes across cells
};

// Cross product of controllers and sample counts. A dmpo checkpoint path
// may contain "{n}", substituted per cell (the optimizer input width is
// tied to N).
inline SweepResult sweep(const ExperimentConfig& base, const std::vector<int>& n_list,
                         const std::vector<std::string>& controllers) {
    SweepResult out;
    for (const std::string& ctrl : controllers) {
        for (int n : n_list) {
            ExperimentConfig cfg = base;
            cfg.eval.controller = ctrl;
            cfg.eval.samples = n;
            std::string& ckpt = cfg.eval.checkpoint;
            auto pos = ckpt.find("{n}");
            if (pos != std::string::npos) ckpt.replace(pos, 3, std::to_string(n));
            validate_config(cfg);
            EvalResult res = run_eval(cfg);
            out.cells.push_back({ctrl, n, res.summary});
            for (const auto& rec : res.records) out.rows.push_back(to_row(rec));
        }
    }
    return out;
}

inline void write_sweep_table(const std::string& path, const SweepResult& res) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    // Improvements are reported against the best (lowest-median) MPPI cell.
    double best_mppi = -1.0;
    for (const auto& c : res.cells)
        if (c.controller == "mppi" && !c.summary.no_data &&
            (best_mppi < 0 || c.summary.cost_median < best_mppi))
            best_mppi = c.summary.cost_median;
    out << "controller,n_samples,episodes,crashes,cost_median,cost_q1,cost_q3,"
           "pos_err_median,ori_err_median,improvement_vs_best_mppi\n";
    char buf[320];
    for (const auto& c : res.cells) {
        double imp = best_mppi > 0 ? improvement(c.summary.cost_median, best_mppi) : 0.0;
        std::snprintf(buf, sizeof(buf), "%s,%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      c.controller.c_str(), c.n_samples, c.summary.episodes, c.summary.crashes,
                      c.summary.cost_median, c.summary.cost_q1, c.summary.cost_q3,
                      c.summary.pos_err_median, c.summary.ori_err_median, imp);
        out << buf;
    }
}

// Analytic byte accounting of the controller working set plus a wall-
// clock timing of 100 policy steps. Buffers counted per the controller's
// declared storage: sampled controls, per-sample rollout state streams,
// costs/weights, plan parameters, fixed base samples, and for the
// learned controller the network parameters and activations.
struct Footprint {
    size_t sample_bytes = 0;
    size_t rollout_state_bytes = 0;
    size_t weight_cost_bytes = 0;
    size_t plan_bytes = 0;
    size_t base_bytes = 0;
    size_t net_param_bytes = 0;
    size_t net_activation_bytes = 0;
    double per_step_ms = 0.0;

    size_t total_bytes() const {
        return sample_bytes + rollout_state_bytes + weight_cost_bytes + plan_bytes +
               base_bytes + net_param_bytes + net_activation_bytes;
    }
};

inline Footprint measure_footprint(const ExperimentConfig& cfg, const std::string& controller,
                                   int n_samples, int timing_steps = 100) {
    Footprint fp;
    const size_t n = static_cast<size_t>(n_samples);
    const size_t h = static_cast<size_t>(cfg.mppi.horizon);
    const size_t du = kControlDim;
    const size_t sd = QuadState::kFlatDim;
    fp.sample_bytes = n * h * du * sizeof(double);
    fp.rollout_state_bytes = n * h * sd * sizeof(double);
    fp.weight_cost_bytes = 2 * n * sizeof(double);
    fp.plan_bytes = 2 * 2 * h * du * sizeof(double);
    fp.base_bytes = n * h * du * sizeof(double);

    MppiConfig mppi = cfg.mppi;
    mppi.samples = n_samples;
    DmpoNets nets;
    if (controller == "dmpo") {
        Rng rng(cfg.seed);
        nets = DmpoNets::init(mppi, cfg.dmpo, rng);
        for (const Mlp* net : {&nets.shift, &nets.mean_opt, &nets.cov_opt}) {
            fp.net_param_bytes += static_cast<size_t>(net->n_params()) * sizeof(double);
            size_t act = 0;
            for (int s : net->sizes) act += static_cast<size_t>(s);
            fp.net_activation_bytes += act * sizeof(double);
        }
    }

    // Timed closed-loop policy steps from the trajectory start.
    SimParams model = cfg.sim;
    model.disturbance = DisturbanceSpec{};
    TaskConfig task = cfg.task;
    ReferenceTraj traj = gen_zigzag(cfg.seed, task);
    QuadState x;
    x.p = traj.samples.front().p_des;
    x.f_act = model.hover_thrust();
    ControlMatrix base = halton_base(mppi);
    PlanParams params = mppi.default_plan();
    Rng rng(0);
    int threads = cfg.threads > 0 ? cfg.threads : default_threads();

    auto t0 = std::chrono::steady_clock::now();
    for (int t = 0; t < timing_steps; ++t) {
        std::vector<RefPoint> refs = ref_window(traj, t, mppi.horizon);
        if (controller == "dmpo") {
            DmpoStepResult res = dmpo_policy_step(x, params, refs, mppi, model, task.weights,
                                                  base, nets, PolicyMode::kEval, rng, threads);
            params = res.params;
            x = step(x, res.u, model);
        } else {
            MppiStepResult res = mppi_policy_step(x, params, refs, mppi, model, task.weights,
                                                  base, threads);
            params = res.params;
            x = step(x, res.u, model);
        }
    }
    fp.per_step_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count() /
                     timing_steps;
    return fp;
}

}  // namespace dmpo
