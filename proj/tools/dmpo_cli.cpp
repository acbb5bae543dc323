// Experiment harness: train the learned optimizer or the end-to-end
// baseline, evaluate checkpoints over seeded episodes, sweep controllers
// against sample counts, render reports, and account for controller
// memory/runtime footprints.

#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dmpo/all.hpp"

namespace fs = std::filesystem;

namespace {

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    return out;
}

std::vector<std::string> parse_str_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(tok);
    return out;
}

int cmd_train(const dmpo::ExperimentConfig& cfg, bool e2e) {
    fs::create_directories(cfg.out_dir);
    if (e2e) {
        dmpo::PpoConfig ppo = cfg.ppo;
        ppo.actor_lr = cfg.e2e_lr;
        ppo.critic_lr = cfg.e2e_lr;
        dmpo::E2eConfig ecfg;
        ecfg.log_std_init = cfg.e2e_log_std_init;
        dmpo::E2eTrainer trainer(cfg.sim, cfg.task, ppo, ecfg);
        std::string out_dir = (fs::path(cfg.out_dir) / "e2e").string();
        dmpo::TrainResult res =
            trainer.train(out_dir, cfg.eval.seeds, cfg.target_improvement, true);
        std::printf("e2e training done: %d iterations, iter0 median %.4f, best %.4f\n",
                    res.iterations_run, res.iter0_median_cost, res.best_median_cost);
        std::printf("checkpoint: %s\n", res.checkpoint_best.c_str());
        return res.aborted ? 1 : 0;
    }
    dmpo::DmpoTrainer trainer(cfg.sim, cfg.mppi, cfg.dmpo, cfg.task, cfg.ppo);
    dmpo::TrainResult res =
        trainer.train(cfg.out_dir, cfg.eval.seeds, cfg.target_improvement, true);
    double imp = dmpo::improvement(res.best_median_cost, res.iter0_median_cost);
    std::printf("training done: %d iterations, iter0 median %.4f, best %.4f (%.1f%% better)\n",
                res.iterations_run, res.iter0_median_cost, res.best_median_cost, 100.0 * imp);
    std::printf("checkpoint: %s\n", res.checkpoint_best.c_str());
    return res.aborted ? 1 : 0;
}

int cmd_eval(dmpo::ExperimentConfig cfg, const std::string& checkpoint) {
    if (!checkpoint.empty()) cfg.eval.checkpoint = checkpoint;
    dmpo::EvalResult res = dmpo::run_eval(cfg);
    if (res.summary.no_data) {
        std::printf("no data (zero-duration task)\n");
        return 0;
    }
    dmpo::write_eval_artifacts(cfg.out_dir, cfg, res);
    std::printf("%s @ N=%d over %d seeds: median cost %.4f [Q1 %.4f, Q3 %.4f], "
                "median pos err %.4f m, crashes %d\n",
                cfg.eval.controller.c_str(), cfg.eval.samples, res.summary.episodes,
                res.summary.cost_median, res.summary.cost_q1, res.summary.cost_q3,
                res.summary.pos_err_median, res.summary.crashes);
    std::printf("artifacts in %s\n", cfg.out_dir.c_str());
    return 0;
}

int cmd_sweep(const dmpo::ExperimentConfig& cfg, const std::string& n_csv,
              const std::string& ctrl_csv) {
    std::vector<int> n_list = parse_int_list(n_csv);
    std::vector<std::string> controllers = parse_str_list(ctrl_csv);
    if (n_list.empty() || controllers.empty())
        throw dmpo::ConfigError("sweep: need --n and --controllers");
    dmpo::SweepResult res = dmpo::sweep(cfg, n_list, controllers);
    fs::create_directories(cfg.out_dir);
    dmpo::write_episodes_csv((fs::path(cfg.out_dir) / "episodes.csv").string(), res.rows);
    dmpo::write_sweep_table((fs::path(cfg.out_dir) / "sweep.csv").string(), res);
    for (const auto& c : res.cells)
        std::printf("%-6s N=%-5d median cost %.4f  crashes %d/%d\n", c.controller.c_str(),
                    c.n_samples, c.summary.cost_median, c.summary.crashes,
                    c.summary.episodes);
    std::printf("tables in %s\n", cfg.out_dir.c_str());
    return 0;
}

int cmd_report(const std::string& in_dir, const std::string& out_dir) {
    auto rows = dmpo::read_episodes_csv((fs::path(in_dir) / "episodes.csv").string());
    if (rows.empty()) {
        std::fprintf(stderr, "report: %s/episodes.csv has no rows\n", in_dir.c_str());
        return 1;
    }
    dmpo::write_report(out_dir, rows);
    std::printf("report written to %s\n", out_dir.c_str());
    return 0;
}

int cmd_footprint(const dmpo::ExperimentConfig& cfg, int mppi_n, int dmpo_n) {
    dmpo::Footprint fm = dmpo::measure_footprint(cfg, "mppi", mppi_n);
    dmpo::Footprint fd = dmpo::measure_footprint(cfg, "dmpo", dmpo_n);
    auto mb = [](size_t b) { return static_cast<double>(b) / (1024.0 * 1024.0); };
    std::printf("mppi @ N=%d: %.3f MiB buffers, %.3f ms/step\n", mppi_n, mb(fm.total_bytes()),
                fm.per_step_ms);
    std::printf("dmpo @ N=%d: %.3f MiB buffers (%.3f MiB nets), %.3f ms/step\n", dmpo_n,
                mb(fd.total_bytes()), mb(fd.net_param_bytes), fd.per_step_ms);
    std::printf("memory ratio mppi/dmpo: %.2fx, per-step time ratio: %.2fx\n",
                static_cast<double>(fm.total_bytes()) / fd.total_bytes(),
                fm.per_step_ms / fd.per_step_ms);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"learned-optimizer MPC laboratory"};
    app.require_subcommand(1);

    std::string config_path, checkpoint, n_csv = "64,256,1024",
                ctrl_csv = "mppi", in_dir, out_dir;
    bool e2e = false;
    int mppi_n = 4096, dmpo_n = 256;

    CLI::App* train = app.add_subcommand("train", "train the learned optimizer (PPO)");
    train->add_option("--config", config_path, "experiment config JSON")->required();
    train->add_flag("--e2e", e2e, "train the end-to-end baseline instead");

    CLI::App* eval = app.add_subcommand("eval", "run seeded closed-loop evaluation");
    eval->add_option("--config", config_path, "experiment config JSON")->required();
    eval->add_option("--checkpoint", checkpoint, "checkpoint path (dmpo/e2e controllers)");

    CLI::App* sweep = app.add_subcommand("sweep", "controller x sample-count sweep");
    sweep->add_option("--config", config_path, "experiment config JSON")->required();
    sweep->add_option("--n", n_csv, "comma-separated sample counts");
    sweep->add_option("--controllers", ctrl_csv, "comma-separated controllers");

    CLI::App* report = app.add_subcommand("report", "render summary tables and box plots");
    report->add_option("--in", in_dir, "directory with episodes.csv")->required();
    report->add_option("--out", out_dir, "output directory")->required();

    CLI::App* footprint = app.add_subcommand("footprint", "buffer bytes and per-step timing");
    footprint->add_option("--config", config_path, "experiment config JSON")->required();
    footprint->add_option("--mppi-n", mppi_n, "MPPI sample count");
    footprint->add_option("--dmpo-n", dmpo_n, "DMPO sample count");

    CLI11_PARSE(app, argc, argv);

    try {
        if (report->parsed()) return cmd_report(in_dir, out_dir);
        dmpo::ExperimentConfig cfg = dmpo::load_config(config_path);
        if (train->parsed()) return cmd_train(cfg, e2e);
        if (eval->parsed()) return cmd_eval(cfg, checkpoint);
        if (sweep->parsed()) return cmd_sweep(cfg, n_csv, ctrl_csv);
        if (footprint->parsed()) return cmd_footprint(cfg, mppi_n, dmpo_n);
    } catch (const dmpo::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
