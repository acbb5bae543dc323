#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmpo/math_util.hpp"
#include "dmpo/runner.hpp"

namespace dmpo {

// One line of episodes.csv; everything the summary statistics need.
struct EpisodeRow {
    std::string controller;
    int n_samples = 0;
    uint64_t seed = 0;
    long steps = 0;
    double episode_cost = 0.0;
    double median_pos_err = 0.0;
    double median_ori_err = 0.0;
    bool crashed = false;
};

inline EpisodeRow to_row(const EpisodeRecord& rec) {
    EpisodeRow r;
    r.controller = rec.controller;
    r.n_samples = rec.n_samples;
    r.seed = rec.seed;
    r.steps = static_cast<long>(rec.steps.size());
    r.episode_cost = rec.episode_cost;
    r.median_pos_err = rec.median_pos_err;
    r.median_ori_err = rec.median_ori_err;
    r.crashed = rec.crashed;
    return r;
}

inline void write_episodes_csv(const std::string& path, const std::vector<EpisodeRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << "controller,n_samples,seed,steps,episode_cost,median_pos_err,median_ori_err,crashed\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%llu,%ld,%.17g,%.17g,%.17g,%d\n",
                      r.controller.c_str(), r.n_samples,
                      static_cast<unsigned long long>(r.seed), r.steps, r.episode_cost,
                      r.median_pos_err, r.median_ori_err, r.crashed ? 1 : 0);
        out << buf;
    }
}

inline std::vector<EpisodeRow> read_episodes_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    std::getline(in, line);  // header
    std::vector<EpisodeRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        EpisodeRow r;
        std::getline(ss, r.controller, ',');
        std::getline(ss, field, ','); r.n_samples = std::stoi(field);
        std::getline(ss, field, ','); r.seed = std::stoull(field);
        std::getline(ss, field, ','); r.steps = std::stol(field);
        std::getline(ss, field, ','); r.episode_cost = std::stod(field);
        std::getline(ss, field, ','); r.median_pos_err = std::stod(field);
        std::getline(ss, field, ','); r.median_ori_err = std::stod(field);
        std::getline(ss, field, ','); r.crashed = (std::stoi(field) != 0);
        rows.push_back(std::move(r));
    }
    return rows;
}

// Per-step CSV of one episode, including the controller diagnostics.
inline void write_episode_steps_csv(const std::string& path, const EpisodeRecord& rec) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,f_act,wax,way,waz,"
           "u_f,u_wx,u_wy,u_wz,stage_cost,pos_err,ori_err,min_cost,mean_cost,ess\n";
    for (const auto& s : rec.steps) {
        const QuadState& x = s.state;
        out << s.t << ',' << x.p.x() << ',' << x.p.y() << ',' << x.p.z() << ',' << x.v.x()
            << ',' << x.v.y() << ',' << x.v.z() << ',' << x.q.w() << ',' << x.q.x() << ','
            << x.q.y() << ',' << x.q.z() << ',' << x.omega.x() << ',' << x.omega.y() << ','
            << x.omega.z() << ',' << x.f_act << ',' << x.omega_act.x() << ','
            << x.omega_act.y() << ',' << x.omega_act.z() << ',' << s.u.f_des << ','
            << s.u.omega_des.x() << ',' << s.u.omega_des.y() << ',' << s.u.omega_des.z()
            << ',' << s.stage_cost << ',' << s.pos_err << ',' << s.ori_err << ','
            << s.diag.min_cost << ',' << s.diag.mean_cost << ',' << s.diag.ess << '\n';
    }
}

struct GroupSummary {
    std::string controller;
    int n_samples = 0;
    int episodes = 0;
    int crashes = 0;
    double cost_median = 0.0, cost_q1 = 0.0, cost_q3 = 0.0;
    double pos_err_median = 0.0;
    double ori_err_median = 0.0;
};

inline std::string group_key(const std::string& controller, int n) {
    return controller + "@" + std::to_string(n);
}

// Groups rows per (controller, N) and computes the quartile summary;
// crashed episodes contribute their partial cost and the crash count.
inline std::vector<GroupSummary> summarize(const std::vector<EpisodeRow>& rows) {
    std::map<std::string, std::vector<const EpisodeRow*>> groups;
    for (const auto& r : rows) groups[group_key(r.controller, r.n_samples)].push_back(&r);

    std::vector<GroupSummary> out;
    for (const auto& [key, members] : groups) {
        GroupSummary g;
        g.controller = members.front()->controller;
        g.n_samples = members.front()->n_samples;
        g.episodes = static_cast<int>(members.size());
        std::vector<double> costs, pe, oe;
        for (const EpisodeRow* r : members) {
            costs.push_back(r->episode_cost);
            pe.push_back(r->median_pos_err);
            oe.push_back(r->median_ori_err);
            if (r->crashed) g.crashes += 1;
        }
        g.cost_median = quantile(costs, 0.5);
        g.cost_q1 = quantile(costs, 0.25);
        g.cost_q3 = quantile(costs, 0.75);
        g.pos_err_median = quantile(pe, 0.5);
        g.ori_err_median = quantile(oe, 0.5);
        out.push_back(std::move(g));
    }
    return out;
}

inline void write_summary_csv(const std::string& path, const std::vector<GroupSummary>& groups) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << "controller,n_samples,episodes,crashes,cost_median,cost_q1,cost_q3,"
           "pos_err_median,ori_err_median\n";
    char buf[256];
    for (const auto& g : groups) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      g.controller.c_str(), g.n_samples, g.episodes, g.crashes, g.cost_median,
                      g.cost_q1, g.cost_q3, g.pos_err_median, g.ori_err_median);
        out << buf;
    }
}

// Relative improvement in the form 1 - cost_a / cost_b: positive when a
// beats b.
inline double improvement(double cost_a, double cost_b) {
    return 1.0 - cost_a / cost_b;
}

// Minimal box-and-whisker SVG: one box per group, whiskers at the most
// extreme datum within 1.5 IQR, outliers as circles. No dependencies,
// diffable output.
inline void write_boxplot_svg(const std::string& path, const std::string& title,
                              const std::vector<std::string>& labels,
                              const std::vector<std::vector<double>>& data) {
    if (labels.size() != data.size() || data.empty())
        throw std::invalid_argument("write_boxplot_svg: label/data mismatch or empty");
    const int n = static_cast<int>(data.size());
    const double box_w = 40.0, slot_w = 80.0;
    const double width = 80.0 + slot_w * n, height = 320.0;
    const double top = 40.0, bottom = height - 50.0, left = 60.0;

    double lo = 1e300, hi = -1e300;
    for (const auto& v : data)
        for (double x : v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    if (hi <= lo) hi = lo + 1.0;
    double pad = 0.08 * (hi - lo);
    lo -= pad;
    hi += pad;
    auto ypix = [&](double v) { return bottom - (v - lo) / (hi - lo) * (bottom - top); };

    std::ostringstream svg;
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
        << "' font-family='sans-serif' font-size='11'>\n";
    svg << "<text x='" << width / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
        << "</text>\n";
    svg << "<line x1='" << left << "' y1='" << top << "' x2='" << left << "' y2='" << bottom
        << "' stroke='black'/>\n";
    svg << "<line x1='" << left << "' y1='" << bottom << "' x2='" << width - 20 << "' y2='"
        << bottom << "' stroke='black'/>\n";
    for (int k = 0; k <= 4; ++k) {
        double v = lo + (hi - lo) * k / 4.0;
        double y = ypix(v);
        svg << "<line x1='" << left - 4 << "' y1='" << y << "' x2='" << left << "' y2='" << y
            << "' stroke='black'/>\n";
        char lbl[64];
        std::snprintf(lbl, sizeof(lbl), "%.3g", v);
        svg << "<text x='" << left - 8 << "' y='" << y + 4 << "' text-anchor='end'>" << lbl
            << "</text>\n";
    }

    for (int i = 0; i < n; ++i) {
        const auto& v = data[static_cast<size_t>(i)];
        double cx = left + slot_w * (i + 0.5);
        double q1 = quantile(v, 0.25), med = quantile(v, 0.5), q3 = quantile(v, 0.75);
        double iqr = q3 - q1;
        double wlo = q1, whi = q3;
        for (double x : v) {
            if (x >= q1 - 1.5 * iqr) wlo = std::min(wlo, x);
            if (x <= q3 + 1.5 * iqr) whi = std::max(whi, x);
        }
        svg << "<line x1='" << cx << "' y1='" << ypix(wlo) << "' x2='" << cx << "' y2='"
            << ypix(q1) << "' stroke='black'/>\n";
        svg << "<line x1='" << cx << "' y1='" << ypix(q3) << "' x2='" << cx << "' y2='"
            << ypix(whi) << "' stroke='black'/>\n";
        svg << "<line x1='" << cx - 12 << "' y1='" << ypix(wlo) << "' x2='" << cx + 12
            << "' y2='" << ypix(wlo) << "' stroke='black'/>\n";
        svg << "<line x1='" << cx - 12 << "' y1='" << ypix(whi) << "' x2='" << cx + 12
            << "' y2='" << ypix(whi) << "' stroke='black'/>\n";
        svg << "<rect x='" << cx - box_w / 2 << "' y='" << ypix(q3) << "' width='" << box_w
            << "' height='" << ypix(q1) - ypix(q3) << "' fill='#9ecae1' stroke='black'/>\n";
        svg << "<line x1='" << cx - box_w / 2 << "' y1='" << ypix(med) << "' x2='"
            << cx + box_w / 2 << "' y2='" << ypix(med) << "' stroke='black' stroke-width='2'/>\n";
        for (double x : v)
            if (x < q1 - 1.5 * iqr || x > q3 + 1.5 * iqr)
                svg << "<circle cx='" << cx << "' cy='" << ypix(x) << "' r='2.5' fill='none' "
                       "stroke='black'/>\n";
        svg << "<text x='" << cx << "' y='" << bottom + 16 << "' text-anchor='middle'>"
            << labels[static_cast<size_t>(i)] << "</text>\n";
    }
    svg << "</svg>\n";

    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << svg.str();
}

// Renders summary CSV plus the three box plots (cost, position error,
// orientation error) from per-episode rows.
inline void write_report(const std::string& out_dir, const std::vector<EpisodeRow>& rows) {
    if (rows.empty()) throw std::invalid_argument("write_report: no episodes");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::vector<GroupSummary> groups = summarize(rows);
    write_summary_csv((fs::path(out_dir) / "summary.csv").string(), groups);

    std::map<std::string, std::vector<const EpisodeRow*>> grouped;
    for (const auto& r : rows) grouped[group_key(r.controller, r.n_samples)].push_back(&r);
    std::vector<std::string> labels;
    std::vector<std::vector<double>> costs, pes, oes;
    for (const auto& [key, members] : grouped) {
        labels.push_back(key);
        std::vector<double> c, p, o;
        for (const EpisodeRow* r : members) {
            c.push_back(r->episode_cost);
            p.push_back(r->median_pos_err);
            o.push_back(r->median_ori_err);
        }
        costs.push_back(std::move(c));
        pes.push_back(std::move(p));
        oes.push_back(std::move(o));
    }
    write_boxplot_svg((fs::path(out_dir) / "box_cost.svg").string(), "total episode cost",
                      labels, costs);
    write_boxplot_svg((fs::path(out_dir) / "box_pos_err.svg").string(),
                      "median position error (m)", labels, pes);
    write_boxplot_svg((fs::path(out_dir) / "box_ori_err.svg").string(),
                      "median orientation error", labels, oes);
}

}  // namespace dmpo
