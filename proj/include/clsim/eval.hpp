#pragma once

// Closed-loop evaluation protocol.
//
// Receding-horizon rollouts execute the single highest-confidence ego mode
// against log-replayed surrounding agents: decode at the current anchor,
// execute the first t_sim steps of the argmax-probability mode through the
// simulator (which derives headings and velocities), replan, repeat until
// the horizon is exhausted. Collisions (oriented-box overlap against any
// valid surrounding log state) and L2 distance to the original ego log are
// tallied at every timestep; a collision never terminates the rollout.
//
// Rollouts go through a Planner functor so oracle planners can stand in for
// the network in tests; the network planner decodes a checkpoint.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "clsim/losses.hpp"
#include "clsim/net.hpp"
#include "clsim/scenario.hpp"
#include "clsim/sim.hpp"

namespace clsim {

struct OrientedBox {
    Vec2 center;
    double heading = 0.0;
    double length = 4.5;
    double width = 2.0;
};

// Separating-axis test over the four box axes; touching edges collide.
inline bool boxes_collide(const OrientedBox& a, const OrientedBox& b) {
    if (!(a.length > 0.0 && a.width > 0.0 && b.length > 0.0 && b.width > 0.0)) {
        throw ContractError("boxes_collide: non-positive box extents");
    }
    const Vec2 axes[4] = {
        {std::cos(a.heading), std::sin(a.heading)},
        {-std::sin(a.heading), std::cos(a.heading)},
        {std::cos(b.heading), std::sin(b.heading)},
        {-std::sin(b.heading), std::cos(b.heading)},
    };
    const Vec2 d = b.center - a.center;
    for (const Vec2& axis : axes) {
        const double dist = std::abs(d.dot(axis));
        const double ra = 0.5 * a.length * std::abs(axes[0].dot(axis)) +
                          0.5 * a.width * std::abs(axes[1].dot(axis));
        const double rb = 0.5 * b.length * std::abs(axes[2].dot(axis)) +
                          0.5 * b.width * std::abs(axes[3].dot(axis));
        if (dist > ra + rb) return false;
    }
    return true;
}

struct EvalConfig {
    std::vector<double> t_sim_seconds = {6.0, 3.0, 2.0, 1.5, 1.0, 0.5};
    int n_seeds = 3;  // expected checkpoint seeds per config; evaluation itself
                      // is deterministic, the sample axis is the checkpoint list
    std::vector<std::pair<double, double>> segment_windows = {{0.5, 1.0}, {4.0, 6.0}};

    std::vector<int> t_sim_steps_for(double dt) const {
        if (t_sim_seconds.empty()) throw ConfigError("eval: empty t_sim list");
        std::vector<int> out;
        for (double s : t_sim_seconds) {
            const double steps = s / dt;
            const int rounded = static_cast<int>(std::lround(steps));
            if (rounded < 1 || std::abs(steps - rounded) > 1e-9) {
                throw ConfigError("eval: t_sim " + fmt_g9(s) + " s is not a multiple of dt");
            }
            out.push_back(rounded);
        }
        return out;
    }
};

// Full-horizon plan in world coordinates for steps first_step..t_pred_steps.
using Planner =
    std::function<std::vector<Vec2>(const Scenario&, const DynamicContext&, int first_step)>;

// Planner that decodes a trained checkpoint and follows argmax probability
// (ties break to the lowest mode index).
inline Planner make_net_planner(DecoderParams& params) {
    return [&params](const Scenario& scn, const DynamicContext& ctx,
                     int first_step) -> std::vector<Vec2> {
        ad::Tape tape;
        tape.grad_enabled = false;
        ParamUse use(tape, params.store);
        AdContext actx = ad_context(tape, ctx);
        ContextEmbedding emb = embed_context(tape, scn, actx, params, use);
        EgoDecode ego = decode_ego(tape, emb, params, use, first_step);
        const ad::Matrix& probs = ego.probs.val();
        int best = 0;
        for (int m = 1; m < probs.cols; ++m) {
            if (probs.at(0, m) > probs.at(0, best)) best = m;
        }
        const ad::Value world = ad::local_to_frame(emb.ego_pose,
                                                   ego.modes[static_cast<std::size_t>(best)].mu);
        std::vector<Vec2> out;
        for (int t = 0; t < world.rows(); ++t) {
            out.push_back({world.val().at(t, 0), world.val().at(t, 1)});
        }
        return out;
    };
}

// Planner that returns the ego ground truth (oracle baseline for tests).
inline Planner make_oracle_planner() {
    return [](const Scenario& scn, const DynamicContext&, int first_step) {
        const GroundTruth gt = extract_ground_truth(scn);
        return std::vector<Vec2>(gt.y_ego.begin() + (first_step - 1), gt.y_ego.end());
    };
}

struct ExecutedRollout {
    std::vector<Vec2> positions;     // executed ego positions, steps 1..t_pred
    std::vector<double> headings;    // simulator-derived headings
    int replan_count = 0;
};

// Receding-horizon execution with log-replay surroundings.
inline ExecutedRollout closed_loop_rollout(const Scenario& scn, const Planner& plan,
                                           int t_sim_steps) {
    if (t_sim_steps < 1 || t_sim_steps > scn.t_pred_steps) {
        throw ContractError("closed_loop_rollout: t_sim_steps outside [1, t_pred]");
    }
    const auto surrounding = surrounding_indices(scn);
    const std::size_t ego = scn.ego_index();
    SimulationMask mask;
    mask.flags.assign(surrounding.size(), false);  // log replay only
    std::vector<std::optional<std::vector<Vec2>>> no_scene(surrounding.size());

    SimConfig sim_cfg;
    sim_cfg.t_sim_steps = 1;  // stepwise execution to capture each state

    ExecutedRollout out;
    DynamicContext ctx = initial_context(scn);
    int executed = 0;
    while (executed < scn.t_pred_steps) {
        const std::vector<Vec2> trajectory = plan(scn, ctx, executed + 1);
        const int expect = scn.t_pred_steps - executed;
        if (static_cast<int>(trajectory.size()) != expect) {
            throw ContractError("closed_loop_rollout: plan covers " +
                                std::to_string(trajectory.size()) + " steps, expected " +
                                std::to_string(expect));
        }
        const int exec = std::min(t_sim_steps, expect);
        for (int i = 0; i < exec; ++i) {
            ctx = simulate_step(ctx, scn, {trajectory[static_cast<std::size_t>(i)]}, no_scene,
                                mask, sim_cfg);
            const AgentState& st = ctx.window[ego].back();
            out.positions.push_back(st.position);
            out.headings.push_back(st.heading);
        }
        executed += exec;
        ++out.replan_count;
    }
    return out;
}

// --- metrics ---------------------------------------------------------------------

struct MetricCell {
    double mean = 0.0;
    double stddev = 0.0;
    long n = 0;  // rollouts contributing (checkpoints x scenarios)
};

struct MetricsReport {
    double dt = 0.5;
    std::vector<double> t_sim_seconds;
    // indexed [t_sim][timestep], timestep t = 1..t_pred
    std::vector<std::vector<MetricCell>> collision;
    std::vector<std::vector<MetricCell>> l2;
    // whole-horizon averages per t_sim
    std::vector<MetricCell> collision_avg;
    std::vector<MetricCell> l2_avg;
    // segment averages: [window][t_sim]
    std::vector<std::pair<double, double>> segment_windows;
    std::vector<std::vector<MetricCell>> segment_collision;
    std::vector<std::vector<MetricCell>> segment_l2;
};

namespace eval_detail {

inline MetricCell cell_over(const std::vector<double>& per_planner, long n_rollouts) {
    MetricCell c;
    c.n = n_rollouts;
    for (double v : per_planner) c.mean += v;
    c.mean /= static_cast<double>(per_planner.size());
    if (per_planner.size() > 1) {
        double ss = 0.0;
        for (double v : per_planner) ss += (v - c.mean) * (v - c.mean);
        c.stddev = std::sqrt(ss / static_cast<double>(per_planner.size() - 1));
    }
    return c;
}

}  // namespace eval_detail

// Evaluates each planner (typically one per training seed) over the scenario
// set at every replanning frequency. Deterministic: a pure function of its
// arguments.
inline MetricsReport evaluate(const std::vector<Scenario>& scenarios,
                              const std::vector<Planner>& planners, const EvalConfig& cfg) {
    if (scenarios.empty() || planners.empty()) {
        throw ConfigError("evaluate: scenarios and planners must be non-empty");
    }
    const Scenario& first = scenarios.front();
    const int t_pred = first.t_pred_steps;
    const std::vector<int> t_sim_steps = cfg.t_sim_steps_for(first.dt);

    MetricsReport rep;
    rep.dt = first.dt;
    rep.t_sim_seconds = cfg.t_sim_seconds;
    rep.segment_windows = cfg.segment_windows;

    const long n_rollouts = static_cast<long>(scenarios.size() * planners.size());

    for (std::size_t f = 0; f < t_sim_steps.size(); ++f) {
        // per planner, per timestep accumulators
        std::vector<std::vector<double>> col(planners.size(),
                                             std::vector<double>(static_cast<std::size_t>(t_pred), 0.0));
        std::vector<std::vector<double>> l2(planners.size(),
                                            std::vector<double>(static_cast<std::size_t>(t_pred), 0.0));
        for (std::size_t p = 0; p < planners.size(); ++p) {
            for (const Scenario& scn : scenarios) {
                if (scn.t_pred_steps != t_pred || scn.dt != first.dt) {
                    throw ValidationError("evaluate: scenarios disagree on horizons");
                }
                const GroundTruth gt = extract_ground_truth(scn);
                const std::size_t ego = scn.ego_index();
                const ExecutedRollout roll =
                    closed_loop_rollout(scn, planners[p], t_sim_steps[f]);
                for (int t = 1; t <= t_pred; ++t) {
                    const std::size_t ti = static_cast<std::size_t>(t - 1);
                    OrientedBox ego_box{roll.positions[ti], roll.headings[ti],
                                        scn.tracks[ego].length, scn.tracks[ego].width};
                    bool hit = false;
                    for (std::size_t a = 0; a < scn.tracks.size() && !hit; ++a) {
                        if (a == ego) continue;
                        const AgentState& st =
                            scn.tracks[a].states[static_cast<std::size_t>(scn.t_in_steps + t - 1)];
                        if (!st.valid) continue;  // collision needs a valid log state
                        OrientedBox other{st.position, st.heading, scn.tracks[a].length,
                                          scn.tracks[a].width};
                        hit = boxes_collide(ego_box, other);
                    }
                    col[p][ti] += hit ? 1.0 : 0.0;
                    l2[p][ti] += (roll.positions[ti] - gt.y_ego[ti]).norm();
                }
            }
            for (int t = 0; t < t_pred; ++t) {
                col[p][static_cast<std::size_t>(t)] /= static_cast<double>(scenarios.size());
                l2[p][static_cast<std::size_t>(t)] /= static_cast<double>(scenarios.size());
            }
        }

        // aggregate across planners
        std::vector<MetricCell> col_cells, l2_cells;
        for (int t = 0; t < t_pred; ++t) {
            std::vector<double> cv, lv;
            for (std::size_t p = 0; p < planners.size(); ++p) {
                cv.push_back(col[p][static_cast<std::size_t>(t)]);
                lv.push_back(l2[p][static_cast<std::size_t>(t)]);
            }
            col_cells.push_back(eval_detail::cell_over(cv, n_rollouts));
            l2_cells.push_back(eval_detail::cell_over(lv, n_rollouts));
        }
        rep.collision.push_back(col_cells);
        rep.l2.push_back(l2_cells);

        auto average_window = [&](const std::vector<std::vector<double>>& per_planner,
                                  double lo_s, double hi_s) {
            std::vector<double> means;
            for (std::size_t p = 0; p < planners.size(); ++p) {
                double sum = 0.0;
                int count = 0;
                for (int t = 1; t <= t_pred; ++t) {
                    const double ts = t * first.dt;
                    if (ts >= lo_s - 1e-9 && ts <= hi_s + 1e-9) {
                        sum += per_planner[p][static_cast<std::size_t>(t - 1)];
                        ++count;
                    }
                }
                means.push_back(count > 0 ? sum / count : 0.0);
            }
            return eval_detail::cell_over(means, n_rollouts);
        };

        rep.collision_avg.push_back(average_window(col, first.dt, t_pred * first.dt));
        rep.l2_avg.push_back(average_window(l2, first.dt, t_pred * first.dt));

        for (std::size_t w = 0; w < cfg.segment_windows.size(); ++w) {
            if (rep.segment_collision.size() <= w) {
                rep.segment_collision.emplace_back();
                rep.segment_l2.emplace_back();
            }
            rep.segment_collision[w].push_back(
                average_window(col, cfg.segment_windows[w].first, cfg.segment_windows[w].second));
            rep.segment_l2[w].push_back(
                average_window(l2, cfg.segment_windows[w].first, cfg.segment_windows[w].second));
        }
    }
    return rep;
}

// Relative improvement of a over b per the reporting convention
// improvement(a/b) = (b - a) * 100 / b.
inline double relative_improvement(double a, double b) {
    return (b - a) * 100.0 / b;
}

// --- CSV emission -----------------------------------------------------------------

// header comment carrying attribution; every report file starts with one
inline std::string csv_header_line(const std::string& run_id, const std::string& config_hash) {
    return "# run_id=" + run_id + " config_hash=" + config_hash + "\n";
}

inline std::string per_timestep_csv(const MetricsReport& rep, const std::string& run_id,
                                    const std::string& config_hash) {
    std::string out = csv_header_line(run_id, config_hash);
    out += "t_sim_s,t_s,metric,mean,std,n\n";
    for (std::size_t f = 0; f < rep.t_sim_seconds.size(); ++f) {
        for (std::size_t t = 0; t < rep.collision[f].size(); ++t) {
            const double ts = (static_cast<double>(t) + 1.0) * rep.dt;
            out += fmt_g9(rep.t_sim_seconds[f]) + "," + fmt_g9(ts) + ",collision_rate," +
                   fmt_g9(rep.collision[f][t].mean) + "," + fmt_g9(rep.collision[f][t].stddev) +
                   "," + std::to_string(rep.collision[f][t].n) + "\n";
        }
        for (std::size_t t = 0; t < rep.l2[f].size(); ++t) {
            const double ts = (static_cast<double>(t) + 1.0) * rep.dt;
            out += fmt_g9(rep.t_sim_seconds[f]) + "," + fmt_g9(ts) + ",l2," +
                   fmt_g9(rep.l2[f][t].mean) + "," + fmt_g9(rep.l2[f][t].stddev) + "," +
                   std::to_string(rep.l2[f][t].n) + "\n";
        }
    }
    return out;
}

inline std::string segments_csv(const MetricsReport& rep, const std::string& run_id,
                                const std::string& config_hash) {
    std::string out = csv_header_line(run_id, config_hash);
    out += "t_sim_s,window_start_s,window_end_s,metric,mean,std,n\n";
    for (std::size_t w = 0; w < rep.segment_windows.size(); ++w) {
        for (std::size_t f = 0; f < rep.t_sim_seconds.size(); ++f) {
            const auto& c = rep.segment_collision[w][f];
            const auto& l = rep.segment_l2[w][f];
            const std::string prefix = fmt_g9(rep.t_sim_seconds[f]) + "," +
                                       fmt_g9(rep.segment_windows[w].first) + "," +
                                       fmt_g9(rep.segment_windows[w].second) + ",";
            out += prefix + "collision_rate," + fmt_g9(c.mean) + "," + fmt_g9(c.stddev) + "," +
                   std::to_string(c.n) + "\n";
            out += prefix + "l2," + fmt_g9(l.mean) + "," + fmt_g9(l.stddev) + "," +
                   std::to_string(l.n) + "\n";
        }
    }
    return out;
}

// Table-style summary: one row per t_sim and labeled group; when exactly two
// groups are given, appends relative-improvement rows (first over second).
inline std::string summary_csv(const std::vector<std::string>& labels,
                               const std::vector<MetricsReport>& reports,
                               const std::string& run_id, const std::string& config_hash) {
    if (labels.size() != reports.size() || reports.empty()) {
        throw ContractError("summary_csv: labels/reports mismatch");
    }
    std::string out = csv_header_line(run_id, config_hash);
    out += "row,t_sim_s,collision_mean,collision_std,l2_mean,l2_std,n\n";
    for (std::size_t g = 0; g < reports.size(); ++g) {
        const MetricsReport& rep = reports[g];
        for (std::size_t f = 0; f < rep.t_sim_seconds.size(); ++f) {
            out += labels[g] + "," + fmt_g9(rep.t_sim_seconds[f]) + "," +
                   fmt_g9(rep.collision_avg[f].mean) + "," + fmt_g9(rep.collision_avg[f].stddev) +
                   "," + fmt_g9(rep.l2_avg[f].mean) + "," + fmt_g9(rep.l2_avg[f].stddev) + "," +
                   std::to_string(rep.collision_avg[f].n) + "\n";
        }
    }
    if (reports.size() == 2) {
        const MetricsReport& a = reports[0];
        const MetricsReport& b = reports[1];
        // improvement is undefined against a zero reference; leave it blank
        auto improvement_field = [](double va, double vb) {
            return vb == 0.0 ? std::string() : fmt_g9(relative_improvement(va, vb));
        };
        for (std::size_t f = 0; f < a.t_sim_seconds.size(); ++f) {
            out += "improvement_pct(" + labels[0] + "/" + labels[1] + ")," +
                   fmt_g9(a.t_sim_seconds[f]) + "," +
                   improvement_field(a.collision_avg[f].mean, b.collision_avg[f].mean) + ",," +
                   improvement_field(a.l2_avg[f].mean, b.l2_avg[f].mean) + ",," +
                   std::to_string(a.collision_avg[f].n) + "\n";
        }
    }
    return out;
}

}  // namespace clsim
