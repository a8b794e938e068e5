#pragma once

// Closed-loop simulator.
//
// Advances the dynamic context by one rollout segment: the ego (always
// simulated) and masked surrounding agents take predicted positions with
// headings and velocities derived from positional finite differences;
// unmasked agents replay their logs verbatim. Predictions entering the
// context are detached from the gradient graph unless configured otherwise;
// scene predictions are always detached (surrounding agents are environment,
// their decoder trains only on open-loop samples).
//
// The simulator only touches the dynamic context; the map is static.

#include <optional>
#include <string>
#include <vector>

#include "clsim/autodiff.hpp"
#include "clsim/rng.hpp"
#include "clsim/scenario.hpp"

namespace clsim {

struct SimulationMask {
    std::vector<bool> flags;  // per surrounding agent; true = reactive
    double ratio = 0.0;       // sampling probability used to draw the flags
};

struct SimConfig {
    int t_sim_steps = 4;
    bool detach_between_steps = true;
    double min_speed_for_heading = 0.1;  // m/s
};

// floor((t_pred - 1) / t_sim): closed-loop samples per open-loop sample
inline int rollout_count(int t_pred_steps, int t_sim_steps) {
    if (t_sim_steps < 1 || t_sim_steps > t_pred_steps) {
        throw ContractError("rollout_count: need 1 <= t_sim_steps <= t_pred_steps");
    }
    return (t_pred_steps - 1) / t_sim_steps;
}

inline SimulationMask sample_mask(SeedStream& stream, int n_surrounding, double ratio) {
    if (ratio < 0.0 || ratio > 1.0) throw ContractError("sample_mask: ratio outside [0, 1]");
    SimulationMask m;
    m.ratio = ratio;
    m.flags.reserve(static_cast<std::size_t>(n_surrounding));
    for (int i = 0; i < n_surrounding; ++i) m.flags.push_back(stream.bernoulli(ratio));
    return m;
}

// Track indices of surrounding (non-ego) agents, in track order; this is the
// order the mask flags and scene predictions are aligned to.
inline std::vector<std::size_t> surrounding_indices(const Scenario& s) {
    std::vector<std::size_t> out;
    const std::size_t ego = s.ego_index();
    for (std::size_t a = 0; a < s.tracks.size(); ++a) {
        if (a != ego) out.push_back(a);
    }
    return out;
}

// Dynamic context in tape form. window[track] is a [t_in_steps + 1, 5]
// matrix with columns (x, y, heading, vx, vy); valid mirrors per-slot
// validity as plain flags.
struct AdContext {
    int anchor_step = 0;
    int t_in_steps = 0;
    std::vector<ad::Value> window;
    std::vector<std::vector<bool>> valid;
};

inline ad::Matrix state_row(const AgentState& st) {
    ad::Matrix m(1, 5);
    m.data = {st.position.x, st.position.y, st.heading, st.velocity.x, st.velocity.y};
    return m;
}

inline AdContext ad_context(ad::Tape& tape, const DynamicContext& ctx) {
    AdContext out;
    out.anchor_step = ctx.anchor_step;
    out.t_in_steps = ctx.t_in_steps;
    for (const auto& w : ctx.window) {
        ad::Matrix m(static_cast<int>(w.size()), 5);
        std::vector<bool> valid;
        for (std::size_t k = 0; k < w.size(); ++k) {
            const auto& st = w[k];
            m.at(static_cast<int>(k), 0) = st.position.x;
            m.at(static_cast<int>(k), 1) = st.position.y;
            m.at(static_cast<int>(k), 2) = st.heading;
            m.at(static_cast<int>(k), 3) = st.velocity.x;
            m.at(static_cast<int>(k), 4) = st.velocity.y;
            valid.push_back(st.valid);
        }
        out.window.push_back(tape.constant(std::move(m)));
        out.valid.push_back(std::move(valid));
    }
    return out;
}

inline DynamicContext plain_context(const AdContext& ctx) {
    DynamicContext out;
    out.anchor_step = ctx.anchor_step;
    out.t_in_steps = ctx.t_in_steps;
    for (std::size_t a = 0; a < ctx.window.size(); ++a) {
        const ad::Matrix& m = ctx.window[a].val();
        std::vector<AgentState> w;
        for (int k = 0; k < m.rows; ++k) {
            AgentState st;
            st.position = {m.at(k, 0), m.at(k, 1)};
            st.heading = m.at(k, 2);
            st.velocity = {m.at(k, 3), m.at(k, 4)};
            st.valid = ctx.valid[a][static_cast<std::size_t>(k)];
            w.push_back(st);
        }
        out.window.push_back(std::move(w));
    }
    return out;
}

// Pose (x, y, heading) of a track's anchor state as a [1, 3] value.
inline ad::Value anchor_pose(const AdContext& ctx, std::size_t track) {
    const ad::Value& w = ctx.window[track];
    return ad::slice_cols(ad::slice_rows(w, w.rows() - 1, w.rows()), 0, 3);
}

namespace detail_sim {

inline void check_finite_positions(const ad::Matrix& pos, int agent_id, int anchor_step) {
    for (int i = 0; i < pos.rows; ++i) {
        if (!std::isfinite(pos.at(i, 0)) || !std::isfinite(pos.at(i, 1))) {
            throw SimulationError("non-finite predicted position for agent " +
                                  std::to_string(agent_id) + " at step " +
                                  std::to_string(anchor_step + 1 + i));
        }
    }
}

}  // namespace detail_sim

// One simulation rollout segment (tape form).
//
// ego_pred: [t_sim_steps, 2] world-frame positions for steps
// anchor+1..anchor+t_sim. scene_preds: per surrounding agent (aligned with
// surrounding_indices), each [t_sim_steps, 2] or undefined when the agent
// was not decoded; masked agents without a prediction fall back to log
// replay. Logs come from the scenario tracks.
inline AdContext simulate_step_ad(ad::Tape& tape, const AdContext& ctx, const Scenario& scn,
                                  const ad::Value& ego_pred,
                                  const std::vector<ad::Value>& scene_preds,
                                  const SimulationMask& mask, const SimConfig& cfg) {
    const int t_sim = cfg.t_sim_steps;
    const int window_len = ctx.t_in_steps + 1;
    if (t_sim < 1) throw ContractError("simulate_step: t_sim_steps must be >= 1");
    if (ctx.anchor_step + t_sim > scn.total_steps() - 1) {
        throw ContractError("simulate_step: rollout window exceeds the log horizon");
    }
    if (ctx.window.size() != scn.tracks.size()) {
        throw ContractError("simulate_step: context/scenario track count mismatch");
    }
    const auto surrounding = surrounding_indices(scn);
    if (mask.flags.size() != surrounding.size()) {
        throw ContractError("simulate_step: mask covers " + std::to_string(mask.flags.size()) +
                            " agents, expected " + std::to_string(surrounding.size()));
    }
    if (scene_preds.size() != surrounding.size()) {
        throw ContractError("simulate_step: scene prediction count mismatch");
    }
    if (ego_pred.rows() != t_sim || ego_pred.cols() != 2) {
        throw ContractError("simulate_step: ego prediction must be [t_sim_steps, 2]");
    }

    const std::size_t ego = scn.ego_index();
    AdContext out;
    out.anchor_step = ctx.anchor_step + t_sim;
    out.t_in_steps = ctx.t_in_steps;
    out.window.resize(ctx.window.size());
    out.valid.resize(ctx.window.size());

    // surrounding agent position in the mask/prediction arrays
    std::vector<int> sur_slot(scn.tracks.size(), -1);
    for (std::size_t j = 0; j < surrounding.size(); ++j) {
        sur_slot[surrounding[j]] = static_cast<int>(j);
    }

    for (std::size_t a = 0; a < scn.tracks.size(); ++a) {
        const AgentTrack& track = scn.tracks[a];
        const bool is_ego = a == ego;
        const int slot = sur_slot[a];
        const bool reactive = is_ego || mask.flags[static_cast<std::size_t>(slot)];

        ad::Value new_rows;
        std::vector<bool> new_valid;

        if (is_ego) {
            detail_sim::check_finite_positions(ego_pred.val(), track.agent_id, ctx.anchor_step);
            ad::Value positions =
                cfg.detach_between_steps ? ad::stop_gradient(ego_pred) : ego_pred;
            const ad::Value prev = anchor_pose(ctx, a);
            new_rows = ad::path_kinematics(prev, positions, scn.dt, cfg.min_speed_for_heading);
            new_valid.assign(static_cast<std::size_t>(t_sim), true);
        } else if (reactive && scene_preds[static_cast<std::size_t>(slot)].defined()) {
            // reactive surrounding agent: predicted positions while the log is
            // valid, frozen in place afterwards; always gradient-detached
            const ad::Matrix& pred = scene_preds[static_cast<std::size_t>(slot)].val();
            if (pred.rows != t_sim || pred.cols != 2) {
                throw ContractError("simulate_step: scene prediction for agent " +
                                    std::to_string(track.agent_id) + " must be [t_sim_steps, 2]");
            }
            detail_sim::check_finite_positions(pred, track.agent_id, ctx.anchor_step);
            ad::Matrix pos(t_sim, 2);
            const ad::Matrix& old_window = ctx.window[a].val();
            double last_x = old_window.at(window_len - 1, 0);
            double last_y = old_window.at(window_len - 1, 1);
            for (int i = 0; i < t_sim; ++i) {
                const int step = ctx.anchor_step + 1 + i;
                if (track.states[static_cast<std::size_t>(step)].valid) {
                    last_x = pred.at(i, 0);
                    last_y = pred.at(i, 1);
                }
                pos.at(i, 0) = last_x;
                pos.at(i, 1) = last_y;
            }
            const ad::Value positions = tape.constant(std::move(pos));
            const ad::Value prev = ad::stop_gradient(anchor_pose(ctx, a));
            new_rows = ad::path_kinematics(prev, positions, scn.dt, cfg.min_speed_for_heading);
            new_valid.assign(static_cast<std::size_t>(t_sim), true);
        } else {
            // log replay: states verbatim, including validity
            ad::Matrix rows(t_sim, 5);
            for (int i = 0; i < t_sim; ++i) {
                const int step = ctx.anchor_step + 1 + i;
                const AgentState& st = track.states[static_cast<std::size_t>(step)];
                rows.at(i, 0) = st.position.x;
                rows.at(i, 1) = st.position.y;
                rows.at(i, 2) = st.heading;
                rows.at(i, 3) = st.velocity.x;
                rows.at(i, 4) = st.velocity.y;
                new_valid.push_back(st.valid);
            }
            new_rows = tape.constant(std::move(rows));
        }

        // slide the window: keep the most recent t_in_steps + 1 states
        ad::Value merged = ad::concat_rows({ctx.window[a], new_rows});
        std::vector<bool> merged_valid = ctx.valid[a];
        merged_valid.insert(merged_valid.end(), new_valid.begin(), new_valid.end());
        const int total_rows = merged.rows();
        ad::Value window = ad::slice_rows(merged, total_rows - window_len, total_rows);
        if (cfg.detach_between_steps) window = ad::stop_gradient(window);
        out.window[a] = window;
        out.valid[a].assign(merged_valid.end() - window_len, merged_valid.end());
    }
    return out;
}

// Plain-data convenience wrapper used by evaluation and tests.
inline DynamicContext simulate_step(const DynamicContext& ctx, const Scenario& scn,
                                    const std::vector<Vec2>& ego_pred,
                                    const std::vector<std::optional<std::vector<Vec2>>>& scene_pred,
                                    const SimulationMask& mask, const SimConfig& cfg) {
    ad::Tape tape;
    tape.grad_enabled = false;
    AdContext actx = ad_context(tape, ctx);
    ad::Matrix ego(static_cast<int>(ego_pred.size()), 2);
    for (std::size_t i = 0; i < ego_pred.size(); ++i) {
        ego.at(static_cast<int>(i), 0) = ego_pred[i].x;
        ego.at(static_cast<int>(i), 1) = ego_pred[i].y;
    }
    std::vector<ad::Value> scene;
    for (const auto& sp : scene_pred) {
        if (!sp.has_value()) {
            scene.push_back(ad::Value{});
            continue;
        }
        ad::Matrix m(static_cast<int>(sp->size()), 2);
        for (std::size_t i = 0; i < sp->size(); ++i) {
            m.at(static_cast<int>(i), 0) = (*sp)[i].x;
            m.at(static_cast<int>(i), 1) = (*sp)[i].y;
        }
        scene.push_back(tape.constant(std::move(m)));
    }
    const AdContext next =
        simulate_step_ad(tape, actx, scn, tape.constant(std::move(ego)), scene, mask, cfg);
    return plain_context(next);
}

}  // namespace clsim
