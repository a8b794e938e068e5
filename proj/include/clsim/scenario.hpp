#pragma once

// Scenario data model: static map polylines plus per-agent state tracks
// sampled at a fixed dt, one designated ego agent. Tracks hold
// t_in_steps history states followed by t_pred_steps future states.
//
// Step indexing convention used everywhere: track state index is the
// absolute step; the last history state (index t_in_steps - 1) is "now"
// for the initial context, and prediction step t (1-based, t = 1..T_pred)
// maps to absolute index t_in_steps - 1 + t.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "clsim/common.hpp"
#include "clsim/geometry.hpp"

namespace clsim {

enum class PolylineKind { lane_center, boundary, crosswalk };

inline const char* to_string(PolylineKind k) {
    switch (k) {
        case PolylineKind::lane_center: return "lane_center";
        case PolylineKind::boundary: return "boundary";
        case PolylineKind::crosswalk: return "crosswalk";
    }
    return "?";
}

inline PolylineKind polyline_kind_from_string(const std::string& s) {
    if (s == "lane_center") return PolylineKind::lane_center;
    if (s == "boundary") return PolylineKind::boundary;
    if (s == "crosswalk") return PolylineKind::crosswalk;
    throw ParseError("unknown polyline kind '" + s + "'");
}

struct MapPolyline {
    int id = 0;
    std::vector<Vec2> points;  // >= 2, consecutive points distinct
    PolylineKind kind = PolylineKind::lane_center;
};

struct AgentState {
    Vec2 position;
    double heading = 0.0;  // radians in (-pi, pi]
    Vec2 velocity;
    bool valid = false;

    static AgentState invalid_state() { return {}; }
};

struct AgentTrack {
    int agent_id = 0;
    bool is_ego = false;
    double length = 4.5;  // m
    double width = 2.0;   // m
    std::vector<AgentState> states;  // t_in_steps + t_pred_steps entries
};

struct Scenario {
    std::string scenario_id;
    double dt = 0.5;        // s
    int t_in_steps = 2;     // history horizon (1 s at dt = 0.5)
    int t_pred_steps = 12;  // prediction horizon (6 s at dt = 0.5)
    std::vector<MapPolyline> map;
    std::vector<AgentTrack> tracks;

    int total_steps() const { return t_in_steps + t_pred_steps; }
    // absolute index of "now" for the initial context
    int anchor0() const { return t_in_steps - 1; }

    std::size_t ego_index() const {
        for (std::size_t i = 0; i < tracks.size(); ++i) {
            if (tracks[i].is_ego) return i;
        }
        throw ValidationError("scenario '" + scenario_id + "' has no ego track");
    }
};

inline bool finite(double v) { return std::isfinite(v); }
inline bool finite(const Vec2& v) { return finite(v.x) && finite(v.y); }

inline void validate_scenario(const Scenario& s) {
    const std::string id = "scenario '" + s.scenario_id + "'";
    if (!(s.dt > 0.0)) throw ValidationError(id + ": dt must be > 0");
    if (s.t_in_steps < 1) throw ValidationError(id + ": t_in_steps must be >= 1");
    if (s.t_pred_steps < 1) throw ValidationError(id + ": t_pred_steps must be >= 1");

    for (const auto& pl : s.map) {
        const std::string where = id + ", polyline " + std::to_string(pl.id);
        if (pl.points.size() < 2) throw ValidationError(where + ": needs >= 2 points");
        for (std::size_t i = 0; i < pl.points.size(); ++i) {
            if (!finite(pl.points[i])) throw ValidationError(where + ": non-finite point");
            if (i > 0 && (pl.points[i] - pl.points[i - 1]).norm() == 0.0) {
                throw ValidationError(where + ": consecutive duplicate point " +
                                      std::to_string(i));
            }
        }
    }

    int n_ego = 0;
    for (const auto& tr : s.tracks) {
        const std::string where = id + ", agent " + std::to_string(tr.agent_id);
        if (tr.is_ego) ++n_ego;
        if (!(tr.length > 0.0)) throw ValidationError(where + ": length must be > 0");
        if (!(tr.width > 0.0)) throw ValidationError(where + ": width must be > 0");
        if (static_cast<int>(tr.states.size()) != s.total_steps()) {
            throw ValidationError(where + ": has " + std::to_string(tr.states.size()) +
                                  " states, expected " + std::to_string(s.total_steps()));
        }
        // validity must be one contiguous prefix-aligned run: valid states
        // first, invalid afterwards, never valid again
        bool seen_invalid = false;
        for (std::size_t t = 0; t < tr.states.size(); ++t) {
            const auto& st = tr.states[t];
            if (st.valid && seen_invalid) {
                throw ValidationError(where + ": validity gap at step " + std::to_string(t));
            }
            if (!st.valid) seen_invalid = true;
            if (!finite(st.position) || !finite(st.velocity) || !finite(st.heading)) {
                throw ValidationError(where + ": non-finite state at step " +
                                      std::to_string(t));
            }
            if (st.valid &&
                (st.heading <= -3.14159265358979324 || st.heading > 3.14159265358979324)) {
                throw ValidationError(where + ": heading out of (-pi, pi] at step " +
                                      std::to_string(t));
            }
        }
        if (tr.is_ego) {
            for (std::size_t t = 0; t < tr.states.size(); ++t) {
                if (!tr.states[t].valid) {
                    throw ValidationError(where + ": ego track must be fully valid");
                }
            }
        }
    }
    if (n_ego != 1) {
        throw ValidationError(id + ": expected exactly one ego track, found " +
                              std::to_string(n_ego));
    }
}

// --- dynamic context --------------------------------------------------------

// Sliding window of agent states ending at anchor_step. Window length is
// t_in_steps + 1 so the state at the anchor itself is always present (the
// simulator needs it for the first finite difference). Tracks only record
// t_in_steps of history, so the slot before the recorded history is
// backfilled by constant-velocity extrapolation from the oldest valid state;
// this keeps the window structure identical between the initial context and
// simulator-produced ones. If the oldest state is invalid the slot stays
// invalid.
struct DynamicContext {
    int anchor_step = 0;
    int t_in_steps = 0;
    std::vector<std::vector<AgentState>> window;  // [track][t_in_steps + 1]
};

inline DynamicContext initial_context(const Scenario& s) {
    DynamicContext ctx;
    ctx.anchor_step = s.anchor0();
    ctx.t_in_steps = s.t_in_steps;
    ctx.window.resize(s.tracks.size());
    for (std::size_t a = 0; a < s.tracks.size(); ++a) {
        auto& w = ctx.window[a];
        w.resize(static_cast<std::size_t>(s.t_in_steps) + 1);
        for (int k = 0; k <= s.t_in_steps; ++k) {
            const int step = ctx.anchor_step - s.t_in_steps + k;
            if (step >= 0) {
                w[static_cast<std::size_t>(k)] =
                    s.tracks[a].states[static_cast<std::size_t>(step)];
            } else {
                const AgentState& oldest = s.tracks[a].states[0];
                AgentState st = oldest;
                st.position = oldest.position + oldest.velocity * (step * s.dt);
                st.valid = oldest.valid;
                w[static_cast<std::size_t>(k)] = st;
            }
        }
    }
    return ctx;
}

// --- ground truth ------------------------------------------------------------

struct GroundTruth {
    std::vector<Vec2> y_ego;                      // t_pred_steps positions
    std::vector<std::size_t> scene_track_index;   // row -> track index
    std::vector<std::vector<Vec2>> scene_pos;     // [agent][t_pred_steps]
    std::vector<std::vector<bool>> scene_valid;   // [agent][t_pred_steps]
};

inline GroundTruth extract_ground_truth(const Scenario& s) {
    validate_scenario(s);
    GroundTruth gt;
    const std::size_t ego = s.ego_index();
    gt.y_ego.reserve(static_cast<std::size_t>(s.t_pred_steps));
    for (int t = 0; t < s.t_pred_steps; ++t) {
        gt.y_ego.push_back(
            s.tracks[ego].states[static_cast<std::size_t>(s.t_in_steps + t)].position);
    }
    for (std::size_t a = 0; a < s.tracks.size(); ++a) {
        if (a == ego) continue;
        gt.scene_track_index.push_back(a);
        std::vector<Vec2> pos;
        std::vector<bool> valid;
        for (int t = 0; t < s.t_pred_steps; ++t) {
            const auto& st = s.tracks[a].states[static_cast<std::size_t>(s.t_in_steps + t)];
            pos.push_back(st.position);
            valid.push_back(st.valid);
        }
        gt.scene_pos.push_back(std::move(pos));
        gt.scene_valid.push_back(std::move(valid));
    }
    return gt;
}

}  // namespace clsim
