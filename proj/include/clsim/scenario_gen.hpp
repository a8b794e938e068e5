#pragma once

// Synthetic dense-intersection scenarios.
//
// A 4-way intersection with right-hand traffic: straight, left-turn and
// right-turn routes built from line segments and circular arcs. Agents
// follow their route at constant speed, so positions have a closed form
// and headings/velocities are finite differences of exact positions.
// Conflict timing is controlled by `density`: a conflict-timed agent
// reaches the junction close to when the ego does.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "clsim/rng.hpp"
#include "clsim/scenario.hpp"

namespace clsim {

namespace gen {

constexpr double kLaneHalf = 1.75;   // lane center offset from road axis, m
constexpr double kRoadHalf = 3.5;    // road half width, m
constexpr double kApproach = 90.0;   // approach length, m

struct PathSegment {
    bool is_arc = false;
    // line: from a in unit direction d for `len`
    // arc: center a, radius r, start angle ang0, signed sweep (len = |sweep| * r)
    Vec2 a;
    Vec2 d;
    double r = 0.0;
    double ang0 = 0.0;
    double sweep = 0.0;
    double len = 0.0;
};

// Piecewise line/arc path; evaluable for any arclength by extending the
// first/last segment tangentially.
struct Route {
    std::vector<PathSegment> segments;
    double total_len = 0.0;

    Vec2 point_at(double s) const {
        if (segments.empty()) return {};
        double remaining = s;
        if (s < 0.0) {
            const auto& seg = segments.front();
            const Vec2 p0 = eval(seg, 0.0);
            const Vec2 tan = tangent(seg, 0.0);
            return p0 + tan * s;
        }
        for (const auto& seg : segments) {
            if (remaining <= seg.len) return eval(seg, remaining);
            remaining -= seg.len;
        }
        const auto& seg = segments.back();
        const Vec2 p1 = eval(seg, seg.len);
        const Vec2 tan = tangent(seg, seg.len);
        return p1 + tan * remaining;
    }

    static Vec2 eval(const PathSegment& seg, double s) {
        if (!seg.is_arc) return seg.a + seg.d * s;
        const double ang = seg.ang0 + (seg.sweep >= 0 ? 1.0 : -1.0) * s / seg.r;
        return seg.a + Vec2{seg.r * std::cos(ang), seg.r * std::sin(ang)};
    }

    static Vec2 tangent(const PathSegment& seg, double s) {
        if (!seg.is_arc) return seg.d;
        const double sign = seg.sweep >= 0 ? 1.0 : -1.0;
        const double ang = seg.ang0 + sign * s / seg.r;
        return {-sign * std::sin(ang), sign * std::cos(ang)};
    }
};

inline PathSegment line_seg(Vec2 from, Vec2 to) {
    PathSegment seg;
    seg.a = from;
    const Vec2 delta = to - from;
    seg.len = delta.norm();
    seg.d = delta / seg.len;
    return seg;
}

inline PathSegment arc_seg(Vec2 center, double radius, double ang0, double sweep) {
    PathSegment seg;
    seg.is_arc = true;
    seg.a = center;
    seg.r = radius;
    seg.ang0 = ang0;
    seg.sweep = sweep;
    seg.len = std::abs(sweep) * radius;
    return seg;
}

enum class Maneuver { straight, right, left };

// Entry direction d in {0: from west heading +x, 1: from south heading +y,
// 2: from east heading -x, 3: from north heading -y}. Routes are built in
// the canonical west-entry frame and rotated by d * 90 degrees.
inline Route make_route(int entry_dir, Maneuver m) {
    std::vector<PathSegment> segs;
    const Vec2 entry_start{-kApproach, -kLaneHalf};
    const Vec2 entry_end{-kRoadHalf, -kLaneHalf};
    segs.push_back(line_seg(entry_start, entry_end));
    switch (m) {
        case Maneuver::straight:
            segs.push_back(line_seg(entry_end, {kApproach, -kLaneHalf}));
            break;
        case Maneuver::right:
            // quarter arc to the southbound exit lane x = -kLaneHalf
            segs.push_back(arc_seg({-kRoadHalf, -kRoadHalf}, kRoadHalf - kLaneHalf,
                                   1.5707963267948966, -1.5707963267948966));
            segs.push_back(line_seg({-kLaneHalf, -kRoadHalf}, {-kLaneHalf, -kApproach}));
            break;
        case Maneuver::left:
            // quarter arc to the northbound exit lane x = +kLaneHalf
            segs.push_back(arc_seg({-kRoadHalf, kRoadHalf}, kRoadHalf + kLaneHalf,
                                   -1.5707963267948966, 1.5707963267948966));
            segs.push_back(line_seg({kLaneHalf, kRoadHalf}, {kLaneHalf, kApproach}));
            break;
    }
    Route route;
    const double rot = 1.5707963267948966 * entry_dir;
    for (auto seg : segs) {
        seg.a = rotate(seg.a, rot);
        if (seg.is_arc) {
            seg.ang0 += rot;
        } else {
            seg.d = rotate(seg.d, rot);
        }
        route.total_len += seg.len;
        route.segments.push_back(seg);
    }
    return route;
}

// arclength where the route crosses into the junction box
inline double junction_entry_arclength() { return kApproach - kRoadHalf; }

inline std::vector<MapPolyline> intersection_map() {
    std::vector<MapPolyline> map;
    int id = 0;
    auto add = [&](PolylineKind kind, std::vector<Vec2> pts) {
        MapPolyline pl;
        pl.id = id++;
        pl.kind = kind;
        pl.points = std::move(pts);
        map.push_back(std::move(pl));
    };
    const double L = kApproach;
    // lane centers, one entry lane per arm
    add(PolylineKind::lane_center, {{-L, -kLaneHalf}, {L, -kLaneHalf}});
    add(PolylineKind::lane_center, {{kLaneHalf, -L}, {kLaneHalf, L}});
    add(PolylineKind::lane_center, {{L, kLaneHalf}, {-L, kLaneHalf}});
    add(PolylineKind::lane_center, {{-kLaneHalf, L}, {-kLaneHalf, -L}});
    // road edges
    add(PolylineKind::boundary, {{-L, -kRoadHalf}, {-kRoadHalf, -kRoadHalf}});
    add(PolylineKind::boundary, {{kRoadHalf, -kRoadHalf}, {L, -kRoadHalf}});
    add(PolylineKind::boundary, {{-L, kRoadHalf}, {-kRoadHalf, kRoadHalf}});
    add(PolylineKind::boundary, {{kRoadHalf, kRoadHalf}, {L, kRoadHalf}});
    // crosswalks across each arm just outside the junction box
    const double cw = kRoadHalf + 2.0;
    add(PolylineKind::crosswalk, {{-cw, -kRoadHalf}, {-cw, kRoadHalf}});
    add(PolylineKind::crosswalk, {{cw, -kRoadHalf}, {cw, kRoadHalf}});
    add(PolylineKind::crosswalk, {{-kRoadHalf, -cw}, {kRoadHalf, -cw}});
    add(PolylineKind::crosswalk, {{-kRoadHalf, cw}, {kRoadHalf, cw}});
    return map;
}

// Sample a track along `route`: position is analytic; velocity and heading
// come from the position deltas so the track is kinematically exact under
// the simulator's finite-difference convention.
inline AgentTrack track_from_route(const Route& route, double s0, double speed, double dt,
                                   int total_steps, int agent_id, bool is_ego) {
    AgentTrack tr;
    tr.agent_id = agent_id;
    tr.is_ego = is_ego;
    tr.length = 4.5;
    tr.width = 2.0;
    tr.states.resize(static_cast<std::size_t>(total_steps));
    std::vector<Vec2> pos(static_cast<std::size_t>(total_steps));
    for (int t = 0; t < total_steps; ++t) {
        pos[static_cast<std::size_t>(t)] = route.point_at(s0 + speed * dt * t);
    }
    double prev_heading = 0.0;
    for (int t = 0; t < total_steps; ++t) {
        const std::size_t i = static_cast<std::size_t>(t);
        const Vec2 delta = t == 0 ? pos[1] - pos[0] : pos[i] - pos[i - 1];
        double heading = prev_heading;
        if (delta.norm() / dt >= 0.1) heading = std::atan2(delta.y, delta.x);
        AgentState st;
        st.position = pos[i];
        st.heading = heading;
        st.velocity = delta / dt;
        st.valid = true;
        tr.states[i] = st;
        prev_heading = heading;
    }
    return tr;
}

// min distance from point p to the piecewise-linear ego ground-truth path
inline double distance_to_polyline(const Vec2& p, const std::vector<Vec2>& poly) {
    double best = (p - poly.front()).norm();
    for (std::size_t i = 0; i + 1 < poly.size(); ++i) {
        const Vec2 a = poly[i];
        const Vec2 b = poly[i + 1];
        const Vec2 ab = b - a;
        const double den = ab.norm_sq();
        double u = den > 0.0 ? (p - a).dot(ab) / den : 0.0;
        u = std::min(1.0, std::max(0.0, u));
        best = std::min(best, (p - (a + ab * u)).norm());
    }
    return best;
}

}  // namespace gen

// Deterministic in (seed, n_agents, density). The ego enters the junction
// during the prediction window; at density = 1 at least one surrounding
// ground-truth track passes within 5 m of the ego ground-truth path.
inline Scenario generate_intersection(std::uint64_t seed, int n_agents, double density) {
    if (n_agents < 2) throw ConfigError("generate_intersection: n_agents must be >= 2");
    if (!(density > 0.0 && density <= 1.0)) {
        throw ConfigError("generate_intersection: density must be in (0, 1]");
    }
    SeedStream rng(seed, "intersection-gen");

    Scenario s;
    s.scenario_id = "ix-" + std::to_string(seed);
    s.dt = 0.5;
    s.t_in_steps = 2;
    s.t_pred_steps = 12;
    s.map = gen::intersection_map();

    const int total = s.total_steps();
    // track step 0 sits this many seconds before "now" (the anchor step)
    const double t_hist = s.anchor0() * s.dt;

    // ego: reaches the junction box 1.5..4.5 s into the prediction window
    const int ego_dir = static_cast<int>(rng.uniform_int(4));
    const auto ego_maneuver = static_cast<gen::Maneuver>(rng.uniform_int(3));
    const double ego_speed = rng.uniform(5.0, 10.0);
    const double ego_cross_t = rng.uniform(1.5, 4.5);
    const gen::Route ego_route = gen::make_route(ego_dir, ego_maneuver);
    // s0 is the arclength at track step 0 (t_hist seconds before "now")
    const double ego_s0 =
        gen::junction_entry_arclength() - ego_speed * (ego_cross_t + t_hist);
    s.tracks.push_back(
        gen::track_from_route(ego_route, ego_s0, ego_speed, s.dt, total, 0, true));

    for (int a = 1; a < n_agents; ++a) {
        // Conflict-timed agents enter on a different arm and cross the
        // junction shortly before or after the ego: their paths pass within
        // box-contact distance of the ego path, but the logs themselves
        // stay collision-free, so recorded collisions trace back to ego
        // drift. Free agents are spread over a wide time range.
        const bool conflicting = rng.bernoulli(density);
        // surrounding agents enter on the other three arms: sharing the ego's
        // entry lane at a different constant speed would collide in the logs
        const int dir = (ego_dir + 1 + static_cast<int>(rng.uniform_int(3))) % 4;
        const auto maneuver = static_cast<gen::Maneuver>(rng.uniform_int(3));
        const double speed = rng.uniform(3.0, 12.0);
        const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
        const double cross_t = conflicting ? ego_cross_t + sign * rng.uniform(0.7, 1.6)
                                           : rng.uniform(-2.0, 8.0);
        const gen::Route route = gen::make_route(dir, maneuver);
        const double s0 = gen::junction_entry_arclength() - speed * (cross_t + t_hist);
        s.tracks.push_back(gen::track_from_route(route, s0, speed, s.dt, total, a, false));
    }

    if (density == 1.0) {
        // enforce the interaction guarantee directly if sampling missed it
        const GroundTruth gt = extract_ground_truth(s);
        double best = 1e30;
        for (const auto& agent_pos : gt.scene_pos) {
            for (const auto& p : agent_pos) best = std::min(best, gen::distance_to_polyline(p, gt.y_ego));
        }
        if (best > 5.0) {
            const int dir = (ego_dir + 1) % 4;
            const gen::Route route = gen::make_route(dir, gen::Maneuver::straight);
            const double speed = 8.0;
            const double s0 =
                gen::junction_entry_arclength() - speed * (ego_cross_t + t_hist);
            s.tracks.back() =
                gen::track_from_route(route, s0, speed, s.dt, total, n_agents - 1, false);
        }
    }

    validate_scenario(s);
    return s;
}

}  // namespace clsim
