#pragma once

// On-disk scenario format plus the flat-CSV importer for hand-converted
// external logs.
//
// Scenario files are canonical JSON (see jsonio.hpp): fixed key order,
// numbers at 9 significant digits. Canonicalization is idempotent, so
// serialize(parse(text)) is byte-stable and re-serializing a loaded file
// reproduces it exactly.

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "clsim/jsonio.hpp"
#include "clsim/scenario.hpp"

namespace clsim {

inline Json scenario_to_json(const Scenario& s) {
    Json doc;
    doc["format_version"] = 1;
    doc["scenario_id"] = s.scenario_id;
    doc["dt"] = s.dt;
    doc["t_in_steps"] = s.t_in_steps;
    doc["t_pred_steps"] = s.t_pred_steps;
    Json map = Json::array();
    for (const auto& pl : s.map) {
        Json jp;
        jp["id"] = pl.id;
        jp["kind"] = to_string(pl.kind);
        Json pts = Json::array();
        for (const auto& p : pl.points) pts.push_back(Json::array({p.x, p.y}));
        jp["points"] = std::move(pts);
        map.push_back(std::move(jp));
    }
    doc["map"] = std::move(map);
    Json tracks = Json::array();
    for (const auto& tr : s.tracks) {
        Json jt;
        jt["agent_id"] = tr.agent_id;
        jt["is_ego"] = tr.is_ego;
        jt["length"] = tr.length;
        jt["width"] = tr.width;
        Json states = Json::array();
        for (const auto& st : tr.states) {
            states.push_back(Json::array({st.position.x, st.position.y, st.heading,
                                          st.velocity.x, st.velocity.y,
                                          st.valid ? 1 : 0}));
        }
        jt["states"] = std::move(states);
        tracks.push_back(std::move(jt));
    }
    doc["tracks"] = std::move(tracks);
    return doc;
}

inline std::string serialize_scenario(const Scenario& s) {
    return to_canonical_text(scenario_to_json(s));
}

inline void save_scenario(const Scenario& s, const std::string& path) {
    validate_scenario(s);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << serialize_scenario(s);
    if (!f) throw IoError("write failed: " + path);
}

inline Scenario parse_scenario(const std::string& text, const std::string& origin) {
    const Json doc = parse_json_text(text, origin);
    if (!doc.is_object()) throw ParseError(origin + ": top level must be an object");
    require_keys(doc, origin, {"format_version", "scenario_id", "dt", "t_in_steps",
                               "t_pred_steps", "map", "tracks"});
    const long long version = get_int(doc, origin, "format_version");
    if (version != 1) {
        throw ParseError(origin + ": unsupported format_version " + std::to_string(version));
    }
    Scenario s;
    s.scenario_id = get_string(doc, origin, "scenario_id");
    s.dt = get_double(doc, origin, "dt");
    s.t_in_steps = static_cast<int>(get_int(doc, origin, "t_in_steps"));
    s.t_pred_steps = static_cast<int>(get_int(doc, origin, "t_pred_steps"));

    const Json& map = get_field(doc, origin, "map");
    if (!map.is_array()) throw ParseError(origin + ".map must be an array");
    for (std::size_t i = 0; i < map.size(); ++i) {
        const std::string where = origin + ".map[" + std::to_string(i) + "]";
        const Json& jp = map[i];
        if (!jp.is_object()) throw ParseError(where + " must be an object");
        require_keys(jp, where, {"id", "kind", "points"});
        MapPolyline pl;
        pl.id = static_cast<int>(get_int(jp, where, "id"));
        pl.kind = polyline_kind_from_string(get_string(jp, where, "kind"));
        const Json& pts = get_field(jp, where, "points");
        if (!pts.is_array()) throw ParseError(where + ".points must be an array");
        for (const auto& p : pts) {
            if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
                throw ParseError(where + ".points entries must be [x, y]");
            }
            pl.points.push_back({p[0].get<double>(), p[1].get<double>()});
        }
        s.map.push_back(std::move(pl));
    }

    const Json& tracks = get_field(doc, origin, "tracks");
    if (!tracks.is_array()) throw ParseError(origin + ".tracks must be an array");
    for (std::size_t i = 0; i < tracks.size(); ++i) {
        const std::string where = origin + ".tracks[" + std::to_string(i) + "]";
        const Json& jt = tracks[i];
        if (!jt.is_object()) throw ParseError(where + " must be an object");
        require_keys(jt, where, {"agent_id", "is_ego", "length", "width", "states"});
        AgentTrack tr;
        tr.agent_id = static_cast<int>(get_int(jt, where, "agent_id"));
        tr.is_ego = get_bool(jt, where, "is_ego");
        tr.length = get_double(jt, where, "length");
        tr.width = get_double(jt, where, "width");
        const Json& states = get_field(jt, where, "states");
        if (!states.is_array()) throw ParseError(where + ".states must be an array");
        for (std::size_t t = 0; t < states.size(); ++t) {
            const Json& st = states[t];
            if (!st.is_array() || st.size() != 6) {
                throw ParseError(where + ".states[" + std::to_string(t) +
                                 "] must be [x, y, heading, vx, vy, valid]");
            }
            for (const auto& e : st) {
                if (!e.is_number()) {
                    throw ParseError(where + ".states[" + std::to_string(t) +
                                     "] entries must be numbers");
                }
            }
            const double valid_flag = st[5].get<double>();
            if (valid_flag != 0.0 && valid_flag != 1.0) {
                throw ParseError(where + ".states[" + std::to_string(t) +
                                 "] valid flag must be 0 or 1");
            }
            AgentState a;
            a.position = {st[0].get<double>(), st[1].get<double>()};
            a.heading = st[2].get<double>();
            a.velocity = {st[3].get<double>(), st[4].get<double>()};
            a.valid = valid_flag == 1.0;
            tr.states.push_back(a);
        }
        s.tracks.push_back(std::move(tr));
    }

    validate_scenario(s);
    return s;
}

inline Scenario load_scenario(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_scenario(buf.str(), path);
}

// --- flat CSV importer -------------------------------------------------------

// Accepts the documented flat log:
//   scenario_id,agent_id,step,x,y,heading,vx,vy,is_ego,length,width
// Rows may cover several scenarios; steps absent from the log become
// invalid states. dt and the horizon split are supplied by the caller
// because the flat format does not carry them.
inline std::vector<Scenario> import_csv_log(const std::string& path, double dt,
                                            int t_in_steps, int t_pred_steps) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw ParseError(path + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string expected_header =
        "scenario_id,agent_id,step,x,y,heading,vx,vy,is_ego,length,width";
    if (line != expected_header) {
        throw ParseError(path + ": header must be '" + expected_header + "'");
    }

    const int total = t_in_steps + t_pred_steps;
    std::vector<Scenario> out;
    auto find_scenario = [&](const std::string& id) -> Scenario& {
        for (auto& s : out) {
            if (s.scenario_id == id) return s;
        }
        Scenario s;
        s.scenario_id = id;
        s.dt = dt;
        s.t_in_steps = t_in_steps;
        s.t_pred_steps = t_pred_steps;
        out.push_back(std::move(s));
        return out.back();
    };

    int line_no = 1;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cols.push_back(cell);
        if (cols.size() != 11) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected 11 columns");
        }
        double num[10];
        for (int c = 1; c < 11; ++c) {
            try {
                std::size_t used = 0;
                num[c - 1] = std::stod(cols[static_cast<std::size_t>(c)], &used);
                if (used != cols[static_cast<std::size_t>(c)].size()) throw std::invalid_argument("");
            } catch (...) {
                throw ParseError(path + ":" + std::to_string(line_no) +
                                 ": bad number in column " + std::to_string(c + 1));
            }
        }
        const int agent_id = static_cast<int>(num[0]);
        const int step = static_cast<int>(num[1]);
        if (step < 0 || step >= total) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": step " +
                             std::to_string(step) + " outside [0, " + std::to_string(total) + ")");
        }
        Scenario& s = find_scenario(cols[0]);
        AgentTrack* track = nullptr;
        for (auto& tr : s.tracks) {
            if (tr.agent_id == agent_id) {
                track = &tr;
                break;
            }
        }
        if (!track) {
            AgentTrack tr;
            tr.agent_id = agent_id;
            tr.is_ego = num[7] != 0.0;
            // 4.5 m x 2.0 m defaults when the log omits dimensions (<= 0)
            tr.length = num[8] > 0.0 ? num[8] : 4.5;
            tr.width = num[9] > 0.0 ? num[9] : 2.0;
            tr.states.assign(static_cast<std::size_t>(total), AgentState::invalid_state());
            s.tracks.push_back(std::move(tr));
            track = &s.tracks.back();
        }
        AgentState st;
        st.position = {num[2], num[3]};
        st.heading = num[4];
        st.velocity = {num[5], num[6]};
        st.valid = true;
        if (track->states[static_cast<std::size_t>(step)].valid) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": duplicate state for agent " +
                             std::to_string(agent_id) + " step " + std::to_string(step));
        }
        track->states[static_cast<std::size_t>(step)] = st;
    }

    for (auto& s : out) {
        // deterministic track order regardless of row order
        std::sort(s.tracks.begin(), s.tracks.end(),
                  [](const AgentTrack& a, const AgentTrack& b) { return a.agent_id < b.agent_id; });
        validate_scenario(s);
    }
    return out;
}

}  // namespace clsim
