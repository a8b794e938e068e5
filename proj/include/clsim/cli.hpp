#pragma once

// Command pipeline: scenario generation, training runs, evaluation sweeps
// and ablation matrices. Everything here is callable as a library; the
// executable in tools/ only parses flags and maps errors to exit codes.
//
// Config resolution order is file < environment < flags. Environment
// overrides use the CLSIM_ prefix with the flattened key path uppercased
// (CLSIM_LEARNING_RATE, CLSIM_NET_HIDDEN_DIM, ...). Every resolved config
// is written back out canonically; its FNV-1a digest is the config_hash
// that names the run, so identical configs always produce identical run
// directories and artifact bytes.

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "clsim/eval.hpp"
#include "clsim/jsonio.hpp"
#include "clsim/net.hpp"
#include "clsim/scenario_gen.hpp"
#include "clsim/scenario_io.hpp"
#include "clsim/trainer.hpp"

namespace clsim {

// --- train config (de)serialization ------------------------------------------------

inline Json train_config_to_json(const TrainConfig& c) {
    Json j;
    j["seed"] = c.seed;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate;
    j["weight_decay"] = c.weight_decay;
    Json plateau;
    plateau["factor"] = c.lr_plateau.factor;
    plateau["patience"] = c.lr_plateau.patience;
    plateau["min_lr"] = c.lr_plateau.min_lr;
    j["lr_plateau"] = std::move(plateau);
    j["t_sim_steps"] = c.t_sim_steps;
    j["sim_mask_ratio"] = c.sim_mask_ratio;
    j["policy"] = to_string(c.policy);
    j["scene_source"] = to_string(c.scene_source);
    j["early_stop_patience"] = c.early_stop_patience;
    Json loss;
    loss["lambda_cls"] = c.loss.lambda_cls;
    loss["lambda_reg_ego"] = c.loss.lambda_reg_ego;
    loss["lambda_reg_scene"] = c.loss.lambda_reg_scene;
    loss["lambda_n_base"] = c.loss.lambda_n_base;
    loss["lambda_det"] = c.loss.lambda_det;
    loss["sigma_min"] = c.loss.sigma_min;
    j["loss"] = std::move(loss);
    Json net;
    net["hidden_dim"] = c.net.hidden_dim;
    net["n_layers"] = c.net.n_layers;
    net["n_heads"] = c.net.n_heads;
    net["n_modes"] = c.net.n_modes;
    net["n_refinement_iters"] = c.net.n_refinement_iters;
    net["rotate_sigma_out"] = c.net.rotate_sigma_out;
    j["net"] = std::move(net);
    Json sim;
    sim["detach_between_steps"] = c.sim.detach_between_steps;
    sim["min_speed_for_heading"] = c.sim.min_speed_for_heading;
    j["sim"] = std::move(sim);
    return j;
}

inline TrainConfig train_config_from_json(const Json& j, const std::string& origin,
                                          TrainConfig base = {}) {
    if (!j.is_object()) throw ConfigError(origin + ": config must be an object");
    try {
        require_keys(j, origin,
                     {"seed", "epochs", "batch_size", "learning_rate", "weight_decay",
                      "lr_plateau", "t_sim_steps", "sim_mask_ratio", "policy", "scene_source",
                      "early_stop_patience", "loss", "net", "sim"});
        TrainConfig c = base;
        if (j.contains("seed")) c.seed = static_cast<std::uint64_t>(get_int(j, origin, "seed"));
        if (j.contains("epochs")) c.epochs = static_cast<int>(get_int(j, origin, "epochs"));
        if (j.contains("batch_size")) {
            c.batch_size = static_cast<int>(get_int(j, origin, "batch_size"));
        }
        if (j.contains("learning_rate")) c.learning_rate = get_double(j, origin, "learning_rate");
        if (j.contains("weight_decay")) c.weight_decay = get_double(j, origin, "weight_decay");
        if (j.contains("lr_plateau")) {
            const Json& p = j["lr_plateau"];
            const std::string path = origin + ".lr_plateau";
            require_keys(p, path, {"factor", "patience", "min_lr"});
            if (p.contains("factor")) c.lr_plateau.factor = get_double(p, path, "factor");
            if (p.contains("patience")) {
                c.lr_plateau.patience = static_cast<int>(get_int(p, path, "patience"));
            }
            if (p.contains("min_lr")) c.lr_plateau.min_lr = get_double(p, path, "min_lr");
        }
        if (j.contains("t_sim_steps")) {
            c.t_sim_steps = static_cast<int>(get_int(j, origin, "t_sim_steps"));
        }
        if (j.contains("sim_mask_ratio")) {
            c.sim_mask_ratio = get_double(j, origin, "sim_mask_ratio");
        }
        if (j.contains("policy")) c.policy = policy_from_string(get_string(j, origin, "policy"));
        if (j.contains("scene_source")) {
            c.scene_source = scene_source_from_string(get_string(j, origin, "scene_source"));
        }
        if (j.contains("early_stop_patience")) {
            c.early_stop_patience = static_cast<int>(get_int(j, origin, "early_stop_patience"));
        }
        if (j.contains("loss")) {
            const Json& l = j["loss"];
            const std::string path = origin + ".loss";
            require_keys(l, path, {"lambda_cls", "lambda_reg_ego", "lambda_reg_scene",
                                   "lambda_n_base", "lambda_det", "sigma_min"});
            if (l.contains("lambda_cls")) c.loss.lambda_cls = get_double(l, path, "lambda_cls");
            if (l.contains("lambda_reg_ego")) {
                c.loss.lambda_reg_ego = get_double(l, path, "lambda_reg_ego");
            }
            if (l.contains("lambda_reg_scene")) {
                c.loss.lambda_reg_scene = get_double(l, path, "lambda_reg_scene");
            }
            if (l.contains("lambda_n_base")) {
                c.loss.lambda_n_base = get_double(l, path, "lambda_n_base");
            }
            if (l.contains("lambda_det")) c.loss.lambda_det = get_double(l, path, "lambda_det");
            if (l.contains("sigma_min")) c.loss.sigma_min = get_double(l, path, "sigma_min");
        }
        if (j.contains("net")) {
            const Json& n = j["net"];
            const std::string path = origin + ".net";
            require_keys(n, path, {"hidden_dim", "n_layers", "n_heads", "n_modes",
                                   "n_refinement_iters", "rotate_sigma_out"});
            if (n.contains("hidden_dim")) {
                c.net.hidden_dim = static_cast<int>(get_int(n, path, "hidden_dim"));
            }
            if (n.contains("n_layers")) {
                c.net.n_layers = static_cast<int>(get_int(n, path, "n_layers"));
            }
            if (n.contains("n_heads")) {
                c.net.n_heads = static_cast<int>(get_int(n, path, "n_heads"));
            }
            if (n.contains("n_modes")) {
                c.net.n_modes = static_cast<int>(get_int(n, path, "n_modes"));
            }
            if (n.contains("n_refinement_iters")) {
                c.net.n_refinement_iters =
                    static_cast<int>(get_int(n, path, "n_refinement_iters"));
            }
            if (n.contains("rotate_sigma_out")) {
                c.net.rotate_sigma_out = get_bool(n, path, "rotate_sigma_out");
            }
        }
        if (j.contains("sim")) {
            const Json& s = j["sim"];
            const std::string path = origin + ".sim";
            require_keys(s, path, {"detach_between_steps", "min_speed_for_heading"});
            if (s.contains("detach_between_steps")) {
                c.sim.detach_between_steps = get_bool(s, path, "detach_between_steps");
            }
            if (s.contains("min_speed_for_heading")) {
                c.sim.min_speed_for_heading = get_double(s, path, "min_speed_for_heading");
            }
        }
        return c;
    } catch (const ParseError& e) {
        throw ConfigError(e.what());
    }
}

// flattened key paths accepted by overrides, in documentation order
inline const std::vector<std::string>& override_keys() {
    static const std::vector<std::string> keys = {
        "seed", "epochs", "batch_size", "learning_rate", "weight_decay",
        "lr_plateau.factor", "lr_plateau.patience", "lr_plateau.min_lr", "t_sim_steps",
        "sim_mask_ratio", "policy", "scene_source", "early_stop_patience",
        "loss.lambda_cls", "loss.lambda_reg_ego", "loss.lambda_reg_scene",
        "loss.lambda_n_base", "loss.lambda_det", "loss.sigma_min", "net.hidden_dim",
        "net.n_layers", "net.n_heads", "net.n_modes", "net.n_refinement_iters",
        "net.rotate_sigma_out", "sim.detach_between_steps", "sim.min_speed_for_heading"};
    return keys;
}

// Applies one "key.path=value" override by patching the JSON form.
inline void apply_override(Json& doc, const std::string& key, const std::string& value,
                           const std::string& origin) {
    bool known = false;
    for (const auto& k : override_keys()) {
        if (k == key) {
            known = true;
            break;
        }
    }
    if (!known) throw ConfigError(origin + ": unknown config key '" + key + "'");
    Json* node = &doc;
    std::string rest = key;
    while (true) {
        const std::size_t dot = rest.find('.');
        if (dot == std::string::npos) break;
        const std::string head = rest.substr(0, dot);
        if (!node->contains(head)) (*node)[head] = Json::object();
        node = &(*node)[head];
        rest = rest.substr(dot + 1);
    }
    // parse the value as JSON when possible (numbers, booleans), else string
    try {
        (*node)[rest] = Json::parse(value);
    } catch (const nlohmann::json::exception&) {
        (*node)[rest] = value;
    }
}

inline std::string env_name_for(const std::string& key) {
    std::string name = "CLSIM_";
    for (char ch : key) {
        name += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    }
    return name;
}

// Resolution: defaults < config file < CLSIM_* environment < flag overrides.
inline TrainConfig resolve_train_config(const std::string& config_path,
                                        const std::vector<std::string>& flag_overrides) {
    Json doc = Json::object();
    if (!config_path.empty()) {
        doc = read_json_file(config_path);
        // validate the file's own keys strictly before layering overrides
        (void)train_config_from_json(doc, config_path);
    }
    for (const auto& key : override_keys()) {
        if (const char* v = std::getenv(env_name_for(key).c_str())) {
            apply_override(doc, key, v, "environment " + env_name_for(key));
        }
    }
    for (const auto& kv : flag_overrides) {
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("override '" + kv + "' must be key=value");
        }
        apply_override(doc, kv.substr(0, eq), kv.substr(eq + 1), "flag override");
    }
    return train_config_from_json(doc, config_path.empty() ? "config" : config_path);
}

inline std::string config_hash_of(const TrainConfig& cfg) {
    return hex64(fnv1a64(to_canonical_text(train_config_to_json(cfg))));
}

// --- run manifest -------------------------------------------------------------------

struct RunManifest {
    std::string run_id;
    std::string config_hash;
    std::vector<std::uint64_t> seeds;
    std::map<std::string, std::string> artifacts;  // name -> path

    Json to_json() const {
        Json j;
        j["run_id"] = run_id;
        j["config_hash"] = config_hash;
        Json s = Json::array();
        for (auto v : seeds) s.push_back(v);
        j["seeds"] = std::move(s);
        Json a;
        for (const auto& [k, v] : artifacts) a[k] = v;
        j["artifacts"] = std::move(a);
        return j;
    }

    static RunManifest from_json(const Json& j, const std::string& origin) {
        require_keys(j, origin, {"run_id", "config_hash", "seeds", "artifacts"});
        RunManifest m;
        m.run_id = get_string(j, origin, "run_id");
        m.config_hash = get_string(j, origin, "config_hash");
        for (const auto& s : get_field(j, origin, "seeds")) {
            m.seeds.push_back(s.get<std::uint64_t>());
        }
        for (auto it = j["artifacts"].begin(); it != j["artifacts"].end(); ++it) {
            m.artifacts[it.key()] = it.value().get<std::string>();
        }
        return m;
    }
};

// --- dataset index --------------------------------------------------------------------

struct DatasetIndex {
    std::string run_id;
    std::string config_hash;
    std::vector<std::string> ids;
    std::vector<std::string> files;
    std::vector<std::string> splits;  // "train" / "val" / "test"
};

inline void write_index(const DatasetIndex& idx, const std::string& path) {
    Json j;
    j["run_id"] = idx.run_id;
    j["config_hash"] = idx.config_hash;
    Json rows = Json::array();
    for (std::size_t i = 0; i < idx.ids.size(); ++i) {
        Json r;
        r["id"] = idx.ids[i];
        r["file"] = idx.files[i];
        r["split"] = idx.splits[i];
        rows.push_back(std::move(r));
    }
    j["scenarios"] = std::move(rows);
    write_json_file(path, j);
}

inline DatasetIndex read_index(const std::string& path) {
    const Json j = read_json_file(path);
    require_keys(j, path, {"run_id", "config_hash", "scenarios"});
    DatasetIndex idx;
    idx.run_id = get_string(j, path, "run_id");
    idx.config_hash = get_string(j, path, "config_hash");
    for (const auto& r : get_field(j, path, "scenarios")) {
        require_keys(r, path + ".scenarios[]", {"id", "file", "split"});
        idx.ids.push_back(r["id"].get<std::string>());
        idx.files.push_back(r["file"].get<std::string>());
        idx.splits.push_back(r["split"].get<std::string>());
    }
    return idx;
}

inline std::vector<Scenario> load_split(const std::string& data_dir, const std::string& split) {
    const DatasetIndex idx = read_index((std::filesystem::path(data_dir) / "index.json").string());
    std::vector<Scenario> out;
    for (std::size_t i = 0; i < idx.ids.size(); ++i) {
        if (idx.splits[i] != split) continue;
        out.push_back(load_scenario((std::filesystem::path(data_dir) / idx.files[i]).string()));
    }
    return out;
}

// --- gen command ------------------------------------------------------------------------

struct GenArgs {
    std::string out_dir;
    int n_scenarios = 10;
    std::uint64_t seed = 0;
    int n_agents = 8;
    double density = 0.8;
    // alternative source: import a flat CSV log instead of generating
    std::string from_csv;
    double csv_dt = 0.5;
    int csv_t_in_steps = 2;
    int csv_t_pred_steps = 12;
};

inline RunManifest cmd_gen(const GenArgs& args) {
    namespace fs = std::filesystem;
    if (args.from_csv.empty() && args.n_scenarios < 1) {
        throw ConfigError("gen: n_scenarios must be >= 1");
    }
    std::error_code ec;
    fs::create_directories(args.out_dir, ec);
    if (ec) throw IoError("gen: cannot create out_dir '" + args.out_dir + "'");

    Json cfg;
    cfg["n_scenarios"] = args.n_scenarios;
    cfg["seed"] = args.seed;
    cfg["n_agents"] = args.n_agents;
    cfg["density"] = args.density;
    cfg["from_csv"] = args.from_csv.empty() ? "" : fs::path(args.from_csv).filename().string();
    const std::string config_hash = hex64(fnv1a64(to_canonical_text(cfg)));

    std::vector<Scenario> scenarios;
    if (!args.from_csv.empty()) {
        scenarios = import_csv_log(args.from_csv, args.csv_dt, args.csv_t_in_steps,
                                   args.csv_t_pred_steps);
    } else {
        SeedStream gen_stream(args.seed, "scenario-seeds");
        for (int i = 0; i < args.n_scenarios; ++i) {
            Scenario s = generate_intersection(gen_stream.next_u64(), args.n_agents, args.density);
            s.scenario_id = "ix-" + std::to_string(args.seed) + "-" + std::to_string(i);
            scenarios.push_back(std::move(s));
        }
    }

    // 70/15/15 split by seeded shuffle, rounding toward train
    const std::size_t n = scenarios.size();
    const std::size_t n_holdout = static_cast<std::size_t>(0.3 * static_cast<double>(n));
    const std::size_t n_val = n_holdout / 2;
    const std::size_t n_test = n_holdout - n_val;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    SeedStream split_stream(args.seed, "split");
    split_stream.shuffle(order);
    std::vector<std::string> split_of(n, "train");
    for (std::size_t i = 0; i < n_val; ++i) split_of[order[i]] = "val";
    for (std::size_t i = n_val; i < n_val + n_test; ++i) split_of[order[i]] = "test";

    DatasetIndex idx;
    idx.run_id = "gen-" + config_hash;
    idx.config_hash = config_hash;
    for (std::size_t i = 0; i < n; ++i) {
        const std::string file = scenarios[i].scenario_id + ".json";
        save_scenario(scenarios[i], (fs::path(args.out_dir) / file).string());
        idx.ids.push_back(scenarios[i].scenario_id);
        idx.files.push_back(file);
        idx.splits.push_back(split_of[i]);
    }
    write_index(idx, (fs::path(args.out_dir) / "index.json").string());

    RunManifest m;
    m.run_id = idx.run_id;
    m.config_hash = config_hash;
    m.seeds = {args.seed};
    m.artifacts["index"] = (fs::path(args.out_dir) / "index.json").string();
    write_json_file((fs::path(args.out_dir) / "manifest.json").string(), m.to_json());
    m.artifacts["manifest"] = (fs::path(args.out_dir) / "manifest.json").string();
    return m;
}

// --- train command ------------------------------------------------------------------------

struct TrainArgs {
    std::string config_path;  // optional
    std::string data_dir;
    std::string out_dir;
    std::vector<std::string> overrides;  // key.path=value, applied last
    double t_sim_seconds = 0.0;          // optional convenience: converted via data dt
};

inline RunManifest cmd_train(const TrainArgs& args) {
    namespace fs = std::filesystem;
    TrainConfig cfg = resolve_train_config(args.config_path, args.overrides);

    std::vector<Scenario> train_set = load_split(args.data_dir, "train");
    std::vector<Scenario> val_set = load_split(args.data_dir, "val");
    if (train_set.empty() || val_set.empty()) {
        throw ValidationError("train: dataset has empty train or val split");
    }
    if (args.t_sim_seconds > 0.0) {
        const double steps = args.t_sim_seconds / train_set.front().dt;
        const int rounded = static_cast<int>(std::lround(steps));
        if (rounded < 1 || std::abs(steps - rounded) > 1e-9) {
            throw ConfigError("train: --t-sim-s is not a multiple of the dataset dt");
        }
        cfg.t_sim_steps = rounded;
    }

    const std::string config_hash = config_hash_of(cfg);
    const std::string run_id = "run-" + config_hash;
    const fs::path run_dir = fs::path(args.out_dir) / run_id;
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec) throw IoError("train: cannot create '" + run_dir.string() + "'");

    write_json_file((run_dir / "config.json").string(), train_config_to_json(cfg));

    const TrainResult result = train(train_set, val_set, cfg);
    save_checkpoint(result.params, (run_dir / "checkpoint.ckpt").string());

    {
        std::ofstream log((run_dir / "epochs.jsonl").string(), std::ios::binary);
        if (!log) throw IoError("train: cannot write epoch log");
        Json head;
        head["run_id"] = run_id;
        head["config_hash"] = config_hash;
        head["parameter_count"] = result.params.store.count_scalars();
        log << head.dump() << "\n";
        for (const auto& e : result.log) {
            Json row;
            row["epoch"] = e.epoch;
            row["train_loss"] = e.train_loss;
            row["val_loss"] = e.val_loss;
            row["lr"] = e.lr;
            row["wall_time"] = e.wall_time_s;
            log << row.dump() << "\n";
        }
    }

    RunManifest m;
    m.run_id = run_id;
    m.config_hash = config_hash;
    m.seeds = {cfg.seed};
    m.artifacts["config"] = (run_dir / "config.json").string();
    m.artifacts["checkpoint"] = (run_dir / "checkpoint.ckpt").string();
    m.artifacts["epochs"] = (run_dir / "epochs.jsonl").string();
    write_json_file((run_dir / "manifest.json").string(), m.to_json());
    m.artifacts["manifest"] = (run_dir / "manifest.json").string();
    for (const auto& [name, path] : m.artifacts) {
        if (!fs::exists(path)) throw IoError("train: artifact '" + name + "' missing");
    }
    return m;
}

// --- eval command ---------------------------------------------------------------------------

struct EvalArgs {
    // label=checkpoint-path entries; labels group seeds of one config
    std::vector<std::string> checkpoints;
    std::string data_dir;
    std::string split = "test";
    std::vector<double> t_sim_seconds = {6.0, 3.0, 2.0, 1.5, 1.0, 0.5};
    std::vector<std::pair<double, double>> segment_windows = {{0.5, 1.0}, {4.0, 6.0}};
    std::string out_dir;
};

inline RunManifest cmd_eval(const EvalArgs& args) {
    namespace fs = std::filesystem;
    if (args.checkpoints.empty()) throw ConfigError("eval: no checkpoints given");
    if (args.t_sim_seconds.empty()) throw ConfigError("eval: empty t_sim list");

    // ordered label -> checkpoint paths
    std::vector<std::string> labels;
    std::vector<std::vector<std::string>> group_paths;
    for (const auto& spec : args.checkpoints) {
        const std::size_t eq = spec.find('=');
        const std::string label =
            eq == std::string::npos ? fs::path(spec).stem().string() : spec.substr(0, eq);
        const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
        std::size_t g = labels.size();
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] == label) g = i;
        }
        if (g == labels.size()) {
            labels.push_back(label);
            group_paths.emplace_back();
        }
        group_paths[g].push_back(path);
    }

    std::vector<Scenario> scenarios = load_split(args.data_dir, args.split);
    if (scenarios.empty()) {
        throw ValidationError("eval: split '" + args.split + "' is empty");
    }

    EvalConfig ecfg;
    ecfg.t_sim_seconds = args.t_sim_seconds;
    ecfg.segment_windows = args.segment_windows;

    // deterministic run id from the eval inputs
    std::uint64_t h = fnv1a64(args.split);
    for (double s : args.t_sim_seconds) h = fnv1a64(&s, sizeof(s), h);

    std::vector<MetricsReport> reports;
    std::vector<std::vector<DecoderParams>> loaded(group_paths.size());
    for (std::size_t g = 0; g < group_paths.size(); ++g) {
        std::vector<Planner> planners;
        for (const auto& path : group_paths[g]) {
            loaded[g].push_back(load_checkpoint(path));
            if (loaded[g].back().t_pred_steps != scenarios.front().t_pred_steps ||
                loaded[g].back().t_in_steps != scenarios.front().t_in_steps) {
                throw ParseError("eval: checkpoint '" + path +
                                 "' horizons do not match the dataset");
            }
            const std::uint64_t d = loaded[g].back().store.digest();
            h = fnv1a64(&d, sizeof(d), h);
        }
        for (auto& p : loaded[g]) planners.push_back(make_net_planner(p));
        reports.push_back(evaluate(scenarios, planners, ecfg));
    }

    const std::string config_hash = hex64(h);
    const std::string run_id = "eval-" + config_hash;
    const fs::path run_dir = fs::path(args.out_dir) / run_id;
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec) throw IoError("eval: cannot create '" + run_dir.string() + "'");

    RunManifest m;
    m.run_id = run_id;
    m.config_hash = config_hash;

    auto write_text = [&](const std::string& name, const std::string& text) {
        const std::string path = (run_dir / name).string();
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("eval: cannot write '" + path + "'");
        f << text;
        m.artifacts[name] = path;
    };

    write_text("summary.csv", summary_csv(labels, reports, run_id, config_hash));
    for (std::size_t g = 0; g < labels.size(); ++g) {
        write_text("per_timestep_" + labels[g] + ".csv",
                   per_timestep_csv(reports[g], run_id, config_hash));
        write_text("segments_" + labels[g] + ".csv",
                   segments_csv(reports[g], run_id, config_hash));
    }
    write_json_file((run_dir / "manifest.json").string(), m.to_json());
    m.artifacts["manifest"] = (run_dir / "manifest.json").string();
    return m;
}

// --- ablate command ----------------------------------------------------------------------------

struct AblateArgs {
    std::string matrix_config;  // json file
    std::string data_dir;
    std::string out_dir;
};

inline void apply_axis_value(TrainConfig& cfg, const std::string& axis, const Json& value) {
    if (axis == "policy") {
        cfg.policy = policy_from_string(value.get<std::string>());
    } else if (axis == "scene_source") {
        cfg.scene_source = scene_source_from_string(value.get<std::string>());
    } else if (axis == "sim_mask_ratio") {
        cfg.sim_mask_ratio = value.get<double>();
    } else if (axis == "t_sim_train") {
        cfg.t_sim_steps = value.get<int>();
    } else if (axis == "detach") {
        cfg.sim.detach_between_steps = value.get<bool>();
    } else if (axis == "rotate_sigma_out") {
        cfg.net.rotate_sigma_out = value.get<bool>();
    } else {
        throw ConfigError("ablate: unknown axis '" + axis + "'");
    }
}

inline RunManifest cmd_ablate(const AblateArgs& args) {
    namespace fs = std::filesystem;
    const Json doc = read_json_file(args.matrix_config);
    require_keys(doc, args.matrix_config, {"base", "axes", "seeds", "eval_t_sim_s"});
    TrainConfig base = train_config_from_json(get_field(doc, args.matrix_config, "base"),
                                              args.matrix_config + ".base");
    const Json& axes = get_field(doc, args.matrix_config, "axes");
    if (!axes.is_object() || axes.empty()) {
        throw ConfigError("ablate: axes must be a non-empty object");
    }
    std::vector<std::uint64_t> seeds;
    if (doc.contains("seeds")) {
        for (const auto& s : doc["seeds"]) seeds.push_back(s.get<std::uint64_t>());
    }
    if (seeds.empty()) seeds = {base.seed};
    std::vector<double> eval_t_sim = {1.0, 0.5};
    if (doc.contains("eval_t_sim_s")) {
        eval_t_sim.clear();
        for (const auto& s : doc["eval_t_sim_s"]) eval_t_sim.push_back(s.get<double>());
    }

    // cross product of axis values
    std::vector<std::string> axis_names;
    std::vector<std::vector<Json>> axis_values;
    for (auto it = axes.begin(); it != axes.end(); ++it) {
        axis_names.push_back(it.key());
        std::vector<Json> values;
        if (!it.value().is_array() || it.value().empty()) {
            throw ConfigError("ablate: axis '" + it.key() + "' must be a non-empty array");
        }
        for (const auto& v : it.value()) values.push_back(v);
        axis_values.push_back(std::move(values));
    }

    std::vector<std::vector<std::size_t>> cells;
    std::vector<std::size_t> cursor(axis_names.size(), 0);
    while (true) {
        cells.push_back(cursor);
        std::size_t k = 0;
        while (k < cursor.size()) {
            if (++cursor[k] < axis_values[k].size()) break;
            cursor[k] = 0;
            ++k;
        }
        if (k == cursor.size()) break;
    }

    std::vector<Scenario> train_set = load_split(args.data_dir, "train");
    std::vector<Scenario> val_set = load_split(args.data_dir, "val");
    std::vector<Scenario> test_set = load_split(args.data_dir, "test");

    std::error_code ec;
    fs::create_directories(args.out_dir, ec);
    if (ec) throw IoError("ablate: cannot create out_dir");

    std::uint64_t matrix_hash = fnv1a64(to_canonical_text(doc));
    RunManifest top;
    top.config_hash = hex64(matrix_hash);
    top.run_id = "ablate-" + top.config_hash;
    top.seeds = seeds;

    std::string comparison = csv_header_line(top.run_id, top.config_hash);
    comparison += "cell,t_sim_s,collision_mean,collision_std,l2_mean,l2_std,n\n";

    for (const auto& cell : cells) {
        TrainConfig cfg = base;
        std::string cell_name;
        for (std::size_t a = 0; a < axis_names.size(); ++a) {
            apply_axis_value(cfg, axis_names[a], axis_values[a][cell[a]]);
            if (!cell_name.empty()) cell_name += "_";
            std::string v = axis_values[a][cell[a]].dump();
            std::string clean;
            for (char ch : v) {
                if (std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-') {
                    clean += ch;
                }
            }
            cell_name += axis_names[a] + "-" + clean;
        }

        std::vector<DecoderParams> cell_params;
        for (std::uint64_t seed : seeds) {
            TrainConfig run_cfg = cfg;
            run_cfg.seed = seed;
            const std::string config_hash = config_hash_of(run_cfg);
            const std::string run_id = "run-" + config_hash;
            const fs::path run_dir = fs::path(args.out_dir) / cell_name / run_id;
            fs::create_directories(run_dir, ec);
            write_json_file((run_dir / "config.json").string(),
                            train_config_to_json(run_cfg));
            const TrainResult result = train(train_set, val_set, run_cfg);
            save_checkpoint(result.params, (run_dir / "checkpoint.ckpt").string());
            RunManifest m;
            m.run_id = run_id;
            m.config_hash = config_hash;
            m.seeds = {seed};
            m.artifacts["config"] = (run_dir / "config.json").string();
            m.artifacts["checkpoint"] = (run_dir / "checkpoint.ckpt").string();
            write_json_file((run_dir / "manifest.json").string(), m.to_json());
            cell_params.push_back(result.params);
        }

        EvalConfig ecfg;
        ecfg.t_sim_seconds = eval_t_sim;
        std::vector<Planner> planners;
        for (auto& p : cell_params) planners.push_back(make_net_planner(p));
        const MetricsReport rep = evaluate(test_set, planners, ecfg);
        for (std::size_t f = 0; f < rep.t_sim_seconds.size(); ++f) {
            comparison += cell_name + "," + fmt_g9(rep.t_sim_seconds[f]) + "," +
                          fmt_g9(rep.collision_avg[f].mean) + "," +
                          fmt_g9(rep.collision_avg[f].stddev) + "," +
                          fmt_g9(rep.l2_avg[f].mean) + "," + fmt_g9(rep.l2_avg[f].stddev) + "," +
                          std::to_string(rep.collision_avg[f].n) + "\n";
        }
    }

    const std::string cmp_path = (fs::path(args.out_dir) / "comparison.csv").string();
    {
        std::ofstream f(cmp_path, std::ios::binary);
        if (!f) throw IoError("ablate: cannot write comparison.csv");
        f << comparison;
    }
    top.artifacts["comparison"] = cmp_path;
    write_json_file((fs::path(args.out_dir) / "manifest.json").string(), top.to_json());
    top.artifacts["manifest"] = (fs::path(args.out_dir) / "manifest.json").string();
    return top;
}

}  // namespace clsim
