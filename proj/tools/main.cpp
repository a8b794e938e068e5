// clsim: scenario generation, closed-loop training, evaluation sweeps and
// ablation matrices for the trajectory-prediction engine.
//
// Exit codes: 0 success, 2 config/argument error, 3 data error,
// 4 numeric divergence.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "clsim/cli.hpp"

using namespace clsim;

int main(int argc, char** argv) {
    CLI::App app{"closed-loop trajectory prediction engine"};
    app.require_subcommand(1);

    // gen
    GenArgs gen_args;
    CLI::App* gen = app.add_subcommand("gen", "generate or import scenario files");
    gen->add_option("--out-dir", gen_args.out_dir, "output directory")->required();
    gen->add_option("--n-scenarios", gen_args.n_scenarios, "number of scenarios");
    gen->add_option("--seed", gen_args.seed, "master seed");
    gen->add_option("--n-agents", gen_args.n_agents, "agents per scenario (>= 2)");
    gen->add_option("--density", gen_args.density, "conflict density in (0, 1]");
    gen->add_option("--from-csv", gen_args.from_csv, "import a flat CSV log instead");
    gen->add_option("--csv-dt", gen_args.csv_dt, "time step for CSV import (s)");
    gen->add_option("--csv-t-in-steps", gen_args.csv_t_in_steps, "history steps for CSV import");
    gen->add_option("--csv-t-pred-steps", gen_args.csv_t_pred_steps,
                    "prediction steps for CSV import");

    // train
    TrainArgs train_args;
    CLI::App* tr = app.add_subcommand("train", "train a model per the resolved config");
    tr->add_option("--config", train_args.config_path, "config file (json)");
    tr->add_option("--data-dir", train_args.data_dir, "dataset directory with index.json")
        ->required();
    tr->add_option("--out-dir", train_args.out_dir, "run output directory")->required();
    tr->add_option("--set", train_args.overrides,
                   "config override key.path=value (repeatable; highest precedence)");
    tr->add_option("--t-sim-s", train_args.t_sim_seconds,
                   "training rollout duration in seconds (converted via the dataset dt)");
    std::string policy_flag, scene_flag, seed_flag, epochs_flag;
    tr->add_option("--policy", policy_flag, "on_policy | off_policy");
    tr->add_option("--scene-source", scene_flag, "reactive | log_replay | hybrid");
    tr->add_option("--seed", seed_flag, "training seed");
    tr->add_option("--epochs", epochs_flag, "max training epochs");

    // eval
    EvalArgs eval_args;
    CLI::App* ev = app.add_subcommand("eval", "closed-loop evaluation sweep");
    ev->add_option("--checkpoint", eval_args.checkpoints,
                   "label=path (repeatable; same label groups seeds)")
        ->required();
    ev->add_option("--data-dir", eval_args.data_dir, "dataset directory")->required();
    ev->add_option("--split", eval_args.split, "dataset split to evaluate (default test)");
    ev->add_option("--t-sim-s", eval_args.t_sim_seconds,
                   "replanning frequencies in seconds (repeatable)");
    ev->add_option("--out-dir", eval_args.out_dir, "report output directory")->required();

    // ablate
    AblateArgs ablate_args;
    CLI::App* ab = app.add_subcommand("ablate", "run an ablation matrix");
    ab->add_option("--matrix", ablate_args.matrix_config, "matrix config (json)")->required();
    ab->add_option("--data-dir", ablate_args.data_dir, "dataset directory")->required();
    ab->add_option("--out-dir", ablate_args.out_dir, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*gen) {
            const RunManifest m = cmd_gen(gen_args);
            std::printf("gen: %s (%zu artifacts)\n", m.run_id.c_str(), m.artifacts.size());
        } else if (*tr) {
            if (!policy_flag.empty()) train_args.overrides.push_back("policy=" + policy_flag);
            if (!scene_flag.empty()) {
                train_args.overrides.push_back("scene_source=" + scene_flag);
            }
            if (!seed_flag.empty()) train_args.overrides.push_back("seed=" + seed_flag);
            if (!epochs_flag.empty()) train_args.overrides.push_back("epochs=" + epochs_flag);
            const RunManifest m = cmd_train(train_args);
            std::printf("train: %s config_hash=%s\n", m.run_id.c_str(), m.config_hash.c_str());
        } else if (*ev) {
            const RunManifest m = cmd_eval(eval_args);
            std::printf("eval: %s\n", m.run_id.c_str());
        } else if (*ab) {
            const RunManifest m = cmd_ablate(ablate_args);
            std::printf("ablate: %s\n", m.run_id.c_str());
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const TrainingError& e) {
        std::fprintf(stderr, "divergence: %s\n", e.what());
        return 4;
    } catch (const SimulationError& e) {
        std::fprintf(stderr, "divergence: %s\n", e.what());
        return 4;
    } catch (const Error& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
