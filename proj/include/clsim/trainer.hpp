#pragma once

// Closed-loop training loop.
//
// One training sample runs N+1 decoder invocations (N = rollout_count):
// the open-loop pass at n = 0 fixes the mode probabilities and the best
// mode, then each rollout advances the dynamic context through the
// simulator using the chosen ego mode and (mask-selected) scene
// predictions, and re-decodes from the drifted state. Losses:
//   - classification: probability-weighted NLL of all modes at n = 0,
//     trajectory terms held constant (only the phi head trains on it);
//   - ego regression: rollout-weighted NLL of the chosen mode, weight
//     lambda_n_base^n per rollout;
//   - scene regression: open-loop (n = 0) samples only.
// The three weighted losses are combined into a single objective; the
// parameter groups they reach are disjoint by construction, so one
// optimizer step applies exactly the three updates.
//
// Losses are evaluated in the per-rollout ego (or per-agent) anchor frame;
// with covariance rotation enabled the value is frame-invariant.
//
// Random draws come from independently named seed streams (parameter init,
// mask sampling, goal sampling, batch shuffling, validation), so consuming
// more of one stream never shifts another.

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "clsim/losses.hpp"
#include "clsim/net.hpp"
#include "clsim/scenario.hpp"
#include "clsim/sim.hpp"

namespace clsim {

enum class Policy { on_policy, off_policy };
enum class SceneSource { reactive, log_replay, hybrid };

inline const char* to_string(Policy p) {
    return p == Policy::on_policy ? "on_policy" : "off_policy";
}
inline const char* to_string(SceneSource s) {
    switch (s) {
        case SceneSource::reactive: return "reactive";
        case SceneSource::log_replay: return "log_replay";
        case SceneSource::hybrid: return "hybrid";
    }
    return "?";
}

inline Policy policy_from_string(const std::string& s) {
    if (s == "on_policy") return Policy::on_policy;
    if (s == "off_policy") return Policy::off_policy;
    throw ConfigError("unknown policy '" + s + "'");
}

inline SceneSource scene_source_from_string(const std::string& s) {
    if (s == "reactive") return SceneSource::reactive;
    if (s == "log_replay") return SceneSource::log_replay;
    if (s == "hybrid") return SceneSource::hybrid;
    throw ConfigError("unknown scene_source '" + s + "'");
}

struct LrPlateau {
    double factor = 0.1;
    int patience = 3;
    double min_lr = 1e-5;
};

struct TrainConfig {
    std::uint64_t seed = 0;
    int epochs = 60;
    int batch_size = 32;
    double learning_rate = 1e-3;
    double weight_decay = 5e-5;
    LrPlateau lr_plateau;
    int t_sim_steps = 4;
    double sim_mask_ratio = 0.5;
    Policy policy = Policy::on_policy;
    SceneSource scene_source = SceneSource::hybrid;
    int early_stop_patience = 6;
    LossConfig loss;
    NetConfig net;
    SimConfig sim;  // detach_between_steps and min_speed_for_heading; the
                    // rollout length comes from t_sim_steps above

    double effective_mask_ratio() const {
        switch (scene_source) {
            case SceneSource::reactive: return 1.0;
            case SceneSource::log_replay: return 0.0;
            case SceneSource::hybrid: return sim_mask_ratio;
        }
        return sim_mask_ratio;
    }

    SimConfig effective_sim() const {
        SimConfig s = sim;
        s.t_sim_steps = t_sim_steps;
        return s;
    }

    void validate(int t_pred_steps) const {
        if (epochs < 1 || batch_size < 1) throw ConfigError("train: epochs/batch_size >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
        if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
        if (t_sim_steps < 1 || t_sim_steps > t_pred_steps) {
            throw ConfigError("train: t_sim_steps must be in [1, t_pred_steps]");
        }
        if (sim_mask_ratio < 0.0 || sim_mask_ratio > 1.0) {
            throw ConfigError("train: sim_mask_ratio must be in [0, 1]");
        }
        net.validate();
    }
};

// --- goal sampling ------------------------------------------------------------

// Uniform goal step over each surrounding agent's valid future; agents with
// no valid future are skipped (they are also absent from the scene loss).
inline std::vector<GoalToken> sample_goal_tokens(SeedStream& stream, const GroundTruth& gt,
                                                 int t_pred_steps) {
    std::vector<GoalToken> goals;
    for (std::size_t i = 0; i < gt.scene_track_index.size(); ++i) {
        std::vector<int> valid_steps;
        for (int t = 0; t < t_pred_steps; ++t) {
            if (gt.scene_valid[i][static_cast<std::size_t>(t)]) valid_steps.push_back(t + 1);
        }
        if (valid_steps.empty()) continue;
        const int pick = valid_steps[static_cast<std::size_t>(
            stream.uniform_int(valid_steps.size()))];
        GoalToken g;
        g.track_index = gt.scene_track_index[i];
        g.goal_step = pick;
        g.goal_position = gt.scene_pos[i][static_cast<std::size_t>(pick - 1)];
        goals.push_back(g);
    }
    return goals;
}

// --- per-sample forward --------------------------------------------------------

struct RolloutStep {
    int n = 0;
    int first_step = 1;
    std::size_t chosen_mode = 0;
    double ego_nll = 0.0;  // unweighted NLL value of this rollout's term
    double weight = 1.0;   // lambda_n
    DynamicContext context;  // D_n snapshot
};

struct RolloutRecord {
    int n_rollouts = 0;  // N
    std::vector<RolloutStep> steps;  // N + 1 entries
    double cls_value = 0.0;
    double reg_value = 0.0;
    double scene_value = 0.0;
    double total_value = 0.0;
};

struct SampleForward {
    ad::Value loss_cls;
    ad::Value loss_reg;
    ad::Value loss_scene;
    ad::Value total;
    RolloutRecord record;
};

namespace trainer_detail {

// goal tokens whose agents are embedded in this rollout's context
inline std::vector<GoalToken> embedded_goals(const std::vector<GoalToken>& goals,
                                             const ContextEmbedding& emb) {
    std::vector<GoalToken> out;
    for (const auto& g : goals) {
        for (int tok = 0; tok < emb.n_agent_tokens; ++tok) {
            if (emb.token_track[static_cast<std::size_t>(tok)] == g.track_index) {
                out.push_back(g);
                break;
            }
        }
    }
    return out;
}

inline ad::Matrix positions_matrix(const std::vector<Vec2>& pos, int from, int count) {
    ad::Matrix m(count, 2);
    for (int i = 0; i < count; ++i) {
        m.at(i, 0) = pos[static_cast<std::size_t>(from + i)].x;
        m.at(i, 1) = pos[static_cast<std::size_t>(from + i)].y;
    }
    return m;
}

// argmin over modes of the summed L2 distance to the ground truth remainder
inline std::size_t best_mode_by_distance(const EgoDecode& ego, const ad::Value& y_local) {
    std::size_t best = 0;
    double best_dist = 0.0;
    for (std::size_t m = 0; m < ego.modes.size(); ++m) {
        const ad::Matrix& mu = ego.modes[m].mu.val();
        const ad::Matrix& y = y_local.val();
        double d = 0.0;
        for (int t = 0; t < mu.rows; ++t) {
            d += std::hypot(y.at(t, 0) - mu.at(t, 0), y.at(t, 1) - mu.at(t, 1));
        }
        if (m == 0 || d < best_dist) {
            best = m;
            best_dist = d;
        }
    }
    return best;
}

}  // namespace trainer_detail

// Executes the full closed-loop sample: N+1 decoder invocations with
// simulator advances in between, returning the three losses on the tape.
inline SampleForward forward_sample(ad::Tape& tape, const Scenario& scn, DecoderParams& params,
                                    ParamUse& use, const TrainConfig& cfg,
                                    const SimulationMask& mask,
                                    const std::vector<GoalToken>& goals) {
    const int t_pred = scn.t_pred_steps;
    const int t_sim = cfg.t_sim_steps;
    if (params.t_pred_steps != t_pred || params.t_in_steps != scn.t_in_steps) {
        throw ContractError("forward_sample: parameter horizons do not match the scenario");
    }
    const int n_rollouts = rollout_count(t_pred, t_sim);
    const SimConfig sim_cfg = cfg.effective_sim();
    const GroundTruth gt = extract_ground_truth(scn);
    const auto surrounding = surrounding_indices(scn);

    SampleForward out;
    out.record.n_rollouts = n_rollouts;

    AdContext ctx = ad_context(tape, initial_context(scn));
    std::size_t mode_star = 0;
    std::vector<ad::Value> reg_terms;

    for (int n = 0; n <= n_rollouts; ++n) {
        const int first_step = n * t_sim + 1;
        const int remaining = t_pred - first_step + 1;

        ContextEmbedding emb = embed_context(tape, scn, ctx, params, use);
        EgoDecode ego = decode_ego(tape, emb, params, use, first_step);
        const std::vector<GoalToken> goals_n = trainer_detail::embedded_goals(goals, emb);
        SceneDecode scene = decode_scene(tape, emb, goals_n, params, use, first_step);

        // ego ground truth remainder in this rollout's ego anchor frame
        const ad::Value y_world = tape.constant(
            trainer_detail::positions_matrix(gt.y_ego, first_step - 1, remaining));
        const ad::Value y_local = ad::world_to_frame(emb.ego_pose, y_world);

        std::size_t chosen;
        if (n == 0) {
            mode_star = trainer_detail::best_mode_by_distance(ego, y_local);
            chosen = mode_star;

            // classification: trajectory NLLs as constants, probs carry grad
            std::vector<ad::Value> mode_nlls;
            const std::vector<bool> all_valid(static_cast<std::size_t>(remaining), true);
            for (const auto& m : ego.modes) {
                mode_nlls.push_back(ad::gauss_nll_sum(
                    ad::stop_gradient(m.mu), ad::stop_gradient(m.sig),
                    ad::stop_gradient(y_local), all_valid, cfg.loss.lambda_det,
                    cfg.loss.sigma_min));
            }
            out.loss_cls = ad::sum_all(ad::mul(ego.probs, ad::concat_cols(mode_nlls)));

            // scene regression: open-loop predictions only
            ad::Value scene_sum = tape.constant(ad::Matrix::scalar(0.0));
            for (std::size_t i = 0; i < scene.trajs.size(); ++i) {
                const std::size_t track = scene.track_index[i];
                std::size_t row = 0;
                for (std::size_t r = 0; r < gt.scene_track_index.size(); ++r) {
                    if (gt.scene_track_index[r] == track) row = r;
                }
                ad::Matrix y_a(remaining, 2);
                std::vector<bool> valid_a;
                for (int t = 0; t < remaining; ++t) {
                    y_a.at(t, 0) = gt.scene_pos[row][static_cast<std::size_t>(t)].x;
                    y_a.at(t, 1) = gt.scene_pos[row][static_cast<std::size_t>(t)].y;
                    valid_a.push_back(gt.scene_valid[row][static_cast<std::size_t>(t)]);
                }
                int token = 0;
                for (int tok = 0; tok < emb.n_agent_tokens; ++tok) {
                    if (emb.token_track[static_cast<std::size_t>(tok)] == track) token = tok;
                }
                const ad::Value pose_a = ad::gather_rows(emb.poses, {token});
                const ad::Value y_a_local =
                    ad::world_to_frame(pose_a, tape.constant(std::move(y_a)));
                scene_sum = ad::add(scene_sum,
                                    ad::gauss_nll_sum(scene.trajs[i].mu, scene.trajs[i].sig,
                                                      y_a_local, valid_a, cfg.loss.lambda_det,
                                                      cfg.loss.sigma_min));
            }
            out.loss_scene = scene_sum;
        } else if (cfg.policy == Policy::off_policy) {
            chosen = trainer_detail::best_mode_by_distance(ego, y_local);
        } else {
            chosen = mode_star;
        }

        // ego regression term for this rollout
        const std::vector<bool> all_valid(static_cast<std::size_t>(remaining), true);
        const AdTrajectory& picked = ego.modes[chosen];
        ad::Value term = ad::gauss_nll_sum(picked.mu, picked.sig, y_local, all_valid,
                                           cfg.loss.lambda_det, cfg.loss.sigma_min);
        const double weight = rollout_weight(cfg.loss.lambda_n_base, n);
        if (!std::isfinite(term.scalar())) {
            throw TrainingError("non-finite ego regression loss at rollout " +
                                std::to_string(n));
        }
        reg_terms.push_back(ad::scale(term, weight));

        RolloutStep step;
        step.n = n;
        step.first_step = first_step;
        step.chosen_mode = chosen;
        step.ego_nll = term.scalar();
        step.weight = weight;
        step.context = plain_context(ctx);
        out.record.steps.push_back(std::move(step));

        // advance the context for the next rollout
        if (n < n_rollouts) {
            ad::Value mu_world = ad::local_to_frame(emb.ego_pose, picked.mu);
            ad::Value ego_pred = ad::slice_rows(mu_world, 0, t_sim);

            std::vector<ad::Value> scene_preds(surrounding.size());
            for (std::size_t i = 0; i < scene.trajs.size(); ++i) {
                const std::size_t track = scene.track_index[i];
                int token = 0;
                for (int tok = 0; tok < emb.n_agent_tokens; ++tok) {
                    if (emb.token_track[static_cast<std::size_t>(tok)] == track) token = tok;
                }
                const ad::Value pose_a = ad::gather_rows(emb.poses, {token});
                ad::Value world = ad::local_to_frame(pose_a, scene.trajs[i].mu);
                for (std::size_t j = 0; j < surrounding.size(); ++j) {
                    if (surrounding[j] == track) {
                        scene_preds[j] = ad::slice_rows(world, 0, t_sim);
                    }
                }
            }
            ctx = simulate_step_ad(tape, ctx, scn, ego_pred, scene_preds, mask, sim_cfg);
        }
    }

    ad::Value reg = reg_terms[0];
    for (std::size_t i = 1; i < reg_terms.size(); ++i) reg = ad::add(reg, reg_terms[i]);
    out.loss_reg = reg;

    out.total = ad::add(ad::add(ad::scale(out.loss_cls, cfg.loss.lambda_cls),
                                ad::scale(out.loss_reg, cfg.loss.lambda_reg_ego)),
                        ad::scale(out.loss_scene, cfg.loss.lambda_reg_scene));

    out.record.cls_value = out.loss_cls.scalar();
    out.record.reg_value = out.loss_reg.scalar();
    out.record.scene_value = out.loss_scene.scalar();
    out.record.total_value = out.total.scalar();
    if (!std::isfinite(out.record.total_value)) {
        throw TrainingError("non-finite total loss after rollout " +
                            std::to_string(n_rollouts));
    }
    return out;
}

// Open-loop (n = 0) total loss, used for validation and LR scheduling.
inline double open_loop_loss(const Scenario& scn, DecoderParams& params, const TrainConfig& cfg,
                             const std::vector<GoalToken>& goals) {
    TrainConfig ol = cfg;
    ol.t_sim_steps = scn.t_pred_steps;  // no closed-loop samples
    ad::Tape tape;
    tape.grad_enabled = false;
    ParamUse use(tape, params.store);
    SimulationMask mask;  // unused: no simulation happens
    const SampleForward f = forward_sample(tape, scn, params, use, ol, mask, goals);
    return f.record.total_value;
}

// --- optimizer -------------------------------------------------------------------

// Adam with decoupled weight decay.
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step_count = 0;

    void step(ParamStore& store, double lr, double weight_decay) {
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (int i = 0; i < store.size(); ++i) {
            ParamTensor& t = store[i];
            if (t.adam_m.size() == 0) {
                t.adam_m = ad::Matrix(t.value.rows, t.value.cols);
                t.adam_v = ad::Matrix(t.value.rows, t.value.cols);
            }
            for (std::size_t j = 0; j < t.value.size(); ++j) {
                const double g = t.grad.data[j];
                t.adam_m.data[j] = beta1 * t.adam_m.data[j] + (1.0 - beta1) * g;
                t.adam_v.data[j] = beta2 * t.adam_v.data[j] + (1.0 - beta2) * g * g;
                const double mhat = t.adam_m.data[j] / bc1;
                const double vhat = t.adam_v.data[j] / bc2;
                t.value.data[j] -= lr * (mhat / (std::sqrt(vhat) + eps) +
                                         weight_decay * t.value.data[j]);
            }
        }
    }
};

// One full training sample step: forward, backward, single optimizer update.
inline RolloutRecord train_sample(const Scenario& scn, DecoderParams& params, AdamW& opt,
                                  const TrainConfig& cfg, SeedStream& mask_stream,
                                  SeedStream& goal_stream) {
    const GroundTruth gt = extract_ground_truth(scn);
    const SimulationMask mask = sample_mask(
        mask_stream, static_cast<int>(surrounding_indices(scn).size()),
        cfg.effective_mask_ratio());
    const std::vector<GoalToken> goals = sample_goal_tokens(goal_stream, gt, scn.t_pred_steps);

    ad::Tape tape;
    ParamUse use(tape, params.store);
    SampleForward f = forward_sample(tape, scn, params, use, cfg, mask, goals);
    params.store.zero_grad();
    tape.backward_from(f.total);
    accumulate_param_grads(tape, params.store);
    opt.step(params.store, cfg.learning_rate, cfg.weight_decay);
    return f.record;
}

// --- full training loop -------------------------------------------------------------

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
    double wall_time_s = 0.0;
};

struct TrainResult {
    DecoderParams params;
    std::vector<EpochLog> log;
    int stopped_epoch = 0;
};

inline TrainResult train(const std::vector<Scenario>& train_set,
                         const std::vector<Scenario>& val_set, const TrainConfig& cfg) {
    if (train_set.empty() || val_set.empty()) {
        throw ConfigError("train: training and validation sets must be non-empty");
    }
    const Scenario& first = train_set.front();
    cfg.validate(first.t_pred_steps);
    for (const auto& s : train_set) {
        if (s.t_in_steps != first.t_in_steps || s.t_pred_steps != first.t_pred_steps ||
            s.dt != first.dt) {
            throw ValidationError("train: scenarios disagree on dt or horizons");
        }
    }

    TrainResult result;
    result.params = build_params(cfg.net, first.t_in_steps, first.t_pred_steps);
    init_params(result.params, cfg.seed);

    SeedStream mask_stream(cfg.seed, "mask-sampling");
    SeedStream goal_stream(cfg.seed, "goal-sampling");
    SeedStream shuffle_stream(cfg.seed, "batch-shuffle");
    SeedStream val_master(cfg.seed, "validation");

    AdamW opt;
    double lr = cfg.learning_rate;
    double best_val = 1e300;
    int epochs_since_best = 0;
    int plateau_bad = 0;

    auto validation_loss = [&]() {
        double sum = 0.0;
        for (std::size_t i = 0; i < val_set.size(); ++i) {
            SeedStream gs = val_master.fork("goals", i);
            const GroundTruth gt = extract_ground_truth(val_set[i]);
            const auto goals = sample_goal_tokens(gs, gt, val_set[i].t_pred_steps);
            sum += open_loop_loss(val_set[i], result.params, cfg, goals);
        }
        return sum / static_cast<double>(val_set.size());
    };

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        shuffle_stream.shuffle(order);

        double epoch_loss = 0.0;
        std::size_t pos = 0;
        while (pos < order.size()) {
            const std::size_t batch_end =
                std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size));
            result.params.store.zero_grad();
            for (std::size_t b = pos; b < batch_end; ++b) {
                const Scenario& scn = train_set[order[b]];
                const GroundTruth gt = extract_ground_truth(scn);
                const SimulationMask mask = sample_mask(
                    mask_stream, static_cast<int>(surrounding_indices(scn).size()),
                    cfg.effective_mask_ratio());
                const auto goals = sample_goal_tokens(goal_stream, gt, scn.t_pred_steps);

                ad::Tape tape;
                ParamUse use(tape, result.params.store);
                SampleForward f = forward_sample(tape, scn, result.params, use, cfg, mask, goals);
                tape.backward_from(f.total);
                accumulate_param_grads(tape, result.params.store);
                epoch_loss += f.record.total_value;
            }
            const double inv = 1.0 / static_cast<double>(batch_end - pos);
            for (int i = 0; i < result.params.store.size(); ++i) {
                for (auto& g : result.params.store[i].grad.data) g *= inv;
            }
            opt.step(result.params.store, lr, cfg.weight_decay);
            pos = batch_end;
        }
        epoch_loss /= static_cast<double>(train_set.size());

        const double val = validation_loss();
        if (val < best_val - 1e-12) {
            best_val = val;
            epochs_since_best = 0;
            plateau_bad = 0;
        } else {
            ++epochs_since_best;
            ++plateau_bad;
        }
        if (plateau_bad > cfg.lr_plateau.patience) {
            lr = std::max(lr * cfg.lr_plateau.factor, cfg.lr_plateau.min_lr);
            plateau_bad = 0;
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_loss = epoch_loss;
        log.val_loss = val;
        log.lr = lr;
        log.wall_time_s = std::chrono::duration<double>(
            std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(log);
        result.stopped_epoch = epoch;

        if (lr <= cfg.lr_plateau.min_lr && epochs_since_best >= cfg.early_stop_patience) {
            break;
        }
    }
    return result;
}

}  // namespace clsim
