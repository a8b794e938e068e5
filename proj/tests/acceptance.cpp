// Acceptance suite: one criterion per function, one PASS/FAIL line each.
// Runs every criterion by default; pass criterion names (p1..p9) to run a
// subset. Exit code 0 iff every executed criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "clsim/cli.hpp"
#include "clsim/eval.hpp"
#include "clsim/losses.hpp"
#include "clsim/net.hpp"
#include "clsim/scenario_gen.hpp"
#include "clsim/trainer.hpp"

using namespace clsim;
namespace fs = std::filesystem;

namespace {

struct Check {
    bool ok = true;
    std::string detail;

    void require(bool cond, const std::string& what) {
        if (!cond && ok) {
            ok = false;
            detail = what;
        }
    }
};

fs::path work_dir() {
    const fs::path dir = fs::temp_directory_path() / "clsim_acceptance";
    fs::create_directories(dir);
    return dir;
}

SymMat2 random_spd(SeedStream& rng) {
    const double l1 = std::exp(rng.uniform(-2.0, 2.0));
    const double l2 = std::exp(rng.uniform(-2.0, 2.0));
    const double th = rng.uniform(-3.14, 3.14);
    const double c = std::cos(th), s = std::sin(th);
    return {c * c * l1 + s * s * l2, c * s * (l1 - l2), s * s * l1 + c * c * l2};
}

// ----------------------------------------------------------------------------
// P1: covariance rotation correctness
// ----------------------------------------------------------------------------
Check p1() {
    Check c;
    SeedStream rng(101, "p1");
    for (int i = 0; i < 1000; ++i) {
        const SymMat2 sigma = random_spd(rng);
        const double theta = rng.uniform(-6.3, 6.3);
        const SymMat2 rot = rotate_covariance(sigma, theta);
        c.require(std::abs(rot.det() - sigma.det()) < 1e-9,
                  "determinant drift " + fmt_g9(rot.det() - sigma.det()));
    }
    // isotropic invariance
    for (double theta : {0.3, 1.1, 2.9, -2.2}) {
        const SymMat2 iso = rotate_covariance(SymMat2::diag(2.5, 2.5), theta);
        c.require(std::abs(iso.xx - 2.5) < 1e-12 && std::abs(iso.xy) < 1e-12 &&
                      std::abs(iso.yy - 2.5) < 1e-12,
                  "isotropic covariance changed under rotation");
    }
    // diag(4,1) rotated by pi/2 -> diag(1,4)
    const SymMat2 quarter = rotate_covariance(SymMat2::diag(4.0, 1.0), 1.5707963267948966);
    c.require(std::abs(quarter.xx - 1.0) < 1e-12 && std::abs(quarter.xy) < 1e-12 &&
                  std::abs(quarter.yy - 4.0) < 1e-12,
              "quarter-turn rotation of diag(4,1)");
    return c;
}

// ----------------------------------------------------------------------------
// P2: full-covariance NLL against a brute-force inverse implementation
// ----------------------------------------------------------------------------
double nll_brute_force(const Vec2& y, const Gaussian2D& g, double lam) {
    // explicit 2x2 inverse and determinant
    const double det = g.sigma.xx * g.sigma.yy - g.sigma.xy * g.sigma.xy;
    const double inv00 = g.sigma.yy / det;
    const double inv01 = -g.sigma.xy / det;
    const double inv11 = g.sigma.xx / det;
    const double rx = y.x - g.mu.x;
    const double ry = y.y - g.mu.y;
    const double m2 = rx * (inv00 * rx + inv01 * ry) + ry * (inv01 * rx + inv11 * ry);
    return std::sqrt(m2) + lam * std::log(det);
}

Check p2() {
    Check c;
    SeedStream rng(102, "p2");
    for (int i = 0; i < 10000; ++i) {
        Gaussian2D g{{5.0 * rng.normal(), 5.0 * rng.normal()}, random_spd(rng)};
        const Vec2 y{5.0 * rng.normal(), 5.0 * rng.normal()};
        const double lam = rng.uniform(0.0, 2.0);
        const double got = nll_full_cov(y, g, lam);
        const double want = nll_brute_force(y, g, lam);
        c.require(std::abs(got - want) <= 1e-10 * std::max(1.0, std::abs(want)),
                  "oracle deviation " + fmt_g9(got - want));
    }
    c.require(nll_full_cov({1.5, -2.0}, {{1.5, -2.0}, SymMat2::identity()}, 1.0) == 0.0,
              "zero residual must give exactly 0");
    c.require(nll_full_cov({3.0, 4.0}, {{0.0, 0.0}, SymMat2::identity()}, 1.0) == 5.0,
              "residual (3,4) with identity covariance must give exactly 5");
    return c;
}

// ----------------------------------------------------------------------------
// P3: gradient checks on a tiny net (hidden 8, 1 layer)
// ----------------------------------------------------------------------------
Check p3() {
    Check c;
    const Scenario scn = generate_intersection(333, 4, 1.0);
    NetConfig net;
    net.hidden_dim = 8;
    net.n_layers = 1;
    net.n_heads = 2;
    net.n_modes = 2;
    net.n_refinement_iters = 1;
    DecoderParams params = build_params(net, scn.t_in_steps, scn.t_pred_steps);
    init_params(params, 7);
    perturb_params(params, 8, 0.3);

    TrainConfig cfg;
    cfg.net = net;
    cfg.t_sim_steps = scn.t_pred_steps;  // open-loop sample: n = 0 only
    cfg.scene_source = SceneSource::log_replay;

    SeedStream ms(3, "m"), gs(3, "g");
    const GroundTruth gt = extract_ground_truth(scn);
    const SimulationMask mask =
        sample_mask(ms, static_cast<int>(surrounding_indices(scn).size()), 0.0);
    const auto goals = sample_goal_tokens(gs, gt, scn.t_pred_steps);

    auto values = [&]() {
        ad::Tape t;
        t.grad_enabled = false;
        ParamUse u(t, params.store);
        const SampleForward f = forward_sample(t, scn, params, u, cfg, mask, goals);
        return std::array<double, 3>{f.record.cls_value, f.record.reg_value,
                                     f.record.scene_value};
    };

    // analytic gradients of each loss
    std::vector<std::vector<ad::Matrix>> analytic(3);
    for (int which = 0; which < 3; ++which) {
        ad::Tape t;
        ParamUse u(t, params.store);
        const SampleForward f = forward_sample(t, scn, params, u, cfg, mask, goals);
        t.backward_from(which == 0 ? f.loss_cls : which == 1 ? f.loss_reg : f.loss_scene);
        params.store.zero_grad();
        accumulate_param_grads(t, params.store);
        for (int i = 0; i < params.store.size(); ++i) {
            analytic[static_cast<std::size_t>(which)].push_back(params.store[i].grad);
        }
    }

    const double h = 1e-5;
    SeedStream pick(9, "entries");
    for (int i = 0; i < params.store.size(); ++i) {
        ParamTensor& t = params.store[i];
        const bool is_phi = t.group == "phi";
        const std::size_t samples = std::min<std::size_t>(t.value.size(), 10);
        for (std::size_t k = 0; k < samples; ++k) {
            const std::size_t j =
                samples == t.value.size() ? k : static_cast<std::size_t>(pick.uniform_int(t.value.size()));
            const double saved = t.value.data[j];
            t.value.data[j] = saved + h;
            const auto up = values();
            t.value.data[j] = saved - h;
            const auto down = values();
            t.value.data[j] = saved;

            for (int which = 0; which < 3; ++which) {
                const double an = analytic[static_cast<std::size_t>(which)]
                                          [static_cast<std::size_t>(i)].data[j];
                if (which == 0 && !is_phi) {
                    // classification decoupling: the loss treats
                    // trajectory terms as constants and reads gradient-stopped
                    // features, so every non-phi gradient is exactly zero.
                    c.require(an == 0.0, "cls gradient leak into " + t.name);
                    continue;
                }
                const double fd = (up[static_cast<std::size_t>(which)] -
                                   down[static_cast<std::size_t>(which)]) / (2.0 * h);
                const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-2});
                c.require(rel < 1e-4, "loss " + std::to_string(which) + " grad of " + t.name +
                                          "[" + std::to_string(j) + "]: fd=" + fmt_g9(fd) +
                                          " analytic=" + fmt_g9(an));
            }
        }
    }
    return c;
}

// ----------------------------------------------------------------------------
// P4: simulator kinematics, mask purity, detach opacity
// ----------------------------------------------------------------------------
Check p4() {
    Check c;
    const Scenario scn = generate_intersection(404, 6, 1.0);
    const auto surrounding = surrounding_indices(scn);
    const std::size_t ego = scn.ego_index();

    // kinematics: simulated heading/velocity equal finite-difference oracles
    {
        DynamicContext ctx = initial_context(scn);
        SimConfig cfg;
        cfg.t_sim_steps = 4;
        std::vector<Vec2> pred;
        SeedStream rng(5, "pred");
        Vec2 prev = ctx.window[ego].back().position;
        std::vector<Vec2> chain{prev};
        for (int i = 0; i < 4; ++i) {
            chain.push_back(chain.back() + Vec2{1.0 + 0.3 * rng.normal(), 0.5 * rng.normal()});
            pred.push_back(chain.back());
        }
        SimulationMask mask;
        mask.flags.assign(surrounding.size(), false);
        const DynamicContext next = simulate_step(
            ctx, scn, pred, std::vector<std::optional<std::vector<Vec2>>>(surrounding.size()),
            mask, cfg);
        // the window holds the last t_in+1 = 3 simulated states (steps 2..4)
        for (int k = 0; k < 3; ++k) {
            const AgentState& st = next.window[ego][static_cast<std::size_t>(k)];
            const Vec2 pos_now = chain[static_cast<std::size_t>(k + 2)];
            const Vec2 pos_prev = chain[static_cast<std::size_t>(k + 1)];
            const double vx = (pos_now.x - pos_prev.x) / scn.dt;
            const double vy = (pos_now.y - pos_prev.y) / scn.dt;
            c.require(st.velocity.x == vx && st.velocity.y == vy,
                      "velocity is not exactly the finite difference");
            c.require(st.heading == std::atan2(pos_now.y - pos_prev.y, pos_now.x - pos_prev.x),
                      "heading is not exactly atan2 of the delta");
        }
        c.require(next.anchor_step == ctx.anchor_step + 4, "anchor advance");
    }

    // mask ratio 0: surrounding states bit-equal logs across a full rollout
    {
        DynamicContext ctx = initial_context(scn);
        SimConfig cfg;
        cfg.t_sim_steps = 4;
        SimulationMask mask;
        mask.flags.assign(surrounding.size(), false);
        const GroundTruth gt = extract_ground_truth(scn);
        for (int n = 0; n < 2; ++n) {
            std::vector<Vec2> ego_pred;
            for (int i = 0; i < 4; ++i) {
                ego_pred.push_back(
                    gt.y_ego[static_cast<std::size_t>(ctx.anchor_step - scn.anchor0() + i)]);
            }
            ctx = simulate_step(ctx, scn, ego_pred,
                                std::vector<std::optional<std::vector<Vec2>>>(surrounding.size()),
                                mask, cfg);
            for (std::size_t j : surrounding) {
                for (std::size_t k = 0; k < ctx.window[j].size(); ++k) {
                    const int step = ctx.anchor_step - ctx.t_in_steps + static_cast<int>(k);
                    const AgentState& got = ctx.window[j][k];
                    const AgentState& want = scn.tracks[j].states[static_cast<std::size_t>(step)];
                    c.require(got.position.x == want.position.x &&
                                  got.position.y == want.position.y &&
                                  got.heading == want.heading &&
                                  got.velocity.x == want.velocity.x &&
                                  got.velocity.y == want.velocity.y && got.valid == want.valid,
                              "log replay is not bit-exact");
                }
            }
        }
    }

    // detach: gradient of the rollout-1 loss holding D_1 fixed equals the
    // full tape gradient, on a 2-parameter toy decoder
    {
        Scenario toy;
        toy.scenario_id = "toy";
        toy.dt = 0.5;
        toy.t_in_steps = 2;
        toy.t_pred_steps = 4;
        AgentTrack tr;
        tr.agent_id = 0;
        tr.is_ego = true;
        for (int t = 0; t < toy.total_steps(); ++t) {
            AgentState st;
            st.position = {1.0 * t, 0.2 * t};
            st.velocity = {2.0, 0.4};
            st.heading = std::atan2(0.2, 1.0);
            st.valid = true;
            tr.states.push_back(st);
        }
        toy.tracks.push_back(tr);

        const GroundTruth gt = extract_ground_truth(toy);
        SimConfig sim_cfg;
        sim_cfg.t_sim_steps = 2;
        sim_cfg.detach_between_steps = true;

        // toy decoder: predicted step-k position = anchor + k * (a, b)
        auto rollout1_loss = [&](ad::Tape& tape, double a, double b,
                                 const DynamicContext* frozen_d1,
                                 ad::Value* ab_out) -> ad::Value {
            ad::Matrix ab(1, 2);
            ab.data = {a, b};
            ad::Value vab = tape.leaf(ab);
            if (ab_out) *ab_out = vab;

            AdContext d1;
            if (frozen_d1) {
                d1 = ad_context(tape, *frozen_d1);
            } else {
                AdContext d0 = ad_context(tape, initial_context(toy));
                const ad::Value anchor0 = anchor_pose(d0, 0);
                std::vector<ad::Value> steps0;
                for (int k = 1; k <= sim_cfg.t_sim_steps; ++k) {
                    steps0.push_back(ad::add(ad::slice_cols(anchor0, 0, 2),
                                             ad::scale(vab, static_cast<double>(k))));
                }
                d1 = simulate_step_ad(tape, d0, toy, ad::concat_rows(steps0), {}, {{}, 0.0},
                                      sim_cfg);
            }
            // rollout-1 prediction from the (possibly frozen) D_1 anchor
            const ad::Value anchor1 = anchor_pose(d1, 0);
            ad::Value loss = tape.constant(ad::Matrix::scalar(0.0));
            for (int k = 1; k <= 2; ++k) {
                const ad::Value pred = ad::add(ad::slice_cols(anchor1, 0, 2),
                                               ad::scale(vab, static_cast<double>(k)));
                const std::size_t target = static_cast<std::size_t>(sim_cfg.t_sim_steps + k - 1);
                ad::Matrix y(1, 2);
                y.data = {gt.y_ego[target].x, gt.y_ego[target].y};
                ad::Value r = ad::sub(tape.constant(y), pred);
                loss = ad::add(loss, ad::sum_all(ad::mul(r, r)));
            }
            return loss;
        };

        const double a0 = 0.9, b0 = 0.3;

        // full tape gradient (detach on)
        ad::Tape tape;
        ad::Value vab;
        ad::Value loss = rollout1_loss(tape, a0, b0, nullptr, &vab);
        tape.backward_from(loss);
        const double ga = tape.node(vab.idx).grad.data[0];
        const double gb = tape.node(vab.idx).grad.data[1];

        // finite differences holding D_1 fixed at its unperturbed value
        DynamicContext d1_frozen;
        {
            ad::Tape t0;
            t0.grad_enabled = false;
            AdContext d0 = ad_context(t0, initial_context(toy));
            const ad::Value anchor0 = anchor_pose(d0, 0);
            ad::Matrix ab(1, 2);
            ab.data = {a0, b0};
            const ad::Value vab0 = t0.constant(ab);
            std::vector<ad::Value> steps0;
            for (int k = 1; k <= sim_cfg.t_sim_steps; ++k) {
                steps0.push_back(ad::add(ad::slice_cols(anchor0, 0, 2),
                                         ad::scale(vab0, static_cast<double>(k))));
            }
            d1_frozen = plain_context(
                simulate_step_ad(t0, d0, toy, ad::concat_rows(steps0), {}, {{}, 0.0}, sim_cfg));
        }
        auto frozen_eval = [&](double a, double b) {
            ad::Tape t;
            t.grad_enabled = false;
            return rollout1_loss(t, a, b, &d1_frozen, nullptr).scalar();
        };
        const double h = 1e-6;
        const double fa = (frozen_eval(a0 + h, b0) - frozen_eval(a0 - h, b0)) / (2.0 * h);
        const double fb = (frozen_eval(a0, b0 + h) - frozen_eval(a0, b0 - h)) / (2.0 * h);
        c.require(std::abs(fa - ga) < 1e-6 * std::max(1.0, std::abs(fa)),
                  "detach sensitivity a: frozen=" + fmt_g9(fa) + " full=" + fmt_g9(ga));
        c.require(std::abs(fb - gb) < 1e-6 * std::max(1.0, std::abs(fb)),
                  "detach sensitivity b: frozen=" + fmt_g9(fb) + " full=" + fmt_g9(gb));
    }
    return c;
}

// ----------------------------------------------------------------------------
// P5: closed-loop training schedule with default horizons
// ----------------------------------------------------------------------------
Check p5() {
    Check c;
    c.require(rollout_count(12, 4) == 2, "N must be 2 for T_pred 12, T_sim 4");

    // regression-loss hand expansion: counts 12/8/4, weights 1/0.1/0.01
    {
        SeedStream rng(55, "p5");
        std::vector<Vec2> y;
        for (int t = 0; t < 12; ++t) y.push_back({0.7 * t, 0.1 * t});
        std::vector<GaussianTrajectory> rollouts;
        for (int n = 0; n < 3; ++n) {
            GaussianTrajectory traj;
            traj.first_step = n * 4 + 1;
            for (int t = traj.first_step; t <= 12; ++t) {
                traj.steps.push_back({{rng.normal(), rng.normal()}, SymMat2::diag(1.5, 0.8)});
            }
            rollouts.push_back(traj);
        }
        c.require(rollouts[0].steps.size() == 12 && rollouts[1].steps.size() == 8 &&
                      rollouts[2].steps.size() == 4,
                  "term counts must be 12/8/4");
        LossConfig lc;
        const double got = regression_loss(y, rollouts, 4, lc);
        double want = 0.0;
        const double weights[3] = {1.0, 0.1, 0.01};
        for (int n = 0; n < 3; ++n) {
            for (std::size_t i = 0; i < rollouts[static_cast<std::size_t>(n)].steps.size(); ++i) {
                const int t = rollouts[static_cast<std::size_t>(n)].first_step +
                              static_cast<int>(i);
                want += weights[n] * nll_full_cov(y[static_cast<std::size_t>(t - 1)],
                                                  rollouts[static_cast<std::size_t>(n)].steps[i],
                                                  lc.lambda_det);
            }
        }
        c.require(std::abs(got - want) < 1e-12 * std::max(1.0, std::abs(want)),
                  "hand-expanded regression sum mismatch");
    }

    // on-policy: the chosen mode is constant across n on 100 seeded samples
    {
        NetConfig net;
        net.hidden_dim = 16;
        net.n_layers = 1;
        net.n_heads = 2;
        net.n_modes = 5;
        net.n_refinement_iters = 0;
        TrainConfig cfg;
        cfg.net = net;
        cfg.t_sim_steps = 4;
        cfg.policy = Policy::on_policy;
        for (int i = 0; i < 100; ++i) {
            const Scenario scn = generate_intersection(5000 + static_cast<std::uint64_t>(i), 4, 1.0);
            DecoderParams params = build_params(net, scn.t_in_steps, scn.t_pred_steps);
            init_params(params, static_cast<std::uint64_t>(i));
            perturb_params(params, static_cast<std::uint64_t>(i) + 1, 0.2);
            SeedStream ms(static_cast<std::uint64_t>(i), "m");
            SeedStream gs(static_cast<std::uint64_t>(i), "g");
            const GroundTruth gt = extract_ground_truth(scn);
            const SimulationMask mask =
                sample_mask(ms, static_cast<int>(surrounding_indices(scn).size()), 0.5);
            const auto goals = sample_goal_tokens(gs, gt, scn.t_pred_steps);
            ad::Tape tape;
            tape.grad_enabled = false;
            ParamUse use(tape, params.store);
            const SampleForward f = forward_sample(tape, scn, params, use, cfg, mask, goals);
            c.require(f.record.n_rollouts == 2, "schedule must produce N = 2");
            for (const auto& step : f.record.steps) {
                c.require(step.chosen_mode == f.record.steps[0].chosen_mode,
                          "mode changed across rollouts under on-policy");
            }
        }
    }
    return c;
}

// shared toy-scale experiment state for P6/P7
struct P6State {
    bool ran = false;
    bool ok = false;
    std::string detail;
    fs::path data_dir;
    std::vector<fs::path> ol_ckpts, cl_ckpts;
    double ol_col[2] = {0, 0}, cl_col[2] = {0, 0};
    double ol_l2[2] = {0, 0}, cl_l2[2] = {0, 0};
};

// Calibrated toy-scale configuration: closed-loop trains at t_sim = 2.0 s
// with a hybrid (quarter-reactive) scene source; open-loop trains at the
// full horizon with log replay. Identical net and optimizer settings.
TrainConfig p6_train_config(bool closed_loop, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.net.hidden_dim = 32;
    cfg.net.n_layers = 2;
    cfg.net.n_heads = 4;
    cfg.net.n_modes = 5;
    cfg.net.n_refinement_iters = 1;
    cfg.epochs = 60;
    cfg.batch_size = 8;
    cfg.learning_rate = 2e-3;
    cfg.loss.lambda_n_base = 0.2;
    cfg.t_sim_steps = closed_loop ? 4 : 12;  // CL trains at 2.0 s, OL at the horizon
    cfg.scene_source = closed_loop ? SceneSource::hybrid : SceneSource::log_replay;
    cfg.sim_mask_ratio = 0.25;
    return cfg;
}

// ----------------------------------------------------------------------------
// P6: directional open-loop vs closed-loop reproduction
// ----------------------------------------------------------------------------
P6State run_p6() {
    P6State st;
    st.ran = true;
    const fs::path dir = work_dir() / "p6";
    fs::remove_all(dir);

    GenArgs gen_args;
    gen_args.out_dir = (dir / "data").string();
    gen_args.n_scenarios = 200;
    gen_args.seed = 2026;
    gen_args.n_agents = 8;
    gen_args.density = 1.0;
    cmd_gen(gen_args);
    st.data_dir = dir / "data";

    const std::vector<Scenario> train_set = load_split(st.data_dir.string(), "train");
    const std::vector<Scenario> val_set = load_split(st.data_dir.string(), "val");
    std::vector<Scenario> test_set = load_split(st.data_dir.string(), "test");
    // evaluate on everything held out from gradient updates
    test_set.insert(test_set.end(), val_set.begin(), val_set.end());

    std::vector<DecoderParams> ol_params, cl_params;
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        {
            const TrainConfig cfg = p6_train_config(false, seed);
            const TrainResult r = train(train_set, val_set, cfg);
            const fs::path p = dir / ("ol-" + std::to_string(seed) + ".ckpt");
            save_checkpoint(r.params, p.string());
            st.ol_ckpts.push_back(p);
            ol_params.push_back(r.params);
        }
        {
            const TrainConfig cfg = p6_train_config(true, seed);
            const TrainResult r = train(train_set, val_set, cfg);
            const fs::path p = dir / ("cl-" + std::to_string(seed) + ".ckpt");
            save_checkpoint(r.params, p.string());
            st.cl_ckpts.push_back(p);
            cl_params.push_back(r.params);
        }
    }

    EvalConfig ecfg;
    ecfg.t_sim_seconds = {1.0, 0.5};
    std::vector<Planner> ol_planners, cl_planners;
    for (auto& p : ol_params) ol_planners.push_back(make_net_planner(p));
    for (auto& p : cl_params) cl_planners.push_back(make_net_planner(p));
    const MetricsReport ol = evaluate(test_set, ol_planners, ecfg);
    const MetricsReport cl = evaluate(test_set, cl_planners, ecfg);

    st.ok = true;
    for (std::size_t f = 0; f < 2; ++f) {
        st.ol_col[f] = ol.collision_avg[f].mean;
        st.cl_col[f] = cl.collision_avg[f].mean;
        st.ol_l2[f] = ol.l2_avg[f].mean;
        st.cl_l2[f] = cl.l2_avg[f].mean;
        if (!(st.cl_col[f] <= st.ol_col[f])) {
            st.ok = false;
            st.detail += "collision at t_sim=" + fmt_g9(ecfg.t_sim_seconds[f]) + "s: CL " +
                         fmt_g9(st.cl_col[f]) + " > OL " + fmt_g9(st.ol_col[f]) + "; ";
        }
        if (!(st.cl_l2[f] <= 1.1 * st.ol_l2[f])) {
            st.ok = false;
            st.detail += "l2 at t_sim=" + fmt_g9(ecfg.t_sim_seconds[f]) + "s: CL " +
                         fmt_g9(st.cl_l2[f]) + " > 1.1 x OL " + fmt_g9(st.ol_l2[f]) + "; ";
        }
    }
    return st;
}

// ----------------------------------------------------------------------------
// P7: goal conditioning of the scene decoder after toy training
// ----------------------------------------------------------------------------
Check p7(const P6State& p6_state) {
    Check c;
    fs::path data_dir;
    if (p6_state.ran) {
        data_dir = p6_state.data_dir;
    } else {
        const fs::path dir = work_dir() / "p7";
        fs::remove_all(dir);
        GenArgs gen_args;
        gen_args.out_dir = (dir / "data").string();
        gen_args.n_scenarios = 200;
        gen_args.seed = 2026;
        gen_args.n_agents = 8;
        gen_args.density = 1.0;
        cmd_gen(gen_args);
        data_dir = dir / "data";
    }

    // dedicated toy training; the open-loop schedule trains the scene decoder
    // on exactly the same (n = 0) supervision the closed-loop runs use
    TrainConfig cfg = p6_train_config(false, 1);
    cfg.net.hidden_dim = 64;
    const TrainResult r = train(load_split(data_dir.string(), "train"),
                                load_split(data_dir.string(), "val"), cfg);
    DecoderParams params = r.params;

    std::vector<Scenario> test_set = load_split(data_dir.string(), "test");
    {
        const std::vector<Scenario> val_set = load_split(data_dir.string(), "val");
        test_set.insert(test_set.end(), val_set.begin(), val_set.end());
    }

    SeedStream goal_stream(77, "p7-goals");
    int agents = 0, hits = 0, sensitive = 0;
    for (const Scenario& scn : test_set) {
        const GroundTruth gt = extract_ground_truth(scn);
        const auto goals = sample_goal_tokens(goal_stream, gt, scn.t_pred_steps);
        if (goals.empty()) continue;

        ad::Tape tape;
        tape.grad_enabled = false;
        ParamUse use(tape, params.store);
        AdContext ctx = ad_context(tape, initial_context(scn));
        ContextEmbedding emb = embed_context(tape, scn, ctx, params, use);
        const SceneDecode scene = decode_scene(tape, emb, goals, params, use, 1);

        // displaced goals for the sensitivity check
        std::vector<GoalToken> moved = goals;
        for (auto& g : moved) {
            g.goal_position = g.goal_position + Vec2{6.0, -4.0};
            g.goal_step = std::max(1, g.goal_step - 3);
        }
        const SceneDecode scene2 = decode_scene(tape, emb, moved, params, use, 1);

        for (std::size_t i = 0; i < scene.trajs.size(); ++i) {
            int token = 0;
            for (int tok = 0; tok < emb.n_agent_tokens; ++tok) {
                if (emb.token_track[static_cast<std::size_t>(tok)] == scene.track_index[i])

                    token = tok;
            }
            const ad::Value pose = ad::gather_rows(emb.poses, {token});
            const ad::Value world = ad::local_to_frame(pose, scene.trajs[i].mu);
            const int gs = goals[i].goal_step;
            const Vec2 at_goal{world.val().at(gs - 1, 0), world.val().at(gs - 1, 1)};
            ++agents;
            if ((at_goal - goals[i].goal_position).norm() <= 2.0) ++hits;

            const ad::Value world2 = ad::local_to_frame(pose, scene2.trajs[i].mu);
            double max_disp = 0.0;
            for (int t = 0; t < world.rows(); ++t) {
                const Vec2 delta{world2.val().at(t, 0) - world.val().at(t, 0),
                                 world2.val().at(t, 1) - world.val().at(t, 1)};
                max_disp = std::max(max_disp, delta.norm());
            }
            if (max_disp > 0.5) ++sensitive;
        }
    }
    c.require(agents > 0, "no held-out agents");
    const double hit_rate = agents > 0 ? static_cast<double>(hits) / agents : 0.0;
    const double sens_rate = agents > 0 ? static_cast<double>(sensitive) / agents : 0.0;
    c.require(hit_rate >= 0.8, "goal hit rate " + fmt_g9(hit_rate) + " < 0.8 over " +
                                   std::to_string(agents) + " agents");
    c.require(sens_rate >= 0.8, "goal sensitivity rate " + fmt_g9(sens_rate) + " < 0.8");
    c.detail = "hit_rate=" + fmt_g9(hit_rate) + " sensitivity=" + fmt_g9(sens_rate) +
               (c.ok ? "" : " | " + c.detail);
    return c;
}

// ----------------------------------------------------------------------------
// P8: evaluation protocol invariants
// ----------------------------------------------------------------------------
Check p8() {
    Check c;

    // oracle predictor on collision-free scenarios: zero everywhere
    {
        Scenario s;
        s.scenario_id = "cf";
        s.dt = 0.5;
        s.t_in_steps = 2;
        s.t_pred_steps = 12;
        for (int a = 0; a < 2; ++a) {
            AgentTrack tr;
            tr.agent_id = a;
            tr.is_ego = a == 0;
            for (int t = 0; t < s.total_steps(); ++t) {
                AgentState st;
                st.position = {2.0 * t, 50.0 * a};  // parallel, 50 m apart
                st.velocity = {4.0, 0.0};
                st.heading = 0.0;
                st.valid = true;
                tr.states.push_back(st);
            }
            s.tracks.push_back(tr);
        }
        const MetricsReport rep = evaluate({s}, {make_oracle_planner()}, EvalConfig{});
        for (std::size_t f = 0; f < rep.t_sim_seconds.size(); ++f) {
            c.require(rep.collision_avg[f].mean == 0.0, "oracle collision not zero");
            c.require(rep.l2_avg[f].mean == 0.0, "oracle l2 not zero");
        }
    }

    // metrics before the first replanning point agree across frequencies
    {
        const Scenario scn = generate_intersection(88, 6, 1.0);
        NetConfig net;
        net.hidden_dim = 16;
        net.n_layers = 1;
        net.n_heads = 2;
        net.n_modes = 3;
        net.n_refinement_iters = 0;
        DecoderParams params = build_params(net, scn.t_in_steps, scn.t_pred_steps);
        init_params(params, 3);
        perturb_params(params, 4, 0.2);
        EvalConfig cfg;
        cfg.t_sim_seconds = {3.0, 2.0, 1.5, 1.0};  // first replan at 1.0 s or later
        const MetricsReport rep = evaluate({scn}, {make_net_planner(params)}, cfg);
        for (int t = 0; t < 2; ++t) {  // t = 0.5 s and 1.0 s
            for (std::size_t f = 1; f < rep.t_sim_seconds.size(); ++f) {
                c.require(rep.l2[f][static_cast<std::size_t>(t)].mean ==
                              rep.l2[0][static_cast<std::size_t>(t)].mean,
                          "pre-replan l2 differs across frequencies");
                c.require(rep.collision[f][static_cast<std::size_t>(t)].mean ==
                              rep.collision[0][static_cast<std::size_t>(t)].mean,
                          "pre-replan collision differs across frequencies");
            }
        }
    }

    // improvement column formula on CSV fixtures
    {
        MetricsReport a, b;
        a.dt = b.dt = 0.5;
        a.t_sim_seconds = b.t_sim_seconds = {1.0};
        MetricCell ca, cb, l;
        ca.mean = 2.00;
        cb.mean = 2.74;
        l.mean = 1.0;
        a.collision_avg = {ca};
        b.collision_avg = {cb};
        a.l2_avg = {l};
        b.l2_avg = {l};
        const std::string csv = summary_csv({"cl", "ol"}, {a, b}, "fixture", "hash");
        std::istringstream in(csv);
        std::string line;
        bool found = false;
        while (std::getline(in, line)) {
            if (line.rfind("improvement_pct(cl/ol),1,", 0) == 0) {
                found = true;
                std::stringstream ss(line);
                std::string cell;
                std::getline(ss, cell, ',');  // row label
                std::getline(ss, cell, ',');  // t_sim
                std::getline(ss, cell, ',');  // collision improvement
                const double got = std::stod(cell);
                const double want = (2.74 - 2.00) * 100.0 / 2.74;
                c.require(std::abs(got - want) < 1e-6, "improvement formula mismatch");
            }
        }
        c.require(found, "improvement row missing from the summary CSV");
    }
    return c;
}

// ----------------------------------------------------------------------------
// P9: end-to-end determinism of gen -> train -> eval
// ----------------------------------------------------------------------------
std::string file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream buf;
    buf << f.rdbuf();
    return buf.str();
}

Check p9() {
    Check c;
    auto pipeline = [&](const fs::path& root) {
        fs::remove_all(root);
        GenArgs gen_args;
        gen_args.out_dir = (root / "data").string();
        gen_args.n_scenarios = 12;
        gen_args.seed = 99;
        gen_args.n_agents = 4;
        gen_args.density = 1.0;
        cmd_gen(gen_args);

        TrainConfig cfg;
        cfg.net.hidden_dim = 16;
        cfg.net.n_layers = 1;
        cfg.net.n_heads = 2;
        cfg.net.n_modes = 2;
        cfg.net.n_refinement_iters = 0;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.t_sim_steps = 4;
        write_json_file((root / "config.json").string(), train_config_to_json(cfg));

        TrainArgs train_args;
        train_args.config_path = (root / "config.json").string();
        train_args.data_dir = (root / "data").string();
        train_args.out_dir = (root / "runs").string();
        const RunManifest tm = cmd_train(train_args);

        EvalArgs eval_args;
        eval_args.checkpoints = {"model=" + tm.artifacts.at("checkpoint")};
        eval_args.data_dir = (root / "data").string();
        eval_args.t_sim_seconds = {1.0};
        eval_args.out_dir = (root / "eval").string();
        const RunManifest em = cmd_eval(eval_args);

        return std::pair{file_bytes(tm.artifacts.at("checkpoint")),
                         file_bytes(em.artifacts.at("summary.csv")) +
                             file_bytes(em.artifacts.at("per_timestep_model.csv")) +
                             file_bytes(em.artifacts.at("segments_model.csv"))};
    };

    const auto a = pipeline(work_dir() / "p9a");
    const auto b = pipeline(work_dir() / "p9b");
    c.require(a.first == b.first, "checkpoints differ between identical runs");
    c.require(a.second == b.second, "evaluation reports differ between identical runs");
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> only;
    for (int i = 1; i < argc; ++i) only.push_back(argv[i]);
    auto wants = [&](const std::string& name) {
        if (only.empty()) return true;
        for (const auto& o : only) {
            if (o == name) return true;
        }
        return false;
    };

    int failures = 0;
    P6State p6_state;

    auto report = [&](const std::string& name, const std::string& what,
                      const std::function<Check()>& fn) {
        if (!wants(name)) return;
        const auto t0 = std::chrono::steady_clock::now();
        Check c;
        try {
            c = fn();
        } catch (const std::exception& e) {
            c.ok = false;
            c.detail = std::string("exception: ") + e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s %s — %s (%.1fs)%s%s\n", name.c_str(), c.ok ? "PASS" : "FAIL",
                    what.c_str(), secs, c.detail.empty() ? "" : ": ", c.detail.c_str());
        std::fflush(stdout);
        if (!c.ok) ++failures;
    };

    report("P1", "covariance rotation correctness", p1);
    report("P2", "full-covariance NLL oracle equivalence", p2);
    report("P3", "gradient checks on a tiny net", p3);
    report("P4", "simulator kinematics, replay purity and detach opacity", p4);
    report("P5", "closed-loop schedule and on-policy mode stability", p5);
    report("P6", "directional open-loop vs closed-loop reproduction", [&]() {
        p6_state = run_p6();
        Check c;
        c.ok = p6_state.ok;
        c.detail = "OL col=[" + fmt_g9(p6_state.ol_col[0]) + "," + fmt_g9(p6_state.ol_col[1]) +
                   "] CL col=[" + fmt_g9(p6_state.cl_col[0]) + "," + fmt_g9(p6_state.cl_col[1]) +
                   "] OL l2=[" + fmt_g9(p6_state.ol_l2[0]) + "," + fmt_g9(p6_state.ol_l2[1]) +
                   "] CL l2=[" + fmt_g9(p6_state.cl_l2[0]) + "," + fmt_g9(p6_state.cl_l2[1]) +
                   "]" + (p6_state.detail.empty() ? "" : " | " + p6_state.detail);
        return c;
    });
    report("P7", "scene decoder goal conditioning", [&]() { return p7(p6_state); });
    report("P8", "evaluation protocol invariants", p8);
    report("P9", "end-to-end determinism of gen/train/eval", p9);

    if (failures > 0) {
        std::printf("ACCEPTANCE: %d criterion(s) failed\n", failures);
        return 1;
    }
    std::printf("ACCEPTANCE: all executed criteria passed\n");
    return 0;
}
