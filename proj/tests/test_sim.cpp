#include <doctest.h>

#include <cmath>
#include <optional>
#include <vector>

#include "clsim/scenario_gen.hpp"
#include "clsim/sim.hpp"

using namespace clsim;

namespace {

// single-agent scenario with the ego driving east at 2 m/s
Scenario ego_only_scenario(int t_in = 2, int t_pred = 4) {
    Scenario s;
    s.scenario_id = "ego-only";
    s.dt = 0.5;
    s.t_in_steps = t_in;
    s.t_pred_steps = t_pred;
    AgentTrack tr;
    tr.agent_id = 0;
    tr.is_ego = true;
    for (int t = 0; t < s.total_steps(); ++t) {
        AgentState st;
        st.position = {t * 1.0, 0.0};
        st.heading = 0.0;
        st.velocity = {2.0, 0.0};
        st.valid = true;
        tr.states.push_back(st);
    }
    s.tracks.push_back(tr);
    return s;
}

std::vector<Vec2> log_positions(const Scenario& s, std::size_t track, int from_step, int n) {
    std::vector<Vec2> out;
    for (int i = 0; i < n; ++i) {
        out.push_back(s.tracks[track].states[static_cast<std::size_t>(from_step + i)].position);
    }
    return out;
}

}  // namespace

TEST_CASE("rollout_count floor arithmetic") {
    CHECK(rollout_count(12, 4) == 2);   // default schedule
    CHECK(rollout_count(12, 12) == 0);  // pure open loop
    CHECK(rollout_count(12, 1) == 11);
    CHECK(rollout_count(12, 5) == 2);
    CHECK_THROWS_AS(rollout_count(12, 0), ContractError);
    CHECK_THROWS_AS(rollout_count(12, 13), ContractError);
}

TEST_CASE("sample_mask extremes and concentration") {
    SeedStream s0(3, "mask");
    const SimulationMask none = sample_mask(s0, 8, 0.0);
    for (bool f : none.flags) CHECK_FALSE(f);

    const SimulationMask all = sample_mask(s0, 8, 1.0);
    for (bool f : all.flags) CHECK(f);

    SeedStream s1(99, "mask");
    const SimulationMask half = sample_mask(s1, 10000, 0.5);
    int count = 0;
    for (bool f : half.flags) count += f ? 1 : 0;
    const double frac = count / 10000.0;
    CHECK(frac > 0.48);
    CHECK(frac < 0.52);

    // deterministic under a fixed stream
    SeedStream s2a(7, "mask"), s2b(7, "mask");
    const SimulationMask a = sample_mask(s2a, 64, 0.3);
    const SimulationMask b = sample_mask(s2b, 64, 0.3);
    CHECK(a.flags == b.flags);
}

TEST_CASE("simulate_step derives kinematics by finite differences") {
    // ego at (0,0), predicted next position (1,0), dt = 0.5:
    // heading 0 and velocity (2, 0), by hand
    Scenario s = ego_only_scenario();
    for (auto& st : s.tracks[0].states) st.position = {0.0, 0.0};
    for (auto& st : s.tracks[0].states) st.velocity = {0.0, 0.0};
    DynamicContext ctx = initial_context(s);

    SimConfig cfg;
    cfg.t_sim_steps = 2;
    DynamicContext next = simulate_step(ctx, s, {{1.0, 0.0}, {1.5, 0.5}}, {}, {{}, 0.0}, cfg);

    CHECK(next.anchor_step == ctx.anchor_step + 2);
    REQUIRE(next.window.size() == 1);
    REQUIRE(next.window[0].size() == 3);  // t_in + 1

    const AgentState& first = next.window[0][1];
    CHECK(first.position.x == 1.0);
    CHECK(first.heading == 0.0);
    CHECK(first.velocity.x == doctest::Approx(2.0));
    CHECK(first.velocity.y == 0.0);

    const AgentState& second = next.window[0][2];
    CHECK(second.heading == doctest::Approx(std::atan2(0.5, 0.5)));
    CHECK(second.velocity.x == doctest::Approx(1.0));
    CHECK(second.velocity.y == doctest::Approx(1.0));

    // velocity * dt equals the positional delta exactly
    CHECK(second.velocity.x * s.dt == second.position.x - first.position.x);
    CHECK(second.velocity.y * s.dt == second.position.y - first.position.y);
}

TEST_CASE("heading carries over below the speed threshold") {
    Scenario s = ego_only_scenario();
    DynamicContext ctx = initial_context(s);
    const double h0 = ctx.window[0][2].heading;

    SimConfig cfg;
    cfg.t_sim_steps = 2;
    // stationary predictions: displacement is zero
    const Vec2 hold = ctx.window[0][2].position;
    DynamicContext next = simulate_step(ctx, s, {hold, hold}, {}, {{}, 0.0}, cfg);
    CHECK(next.window[0][1].heading == h0);
    CHECK(next.window[0][2].heading == h0);
    CHECK(next.window[0][1].velocity.x == 0.0);
}

TEST_CASE("all-false mask replays surrounding logs bit-exactly") {
    const Scenario s = generate_intersection(4, 6, 1.0);
    DynamicContext ctx = initial_context(s);
    const auto surrounding = surrounding_indices(s);

    SimConfig cfg;
    cfg.t_sim_steps = 4;
    SimulationMask mask;
    mask.flags.assign(surrounding.size(), false);
    std::vector<std::optional<std::vector<Vec2>>> no_preds(surrounding.size());

    const std::size_t ego = s.ego_index();
    for (int n = 0; n < 2; ++n) {
        const auto ego_pred = log_positions(s, ego, ctx.anchor_step + 1, cfg.t_sim_steps);
        ctx = simulate_step(ctx, s, ego_pred, no_preds, mask, cfg);
        for (std::size_t j : surrounding) {
            for (int k = 0; k <= ctx.t_in_steps; ++k) {
                const int step = ctx.anchor_step - ctx.t_in_steps + k;
                const AgentState& got = ctx.window[j][static_cast<std::size_t>(k)];
                const AgentState& want = s.tracks[j].states[static_cast<std::size_t>(step)];
                CHECK(got.position.x == want.position.x);
                CHECK(got.position.y == want.position.y);
                CHECK(got.heading == want.heading);
                CHECK(got.velocity.x == want.velocity.x);
                CHECK(got.velocity.y == want.velocity.y);
                CHECK(got.valid == want.valid);
            }
        }
    }
}

TEST_CASE("masked agent fed its own log positions reproduces the log kinematics") {
    const Scenario s = generate_intersection(11, 4, 1.0);
    DynamicContext ctx = initial_context(s);
    const auto surrounding = surrounding_indices(s);

    SimConfig cfg;
    cfg.t_sim_steps = 4;
    SimulationMask mask;
    mask.flags.assign(surrounding.size(), true);

    std::vector<std::optional<std::vector<Vec2>>> preds;
    for (std::size_t j : surrounding) {
        preds.push_back(log_positions(s, j, ctx.anchor_step + 1, cfg.t_sim_steps));
    }
    const std::size_t ego = s.ego_index();
    const auto ego_pred = log_positions(s, ego, ctx.anchor_step + 1, cfg.t_sim_steps);
    const DynamicContext next = simulate_step(ctx, s, ego_pred, preds, mask, cfg);

    for (std::size_t idx = 0; idx < surrounding.size(); ++idx) {
        const std::size_t j = surrounding[idx];
        for (int k = 1; k <= ctx.t_in_steps; ++k) {
            const int step = next.anchor_step - next.t_in_steps + k;
            const AgentState& got = next.window[j][static_cast<std::size_t>(k)];
            const AgentState& want = s.tracks[j].states[static_cast<std::size_t>(step)];
            CHECK(got.position.x == want.position.x);
            CHECK(got.position.y == want.position.y);
            CHECK(std::abs(got.heading - want.heading) < 1e-6);
            CHECK(std::abs(got.velocity.x - want.velocity.x) < 1e-6);
            CHECK(std::abs(got.velocity.y - want.velocity.y) < 1e-6);
        }
    }
}

TEST_CASE("masked agent with an invalidated log freezes in place") {
    Scenario s = generate_intersection(15, 3, 1.0);
    const auto surrounding = surrounding_indices(s);
    const std::size_t j = surrounding[0];
    // log becomes invalid from absolute step 3 on
    for (std::size_t t = 3; t < s.tracks[j].states.size(); ++t) {
        s.tracks[j].states[t].valid = false;
    }

    DynamicContext ctx = initial_context(s);
    SimConfig cfg;
    cfg.t_sim_steps = 4;
    SimulationMask mask;
    mask.flags.assign(surrounding.size(), false);
    mask.flags[0] = true;

    std::vector<std::optional<std::vector<Vec2>>> preds(surrounding.size());
    preds[0] = std::vector<Vec2>{{100.0, 0.0}, {101.0, 0.0}, {102.0, 0.0}, {103.0, 0.0}};
    const std::size_t ego = s.ego_index();
    const auto ego_pred = log_positions(s, ego, ctx.anchor_step + 1, cfg.t_sim_steps);
    const DynamicContext next = simulate_step(ctx, s, ego_pred, preds, mask, cfg);

    // prediction for step 2 (log valid) is taken; steps 3..5 freeze there
    const auto& w = next.window[j];
    CHECK(w[0].position.x == 100.0);  // abs step 3: frozen at step-2 value
    CHECK(w[1].position.x == 100.0);
    CHECK(w[2].position.x == 100.0);
    CHECK(w[2].velocity.x == 0.0);
    CHECK(w[2].valid);
}

TEST_CASE("simulate_step contract and simulation errors") {
    Scenario s = ego_only_scenario();
    DynamicContext ctx = initial_context(s);
    SimConfig cfg;
    cfg.t_sim_steps = 2;

    // wrong prediction length
    CHECK_THROWS_AS(simulate_step(ctx, s, {{1, 0}}, {}, {{}, 0.0}, cfg), ContractError);

    // rollout window past the log horizon
    SimConfig big = cfg;
    big.t_sim_steps = s.t_pred_steps + 1;
    std::vector<Vec2> pred(static_cast<std::size_t>(big.t_sim_steps), Vec2{1, 0});
    CHECK_THROWS_AS(simulate_step(ctx, s, pred, {}, {{}, 0.0}, big), ContractError);

    // non-finite prediction names the agent and step
    const double nan = std::nan("");
    try {
        simulate_step(ctx, s, {{1, 0}, {nan, 0}}, {}, {{}, 0.0}, cfg);
        FAIL("expected SimulationError");
    } catch (const SimulationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("agent 0") != std::string::npos);
        CHECK(msg.find("step 3") != std::string::npos);
    }
}

TEST_CASE("detach severs gradient flow through the context") {
    Scenario s = ego_only_scenario();

    auto window_sum_after_sim = [&](bool detach, bool with_grad, double* grad_out) {
        ad::Tape tape;
        tape.grad_enabled = with_grad;
        AdContext ctx = ad_context(tape, initial_context(s));
        ad::Matrix base(2, 2);
        base.data = {1.0, 0.0, 2.0, 0.5};
        ad::Value leaf = with_grad ? tape.leaf(base) : tape.constant(base);
        SimConfig cfg;
        cfg.t_sim_steps = 2;
        cfg.detach_between_steps = detach;
        AdContext next = simulate_step_ad(tape, ctx, s, leaf, {}, {{}, 0.0}, cfg);
        ad::Value loss = ad::sum_all(next.window[0]);
        if (with_grad) {
            tape.backward_from(loss);
            double g = 0.0;
            for (double v : tape.node(leaf.idx).grad.data) g += std::abs(v);
            *grad_out = g;
        }
        return loss.scalar();
    };

    double g_detached = -1.0;
    window_sum_after_sim(true, true, &g_detached);
    CHECK(g_detached == 0.0);

    double g_live = 0.0;
    window_sum_after_sim(false, true, &g_live);
    CHECK(g_live > 0.0);

    // finite-difference check of the non-detached path
    double unused = 0.0;
    ad::Tape probe;
    probe.grad_enabled = true;
    {
        AdContext ctx = ad_context(probe, initial_context(s));
        ad::Matrix base(2, 2);
        base.data = {1.0, 0.0, 2.0, 0.5};
        ad::Value leaf = probe.leaf(base);
        SimConfig cfg;
        cfg.t_sim_steps = 2;
        cfg.detach_between_steps = false;
        AdContext next = simulate_step_ad(probe, ctx, s, leaf, {}, {{}, 0.0}, cfg);
        probe.backward_from(ad::sum_all(next.window[0]));
        const ad::Matrix analytic = probe.node(leaf.idx).grad;

        const double h = 1e-6;
        for (std::size_t i = 0; i < base.size(); ++i) {
            auto eval = [&](double delta) {
                ad::Tape t2;
                t2.grad_enabled = false;
                AdContext c2 = ad_context(t2, initial_context(s));
                ad::Matrix b2 = base;
                b2.data[i] += delta;
                SimConfig cfg2;
                cfg2.t_sim_steps = 2;
                cfg2.detach_between_steps = false;
                AdContext n2 = simulate_step_ad(t2, c2, s, t2.constant(b2), {}, {{}, 0.0}, cfg2);
                return ad::sum_all(n2.window[0]).scalar();
            };
            const double fd = (eval(h) - eval(-h)) / (2.0 * h);
            CHECK(std::abs(fd - analytic.data[i]) < 1e-5 * std::max(1.0, std::abs(fd)));
        }
    }
    (void)unused;
}
