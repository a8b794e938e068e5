#include <doctest.h>

#include <cmath>
#include <vector>

#include "clsim/losses.hpp"
#include "clsim/rng.hpp"

using namespace clsim;

namespace {

SymMat2 random_spd(SeedStream& rng) {
    // random rotation of a random positive diagonal
    const double l1 = std::exp(rng.uniform(-2.0, 2.0));
    const double l2 = std::exp(rng.uniform(-2.0, 2.0));
    const double th = rng.uniform(-3.1, 3.1);
    const double c = std::cos(th), s = std::sin(th);
    return {c * c * l1 + s * s * l2, c * s * (l1 - l2), s * s * l1 + c * c * l2};
}

// Independent oracle: diagonalize sigma, rotate the residual into the
// eigenbasis and assemble the NLL from eigenvalues. No explicit inverse.
double nll_eigen_oracle(const Vec2& y, const Gaussian2D& g, double lam) {
    const double a = g.sigma.xx, b = g.sigma.xy, c = g.sigma.yy;
    const double theta = 0.5 * std::atan2(2.0 * b, a - c);
    const double ct = std::cos(theta), st = std::sin(theta);
    const double l1 = a * ct * ct + 2.0 * b * ct * st + c * st * st;
    const double l2 = a * st * st - 2.0 * b * ct * st + c * ct * ct;
    const Vec2 r = y - g.mu;
    const double qx = ct * r.x + st * r.y;
    const double qy = -st * r.x + ct * r.y;
    return std::sqrt(qx * qx / l1 + qy * qy / l2) + lam * (std::log(l1) + std::log(l2));
}

GaussianTrajectory traj_from_means(const std::vector<Vec2>& mu, int first_step = 1) {
    GaussianTrajectory t;
    t.first_step = first_step;
    for (const auto& m : mu) t.steps.push_back({m, SymMat2::identity()});
    return t;
}

}  // namespace

TEST_CASE("rotate_covariance closed-form cases") {
    // isotropic invariance
    SymMat2 r = rotate_covariance(SymMat2::identity(), 3.14159265358979 / 3.0);
    CHECK(r.xx == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.xy == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.yy == doctest::Approx(1.0).epsilon(1e-12));

    // diag(4, 1) by pi/2 swaps the axes
    r = rotate_covariance(SymMat2::diag(4.0, 1.0), 1.5707963267948966);
    CHECK(std::abs(r.xx - 1.0) < 1e-12);
    CHECK(std::abs(r.xy) < 1e-12);
    CHECK(std::abs(r.yy - 4.0) < 1e-12);

    // diag(4, 1) by pi/4: hand-computed R S R^T
    r = rotate_covariance(SymMat2::diag(4.0, 1.0), 0.78539816339744831);
    CHECK(r.xx == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(r.xy == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(r.yy == doctest::Approx(2.5).epsilon(1e-12));

    CHECK_THROWS_AS(rotate_covariance(SymMat2::diag(-1.0, 1.0), 0.3), ValidationError);
}

TEST_CASE("rotate_covariance properties: determinant and composition") {
    SeedStream rng(7, "losses-rot");
    for (int i = 0; i < 1000; ++i) {
        const SymMat2 sigma = random_spd(rng);
        const double th = rng.uniform(-6.0, 6.0);
        const SymMat2 r = rotate_covariance(sigma, th);
        CHECK(std::abs(r.det() - sigma.det()) < 1e-9 * std::max(1.0, std::abs(sigma.det())));

        const double a = rng.uniform(-3.0, 3.0), b = rng.uniform(-3.0, 3.0);
        const SymMat2 two_step = rotate_covariance(rotate_covariance(sigma, a), b);
        const SymMat2 one_step = rotate_covariance(sigma, a + b);
        CHECK(std::abs(two_step.xx - one_step.xx) < 1e-9);
        CHECK(std::abs(two_step.xy - one_step.xy) < 1e-9);
        CHECK(std::abs(two_step.yy - one_step.yy) < 1e-9);
    }
}

TEST_CASE("nll_full_cov closed-form cases") {
    CHECK(nll_full_cov({1.0, 2.0}, {{1.0, 2.0}, SymMat2::identity()}, 1.0) == 0.0);
    // residual (3, 4) with identity covariance: pure Euclidean norm
    CHECK(nll_full_cov({3.0, 4.0}, {{0.0, 0.0}, SymMat2::identity()}, 1.0) ==
          doctest::Approx(5.0).epsilon(1e-14));
    // residual (1, 0), diag(4, 1): 0.5 + ln 4
    CHECK(nll_full_cov({1.0, 0.0}, {{0.0, 0.0}, SymMat2::diag(4.0, 1.0)}, 1.0) ==
          doctest::Approx(0.5 + std::log(4.0)).epsilon(1e-14));
    // determinant guard
    CHECK_THROWS(nll_full_cov({0.0, 0.0}, {{0.0, 0.0}, SymMat2::diag(1e-10, 1e-10)}, 1.0));
}

TEST_CASE("nll_full_cov matches the eigen-decomposition oracle") {
    SeedStream rng(11, "losses-nll");
    for (int i = 0; i < 10000; ++i) {
        Gaussian2D g{{rng.normal() * 5.0, rng.normal() * 5.0}, random_spd(rng)};
        const Vec2 y{rng.normal() * 5.0, rng.normal() * 5.0};
        const double lam = rng.uniform(0.0, 2.0);
        const double got = nll_full_cov(y, g, lam);
        const double want = nll_eigen_oracle(y, g, lam);
        CHECK(std::abs(got - want) <= 1e-10 * std::max(1.0, std::abs(want)));
    }
}

TEST_CASE("nll_full_cov isotropic closed form") {
    SeedStream rng(12, "losses-iso");
    for (int i = 0; i < 200; ++i) {
        const double c = std::exp(rng.uniform(-1.0, 1.0));
        const double lam = rng.uniform(0.0, 2.0);
        Gaussian2D g{{rng.normal(), rng.normal()}, SymMat2::diag(c * c, c * c)};
        const Vec2 y{rng.normal() * 3.0, rng.normal() * 3.0};
        const double want = (y - g.mu).norm() / c + lam * 2.0 * std::log(c * c);
        CHECK(nll_full_cov(y, g, lam) == doctest::Approx(want).epsilon(1e-10));
    }
}

TEST_CASE("select_best_mode basics and exhaustive oracle") {
    std::vector<Vec2> y = {{0, 0}, {1, 0}, {2, 0}};

    // single mode
    CHECK(select_best_mode(y, {traj_from_means({{5, 5}, {6, 5}, {7, 5}})}) == 0);

    // exact-match mode wins
    std::vector<GaussianTrajectory> modes;
    modes.push_back(traj_from_means({{1, 1}, {2, 1}, {3, 1}}));
    modes.push_back(traj_from_means({{9, 9}, {9, 9}, {9, 9}}));
    modes.push_back(traj_from_means({{0, 0}, {1, 0}, {2, 0}}));
    CHECK(select_best_mode(y, modes) == 2);

    // 100 seeded cases vs a brute-force distance table
    SeedStream rng(13, "losses-best");
    for (int cs = 0; cs < 100; ++cs) {
        const int T = 4;
        std::vector<Vec2> yy;
        for (int t = 0; t < T; ++t) yy.push_back({rng.normal() * 3.0, rng.normal() * 3.0});
        std::vector<GaussianTrajectory> ms;
        for (int m = 0; m < 5; ++m) {
            std::vector<Vec2> mu;
            for (int t = 0; t < T; ++t) mu.push_back({rng.normal() * 3.0, rng.normal() * 3.0});
            ms.push_back(traj_from_means(mu));
        }
        std::size_t want = 0;
        double best = 1e300;
        for (std::size_t m = 0; m < ms.size(); ++m) {
            double d = 0.0;
            for (int t = 0; t < T; ++t) {
                d += std::hypot(yy[static_cast<std::size_t>(t)].x - ms[m].steps[static_cast<std::size_t>(t)].mu.x,
                                yy[static_cast<std::size_t>(t)].y - ms[m].steps[static_cast<std::size_t>(t)].mu.y);
            }
            if (d < best) {
                best = d;
                want = m;
            }
        }
        CHECK(select_best_mode(yy, ms) == want);

        // scaling every per-step residual by a positive constant scales all
        // summed distances uniformly and must keep the argmin
        std::vector<GaussianTrajectory> scaled = ms;
        for (auto& m : scaled) {
            for (std::size_t t = 0; t < m.steps.size(); ++t) {
                m.steps[t].mu.x = yy[t].x + 3.0 * (m.steps[t].mu.x - yy[t].x);
                m.steps[t].mu.y = yy[t].y + 3.0 * (m.steps[t].mu.y - yy[t].y);
            }
        }
        CHECK(select_best_mode(yy, scaled) == want);
    }

    // tie breaks to the lowest index
    std::vector<GaussianTrajectory> tie = {traj_from_means({{1, 0}, {1, 0}, {1, 0}}),
                                           traj_from_means({{1, 0}, {1, 0}, {1, 0}})};
    CHECK(select_best_mode({{0, 0}, {0, 0}, {0, 0}}, tie) == 0);
}

TEST_CASE("classification_loss basics") {
    std::vector<Vec2> y = {{0, 0}, {1, 0}};
    std::vector<GaussianTrajectory> modes;
    modes.push_back(traj_from_means({{0, 1}, {1, 1}}));
    modes.push_back(traj_from_means({{0, 2}, {1, 2}}));
    modes.push_back(traj_from_means({{0, 3}, {1, 3}}));

    auto summed_nll = [&](std::size_t m) {
        double s = 0.0;
        for (std::size_t t = 0; t < y.size(); ++t) {
            s += nll_full_cov(y[t], modes[m].steps[t], 1.0);
        }
        return s;
    };

    // single mode with probability one
    CHECK(classification_loss(y, {modes[0]}, {1.0}) == doctest::Approx(summed_nll(0)));
    // one-hot on mode 1
    CHECK(classification_loss(y, modes, {0.0, 1.0, 0.0}) == doctest::Approx(summed_nll(1)));
    // uniform probabilities give the arithmetic mean
    const double mean = (summed_nll(0) + summed_nll(1) + summed_nll(2)) / 3.0;
    const double third = 1.0 / 3.0;
    CHECK(classification_loss(y, modes, {third, third, third}) == doctest::Approx(mean));
    // probability sum violation
    CHECK_THROWS_AS(classification_loss(y, modes, {0.5, 0.4, 0.2}), ValidationError);
}

TEST_CASE("regression_loss term structure") {
    const int t_pred = 12, t_sim = 4;
    std::vector<Vec2> y;
    for (int t = 0; t < t_pred; ++t) y.push_back({0.5 * t, 0.1 * t});

    SeedStream rng(17, "losses-reg");
    auto make_rollout = [&](int n) {
        std::vector<Vec2> mu;
        for (int t = n * t_sim; t < t_pred; ++t) mu.push_back({rng.normal(), rng.normal()});
        return traj_from_means(mu, n * t_sim + 1);
    };
    std::vector<GaussianTrajectory> rollouts = {make_rollout(0), make_rollout(1), make_rollout(2)};

    LossConfig cfg;
    const double got = regression_loss(y, rollouts, t_sim, cfg);

    // hand expansion: term counts 12 / 8 / 4, weights 1 / 0.1 / 0.01
    double want = 0.0;
    const double weights[3] = {1.0, 0.1, 0.01};
    for (int n = 0; n < 3; ++n) {
        const auto& traj = rollouts[static_cast<std::size_t>(n)];
        CHECK(static_cast<int>(traj.steps.size()) == t_pred - n * t_sim);
        double s = 0.0;
        for (std::size_t i = 0; i < traj.steps.size(); ++i) {
            s += nll_full_cov(y[static_cast<std::size_t>(traj.first_step - 1) + i],
                              traj.steps[i], cfg.lambda_det);
        }
        want += weights[n] * s;
    }
    CHECK(got == doctest::Approx(want).epsilon(1e-14));

    // N = 0 is the plain open-loop sum
    CHECK(regression_loss(y, {rollouts[0]}, t_sim, cfg) ==
          doctest::Approx(regression_loss(y, {rollouts[0]}, t_pred, cfg)));

    // zero base annihilates every closed-loop term
    LossConfig zero = cfg;
    zero.lambda_n_base = 0.0;
    CHECK(regression_loss(y, rollouts, t_sim, zero) ==
          doctest::Approx(regression_loss(y, {rollouts[0]}, t_sim, zero)));

    // coverage violation
    auto bad = rollouts;
    bad[1].first_step = 2;
    CHECK_THROWS_AS(regression_loss(y, bad, t_sim, cfg), ContractError);
}

TEST_CASE("scene_loss structure") {
    // zero agents
    CHECK(scene_loss({}, {}, {}) == 0.0);

    std::vector<Vec2> y1 = {{1, 1}, {2, 1}};
    std::vector<Vec2> y2 = {{-1, 0}, {-2, 0}};

    // exact mean with identity covariance is zero
    CHECK(scene_loss({y1}, {traj_from_means(y1)}, {{true, true}}) == 0.0);

    // additivity over agents
    auto t1 = traj_from_means({{0, 0}, {0, 0}});
    auto t2 = traj_from_means({{1, 1}, {1, 1}});
    const double l1 = scene_loss({y1}, {t1}, {{true, true}});
    const double l2 = scene_loss({y2}, {t2}, {{true, true}});
    const double both = scene_loss({y1, y2}, {t1, t2}, {{true, true}, {true, true}});
    CHECK(both == doctest::Approx(l1 + l2).epsilon(1e-14));

    // invalid steps contribute zero
    const double masked = scene_loss({y1}, {t1}, {{true, false}});
    const double first_only = nll_full_cov(y1[0], t1.steps[0], 1.0);
    CHECK(masked == doctest::Approx(first_only));

    // closed-loop scene predictions are rejected
    auto cl = traj_from_means({{0, 0}}, 2);
    CHECK_THROWS_AS(scene_loss({{Vec2{1, 1}}}, {cl}, {{true}}), ContractError);
}
