#pragma once

// Probabilistic losses for Gaussian trajectory regression.
//
// The negative log likelihood uses the full 2x2 covariance: the Mahalanobis
// distance of the residual plus a log-determinant penalty that keeps the
// predicted uncertainty from collapsing. Covariances predicted in a query
// frame are carried into other frames by explicit rotation, and the mixture
// objective is split into a classification loss over mode probabilities and
// a regression loss over per-rollout best-mode trajectories.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "clsim/common.hpp"
#include "clsim/geometry.hpp"

namespace clsim {

struct Gaussian2D {
    Vec2 mu;
    SymMat2 sigma;  // symmetric positive definite, m^2
};

// One predicted mode of one agent. `first_step` is the 1-based prediction
// step of steps.front(); a rollout-n trajectory starts at n*t_sim_steps + 1.
struct GaussianTrajectory {
    std::vector<Gaussian2D> steps;
    int first_step = 1;
};

struct LossConfig {
    double lambda_cls = 1.0;        // classification weight
    double lambda_reg_ego = 0.4;    // ego regression weight
    double lambda_reg_scene = 0.4;  // scene regression weight
    double lambda_n_base = 0.1;     // rollout-n weight is lambda_n_base^n
    double lambda_det = 1.0;        // covariance regularizer inside the NLL
    double sigma_min = 1e-4;        // variance floor, m^2
};

// rollout weight, with 0^0 == 1 so a zero base annihilates all n >= 1 terms
inline double rollout_weight(double base, int n) {
    if (n == 0) return 1.0;
    double w = 1.0;
    for (int i = 0; i < n; ++i) w *= base;
    return w;
}

// R(theta) * sigma * R(theta)^T, symmetrized to kill round-off drift.
inline SymMat2 rotate_covariance(const SymMat2& sigma, double theta) {
    if (!(sigma.xy == sigma.xy) || !sigma.is_spd()) {
        throw ValidationError("rotate_covariance: input is not symmetric positive-definite");
    }
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    // A = R * sigma
    const double a00 = c * sigma.xx - s * sigma.xy;
    const double a01 = c * sigma.xy - s * sigma.yy;
    const double a10 = s * sigma.xx + c * sigma.xy;
    const double a11 = s * sigma.xy + c * sigma.yy;
    // B = A * R^T
    const double b00 = a00 * c - a01 * s;
    const double b01 = a00 * s + a01 * c;
    const double b10 = a10 * c - a11 * s;
    const double b11 = a10 * s + a11 * c;
    return {b00, 0.5 * (b01 + b10), b11};
}

// sqrt((y-mu)^T Sigma^-1 (y-mu)) + lambda_det * log(det Sigma)
inline double nll_full_cov(const Vec2& y, const Gaussian2D& g, double lambda_det) {
    const double det = g.sigma.det();
    if (!(det > 1e-18)) {
        throw Error("nll_full_cov: covariance determinant too small (" + fmt_g9(det) + ")");
    }
    const double rx = y.x - g.mu.x;
    const double ry = y.y - g.mu.y;
    const double m2 = (rx * rx * g.sigma.yy - 2.0 * rx * ry * g.sigma.xy +
                       ry * ry * g.sigma.xx) / det;
    return std::sqrt(std::max(0.0, m2)) + lambda_det * std::log(det);
}

// Best mode: argmin over modes of the summed L2 distance between
// the ground truth and the mode means. Ties break to the lowest index.
inline std::size_t select_best_mode(const std::vector<Vec2>& y_ego,
                                    const std::vector<GaussianTrajectory>& modes) {
    if (modes.empty()) throw ContractError("select_best_mode: no modes");
    std::size_t best = 0;
    double best_dist = 0.0;
    for (std::size_t m = 0; m < modes.size(); ++m) {
        const auto& traj = modes[m];
        if (traj.steps.size() != y_ego.size() || traj.first_step != 1) {
            throw ContractError("select_best_mode: mode " + std::to_string(m) +
                                " does not cover steps 1..T_pred");
        }
        double d = 0.0;
        for (std::size_t t = 0; t < y_ego.size(); ++t) {
            d += (y_ego[t] - traj.steps[t].mu).norm();
        }
        if (m == 0 || d < best_dist) {
            best = m;
            best_dist = d;
        }
    }
    return best;
}

// Classification objective: probability-weighted sum of each mode's summed
// NLL on the open-loop (n = 0) prediction. Trajectory terms are constants;
// only the probabilities (and the parameters producing them) train on this.
inline double classification_loss(const std::vector<Vec2>& y_ego,
                                  const std::vector<GaussianTrajectory>& modes,
                                  const std::vector<double>& probs,
                                  const LossConfig& cfg = {}) {
    if (probs.size() != modes.size()) {
        throw ContractError("classification_loss: probs/modes size mismatch");
    }
    double psum = 0.0;
    for (double p : probs) {
        if (p < 0.0) throw ValidationError("classification_loss: negative probability");
        psum += p;
    }
    if (std::abs(psum - 1.0) > 1e-6) {
        throw ValidationError("classification_loss: probabilities sum to " + fmt_g9(psum));
    }
    double loss = 0.0;
    for (std::size_t m = 0; m < modes.size(); ++m) {
        const auto& traj = modes[m];
        if (traj.steps.size() != y_ego.size() || traj.first_step != 1) {
            throw ContractError("classification_loss: mode " + std::to_string(m) +
                                " does not cover steps 1..T_pred");
        }
        double nll = 0.0;
        for (std::size_t t = 0; t < y_ego.size(); ++t) {
            nll += nll_full_cov(y_ego[t], traj.steps[t], cfg.lambda_det);
        }
        loss += probs[m] * nll;
    }
    return loss;
}

// Rollout-weighted regression objective. Entry n must cover prediction
// steps n*t_sim_steps+1 .. T_pred of the chosen mode.
inline double regression_loss(const std::vector<Vec2>& y_ego,
                              const std::vector<GaussianTrajectory>& per_rollout_best,
                              int t_sim_steps,
                              const LossConfig& cfg = {}) {
    const int t_pred = static_cast<int>(y_ego.size());
    double loss = 0.0;
    for (std::size_t n = 0; n < per_rollout_best.size(); ++n) {
        const auto& traj = per_rollout_best[n];
        const int expect_first = static_cast<int>(n) * t_sim_steps + 1;
        if (traj.first_step != expect_first ||
            traj.first_step + static_cast<int>(traj.steps.size()) - 1 != t_pred) {
            throw ContractError("regression_loss: rollout " + std::to_string(n) +
                                " must cover steps " + std::to_string(expect_first) +
                                ".." + std::to_string(t_pred));
        }
        double nll = 0.0;
        for (std::size_t i = 0; i < traj.steps.size(); ++i) {
            const int t = traj.first_step + static_cast<int>(i);  // 1-based
            nll += nll_full_cov(y_ego[static_cast<std::size_t>(t - 1)], traj.steps[i],
                                cfg.lambda_det);
        }
        loss += rollout_weight(cfg.lambda_n_base, static_cast<int>(n)) * nll;
    }
    return loss;
}

// Scene regression, open-loop samples only. Invalid ground-truth steps
// contribute zero. Passing a trajectory that does not start at step 1 is a
// contract violation: scene training never consumes closed-loop rollouts.
inline double scene_loss(const std::vector<std::vector<Vec2>>& y_scene,
                         const std::vector<GaussianTrajectory>& scene_trajs,
                         const std::vector<std::vector<bool>>& validity,
                         const LossConfig& cfg = {}) {
    if (y_scene.size() != scene_trajs.size() || y_scene.size() != validity.size()) {
        throw ContractError("scene_loss: per-agent input sizes disagree");
    }
    double loss = 0.0;
    for (std::size_t a = 0; a < scene_trajs.size(); ++a) {
        const auto& traj = scene_trajs[a];
        if (traj.first_step != 1) {
            throw ContractError("scene_loss: agent " + std::to_string(a) +
                                " trajectory starts at step " + std::to_string(traj.first_step) +
                                "; only open-loop (n = 0) predictions are accepted");
        }
        if (traj.steps.size() != y_scene[a].size() || validity[a].size() != y_scene[a].size()) {
            throw ContractError("scene_loss: agent " + std::to_string(a) + " length mismatch");
        }
        for (std::size_t t = 0; t < traj.steps.size(); ++t) {
            if (!validity[a][t]) continue;
            loss += nll_full_cov(y_scene[a][t], traj.steps[t], cfg.lambda_det);
        }
    }
    return loss;
}

}  // namespace clsim
