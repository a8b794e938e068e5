#pragma once

// Attention decoder pair over shared context embeddings.
//
// Map polylines and agent history windows are embedded by small MLPs into
// tokens, each paired with a reference pose. Decoder queries attend to the
// tokens with relative-pose-biased multi-head attention (pairwise offsets
// rotated into the query frame feed additive key/value terms), so the whole
// network is translation-equivariant by construction.
//
// The ego decoder runs M learnable mode queries and emits per-step Gaussian
// parameters plus mode probabilities; the scene decoder broadcasts a single
// learnable mode embedding to every surrounding agent and conditions each
// query on a goal token (position + timestep). Both share the iterative
// refinement scheme: every pass re-decodes with the previous pass's means as
// reference points, whose headings also rotate the predicted covariances
// into the agent frame (the rotate_sigma_out switch disables that rotation,
// transforming only the means).
//
// Outputs live in the owning agent's anchor frame; heads are zero-initialized
// so an untrained decoder predicts exactly the reference points.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "clsim/autodiff.hpp"
#include "clsim/rng.hpp"
#include "clsim/scenario.hpp"
#include "clsim/sim.hpp"

namespace clsim {

struct NetConfig {
    int hidden_dim = 64;
    int n_layers = 4;
    int n_heads = 8;
    int n_modes = 5;
    int n_refinement_iters = 2;
    bool rotate_sigma_out = true;

    void validate() const {
        if (hidden_dim <= 0 || n_layers <= 0 || n_heads <= 0 || n_modes <= 0 ||
            n_refinement_iters < 0) {
            throw ConfigError("net: all sizes must be positive");
        }
        if (hidden_dim % n_heads != 0) {
            throw ConfigError("net: hidden_dim must be divisible by n_heads");
        }
    }
};

struct GoalToken {
    std::size_t track_index = 0;  // index into scenario.tracks
    Vec2 goal_position;           // world frame
    int goal_step = 1;            // 1-based prediction step in [1, t_pred_steps]
};

// feature scaling constants (meters -> embedding range)
inline constexpr double kWindowScale = 0.1;
inline constexpr double kMapScale = 0.02;
inline constexpr double kRelScale = 0.05;
inline constexpr double kGoalScale = 0.05;
// head position outputs are in decameters so weight magnitudes stay O(1)
inline constexpr double kOutputScale = 10.0;
inline constexpr int kMapResample = 8;
// displacement (m) below which refinement reference headings carry over
inline constexpr double kRefineHeadingMinDisp = 0.05;

// --- parameter store -----------------------------------------------------------

struct ParamTensor {
    std::string group;
    std::string name;
    ad::Matrix value;
    ad::Matrix grad;  // accumulated by the trainer
    ad::Matrix adam_m;
    ad::Matrix adam_v;
};

class ParamStore {
public:
    int add(const std::string& group, const std::string& name, int rows, int cols) {
        ParamTensor t;
        t.group = group;
        t.name = name;
        t.value = ad::Matrix(rows, cols);
        t.grad = ad::Matrix(rows, cols);
        tensors_.push_back(std::move(t));
        return static_cast<int>(tensors_.size()) - 1;
    }

    ParamTensor& operator[](int id) { return tensors_[static_cast<std::size_t>(id)]; }
    const ParamTensor& operator[](int id) const { return tensors_[static_cast<std::size_t>(id)]; }
    int size() const { return static_cast<int>(tensors_.size()); }

    int find(const std::string& name) const {
        for (int i = 0; i < size(); ++i) {
            if (tensors_[static_cast<std::size_t>(i)].name == name) return i;
        }
        throw ContractError("parameter '" + name + "' not found");
    }

    void zero_grad() {
        for (auto& t : tensors_) {
            for (auto& v : t.grad.data) v = 0.0;
        }
    }

    std::size_t count_scalars() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.value.size();
        return n;
    }

    std::uint64_t digest() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& t : tensors_) {
            h = fnv1a64(t.name.data(), t.name.size(), h);
            h = fnv1a64(t.value.data.data(), t.value.data.size() * sizeof(double), h);
        }
        return h;
    }

private:
    std::vector<ParamTensor> tensors_;
};

// Memoized leaves of one tape over a parameter store: each tensor becomes at
// most one leaf per tape, so gradients for repeated uses accumulate in place.
struct ParamUse {
    ad::Tape* tape = nullptr;
    ParamStore* store = nullptr;
    std::vector<ad::Value> cache;

    ParamUse(ad::Tape& t, ParamStore& s) : tape(&t), store(&s) {
        cache.resize(static_cast<std::size_t>(s.size()));
    }

    ad::Value operator()(int id) {
        ad::Value& v = cache[static_cast<std::size_t>(id)];
        if (!v.defined()) v = tape->leaf((*store)[id].value, id);
        return v;
    }
};

// Harvest leaf gradients back into the store (weighted), after backward.
inline void accumulate_param_grads(ad::Tape& tape, ParamStore& store, double weight = 1.0) {
    for (int idx : tape.param_leaves()) {
        const ad::Node& n = tape.node(idx);
        if (n.grad.size() == 0) continue;
        ParamTensor& t = store[n.param_id];
        for (std::size_t i = 0; i < t.grad.size(); ++i) {
            t.grad.data[i] += weight * n.grad.data[i];
        }
    }
}

// --- parameter construction -----------------------------------------------------

struct DecoderParams {
    NetConfig net;
    int t_in_steps = 2;
    int t_pred_steps = 12;
    ParamStore store;

    // tensor ids, grouped the way the optimizer and tests address them
    struct LayerIds {
        int ln1_g, ln1_b, wq1, bq1, wk1, bk1, wv1, bv1, wo1, bo1, rel1_w, rel1_b;
        int ln2_g, ln2_b, wq2, bq2, wk2, bk2, wv2, bv2, wo2, bo2, rel2_w, rel2_b;
        int ln3_g, ln3_b, ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };
    struct DecoderIds {
        std::vector<LayerIds> layers;
        int lnf_g, lnf_b;
        int head_w, head_b;      // zero-initialized regression head
        int ref_w1, ref_b1, ref_w2, ref_b2;  // reference-point MLP
    };

    int static_w1, static_b1, static_w2, static_b2, static_ln_g, static_ln_b;
    int dyn_w1, dyn_b1, dyn_w2, dyn_b2, dyn_ln_g, dyn_ln_b;
    int goal_w1, goal_b1, goal_w2, goal_b2;
    DecoderIds ego, scene;
    int phi_w1, phi_b1, phi_w2, phi_b2;  // classification head
    int mode_embeddings;                  // [M, d]
    int scene_mode_embedding;             // [1, d]

    int window_feature_dim() const { return 7 * (t_in_steps + 1) + 3; }
    int map_feature_dim() const { return 2 * kMapResample + 4; }
};

namespace net_detail {

inline DecoderParams::DecoderIds add_decoder(ParamStore& s, const std::string& group,
                                             const NetConfig& cfg, int t_pred) {
    const int d = cfg.hidden_dim;
    DecoderParams::DecoderIds ids;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = group + "/layer" + std::to_string(l) + "/";
        DecoderParams::LayerIds L;
        L.ln1_g = s.add(group, p + "ln1_g", 1, d);
        L.ln1_b = s.add(group, p + "ln1_b", 1, d);
        L.wq1 = s.add(group, p + "self_wq", d, d);
        L.bq1 = s.add(group, p + "self_bq", 1, d);
        L.wk1 = s.add(group, p + "self_wk", d, d);
        L.bk1 = s.add(group, p + "self_bk", 1, d);
        L.wv1 = s.add(group, p + "self_wv", d, d);
        L.bv1 = s.add(group, p + "self_bv", 1, d);
        L.wo1 = s.add(group, p + "self_wo", d, d);
        L.bo1 = s.add(group, p + "self_bo", 1, d);
        L.rel1_w = s.add(group, p + "self_rel_w", 4, 2 * d);
        L.rel1_b = s.add(group, p + "self_rel_b", 1, 2 * d);
        L.ln2_g = s.add(group, p + "ln2_g", 1, d);
        L.ln2_b = s.add(group, p + "ln2_b", 1, d);
        L.wq2 = s.add(group, p + "cross_wq", d, d);
        L.bq2 = s.add(group, p + "cross_bq", 1, d);
        L.wk2 = s.add(group, p + "cross_wk", d, d);
        L.bk2 = s.add(group, p + "cross_bk", 1, d);
        L.wv2 = s.add(group, p + "cross_wv", d, d);
        L.bv2 = s.add(group, p + "cross_bv", 1, d);
        L.wo2 = s.add(group, p + "cross_wo", d, d);
        L.bo2 = s.add(group, p + "cross_bo", 1, d);
        L.rel2_w = s.add(group, p + "cross_rel_w", 4, 2 * d);
        L.rel2_b = s.add(group, p + "cross_rel_b", 1, 2 * d);
        L.ln3_g = s.add(group, p + "ln3_g", 1, d);
        L.ln3_b = s.add(group, p + "ln3_b", 1, d);
        L.ffn_w1 = s.add(group, p + "ffn_w1", d, 2 * d);
        L.ffn_b1 = s.add(group, p + "ffn_b1", 1, 2 * d);
        L.ffn_w2 = s.add(group, p + "ffn_w2", 2 * d, d);
        L.ffn_b2 = s.add(group, p + "ffn_b2", 1, d);
        ids.layers.push_back(L);
    }
    ids.lnf_g = s.add(group, group + "/lnf_g", 1, d);
    ids.lnf_b = s.add(group, group + "/lnf_b", 1, d);
    ids.head_w = s.add(group, group + "/head_w", d, t_pred * 5);
    ids.head_b = s.add(group, group + "/head_b", 1, t_pred * 5);
    ids.ref_w1 = s.add(group, group + "/ref_w1", 2 + t_pred, d);
    ids.ref_b1 = s.add(group, group + "/ref_b1", 1, d);
    ids.ref_w2 = s.add(group, group + "/ref_w2", d, d);
    ids.ref_b2 = s.add(group, group + "/ref_b2", 1, d);
    return ids;
}

}  // namespace net_detail

inline DecoderParams build_params(const NetConfig& cfg, int t_in_steps, int t_pred_steps) {
    cfg.validate();
    DecoderParams p;
    p.net = cfg;
    p.t_in_steps = t_in_steps;
    p.t_pred_steps = t_pred_steps;
    ParamStore& s = p.store;
    const int d = cfg.hidden_dim;

    p.static_w1 = s.add("theta_static", "theta_static/w1", p.map_feature_dim(), d);
    p.static_b1 = s.add("theta_static", "theta_static/b1", 1, d);
    p.static_w2 = s.add("theta_static", "theta_static/w2", d, d);
    p.static_b2 = s.add("theta_static", "theta_static/b2", 1, d);
    p.static_ln_g = s.add("theta_static", "theta_static/ln_g", 1, d);
    p.static_ln_b = s.add("theta_static", "theta_static/ln_b", 1, d);

    p.dyn_w1 = s.add("theta_dynamic", "theta_dynamic/w1", p.window_feature_dim(), d);
    p.dyn_b1 = s.add("theta_dynamic", "theta_dynamic/b1", 1, d);
    p.dyn_w2 = s.add("theta_dynamic", "theta_dynamic/w2", d, d);
    p.dyn_b2 = s.add("theta_dynamic", "theta_dynamic/b2", 1, d);
    p.dyn_ln_g = s.add("theta_dynamic", "theta_dynamic/ln_g", 1, d);
    p.dyn_ln_b = s.add("theta_dynamic", "theta_dynamic/ln_b", 1, d);

    p.goal_w1 = s.add("theta_goal", "theta_goal/w1", 2 + t_pred_steps, d);
    p.goal_b1 = s.add("theta_goal", "theta_goal/b1", 1, d);
    p.goal_w2 = s.add("theta_goal", "theta_goal/w2", d, d);
    p.goal_b2 = s.add("theta_goal", "theta_goal/b2", 1, d);

    p.ego = net_detail::add_decoder(s, "theta_ego", cfg, t_pred_steps);
    p.scene = net_detail::add_decoder(s, "theta_scene", cfg, t_pred_steps);

    p.phi_w1 = s.add("phi", "phi/w1", d, d);
    p.phi_b1 = s.add("phi", "phi/b1", 1, d);
    p.phi_w2 = s.add("phi", "phi/w2", d, 1);
    p.phi_b2 = s.add("phi", "phi/b2", 1, 1);

    p.mode_embeddings = s.add("mode_embeddings", "mode_embeddings", cfg.n_modes, d);
    p.scene_mode_embedding = s.add("scene_mode_embedding", "scene_mode_embedding", 1, d);
    return p;
}

// Xavier-uniform weights, unit layernorm gains, zero output heads.
inline void init_params(DecoderParams& p, std::uint64_t seed) {
    SeedStream rng(seed, "param-init");
    for (int i = 0; i < p.store.size(); ++i) {
        ParamTensor& t = p.store[i];
        const bool is_head = t.name.find("head_") != std::string::npos ||
                             t.name == "phi/w2" || t.name == "phi/b2";
        const bool is_ln_gain = t.name.find("ln") != std::string::npos &&
                                t.name.find("_g") != std::string::npos;
        const bool is_bias = t.value.rows == 1 && (t.name.find("_b") != std::string::npos ||
                                                   t.name.find("/b") != std::string::npos);
        const bool is_embedding = t.name.find("embedding") != std::string::npos;
        if (is_head) {
            for (auto& v : t.value.data) v = 0.0;
        } else if (is_ln_gain) {
            for (auto& v : t.value.data) v = 1.0;
        } else if (is_bias) {
            for (auto& v : t.value.data) v = 0.0;
        } else if (is_embedding) {
            for (auto& v : t.value.data) v = 0.1 * rng.normal();
        } else {
            const double a = std::sqrt(6.0 / (t.value.rows + t.value.cols));
            for (auto& v : t.value.data) v = rng.uniform(-a, a);
        }
    }
}

// Adds noise everywhere (including zero-initialized heads); gradient-check
// tests use this to probe the network at a generic point.
inline void perturb_params(DecoderParams& p, std::uint64_t seed, double stddev = 0.05) {
    SeedStream rng(seed, "param-perturb");
    for (int i = 0; i < p.store.size(); ++i) {
        for (auto& v : p.store[i].value.data) v += stddev * rng.normal();
    }
}

// --- context embedding -----------------------------------------------------------

struct ContextEmbedding {
    ad::Value tokens;  // [n_tokens, d], agent tokens first
    ad::Value poses;   // [n_tokens, 3]
    int n_agent_tokens = 0;
    std::vector<std::size_t> token_track;  // track index per agent token
    ad::Value ego_pose;                    // [1, 3]
    std::size_t ego_track = 0;
};

namespace net_detail {

// fixed-size polyline features in the polyline's own frame
inline ad::Matrix map_features(const MapPolyline& pl) {
    std::vector<double> cum{0.0};
    for (std::size_t i = 1; i < pl.points.size(); ++i) {
        cum.push_back(cum.back() + (pl.points[i] - pl.points[i - 1]).norm());
    }
    const double total = cum.back();
    const Vec2 origin = pl.points.front();
    const Vec2 dir = pl.points[1] - pl.points[0];
    const double heading = std::atan2(dir.y, dir.x);
    ad::Matrix f(1, 2 * kMapResample + 4);
    for (int k = 0; k < kMapResample; ++k) {
        const double s = total * k / (kMapResample - 1);
        std::size_t seg = 1;
        while (seg + 1 < cum.size() && cum[seg] < s) ++seg;
        const double seg_len = cum[seg] - cum[seg - 1];
        const double u = seg_len > 0.0 ? (s - cum[seg - 1]) / seg_len : 0.0;
        const Vec2 pw = pl.points[seg - 1] + (pl.points[seg] - pl.points[seg - 1]) * u;
        const Vec2 local = rotate(pw - origin, -heading);
        f.at(0, 2 * k) = kMapScale * local.x;
        f.at(0, 2 * k + 1) = kMapScale * local.y;
    }
    f.at(0, 2 * kMapResample + static_cast<int>(pl.kind)) = 1.0;
    f.at(0, 2 * kMapResample + 3) = 0.01 * total;
    return f;
}

inline ad::Matrix map_pose(const MapPolyline& pl) {
    const Vec2 dir = pl.points[1] - pl.points[0];
    ad::Matrix m(1, 3);
    m.data = {pl.points[0].x, pl.points[0].y, std::atan2(dir.y, dir.x)};
    return m;
}

inline ad::Value mlp2(ParamUse& use, const ad::Value& x, int w1, int b1, int w2, int b2) {
    ad::Value h = ad::tanh_op(ad::add_rowvec(ad::matmul(x, use(w1)), use(b1)));
    return ad::add_rowvec(ad::matmul(h, use(w2)), use(b2));
}

}  // namespace net_detail

// Embeds the static map and the dynamic context into tokens. Agents whose
// anchor state is invalid are excluded. Throws if the context is empty or
// the ego anchor is invalid.
inline ContextEmbedding embed_context(ad::Tape& tape, const Scenario& scn,
                                      const AdContext& ctx, DecoderParams& params,
                                      ParamUse& use) {
    if (ctx.window.size() != scn.tracks.size()) {
        throw ContractError("embed_context: context/scenario mismatch");
    }
    const std::size_t ego = scn.ego_index();
    ContextEmbedding out;
    out.ego_track = ego;

    std::vector<ad::Value> agent_feats;
    std::vector<ad::Value> agent_poses;
    for (std::size_t a = 0; a < scn.tracks.size(); ++a) {
        if (!ctx.valid[a].back()) {
            if (a == ego) throw ContractError("embed_context: ego anchor state invalid");
            continue;
        }
        ad::Value wf = ad::window_features(ctx.window[a], ctx.valid[a], kWindowScale);
        ad::Matrix extras(1, 3);
        extras.data = {scn.tracks[a].is_ego ? 1.0 : 0.0, 0.1 * scn.tracks[a].length,
                       0.1 * scn.tracks[a].width};
        agent_feats.push_back(ad::concat_cols({wf, tape.constant(std::move(extras))}));
        agent_poses.push_back(anchor_pose(ctx, a));
        out.token_track.push_back(a);
        if (a == ego) out.ego_pose = agent_poses.back();
    }
    if (agent_feats.empty()) throw ContractError("embed_context: empty context");
    out.n_agent_tokens = static_cast<int>(agent_feats.size());

    ad::Value dyn_in = agent_feats.size() == 1 ? agent_feats[0] : ad::concat_rows(agent_feats);
    ad::Value dyn_tok = net_detail::mlp2(use, dyn_in, params.dyn_w1, params.dyn_b1,
                                         params.dyn_w2, params.dyn_b2);
    dyn_tok = ad::layernorm_rows(dyn_tok, use(params.dyn_ln_g), use(params.dyn_ln_b));

    std::vector<ad::Value> token_parts{dyn_tok};
    std::vector<ad::Value> pose_parts = agent_poses;
    if (!scn.map.empty()) {
        ad::Matrix mf(static_cast<int>(scn.map.size()), params.map_feature_dim());
        ad::Matrix mp(static_cast<int>(scn.map.size()), 3);
        for (std::size_t i = 0; i < scn.map.size(); ++i) {
            const ad::Matrix f = net_detail::map_features(scn.map[i]);
            const ad::Matrix q = net_detail::map_pose(scn.map[i]);
            for (int j = 0; j < f.cols; ++j) mf.at(static_cast<int>(i), j) = f.at(0, j);
            for (int j = 0; j < 3; ++j) mp.at(static_cast<int>(i), j) = q.at(0, j);
        }
        ad::Value map_tok = net_detail::mlp2(use, tape.constant(std::move(mf)),
                                             params.static_w1, params.static_b1,
                                             params.static_w2, params.static_b2);
        map_tok = ad::layernorm_rows(map_tok, use(params.static_ln_g), use(params.static_ln_b));
        token_parts.push_back(map_tok);
        pose_parts.push_back(tape.constant(std::move(mp)));
    }
    out.tokens = token_parts.size() == 1 ? token_parts[0] : ad::concat_rows(token_parts);
    out.poses = pose_parts.size() == 1 ? pose_parts[0] : ad::concat_rows(pose_parts);
    return out;
}

// --- decoding ---------------------------------------------------------------------

// One agent-frame Gaussian trajectory in tape form: mu [T, 2] and sig [T, 3]
// with columns (log_s1, log_s2, alpha).
struct AdTrajectory {
    ad::Value mu;
    ad::Value sig;
    int first_step = 1;
};

struct EgoDecode {
    std::vector<AdTrajectory> modes;
    ad::Value probs;      // [1, M]
    ad::Value mode_feats; // [M, d] final decoder features
};

struct SceneDecode {
    std::vector<AdTrajectory> trajs;       // one per decoded agent
    std::vector<std::size_t> track_index;  // aligned with trajs
};

namespace net_detail {

struct DecodeCore {
    std::vector<ad::Value> mu;   // per query [T, 2]
    std::vector<ad::Value> sig;  // per query [T, 3]
    ad::Value feats;             // [nq, d]
};

inline ad::Value decoder_stack(DecoderParams& params, ParamUse& use,
                               const DecoderParams::DecoderIds& ids, const ad::Value& queries,
                               const ad::Value& query_poses, const ContextEmbedding& emb) {
    const NetConfig& cfg = params.net;
    ad::Value x = queries;
    ad::Value rel_self = ad::rel_pose_features(query_poses, query_poses, kRelScale);
    ad::Value rel_cross = ad::rel_pose_features(query_poses, emb.poses, kRelScale);
    const int d = cfg.hidden_dim;
    for (const auto& L : ids.layers) {
        {  // self attention among queries
            ad::Value h = ad::layernorm_rows(x, use(L.ln1_g), use(L.ln1_b));
            ad::Value q = ad::add_rowvec(ad::matmul(h, use(L.wq1)), use(L.bq1));
            ad::Value k = ad::add_rowvec(ad::matmul(h, use(L.wk1)), use(L.bk1));
            ad::Value v = ad::add_rowvec(ad::matmul(h, use(L.wv1)), use(L.bv1));
            ad::Value rkv = ad::add_rowvec(ad::matmul(rel_self, use(L.rel1_w)), use(L.rel1_b));
            ad::Value att = ad::attention(q, k, v, ad::slice_cols(rkv, 0, d),
                                          ad::slice_cols(rkv, d, 2 * d), cfg.n_heads);
            x = ad::add(x, ad::add_rowvec(ad::matmul(att, use(L.wo1)), use(L.bo1)));
        }
        {  // cross attention to context tokens
            ad::Value h = ad::layernorm_rows(x, use(L.ln2_g), use(L.ln2_b));
            ad::Value q = ad::add_rowvec(ad::matmul(h, use(L.wq2)), use(L.bq2));
            ad::Value k = ad::add_rowvec(ad::matmul(emb.tokens, use(L.wk2)), use(L.bk2));
            ad::Value v = ad::add_rowvec(ad::matmul(emb.tokens, use(L.wv2)), use(L.bv2));
            ad::Value rkv = ad::add_rowvec(ad::matmul(rel_cross, use(L.rel2_w)), use(L.rel2_b));
            ad::Value att = ad::attention(q, k, v, ad::slice_cols(rkv, 0, d),
                                          ad::slice_cols(rkv, d, 2 * d), cfg.n_heads);
            x = ad::add(x, ad::add_rowvec(ad::matmul(att, use(L.wo2)), use(L.bo2)));
        }
        {  // feed-forward
            ad::Value h = ad::layernorm_rows(x, use(L.ln3_g), use(L.ln3_b));
            ad::Value f = ad::tanh_op(ad::add_rowvec(ad::matmul(h, use(L.ffn_w1)), use(L.ffn_b1)));
            x = ad::add(x, ad::add_rowvec(ad::matmul(f, use(L.ffn_w2)), use(L.ffn_b2)));
        }
    }
    return ad::layernorm_rows(x, use(ids.lnf_g), use(ids.lnf_b));
}

// Shared decode: iterative refinement around per-step reference points.
inline DecodeCore decode_core(ad::Tape& tape, DecoderParams& params, ParamUse& use,
                              const DecoderParams::DecoderIds& ids, const ad::Value& queries0,
                              const ad::Value& query_poses, const ContextEmbedding& emb,
                              int first_step) {
    const NetConfig& cfg = params.net;
    const int t_pred = params.t_pred_steps;
    if (first_step < 1 || first_step > t_pred) {
        throw ContractError("decode: first_step outside [1, t_pred_steps]");
    }
    const int T = t_pred - first_step + 1;
    const int nq = queries0.rows();
    const int d = cfg.hidden_dim;

    // Head slots are anchor-relative: slot j always means "j+1 steps after
    // the current anchor", so a decode from a drifted rollout anchor reads
    // the same slots an open-loop decode trains. The remaining-horizon
    // trajectory is the first T slots.
    ad::Matrix step_onehot(nq * T, t_pred);
    for (int i = 0; i < nq; ++i) {
        for (int t = 0; t < T; ++t) {
            step_onehot.at(i * T + t, t) = 1.0;
        }
    }
    const ad::Value steps_const = tape.constant(std::move(step_onehot));
    const ad::Value zero_pose = tape.constant(ad::Matrix(1, 3));

    ad::Value refpoints = tape.constant(ad::Matrix(nq * T, 2));
    DecodeCore out;
    for (int iter = 0; iter <= cfg.n_refinement_iters; ++iter) {
        ad::Value rin = ad::concat_cols({ad::scale(refpoints, kWindowScale), steps_const});
        ad::Value remb = mlp2(use, rin, ids.ref_w1, ids.ref_b1, ids.ref_w2, ids.ref_b2);
        ad::Value x = ad::add(queries0, ad::block_mean_rows(remb, T));
        x = decoder_stack(params, use, ids, x, query_poses, emb);
        ad::Value raw = ad::add_rowvec(ad::matmul(x, use(ids.head_w)), use(ids.head_b));
        if (T < t_pred) raw = ad::slice_cols(raw, 0, T * 5);

        out.mu.clear();
        out.sig.clear();
        for (int i = 0; i < nq; ++i) {
            ad::Value ri = ad::reshape(ad::slice_rows(raw, i, i + 1), T, 5);
            ad::Value delta = ad::scale(ad::slice_cols(ri, 0, 2), kOutputScale);
            ad::Value sig = ad::slice_cols(ri, 2, 5);
            ad::Value poses;
            if (iter == 0) {
                poses = zero_pose;  // first pass: reference at the anchor, heading 0
            } else {
                ad::Value prev_mu = ad::slice_rows(refpoints, i * T, (i + 1) * T);
                ad::Value kin = ad::path_kinematics(zero_pose, prev_mu, 1.0,
                                                    kRefineHeadingMinDisp);
                poses = ad::slice_cols(kin, 0, 3);
            }
            ad::Value mu = ad::local_to_frame(poses, delta);
            if (cfg.rotate_sigma_out && iter > 0) {
                sig = ad::add_col_from(sig, 2, poses, 2);
            }
            out.mu.push_back(mu);
            out.sig.push_back(sig);
        }
        out.feats = x;
        if (iter < cfg.n_refinement_iters) {
            refpoints = out.mu.size() == 1 ? out.mu[0] : ad::concat_rows(out.mu);
        }
    }
    return out;
}

}  // namespace net_detail

// Multimodal ego decode. Trajectories are in the ego anchor frame and cover
// prediction steps first_step..t_pred_steps. Probabilities come from the
// classification head over gradient-stopped mode features, so only the phi
// group trains on the classification loss.
inline EgoDecode decode_ego(ad::Tape& tape, const ContextEmbedding& emb, DecoderParams& params,
                            ParamUse& use, int first_step) {
    const int M = params.net.n_modes;
    ad::Value queries = use(params.mode_embeddings);
    ad::Value poses = ad::repeat_rows(emb.ego_pose, M);
    net_detail::DecodeCore core = net_detail::decode_core(tape, params, use, params.ego,
                                                          queries, poses, emb, first_step);
    EgoDecode out;
    for (int m = 0; m < M; ++m) {
        out.modes.push_back({core.mu[static_cast<std::size_t>(m)],
                             core.sig[static_cast<std::size_t>(m)], first_step});
    }
    out.mode_feats = core.feats;
    ad::Value fixed = ad::stop_gradient(core.feats);
    ad::Value h = ad::tanh_op(ad::add_rowvec(ad::matmul(fixed, use(params.phi_w1)),
                                             use(params.phi_b1)));
    ad::Value logits = ad::add_rowvec(ad::matmul(h, use(params.phi_w2)), use(params.phi_b2));
    out.probs = ad::softmax_rows(ad::transpose(logits));
    return out;
}

// Goal-conditioned unimodal scene decode for the given agents; exactly one
// goal token per decoded agent, in the same order.
inline SceneDecode decode_scene(ad::Tape& tape, const ContextEmbedding& emb,
                                const std::vector<GoalToken>& goals, DecoderParams& params,
                                ParamUse& use, int first_step) {
    SceneDecode out;
    if (goals.empty()) return out;
    const int n = static_cast<int>(goals.size());

    // anchor poses of the decoded agents, in goal order
    std::vector<ad::Value> pose_rows;
    for (const auto& g : goals) {
        if (g.track_index == emb.ego_track) {
            throw ContractError("decode_scene: goal token for the ego agent");
        }
        if (g.goal_step < 1 || g.goal_step > params.t_pred_steps) {
            throw ContractError("decode_scene: goal_step outside the prediction horizon");
        }
        int token = -1;
        for (int tok = 0; tok < emb.n_agent_tokens; ++tok) {
            if (emb.token_track[static_cast<std::size_t>(tok)] == g.track_index) {
                token = tok;
                break;
            }
        }
        if (token < 0) {
            throw ContractError("decode_scene: agent " + std::to_string(g.track_index) +
                                " is not in the context");
        }
        pose_rows.push_back(ad::gather_rows(emb.poses, {token}));
    }
    ad::Value poses = pose_rows.size() == 1 ? pose_rows[0] : ad::concat_rows(pose_rows);

    // goal features: goal position in the agent frame plus a one-hot step
    ad::Matrix goal_onehot(n, params.t_pred_steps);
    std::vector<ad::Value> goal_local_rows;
    for (int i = 0; i < n; ++i) {
        goal_onehot.at(i, goals[static_cast<std::size_t>(i)].goal_step - 1) = 1.0;
        const ad::Value pose_i = ad::slice_rows(poses, i, i + 1);
        goal_local_rows.push_back(ad::world_to_frame(
            pose_i, tape.constant(ad::Matrix::row2(goals[static_cast<std::size_t>(i)].goal_position.x,
                                                   goals[static_cast<std::size_t>(i)].goal_position.y))));
    }
    ad::Value goal_local =
        goal_local_rows.size() == 1 ? goal_local_rows[0] : ad::concat_rows(goal_local_rows);
    ad::Value goal_in = ad::concat_cols({ad::scale(goal_local, kGoalScale),
                                         tape.constant(std::move(goal_onehot))});
    ad::Value goal_emb = net_detail::mlp2(use, goal_in, params.goal_w1, params.goal_b1,
                                          params.goal_w2, params.goal_b2);

    ad::Value queries = ad::add(ad::repeat_rows(use(params.scene_mode_embedding), n), goal_emb);
    net_detail::DecodeCore core = net_detail::decode_core(tape, params, use, params.scene,
                                                          queries, poses, emb, first_step);
    for (int i = 0; i < n; ++i) {
        out.trajs.push_back({core.mu[static_cast<std::size_t>(i)],
                             core.sig[static_cast<std::size_t>(i)], first_step});
        out.track_index.push_back(goals[static_cast<std::size_t>(i)].track_index);
    }
    return out;
}

// --- checkpoint io ----------------------------------------------------------------

inline void save_checkpoint(const DecoderParams& p, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    const char magic[8] = {'C', 'L', 'S', 'I', 'M', 'C', 'K', '1'};
    f.write(magic, 8);
    auto write_i32 = [&](std::int32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    write_i32(p.net.hidden_dim);
    write_i32(p.net.n_layers);
    write_i32(p.net.n_heads);
    write_i32(p.net.n_modes);
    write_i32(p.net.n_refinement_iters);
    write_i32(p.net.rotate_sigma_out ? 1 : 0);
    write_i32(p.t_in_steps);
    write_i32(p.t_pred_steps);
    write_i32(p.store.size());
    for (int i = 0; i < p.store.size(); ++i) {
        const ParamTensor& t = p.store[i];
        write_i32(static_cast<std::int32_t>(t.name.size()));
        f.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        write_i32(t.value.rows);
        write_i32(t.value.cols);
        f.write(reinterpret_cast<const char*>(t.value.data.data()),
                static_cast<std::streamsize>(t.value.data.size() * sizeof(double)));
    }
    if (!f) throw IoError("write failed: " + path);
}

inline DecoderParams load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "CLSIMCK1", 8) != 0) {
        throw ParseError(path + ": not a checkpoint file");
    }
    auto read_i32 = [&]() {
        std::int32_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        if (!f) throw ParseError(path + ": truncated checkpoint");
        return v;
    };
    NetConfig cfg;
    cfg.hidden_dim = read_i32();
    cfg.n_layers = read_i32();
    cfg.n_heads = read_i32();
    cfg.n_modes = read_i32();
    cfg.n_refinement_iters = read_i32();
    cfg.rotate_sigma_out = read_i32() != 0;
    const int t_in = read_i32();
    const int t_pred = read_i32();
    DecoderParams p = build_params(cfg, t_in, t_pred);
    const int n = read_i32();
    if (n != p.store.size()) {
        throw ParseError(path + ": tensor count mismatch (checkpoint/config mismatch)");
    }
    for (int i = 0; i < n; ++i) {
        const int name_len = read_i32();
        std::string name(static_cast<std::size_t>(name_len), '\0');
        f.read(name.data(), name_len);
        const int rows = read_i32();
        const int cols = read_i32();
        ParamTensor& t = p.store[i];
        if (name != t.name || rows != t.value.rows || cols != t.value.cols) {
            throw ParseError(path + ": tensor '" + name + "' does not match the declared config");
        }
        f.read(reinterpret_cast<char*>(t.value.data.data()),
               static_cast<std::streamsize>(t.value.data.size() * sizeof(double)));
        if (!f) throw ParseError(path + ": truncated checkpoint");
    }
    return p;
}

}  // namespace clsim
