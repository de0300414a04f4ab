#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "gtrend/fleet_graph.hpp"
#include "gtrend/gae_model.hpp"

namespace gtrend {

// ---- graph transformer layer ----------------------------------------------
//
// x'_i = W1 x_i + sum_{j in N(i)} abar_ij W2 x_j, where per head
// alpha_ij = softmax_j((W3 x_i)^T (W4 x_j) / sqrt(D)) over N(i) (self-loop
// included) and abar is the head average. Attention values are stored per
// CSR slot of the neighbor list.

struct TransformerCache {
    Eigen::MatrixXd x;
    std::vector<Eigen::MatrixXd> q;             // per head, N x D
    std::vector<Eigen::MatrixXd> kk;            // per head, N x D
    std::vector<std::vector<double>> alpha;     // per head, per slot
    std::vector<double> alpha_bar;              // per slot
    Eigen::MatrixXd agg;                        // N x F_in
};

inline Eigen::MatrixXd transformer_conv(const Eigen::MatrixXd& x, const NeighborList& nl,
                                        const TransformerLayerParams& params, int n_heads,
                                        TransformerCache* cache = nullptr) {
    const auto n = x.rows();
    if (n + 1 != static_cast<Eigen::Index>(nl.offsets.size()))
        throw std::invalid_argument("transformer_conv: graph/input node count mismatch");
    if (x.cols() != params.w1.cols())
        throw std::invalid_argument("transformer_conv: feature dim mismatch");
    const auto out_dim = params.w1.rows();
    if (out_dim % n_heads != 0)
        throw std::invalid_argument("transformer_conv: out dim not divisible by heads");
    const auto d = out_dim / n_heads;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const auto n_slots = nl.neighbors.size();

    std::vector<Eigen::MatrixXd> q(n_heads), kk(n_heads);
    for (int h = 0; h < n_heads; ++h) {
        q[h] = x * params.w3[h].transpose();
        kk[h] = x * params.w4[h].transpose();
    }

    std::vector<std::vector<double>> alpha(n_heads, std::vector<double>(n_slots));
    std::vector<double> alpha_bar(n_slots, 0.0);
    std::vector<double> scores;
    for (int h = 0; h < n_heads; ++h) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const int begin = nl.offsets[i];
            const int end = nl.offsets[i + 1];
            scores.resize(end - begin);
            double max_score = -std::numeric_limits<double>::infinity();
            for (int s = begin; s < end; ++s) {
                const int j = nl.neighbors[s];
                scores[s - begin] = q[h].row(i).dot(kk[h].row(j)) * inv_sqrt_d;
                max_score = std::max(max_score, scores[s - begin]);
            }
            double z = 0.0;
            for (double& v : scores) {
                v = std::exp(v - max_score);
                z += v;
            }
            for (int s = begin; s < end; ++s) {
                alpha[h][s] = scores[s - begin] / z;
                alpha_bar[s] += alpha[h][s] / n_heads;
            }
        }
    }

    Eigen::MatrixXd agg = Eigen::MatrixXd::Zero(n, x.cols());
    for (Eigen::Index i = 0; i < n; ++i)
        for (int s = nl.offsets[i]; s < nl.offsets[i + 1]; ++s)
            agg.row(i) += alpha_bar[s] * x.row(nl.neighbors[s]);

    Eigen::MatrixXd out = x * params.w1.transpose() + agg * params.w2.transpose();
    if (cache) {
        cache->x = x;
        cache->q = std::move(q);
        cache->kk = std::move(kk);
        cache->alpha = std::move(alpha);
        cache->alpha_bar = std::move(alpha_bar);
        cache->agg = std::move(agg);
    }
    return out;
}

// Returns the gradient with respect to the layer input; parameter gradients
// accumulate into `grads` (shaped like the params, zero-initialized by the
// caller or freshly default-constructed via make_grads_like).
inline Eigen::MatrixXd transformer_conv_backward(const Eigen::MatrixXd& d_out,
                                                 const NeighborList& nl,
                                                 const TransformerLayerParams& params,
                                                 const TransformerCache& cache,
                                                 TransformerLayerParams& grads) {
    const auto n = cache.x.rows();
    const int n_heads = static_cast<int>(params.w3.size());
    const auto d = params.w3[0].rows();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    grads.w1 += d_out.transpose() * cache.x;
    grads.w2 += d_out.transpose() * cache.agg;
    const Eigen::MatrixXd d_agg = d_out * params.w2;
    Eigen::MatrixXd d_x = d_out * params.w1;

    // Neighbor-value path and attention-weight path of the aggregation.
    std::vector<double> d_alpha_bar(nl.neighbors.size());
    for (Eigen::Index i = 0; i < n; ++i)
        for (int s = nl.offsets[i]; s < nl.offsets[i + 1]; ++s) {
            const int j = nl.neighbors[s];
            d_alpha_bar[s] = d_agg.row(i).dot(cache.x.row(j));
            d_x.row(j) += cache.alpha_bar[s] * d_agg.row(i);
        }

    for (int h = 0; h < n_heads; ++h) {
        Eigen::MatrixXd d_q = Eigen::MatrixXd::Zero(n, d);
        Eigen::MatrixXd d_k = Eigen::MatrixXd::Zero(n, d);
        for (Eigen::Index i = 0; i < n; ++i) {
            const int begin = nl.offsets[i];
            const int end = nl.offsets[i + 1];
            double dot = 0.0;
            for (int s = begin; s < end; ++s)
                dot += cache.alpha[h][s] * d_alpha_bar[s] / n_heads;
            for (int s = begin; s < end; ++s) {
                const int j = nl.neighbors[s];
                const double d_score =
                    cache.alpha[h][s] * (d_alpha_bar[s] / n_heads - dot) * inv_sqrt_d;
                d_q.row(i) += d_score * cache.kk[h].row(j);
                d_k.row(j) += d_score * cache.q[h].row(i);
            }
        }
        grads.w3[h] += d_q.transpose() * cache.x;
        grads.w4[h] += d_k.transpose() * cache.x;
        d_x += d_q * params.w3[h] + d_k * params.w4[h];
    }
    return d_x;
}

// ---- graph attention layer -------------------------------------------------
//
// x'_i = act(sum_{j in N(i)} alpha_ij W x_j), with
// alpha_ij = softmax_j(LeakyReLU(a^T [W x_i || W x_j])) over N(i).
// act is ELU on hidden layers and identity on the final decoder layer.

struct GatCache {
    Eigen::MatrixXd x;
    Eigen::MatrixXd g;                 // W x, N x F_out
    std::vector<double> alpha;         // per slot
    std::vector<double> leaky_mult;    // per slot: 1 or leaky_slope
    Eigen::MatrixXd pre;               // pre-activation
};

inline Eigen::MatrixXd gat_conv(const Eigen::MatrixXd& x, const NeighborList& nl,
                                const AttentionLayerParams& params, double leaky_slope,
                                bool identity_act, GatCache* cache = nullptr) {
    const auto n = x.rows();
    if (n + 1 != static_cast<Eigen::Index>(nl.offsets.size()))
        throw std::invalid_argument("gat_conv: graph/input node count mismatch");
    if (x.cols() != params.w.cols())
        throw std::invalid_argument("gat_conv: feature dim mismatch");
    const auto f_out = params.w.rows();
    if (params.a.size() != 2 * f_out)
        throw std::invalid_argument("gat_conv: attention vector length mismatch");

    const Eigen::MatrixXd g = x * params.w.transpose();
    const Eigen::VectorXd left = g * params.a.head(f_out);
    const Eigen::VectorXd right = g * params.a.tail(f_out);

    const auto n_slots = nl.neighbors.size();
    std::vector<double> alpha(n_slots), leaky_mult(n_slots);
    std::vector<double> scores;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int begin = nl.offsets[i];
        const int end = nl.offsets[i + 1];
        scores.resize(end - begin);
        double max_score = -std::numeric_limits<double>::infinity();
        for (int s = begin; s < end; ++s) {
            const int j = nl.neighbors[s];
            const double z = left(i) + right(j);
            leaky_mult[s] = z > 0.0 ? 1.0 : leaky_slope;
            scores[s - begin] = z > 0.0 ? z : leaky_slope * z;
            max_score = std::max(max_score, scores[s - begin]);
        }
        double zsum = 0.0;
        for (double& v : scores) {
            v = std::exp(v - max_score);
            zsum += v;
        }
        for (int s = begin; s < end; ++s) alpha[s] = scores[s - begin] / zsum;
    }

    Eigen::MatrixXd pre = Eigen::MatrixXd::Zero(n, f_out);
    for (Eigen::Index i = 0; i < n; ++i)
        for (int s = nl.offsets[i]; s < nl.offsets[i + 1]; ++s)
            pre.row(i) += alpha[s] * g.row(nl.neighbors[s]);

    Eigen::MatrixXd out =
        identity_act ? pre
                     : pre.unaryExpr([](double v) { return v > 0.0 ? v : std::expm1(v); });
    if (cache) {
        cache->x = x;
        cache->g = g;
        cache->alpha = std::move(alpha);
        cache->leaky_mult = std::move(leaky_mult);
        cache->pre = std::move(pre);
    }
    return out;
}

inline Eigen::MatrixXd gat_conv_backward(const Eigen::MatrixXd& d_out, const NeighborList& nl,
                                         const AttentionLayerParams& params,
                                         const GatCache& cache, bool identity_act,
                                         AttentionLayerParams& grads) {
    const auto n = cache.x.rows();
    const auto f_out = params.w.rows();

    Eigen::MatrixXd d_pre =
        identity_act
            ? d_out
            : (d_out.array() *
               cache.pre.unaryExpr([](double v) { return v > 0.0 ? 1.0 : std::exp(v); }).array())
                  .matrix();

    Eigen::MatrixXd d_g = Eigen::MatrixXd::Zero(n, f_out);
    Eigen::VectorXd d_a_left = Eigen::VectorXd::Zero(f_out);
    Eigen::VectorXd d_a_right = Eigen::VectorXd::Zero(f_out);
    const auto a_left = params.a.head(f_out);
    const auto a_right = params.a.tail(f_out);

    for (Eigen::Index i = 0; i < n; ++i) {
        const int begin = nl.offsets[i];
        const int end = nl.offsets[i + 1];
        double dot = 0.0;
        for (int s = begin; s < end; ++s) {
            const int j = nl.neighbors[s];
            const double d_alpha = d_pre.row(i).dot(cache.g.row(j));
            dot += cache.alpha[s] * d_alpha;
            d_g.row(j) += cache.alpha[s] * d_pre.row(i);
        }
        for (int s = begin; s < end; ++s) {
            const int j = nl.neighbors[s];
            const double d_alpha = d_pre.row(i).dot(cache.g.row(j));
            const double d_score = cache.alpha[s] * (d_alpha - dot);
            const double d_z = d_score * cache.leaky_mult[s];
            d_a_left += d_z * cache.g.row(i).transpose();
            d_a_right += d_z * cache.g.row(j).transpose();
            d_g.row(i) += d_z * a_left.transpose();
            d_g.row(j) += d_z * a_right.transpose();
        }
    }

    grads.a.head(f_out) += d_a_left;
    grads.a.tail(f_out) += d_a_right;
    grads.w += d_g.transpose() * cache.x;
    return d_g * params.w;
}

// ---- branch and model ------------------------------------------------------

struct BranchCache {
    TransformerCache t_enc;
    GatCache g_enc;
    TransformerCache t_dec;
    GatCache g_dec;
};

inline Eigen::MatrixXd branch_forward(const Eigen::MatrixXd& x, const NeighborList& nl,
                                      const BranchParams& params, int n_heads,
                                      double leaky_slope, BranchCache* cache = nullptr) {
    TransformerCache* tc1 = cache ? &cache->t_enc : nullptr;
    GatCache* gc1 = cache ? &cache->g_enc : nullptr;
    TransformerCache* tc2 = cache ? &cache->t_dec : nullptr;
    GatCache* gc2 = cache ? &cache->g_dec : nullptr;
    const Eigen::MatrixXd h1 = transformer_conv(x, nl, params.enc_transformer, n_heads, tc1);
    const Eigen::MatrixXd z = gat_conv(h1, nl, params.enc_attention, leaky_slope, false, gc1);
    const Eigen::MatrixXd h2 = transformer_conv(z, nl, params.dec_transformer, n_heads, tc2);
    return gat_conv(h2, nl, params.dec_attention, leaky_slope, true, gc2);
}

inline BranchParams make_grads_like(const BranchParams& params) {
    BranchParams g = params;
    for_each_param(g, [](const std::string&, auto& arr) { arr.setZero(); });
    return g;
}

// Backpropagates d_out through the four layers, accumulating parameter
// gradients into `grads`.
inline void branch_backward(const Eigen::MatrixXd& d_out, const NeighborList& nl,
                            const BranchParams& params, const BranchCache& cache,
                            BranchParams& grads) {
    Eigen::MatrixXd d = gat_conv_backward(d_out, nl, params.dec_attention, cache.g_dec, true,
                                          grads.dec_attention);
    d = transformer_conv_backward(d, nl, params.dec_transformer, cache.t_dec,
                                  grads.dec_transformer);
    d = gat_conv_backward(d, nl, params.enc_attention, cache.g_enc, false,
                          grads.enc_attention);
    transformer_conv_backward(d, nl, params.enc_transformer, cache.t_enc,
                              grads.enc_transformer);
}

// Applies branch parameters sized to `window` columns across a longer series:
// consecutive column slices are pushed through the branch independently and
// re-assembled; a short final slice is padded by repeating its last column
// and the padding is dropped from the output.
inline Eigen::MatrixXd branch_apply_windowed(const Eigen::MatrixXd& x, const NeighborList& nl,
                                             const BranchParams& params, int n_heads,
                                             double leaky_slope, int window) {
    const auto t = x.cols();
    if (window == t) return branch_forward(x, nl, params, n_heads, leaky_slope);
    if (window > t)
        throw std::invalid_argument("branch_apply_windowed: window exceeds series length");
    Eigen::MatrixXd out(x.rows(), t);
    for (Eigen::Index start = 0; start < t; start += window) {
        const auto span = std::min<Eigen::Index>(window, t - start);
        Eigen::MatrixXd slice(x.rows(), window);
        slice.leftCols(span) = x.middleCols(start, span);
        for (Eigen::Index c = span; c < window; ++c)
            slice.col(c) = x.col(start + span - 1);
        const Eigen::MatrixXd y = branch_forward(slice, nl, params, n_heads, leaky_slope);
        out.middleCols(start, span) = y.leftCols(span);
    }
    return out;
}

// ---- FleetGraph-facing wrappers ---------------------------------------------

inline Eigen::MatrixXd transformer_conv(const Eigen::MatrixXd& x, const FleetGraph& graph,
                                        const TransformerLayerParams& params, int n_heads) {
    if (graph.n_nodes == 0) throw std::invalid_argument("transformer_conv: empty graph");
    return transformer_conv(x, NeighborList::with_self_loops(graph), params, n_heads);
}

inline Eigen::MatrixXd gat_conv(const Eigen::MatrixXd& x, const FleetGraph& graph,
                                const AttentionLayerParams& params, double leaky_slope,
                                bool identity_act = false) {
    if (graph.n_nodes == 0) throw std::invalid_argument("gat_conv: empty graph");
    return gat_conv(x, NeighborList::with_self_loops(graph), params, leaky_slope,
                    identity_act);
}

inline Eigen::MatrixXd branch_forward(const Eigen::MatrixXd& x, const FleetGraph& graph,
                                      const BranchParams& params, const ModelConfig& config) {
    if (x.cols() != config.series_len)
        throw std::invalid_argument("branch_forward: series length mismatch");
    return branch_forward(x, NeighborList::with_self_loops(graph), params, config.n_heads,
                          config.leaky_slope);
}

// Full decomposition from uniformly shaped branches.
inline Decomposition model_forward(const Eigen::MatrixXd& x, const FleetGraph& graph,
                                   const std::vector<BranchParams>& model,
                                   const ModelConfig& config) {
    if (static_cast<int>(model.size()) != config.k + 1)
        throw std::invalid_argument("model_forward: expected k+1 branches");
    const NeighborList nl = NeighborList::with_self_loops(graph);
    Decomposition d;
    d.h_a = branch_forward(x, nl, model[0], config.n_heads, config.leaky_slope);
    d.h_f.reserve(config.k);
    for (int q = 1; q <= config.k; ++q)
        d.h_f.push_back(branch_forward(x, nl, model[q], config.n_heads, config.leaky_slope));
    return d;
}

// Decomposition from a trained checkpoint: undoes the training-time input
// scaling and centering, then applies each branch at its own window size.
// The centering offset is folded back into the aging term so the constant
// baseline level always lands there rather than being split arbitrarily
// across branches (the loss is invariant to moving a constant between them).
inline Decomposition model_apply(const Eigen::MatrixXd& x, const FleetGraph& graph,
                                 const Checkpoint& ckpt) {
    const NeighborList nl = NeighborList::with_self_loops(graph);
    const Eigen::MatrixXd xn = (x / ckpt.input_scale).array() - ckpt.input_offset;
    Decomposition d;
    d.h_a = ckpt.input_scale *
            (branch_apply_windowed(xn, nl, ckpt.model[0], ckpt.config.n_heads,
                                   ckpt.config.leaky_slope, ckpt.branch_windows[0])
                 .array() +
             ckpt.input_offset);
    d.h_f.reserve(ckpt.config.k);
    for (int q = 1; q <= ckpt.config.k; ++q)
        d.h_f.push_back(ckpt.input_scale *
                        branch_apply_windowed(xn, nl, ckpt.model[q], ckpt.config.n_heads,
                                              ckpt.config.leaky_slope,
                                              ckpt.branch_windows[q]));
    return d;
}

} // namespace gtrend
