#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gtrend/adam.hpp"
#include "gtrend/fleet_graph.hpp"
#include "gtrend/gae_layers.hpp"
#include "gtrend/gae_model.hpp"
#include "gtrend/objective.hpp"
#include "gtrend/pipeline.hpp"
#include "gtrend/rng.hpp"

namespace gtrend {

struct NodeSplit {
    std::vector<int> train;
    std::vector<int> val;
    std::vector<int> test;
};

// Disjoint, exhaustive node masks, deterministic per seed. The model always
// sees the full graph; the masks only restrict where loss and metrics are
// evaluated.
inline NodeSplit split_nodes(int n_nodes, const std::array<double, 3>& fractions,
                             std::uint64_t seed) {
    double sum = 0.0;
    for (double f : fractions) {
        if (f <= 0.0) throw std::invalid_argument("split_nodes: fractions must be positive");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("split_nodes: fractions must sum to 1");
    std::vector<int> idx(n_nodes);
    for (int i = 0; i < n_nodes; ++i) idx[i] = i;
    auto rng = make_engine(seed, 0x53504c49); // node-split stream
    for (int i = n_nodes - 1; i > 0; --i) {
        const auto j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
        std::swap(idx[i], idx[j]);
    }
    const int n_train = static_cast<int>(fractions[0] * n_nodes);
    const int n_val = static_cast<int>(fractions[1] * n_nodes);
    const int n_test = n_nodes - n_train - n_val;
    if (n_train == 0 || n_val == 0 || n_test == 0)
        throw std::invalid_argument("split_nodes: a split fraction leaves no nodes");
    NodeSplit s;
    s.train.assign(idx.begin(), idx.begin() + n_train);
    s.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
    s.test.assign(idx.begin() + n_train + n_val, idx.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

struct TrainConfig {
    int epochs = 500;
    double learning_rate = 0.05;
    LossWeights weights;
    // Temporal slice length per branch. Empty: one full-length slice per
    // branch. k entries: fluctuation branches as given, aging branch uses the
    // minimum. k+1 entries: explicit per-branch windows, aging first.
    std::vector<int> window_sizes;
    int node_batch_size = 0; // 0 = full graph
    int n_workers = 1;
    std::uint64_t seed = 0;
    std::array<double, 3> split{0.5, 0.25, 0.25};
    // Train on gain * (x / mean|x| - 1). The unit offset pins the baseline
    // level to the aging branch (a constant moves freely between branches
    // under the loss) and keeps early optimizer steps from chasing a large
    // DC term; the gain sets how large the remaining signal is relative to
    // the optimizer's fixed-learning-rate jitter floor.
    bool normalize_input = true;
    double input_gain = 4.0;
    // Serial trainer only: for this many leading epochs just the aging branch
    // is stepped, so it locks onto the whole signal before the fluctuation
    // branches start competing for it. The aging smoothness penalty then
    // drains the periodic part back out of it during joint training, while
    // the trend it acquired stays (a straight ramp is smoothness-free).
    int aging_warmup_epochs = 0;
    bool weighted_aggregate = false;
    int checkpoint_every = 0;        // 0 = final epoch only
    std::string checkpoint_dir;      // required when checkpoint_every > 0

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("TrainConfig.epochs must be >= 1");
        if (learning_rate <= 0.0)
            throw std::invalid_argument("TrainConfig.learning_rate must be > 0");
        if (node_batch_size < 0)
            throw std::invalid_argument("TrainConfig.node_batch_size must be >= 0");
        if (n_workers < 1) throw std::invalid_argument("TrainConfig.n_workers must be >= 1");
        if (input_gain <= 0.0)
            throw std::invalid_argument("TrainConfig.input_gain must be > 0");
        if (aging_warmup_epochs < 0)
            throw std::invalid_argument("TrainConfig.aging_warmup_epochs must be >= 0");
        if (checkpoint_every < 0)
            throw std::invalid_argument("TrainConfig.checkpoint_every must be >= 0");
        if (checkpoint_every > 0 && checkpoint_dir.empty())
            throw std::invalid_argument("TrainConfig.checkpoint_every needs checkpoint_dir");
        weights.validate();
    }
};

struct StepRecord {
    int epoch = 0;
    int branch = -1; // -1 = assembled model
    int slice = -1;
    LossBreakdown loss;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<StepRecord> log;
    std::vector<double> val_loss; // one entry per completed epoch
    bool diverged = false;
    double mean_epoch_time_s = 0.0;
    NodeSplit split;
};

// Uniform elementwise mean of replica parameters.
inline BranchParams aggregate_replicas(const std::vector<BranchParams>& replicas) {
    if (replicas.empty()) throw std::invalid_argument("aggregate_replicas: empty replica set");
    BranchParams out = replicas[0];
    auto ov = detail::flat_views(out);
    for (std::size_t r = 1; r < replicas.size(); ++r) {
        auto rv = detail::flat_views(replicas[r]);
        if (rv.size() != ov.size())
            throw std::invalid_argument("aggregate_replicas: replica shape mismatch");
        for (std::size_t i = 0; i < ov.size(); ++i) {
            if (ov[i].second != rv[i].second)
                throw std::invalid_argument("aggregate_replicas: replica shape mismatch");
            Eigen::Map<Eigen::ArrayXd>(ov[i].first, ov[i].second) +=
                Eigen::Map<const Eigen::ArrayXd>(rv[i].first, rv[i].second);
        }
    }
    for (auto& [data, size] : ov)
        Eigen::Map<Eigen::ArrayXd>(data, size) /= static_cast<double>(replicas.size());
    return out;
}

// Convex combination with explicit weights (e.g. slice lengths).
inline BranchParams aggregate_replicas_weighted(const std::vector<BranchParams>& replicas,
                                                const std::vector<double>& weights) {
    if (replicas.empty() || replicas.size() != weights.size())
        throw std::invalid_argument("aggregate_replicas_weighted: bad inputs");
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    if (wsum <= 0.0) throw std::invalid_argument("aggregate_replicas_weighted: zero weight sum");
    BranchParams out = replicas[0];
    auto ov = detail::flat_views(out);
    for (auto& [data, size] : ov)
        Eigen::Map<Eigen::ArrayXd>(data, size) *= weights[0] / wsum;
    for (std::size_t r = 1; r < replicas.size(); ++r) {
        auto rv = detail::flat_views(replicas[r]);
        for (std::size_t i = 0; i < ov.size(); ++i)
            Eigen::Map<Eigen::ArrayXd>(ov[i].first, ov[i].second) +=
                (weights[r] / wsum) *
                Eigen::Map<const Eigen::ArrayXd>(rv[i].first, rv[i].second);
    }
    return out;
}

namespace detail {

inline Eigen::MatrixXd take_rows(const Eigen::MatrixXd& m, const std::vector<int>& rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(i) = m.row(rows[i]);
    return out;
}

// Series are divided by this before training so activations start in their
// responsive range; the factor is stored in the checkpoint and undone when
// the model is applied.
inline double input_scale(const Eigen::MatrixXd& x) {
    const double s = x.cwiseAbs().mean();
    return s > 0.0 ? s : 1.0;
}

inline LossWeights effective_weights(const ModelConfig& mc, const TrainConfig& tc) {
    LossWeights w = tc.weights;
    w.segment_window = mc.window_sizes;
    return w;
}

inline void check_training_inputs(const Eigen::MatrixXd& x, const FleetGraph& graph,
                                  const ModelConfig& mc, const TrainConfig& tc) {
    mc.validate();
    tc.validate();
    if (x.rows() != graph.n_nodes)
        throw std::invalid_argument("train: node count mismatch between series and graph");
    if (x.cols() != mc.series_len)
        throw std::invalid_argument("train: series length mismatch with model config");
}

struct SliceSpan {
    int start = 0;
    int span = 0; // true columns; the replica input is padded to the window
};

inline std::vector<SliceSpan> build_slices(int t, int window) {
    std::vector<SliceSpan> spans;
    for (int start = 0; start < t; start += window)
        spans.push_back({start, std::min(window, t - start)});
    return spans;
}

// Per-branch temporal slice windows: empty config means one full-length
// slice; k entries set the fluctuation branches and the aging branch takes
// the minimum; k+1 entries are explicit with the aging branch first.
inline std::vector<int> resolve_branch_windows(const ModelConfig& mc, const TrainConfig& tc) {
    const int t = mc.series_len;
    std::vector<int> w(mc.k + 1, t);
    if (!tc.window_sizes.empty()) {
        if (static_cast<int>(tc.window_sizes.size()) == mc.k) {
            int mn = tc.window_sizes[0];
            for (int v : tc.window_sizes) mn = std::min(mn, v);
            w[0] = mn;
            for (int q = 1; q <= mc.k; ++q) w[q] = tc.window_sizes[q - 1];
        } else if (static_cast<int>(tc.window_sizes.size()) == mc.k + 1) {
            w = tc.window_sizes;
        } else {
            throw std::invalid_argument("TrainConfig.window_sizes must have k or k+1 entries");
        }
    }
    for (int v : w)
        if (v < 2 || v > t)
            throw std::invalid_argument("TrainConfig.window_sizes entries must lie in [2, T]");
    return w;
}

} // namespace detail

// Full-batch joint optimization of all k+1 branches; the reference the
// parallel schedule is checked against. A branch window shorter than the
// series applies that branch's shared weights to each consecutive column
// slice (short final slice padded by repeating its last column) and sums
// the per-slice gradients before stepping, so the objective stays global
// while the branch itself only ever sees window-wide inputs.
inline TrainResult train_serial(const Eigen::MatrixXd& x, const FleetGraph& graph,
                                const ModelConfig& mc, const TrainConfig& tc) {
    detail::check_training_inputs(x, graph, mc, tc);
    const int k = mc.k;
    const auto n = x.rows();
    const auto t = x.cols();

    TrainResult res;
    res.split = split_nodes(static_cast<int>(n), tc.split, tc.seed);
    const LossWeights weights = detail::effective_weights(mc, tc);
    const double scale =
        tc.normalize_input ? detail::input_scale(x) / tc.input_gain : 1.0;
    const double offset = tc.normalize_input ? tc.input_gain : 0.0;
    const Eigen::MatrixXd xn = (x / scale).array() - offset;
    const Eigen::MatrixXd x_train = detail::take_rows(xn, res.split.train);
    const Eigen::MatrixXd x_val = detail::take_rows(xn, res.split.val);

    const std::vector<int> branch_windows = detail::resolve_branch_windows(mc, tc);
    std::vector<std::vector<detail::SliceSpan>> spans(k + 1);
    for (int b = 0; b <= k; ++b)
        spans[b] = detail::build_slices(static_cast<int>(t), branch_windows[b]);

    std::vector<BranchParams> model = init_params(mc, branch_windows);
    std::vector<AdamState> adam;
    adam.reserve(k + 1);
    for (int b = 0; b <= k; ++b) adam.emplace_back(tc.learning_rate);
    const NeighborList nl = NeighborList::with_self_loops(graph);

    double time_acc = 0.0;
    int epochs_run = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::vector<BranchCache>> caches(k + 1);
        std::vector<Eigen::MatrixXd> outs(k + 1);
        for (int b = 0; b <= k; ++b) {
            const int w = branch_windows[b];
            caches[b].resize(spans[b].size());
            if (w == t) {
                outs[b] = branch_forward(xn, nl, model[b], mc.n_heads, mc.leaky_slope,
                                         &caches[b][0]);
                continue;
            }
            outs[b].resize(n, t);
            for (std::size_t s = 0; s < spans[b].size(); ++s) {
                const auto [start, span] = spans[b][s];
                Eigen::MatrixXd slice(n, w);
                slice.leftCols(span) = xn.middleCols(start, span);
                for (int c = span; c < w; ++c) slice.col(c) = xn.col(start + span - 1);
                const Eigen::MatrixXd y = branch_forward(slice, nl, model[b], mc.n_heads,
                                                         mc.leaky_slope, &caches[b][s]);
                outs[b].middleCols(start, span) = y.leftCols(span);
            }
        }

        Decomposition d_tr;
        d_tr.h_a = detail::take_rows(outs[0], res.split.train);
        for (int q = 1; q <= k; ++q)
            d_tr.h_f.push_back(detail::take_rows(outs[q], res.split.train));
        const LossBreakdown lb = total_loss(x_train, d_tr, weights);
        if (!std::isfinite(lb.total)) {
            res.diverged = true;
            break;
        }
        res.log.push_back({epoch, -1, -1, lb});

        Decomposition d_val;
        d_val.h_a = detail::take_rows(outs[0], res.split.val);
        for (int q = 1; q <= k; ++q)
            d_val.h_f.push_back(detail::take_rows(outs[q], res.split.val));
        res.val_loss.push_back(total_loss(x_val, d_val, weights).total);

        const LossGradients lg = loss_gradients(x_train, d_tr, weights);
        for (int b = 0; b <= k; ++b) {
            if (b > 0 && epoch < tc.aging_warmup_epochs) continue;
            const int w = branch_windows[b];
            Eigen::MatrixXd d_y = Eigen::MatrixXd::Zero(n, t);
            const Eigen::MatrixXd& g_rows = b == 0 ? lg.d_h_a : lg.d_h_f[b - 1];
            for (std::size_t i = 0; i < res.split.train.size(); ++i)
                d_y.row(res.split.train[i]) = g_rows.row(static_cast<Eigen::Index>(i));
            BranchParams grads = make_grads_like(model[b]);
            if (w == t) {
                branch_backward(d_y, nl, model[b], caches[b][0], grads);
            } else {
                for (std::size_t s = 0; s < spans[b].size(); ++s) {
                    const auto [start, span] = spans[b][s];
                    Eigen::MatrixXd d_slice = Eigen::MatrixXd::Zero(n, w);
                    d_slice.leftCols(span) = d_y.middleCols(start, span);
                    branch_backward(d_slice, nl, model[b], caches[b][s], grads);
                }
            }
            adam[b].step(model[b], grads);
        }
        if (tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0) {
            Checkpoint snap;
            snap.config = mc;
            snap.branch_windows = branch_windows;
            snap.input_scale = scale;
            snap.input_offset = offset;
            snap.model = model;
            save_checkpoint(std::filesystem::path(tc.checkpoint_dir) /
                                ("epoch_" + std::to_string(epoch + 1)),
                            snap);
        }
        time_acc += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ++epochs_run;
    }
    res.mean_epoch_time_s = epochs_run > 0 ? time_acc / epochs_run : 0.0;
    res.checkpoint.config = mc;
    res.checkpoint.branch_windows = branch_windows;
    res.checkpoint.input_scale = scale;
    res.checkpoint.input_offset = offset;
    res.checkpoint.model = std::move(model);
    return res;
}

namespace detail {

inline std::vector<int> hop_closure(const FleetGraph& graph, const std::vector<int>& seed_rows,
                                    int hops) {
    std::vector<char> in(graph.n_nodes, 0);
    std::vector<int> frontier = seed_rows;
    for (int r : seed_rows) in[r] = 1;
    for (int h = 0; h < hops && !frontier.empty(); ++h) {
        std::vector<int> next;
        for (int u : frontier)
            for (int v = 0; v < graph.n_nodes; ++v)
                if (!in[v] && graph.adjacency(u, v) != 0) {
                    in[v] = 1;
                    next.push_back(v);
                }
        frontier = std::move(next);
    }
    std::vector<int> out;
    for (int v = 0; v < graph.n_nodes; ++v)
        if (in[v]) out.push_back(v);
    return out;
}

// One node batch plus the halo needed to reproduce the full-graph forward
// exactly on the batch rows: outputs after 4 message-passing layers depend on
// inputs within 4 hops, so the subgraph keeps every such node. Fringe rows of
// the subgraph compute garbage, but only batch rows are ever read.
struct BatchPlan {
    std::vector<int> rows;      // nodes owned by this batch (global ids)
    std::vector<int> sub_nodes; // rows + halo, ascending
    NeighborList nl;            // neighbor list in local ids
    std::vector<std::pair<int, int>> row_local; // (local, global) per owned row
};

inline std::vector<BatchPlan> build_batches(const FleetGraph& graph, int batch_size) {
    const int n = graph.n_nodes;
    const int bs = batch_size <= 0 || batch_size >= n ? n : batch_size;
    std::vector<BatchPlan> plans;
    for (int start = 0; start < n; start += bs) {
        BatchPlan p;
        for (int v = start; v < std::min(n, start + bs); ++v) p.rows.push_back(v);
        p.sub_nodes = hop_closure(graph, p.rows, 4);
        std::vector<int> local(n, -1);
        for (std::size_t i = 0; i < p.sub_nodes.size(); ++i)
            local[p.sub_nodes[i]] = static_cast<int>(i);
        p.nl.offsets.resize(p.sub_nodes.size() + 1, 0);
        for (std::size_t i = 0; i < p.sub_nodes.size(); ++i) {
            const int gu = p.sub_nodes[i];
            p.nl.offsets[i] = static_cast<int>(p.nl.neighbors.size());
            p.nl.neighbors.push_back(static_cast<int>(i));
            for (int gv = 0; gv < n; ++gv)
                if (gv != gu && graph.adjacency(gu, gv) != 0 && local[gv] >= 0)
                    p.nl.neighbors.push_back(local[gv]);
        }
        p.nl.offsets[p.sub_nodes.size()] = static_cast<int>(p.nl.neighbors.size());
        for (int r : p.rows) p.row_local.emplace_back(local[r], r);
        plans.push_back(std::move(p));
    }
    return plans;
}

// State of one replica GAE_(branch, slice): its parameters and optimizer,
// plus per-batch forward caches and gradient slots for the current epoch.
struct ReplicaRun {
    int branch = 0;
    int slice = 0;
    int window = 0;
    SliceSpan span;
    BranchParams params;
    AdamState adam;
    Eigen::MatrixXd out;      // N x window; batch rows written by the workers
    Eigen::MatrixXd residual; // N x span; received from the coordinator
    std::unique_ptr<Channel<Eigen::MatrixXd>> residual_ch =
        std::make_unique<Channel<Eigen::MatrixXd>>();

    struct BatchWork {
        Eigen::MatrixXd h1, z, h2, d;
        BranchCache cache;
        BranchParams grads;
    };
    std::vector<BatchWork> work;

    ReplicaRun(int branch_, int slice_, int window_, SliceSpan span_, BranchParams params_,
               double lr, Eigen::Index n, std::size_t n_batches)
        : branch(branch_),
          slice(slice_),
          window(window_),
          span(span_),
          params(std::move(params_)),
          adam(lr),
          out(Eigen::MatrixXd::Zero(n, window_)),
          work(n_batches) {}
};

// Extracts the padded input slice for one batch subgraph.
inline Eigen::MatrixXd padded_slice(const Eigen::MatrixXd& xn, const BatchPlan& plan,
                                    const SliceSpan& span, int window) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(plan.sub_nodes.size()), window);
    for (std::size_t i = 0; i < plan.sub_nodes.size(); ++i) {
        x.row(i).head(span.span) = xn.row(plan.sub_nodes[i]).segment(span.start, span.span);
        for (int c = span.span; c < window; ++c) x(i, c) = xn(plan.sub_nodes[i], span.start + span.span - 1);
    }
    return x;
}

} // namespace detail

// Three-level parallel training. Level I runs the k+1 branches (and their
// temporal-slice replicas) concurrently; Level II splits each branch into
// per-slice replicas and the graph into node batches trained with one
// accumulated update per epoch; Level III streams a replica's node batches
// through the four layer stages as a macro-pipeline, so consecutive layers
// never synchronize across batches.
//
// Coordinator/worker contract per epoch: replicas are shipped once up front
// (slice data, initial parameters); every epoch each replica sends its slice
// output to the coordinator, which assembles the fleet-wide reconstruction,
// computes the coupling residual at the single barrier of the epoch, and
// ships the residual slice back; replicas then backpropagate the residual
// plus their local regularizer gradients and step their own optimizer.
// Replicas of one branch are merged by parameter averaging at the final
// epoch only.
inline TrainResult train_parallel(const Eigen::MatrixXd& x, const FleetGraph& graph,
                                  const ModelConfig& mc, const TrainConfig& tc) {
    detail::check_training_inputs(x, graph, mc, tc);
    const int k = mc.k;
    const auto n = x.rows();
    const auto t = x.cols();

    TrainResult res;
    res.split = split_nodes(static_cast<int>(n), tc.split, tc.seed);
    const LossWeights weights = detail::effective_weights(mc, tc);
    const bool norm = weights.normalized;
    const double scale =
        tc.normalize_input ? detail::input_scale(x) / tc.input_gain : 1.0;
    const double offset = tc.normalize_input ? tc.input_gain : 0.0;
    const Eigen::MatrixXd xn = (x / scale).array() - offset;
    const Eigen::MatrixXd x_train = detail::take_rows(xn, res.split.train);
    const Eigen::MatrixXd x_val = detail::take_rows(xn, res.split.val);
    const double n_train = static_cast<double>(res.split.train.size());
    std::vector<char> is_train(n, 0);
    for (int r : res.split.train) is_train[r] = 1;

    const std::vector<int> branch_windows = detail::resolve_branch_windows(mc, tc);
    const std::vector<BranchParams> branch_init = init_params(mc, branch_windows);
    const std::vector<detail::BatchPlan> batches =
        detail::build_batches(graph, tc.node_batch_size);
    const auto n_batches = batches.size();

    // Ship: one replica per (branch, temporal slice), all replicas of a
    // branch starting from the same initialization.
    std::vector<detail::ReplicaRun> runs;
    for (int b = 0; b <= k; ++b) {
        const auto spans = detail::build_slices(static_cast<int>(t), branch_windows[b]);
        for (std::size_t j = 0; j < spans.size(); ++j)
            runs.emplace_back(b, static_cast<int>(j), branch_windows[b], spans[j],
                              branch_init[b], tc.learning_rate, n, n_batches);
    }
    const auto n_replicas = runs.size();

    ThreadPool pool(tc.n_workers);
    Channel<std::size_t> output_ch;

    auto forward_stages = [&](detail::ReplicaRun& run_ref) {
        detail::ReplicaRun* run = &run_ref;
        std::vector<std::function<void(int)>> stages;
        stages.emplace_back([&, run](int b) {
            auto& w = run->work[b];
            w.grads = make_grads_like(run->params);
            const Eigen::MatrixXd xb =
                detail::padded_slice(xn, batches[b], run->span, run->window);
            w.h1 = transformer_conv(xb, batches[b].nl, run->params.enc_transformer, mc.n_heads,
                                    &w.cache.t_enc);
        });
        stages.emplace_back([&, run](int b) {
            auto& w = run->work[b];
            w.z = gat_conv(w.h1, batches[b].nl, run->params.enc_attention, mc.leaky_slope,
                           false, &w.cache.g_enc);
        });
        stages.emplace_back([&, run](int b) {
            auto& w = run->work[b];
            w.h2 = transformer_conv(w.z, batches[b].nl, run->params.dec_transformer, mc.n_heads,
                                    &w.cache.t_dec);
        });
        stages.emplace_back([&, run](int b) {
            auto& w = run->work[b];
            const Eigen::MatrixXd y = gat_conv(w.h2, batches[b].nl, run->params.dec_attention,
                                               mc.leaky_slope, true, &w.cache.g_dec);
            for (const auto& [local, global] : batches[b].row_local)
                run->out.row(global) = y.row(local);
        });
        return stages;
    };

    // Gradient of the replica's local objective with respect to its output:
    // the shared reconstruction residual (already restricted to train rows)
    // plus the branch regularizer on the slice's own span. Normalization
    // matches the joint objective, so with one full-length slice this is
    // exactly the serial gradient.
    auto backward_stages = [&](detail::ReplicaRun& run_ref) {
        detail::ReplicaRun* run = &run_ref;
        std::vector<std::function<void(int)>> stages;
        stages.emplace_back([&, run](int b) {
            // Items pass a station in order, so batch 0 receives the
            // broadcast residual before any other batch needs it.
            if (b == 0) run->residual = run->residual_ch->pop();
            const auto& plan = batches[b];
            auto& w = run->work[b];
            const int span = run->span.span;
            Eigen::MatrixXd d_y = Eigen::MatrixXd::Zero(
                static_cast<Eigen::Index>(plan.sub_nodes.size()), run->window);
            const double re_factor = norm ? 2.0 / (n_train * static_cast<double>(t)) : 2.0;
            for (const auto& [local, global] : plan.row_local)
                d_y.row(local).head(span) = -re_factor * run->residual.row(global);

            std::vector<int> train_rows;
            std::vector<int> train_local;
            for (const auto& [local, global] : plan.row_local)
                if (is_train[global]) {
                    train_rows.push_back(global);
                    train_local.push_back(local);
                }
            if (!train_rows.empty()) {
                Eigen::MatrixXd y_tr(static_cast<Eigen::Index>(train_rows.size()), span);
                for (std::size_t i = 0; i < train_rows.size(); ++i)
                    y_tr.row(i) = run->out.row(train_rows[i]).head(span);
                Eigen::MatrixXd reg = Eigen::MatrixXd::Zero(y_tr.rows(), span);
                if (run->branch == 0) {
                    if (span >= 3)
                        reg += (weights.lambda3 * (norm ? 1.0 / n_train : 1.0)) *
                               smoothness_reg_grad(y_tr, false);
                } else {
                    const int w_seg = weights.segment_window.at(run->branch - 1);
                    const double flat_factor = norm ? 1.0 / (k * n_train) : 1.0;
                    if (span >= 2 * w_seg)
                        reg += (weights.lambda1 * flat_factor) *
                               mean_constraint_grad(y_tr, w_seg, k, false);
                    if (span >= 2)
                        reg += (weights.lambda2 * flat_factor) *
                               slope_constraint_grad(y_tr, k, false);
                }
                for (std::size_t i = 0; i < train_local.size(); ++i)
                    d_y.row(train_local[i]).head(span) += reg.row(static_cast<Eigen::Index>(i));
            }
            w.d = gat_conv_backward(d_y, plan.nl, run->params.dec_attention, w.cache.g_dec,
                                    true, w.grads.dec_attention);
        });
        stages.emplace_back([&, run](int b) {
            auto& w = run->work[b];
            w.d = transformer_conv_backward(w.d, batches[b].nl, run->params.dec_transformer,
                                            w.cache.t_dec, w.grads.dec_transformer);
        });
        stages.emplace_back([&, run](int b) {
            auto& w = run->work[b];
            w.d = gat_conv_backward(w.d, batches[b].nl, run->params.enc_attention, w.cache.g_enc,
                                    false, w.grads.enc_attention);
        });
        stages.emplace_back([&, run](int b) {
            auto& w = run->work[b];
            transformer_conv_backward(w.d, batches[b].nl, run->params.enc_transformer,
                                      w.cache.t_enc, w.grads.enc_transformer);
            w.d.resize(0, 0);
        });
        return stages;
    };

    // Merge each branch's replicas into one parameter set by averaging.
    auto assemble_model = [&] {
        std::vector<BranchParams> model;
        for (int b = 0; b <= k; ++b) {
            std::vector<BranchParams> reps;
            std::vector<double> lens;
            for (const auto& run : runs)
                if (run.branch == b) {
                    reps.push_back(run.params);
                    lens.push_back(static_cast<double>(run.span.span));
                }
            model.push_back(tc.weighted_aggregate ? aggregate_replicas_weighted(reps, lens)
                                                  : aggregate_replicas(reps));
        }
        return model;
    };

    double time_acc = 0.0;
    int epochs_run = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();

        std::vector<std::unique_ptr<StagePipeline>> fwd;
        fwd.reserve(n_replicas);
        for (std::size_t r = 0; r < n_replicas; ++r)
            fwd.push_back(std::make_unique<StagePipeline>(
                pool, forward_stages(runs[r]), static_cast<int>(n_batches),
                [&output_ch, r] { output_ch.push(r); }));
        // Quiesce every pipeline before draining the channel so a worker
        // failure surfaces as an exception instead of a stalled barrier.
        std::exception_ptr fwd_err;
        for (auto& p : fwd) {
            try {
                p->wait();
            } catch (...) {
                if (!fwd_err) fwd_err = std::current_exception();
            }
        }
        if (fwd_err) std::rethrow_exception(fwd_err);
        for (std::size_t i = 0; i < n_replicas; ++i) output_ch.pop();

        // Assemble the fleet-wide outputs and the coupling residual.
        Decomposition d_full;
        d_full.h_a = Eigen::MatrixXd::Zero(n, t);
        for (int q = 1; q <= k; ++q) d_full.h_f.emplace_back(Eigen::MatrixXd::Zero(n, t));
        for (const auto& run : runs) {
            Eigen::MatrixXd& target = run.branch == 0 ? d_full.h_a : d_full.h_f[run.branch - 1];
            target.middleCols(run.span.start, run.span.span) =
                run.out.leftCols(run.span.span);
        }
        Decomposition d_tr;
        d_tr.h_a = detail::take_rows(d_full.h_a, res.split.train);
        for (int q = 1; q <= k; ++q)
            d_tr.h_f.push_back(detail::take_rows(d_full.h_f[q - 1], res.split.train));
        const LossBreakdown lb = total_loss(x_train, d_tr, weights);
        if (!std::isfinite(lb.total)) {
            res.diverged = true;
            break;
        }
        res.log.push_back({epoch, -1, -1, lb});
        Decomposition d_val;
        d_val.h_a = detail::take_rows(d_full.h_a, res.split.val);
        for (int q = 1; q <= k; ++q)
            d_val.h_f.push_back(detail::take_rows(d_full.h_f[q - 1], res.split.val));
        res.val_loss.push_back(total_loss(x_val, d_val, weights).total);

        Eigen::MatrixXd r_full = reconstruction_residual(xn, d_full);
        for (Eigen::Index row = 0; row < n; ++row)
            if (!is_train[row]) r_full.row(row).setZero();

        // Residual broadcast plus per-replica log records.
        for (auto& run : runs) {
            run.residual_ch->push(r_full.middleCols(run.span.start, run.span.span));
            StepRecord rec{epoch, run.branch, run.slice, {}};
            const Eigen::MatrixXd y_tr = detail::take_rows(
                Eigen::MatrixXd(run.out.leftCols(run.span.span)), res.split.train);
            const Eigen::MatrixXd r_tr = detail::take_rows(
                Eigen::MatrixXd(r_full.middleCols(run.span.start, run.span.span)),
                res.split.train);
            rec.loss.re = norm ? r_tr.squaredNorm() / (n_train * static_cast<double>(t))
                               : r_tr.squaredNorm();
            if (run.branch == 0) {
                if (run.span.span >= 3) {
                    Decomposition dl;
                    dl.h_a = y_tr;
                    rec.loss.sr = smoothness_reg(dl, false) * (norm ? 1.0 / n_train : 1.0);
                }
            } else {
                const int w_seg = weights.segment_window.at(run.branch - 1);
                const double flat_factor = norm ? 1.0 / (k * n_train) : 1.0;
                Decomposition dl;
                dl.h_a = y_tr;
                dl.h_f.push_back(y_tr);
                if (run.span.span >= 2 * w_seg) {
                    LossWeights lw = weights;
                    lw.segment_window = {w_seg};
                    lw.normalized = false;
                    rec.loss.mc = mean_constraint(dl, lw) * flat_factor;
                }
                if (run.span.span >= 2)
                    rec.loss.sc = slope_constraint(dl, false) * flat_factor;
            }
            rec.loss.total = rec.loss.re + weights.lambda1 * rec.loss.mc +
                             weights.lambda2 * rec.loss.sc + weights.lambda3 * rec.loss.sr;
            res.log.push_back(rec);
        }

        std::vector<std::unique_ptr<StagePipeline>> bwd;
        bwd.reserve(n_replicas);
        for (auto& run : runs)
            bwd.push_back(std::make_unique<StagePipeline>(pool, backward_stages(run),
                                                          static_cast<int>(n_batches)));
        std::exception_ptr bwd_err;
        for (auto& p : bwd) {
            try {
                p->wait();
            } catch (...) {
                if (!bwd_err) bwd_err = std::current_exception();
            }
        }
        if (bwd_err) std::rethrow_exception(bwd_err);

        // Ordered reduction keeps the update identical for every pool size.
        for (auto& run : runs) {
            BranchParams grads = std::move(run.work[0].grads);
            auto gv = detail::flat_views(grads);
            for (std::size_t b = 1; b < n_batches; ++b) {
                auto bv = detail::flat_views(run.work[b].grads);
                for (std::size_t i = 0; i < gv.size(); ++i)
                    Eigen::Map<Eigen::ArrayXd>(gv[i].first, gv[i].second) +=
                        Eigen::Map<const Eigen::ArrayXd>(bv[i].first, bv[i].second);
            }
            run.adam.step(run.params, grads);
        }

        if (tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0) {
            Checkpoint snap;
            snap.config = mc;
            snap.branch_windows = branch_windows;
            snap.input_scale = scale;
            snap.input_offset = offset;
            snap.model = assemble_model();
            save_checkpoint(std::filesystem::path(tc.checkpoint_dir) /
                                ("epoch_" + std::to_string(epoch + 1)),
                            snap);
        }
        time_acc += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ++epochs_run;
    }

    res.mean_epoch_time_s = epochs_run > 0 ? time_acc / epochs_run : 0.0;
    res.checkpoint.config = mc;
    res.checkpoint.branch_windows = branch_windows;
    res.checkpoint.input_scale = scale;
    res.checkpoint.input_offset = offset;
    res.checkpoint.model = assemble_model();
    return res;
}

struct TimingRow {
    int workers = 1;
    double epoch_time_s = 0.0;
    double speedup = 1.0;
    double overhead_s = 0.0; // epoch_time_s * workers - single-worker epoch time
};

// Fixed-seed wall-clock comparison across worker counts. overhead_s charges
// each row the total core-time beyond the single-worker baseline, i.e. the
// price of barriers and message passing.
inline std::vector<TimingRow> benchmark_speedup(const Eigen::MatrixXd& x,
                                                const FleetGraph& graph, const ModelConfig& mc,
                                                const TrainConfig& tc,
                                                const std::vector<int>& worker_counts) {
    if (worker_counts.empty() || worker_counts.front() != 1)
        throw std::invalid_argument("benchmark_speedup: worker counts must start at 1");
    for (std::size_t i = 1; i < worker_counts.size(); ++i)
        if (worker_counts[i] <= worker_counts[i - 1])
            throw std::invalid_argument("benchmark_speedup: worker counts must be ascending");
    std::vector<TimingRow> rows;
    double t1 = 0.0;
    for (int w : worker_counts) {
        TrainConfig run_tc = tc;
        run_tc.n_workers = w;
        const TrainResult r = train_parallel(x, graph, mc, run_tc);
        if (w == 1) t1 = r.mean_epoch_time_s;
        rows.push_back({w, r.mean_epoch_time_s,
                        r.mean_epoch_time_s > 0.0 ? t1 / r.mean_epoch_time_s : 1.0,
                        r.mean_epoch_time_s * w - t1});
    }
    return rows;
}

inline void write_training_log(const std::filesystem::path& path,
                               const std::vector<StepRecord>& log) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open training log " + path.string());
    for (const auto& rec : log) {
        nlohmann::json j;
        j["epoch"] = rec.epoch;
        j["branch"] = rec.branch;
        j["slice"] = rec.slice;
        j["re"] = rec.loss.re;
        j["mc"] = rec.loss.mc;
        j["sc"] = rec.loss.sc;
        j["sr"] = rec.loss.sr;
        j["total"] = rec.loss.total;
        f << j.dump() << "\n";
    }
}

inline void write_timing_csv(const std::filesystem::path& path,
                             const std::vector<TimingRow>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open timing report " + path.string());
    f << "workers,epoch_time_s,speedup\n";
    for (const auto& r : rows)
        f << r.workers << "," << r.epoch_time_s << "," << r.speedup << "\n";
}

} // namespace gtrend
