#include <catch2/catch_amalgamated.hpp>

#include <gtrend/fleet_graph.hpp>
#include <gtrend/gae_layers.hpp>
#include <gtrend/gae_model.hpp>

#include "oracles.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <utility>

namespace fs = std::filesystem;
using namespace gtrend;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss;
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = gauss(rng);
    return m;
}

FleetGraph random_graph(int n, double edge_prob, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Eigen::MatrixXi adj = Eigen::MatrixXi::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (u(rng) < edge_prob) adj(i, j) = adj(j, i) = 1;
    return FleetGraph::from_adjacency(std::move(adj));
}

FleetGraph path_graph(int n) {
    Eigen::MatrixXi adj = Eigen::MatrixXi::Zero(n, n);
    for (int i = 0; i + 1 < n; ++i) adj(i, i + 1) = adj(i + 1, i) = 1;
    return FleetGraph::from_adjacency(std::move(adj));
}

TransformerLayerParams random_transformer(int in_dim, int out_dim, int n_heads, int d,
                                          std::mt19937_64& rng) {
    TransformerLayerParams p;
    p.w1 = random_matrix(out_dim, in_dim, rng);
    p.w2 = random_matrix(out_dim, in_dim, rng);
    for (int h = 0; h < n_heads; ++h) p.w3.push_back(random_matrix(d, in_dim, rng));
    for (int h = 0; h < n_heads; ++h) p.w4.push_back(random_matrix(d, in_dim, rng));
    return p;
}

AttentionLayerParams random_attention(int in_dim, int out_dim, std::mt19937_64& rng) {
    AttentionLayerParams p;
    p.w = random_matrix(out_dim, in_dim, rng);
    p.a = random_matrix(2 * out_dim, 1, rng);
    return p;
}

ModelConfig tiny_config(int t, int k = 1) {
    ModelConfig mc;
    mc.k = k;
    mc.series_len = t;
    mc.hidden_dim = 4;
    mc.latent_dim = 2;
    mc.n_heads = 2;
    mc.window_sizes.assign(k, std::max(2, t / 4));
    mc.seed = 12;
    return mc;
}

} // namespace

TEST_CASE("transformer operator matches the direct-summation oracle") {
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<int> dim(1, 4);
    std::uniform_int_distribution<int> heads(1, 2);
    std::uniform_int_distribution<int> dd(1, 3);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 3);
        const int f_in = dim(rng);
        const int f_out = dim(rng);
        const int n_heads = heads(rng);
        const int d = dd(rng);
        const FleetGraph g = random_graph(n, 0.5, rng);
        const auto p = random_transformer(f_in, f_out, n_heads, d, rng);
        const Eigen::MatrixXd x = random_matrix(n, f_in, rng);

        const Eigen::MatrixXd got = transformer_conv(x, g, p, n_heads);
        const Eigen::MatrixXd want = oracle::transformer(x, g.adjacency, p.w1, p.w2, p.w3, p.w4);
        REQUIRE(got.rows() == n);
        REQUIRE(got.cols() == f_out);
        CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("attention operator matches the direct-summation oracle") {
    std::mt19937_64 rng(202);
    std::uniform_int_distribution<int> dim(1, 4);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 3);
        const int f_in = dim(rng);
        const int f_out = dim(rng);
        const bool identity = trial % 2 == 0;
        const FleetGraph g = random_graph(n, 0.5, rng);
        const auto p = random_attention(f_in, f_out, rng);
        const Eigen::MatrixXd x = random_matrix(n, f_in, rng);

        const Eigen::MatrixXd got = gat_conv(x, g, p, 0.2, identity);
        const Eigen::MatrixXd want = oracle::gat(x, g.adjacency, p.w, p.a, 0.2, identity);
        CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("attention weights sum to one per neighborhood") {
    std::mt19937_64 rng(303);
    const FleetGraph g = random_graph(6, 0.5, rng);
    const NeighborList nl = NeighborList::with_self_loops(g);
    const Eigen::MatrixXd x = random_matrix(6, 3, rng);

    const auto tp = random_transformer(3, 4, 2, 2, rng);
    TransformerCache tc;
    transformer_conv(x, nl, tp, 2, &tc);
    for (int i = 0; i < 6; ++i) {
        double acc = 0.0;
        for (int s = nl.offsets[i]; s < nl.offsets[i + 1]; ++s) acc += tc.alpha_bar[s];
        CHECK(acc == Catch::Approx(1.0).margin(1e-9));
        for (const auto& head : tc.alpha) {
            double ha = 0.0;
            for (int s = nl.offsets[i]; s < nl.offsets[i + 1]; ++s) ha += head[s];
            CHECK(ha == Catch::Approx(1.0).margin(1e-9));
        }
    }

    const auto ap = random_attention(3, 4, rng);
    GatCache gc;
    gat_conv(x, nl, ap, 0.2, false, &gc);
    for (int i = 0; i < 6; ++i) {
        double acc = 0.0;
        for (int s = nl.offsets[i]; s < nl.offsets[i + 1]; ++s) acc += gc.alpha[s];
        CHECK(acc == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("transformer on a path with zero score maps gives uniform attention") {
    const FleetGraph g = path_graph(3);
    TransformerLayerParams p;
    p.w1 = Eigen::MatrixXd::Constant(1, 1, 1.0);
    p.w2 = Eigen::MatrixXd::Constant(1, 1, 1.0);
    p.w3 = {Eigen::MatrixXd::Zero(1, 1)};
    p.w4 = {Eigen::MatrixXd::Zero(1, 1)};
    Eigen::MatrixXd x(3, 1);
    x << 2.0, 5.0, 11.0;

    const Eigen::MatrixXd y = transformer_conv(x, g, p, 1);
    CHECK(y(1, 0) == Catch::Approx(5.0 + (2.0 + 5.0 + 11.0) / 3.0).epsilon(1e-12));
    CHECK(y(0, 0) == Catch::Approx(2.0 + (2.0 + 5.0) / 2.0).epsilon(1e-12));
    CHECK(y(2, 0) == Catch::Approx(11.0 + (5.0 + 11.0) / 2.0).epsilon(1e-12));
}

TEST_CASE("isolated node reduces to its own features") {
    Eigen::MatrixXi adj = Eigen::MatrixXi::Zero(2, 2);
    const FleetGraph g = FleetGraph::from_adjacency(adj);
    std::mt19937_64 rng(404);
    const Eigen::MatrixXd x = random_matrix(2, 3, rng);

    const auto tp = random_transformer(3, 2, 1, 2, rng);
    const Eigen::MatrixXd ty = transformer_conv(x, g, tp, 1);
    for (int i = 0; i < 2; ++i) {
        const Eigen::VectorXd want =
            tp.w1 * x.row(i).transpose() + tp.w2 * x.row(i).transpose();
        CHECK((ty.row(i).transpose() - want).cwiseAbs().maxCoeff() < 1e-12);
    }

    const auto ap = random_attention(3, 2, rng);
    const Eigen::MatrixXd gy = gat_conv(x, g, ap, 0.2, true);
    for (int i = 0; i < 2; ++i) {
        const Eigen::VectorXd want = ap.w * x.row(i).transpose();
        CHECK((gy.row(i).transpose() - want).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("zero attention vector gives a uniform neighborhood mean") {
    const FleetGraph g = path_graph(3);
    AttentionLayerParams p;
    std::mt19937_64 rng(505);
    p.w = random_matrix(2, 2, rng);
    p.a = Eigen::VectorXd::Zero(4);
    const Eigen::MatrixXd x = random_matrix(3, 2, rng);

    const Eigen::MatrixXd y = gat_conv(x, g, p, 0.2, true);
    const Eigen::VectorXd mean_center =
        (p.w * (x.row(0) + x.row(1) + x.row(2)).transpose()) / 3.0;
    CHECK((y.row(1).transpose() - mean_center).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("two-node attention matches an explicit softmax") {
    Eigen::MatrixXi adj(2, 2);
    adj << 0, 1, 1, 0;
    const FleetGraph g = FleetGraph::from_adjacency(adj);
    AttentionLayerParams p;
    p.w = Eigen::MatrixXd::Constant(1, 1, 0.7);
    p.a = Eigen::VectorXd(2);
    p.a << 0.3, -1.1;
    Eigen::MatrixXd x(2, 1);
    x << 2.0, -3.0;

    const double g0 = 0.7 * 2.0;
    const double g1 = 0.7 * -3.0;
    auto leaky = [](double z) { return z > 0.0 ? z : 0.2 * z; };
    const double e00 = std::exp(leaky(0.3 * g0 - 1.1 * g0));
    const double e01 = std::exp(leaky(0.3 * g0 - 1.1 * g1));
    const double pre0 = (e00 * g0 + e01 * g1) / (e00 + e01);

    const Eigen::MatrixXd y = gat_conv(x, g, p, 0.2, false);
    const double want0 = pre0 > 0.0 ? pre0 : std::expm1(pre0);
    CHECK(y(0, 0) == Catch::Approx(want0).margin(1e-12));
}

TEST_CASE("branch forward composes the two operator oracles") {
    std::mt19937_64 rng(606);
    const int n = 3, t = 8, h = 4, z = 2, heads = 2;
    const FleetGraph g = random_graph(n, 0.6, rng);
    BranchParams b;
    b.enc_transformer = random_transformer(t, h, heads, h / heads, rng);
    b.enc_attention = random_attention(h, z, rng);
    b.dec_transformer = random_transformer(z, h, heads, h / heads, rng);
    b.dec_attention = random_attention(h, t, rng);
    const Eigen::MatrixXd x = random_matrix(n, t, rng);

    ModelConfig mc = tiny_config(t);
    const Eigen::MatrixXd got = branch_forward(x, g, b, mc);

    Eigen::MatrixXd want = oracle::transformer(x, g.adjacency, b.enc_transformer.w1,
                                               b.enc_transformer.w2, b.enc_transformer.w3,
                                               b.enc_transformer.w4);
    want = oracle::gat(want, g.adjacency, b.enc_attention.w, b.enc_attention.a, 0.2, false);
    want = oracle::transformer(want, g.adjacency, b.dec_transformer.w1, b.dec_transformer.w2,
                               b.dec_transformer.w3, b.dec_transformer.w4);
    want = oracle::gat(want, g.adjacency, b.dec_attention.w, b.dec_attention.a, 0.2, true);

    REQUIRE(got.rows() == n);
    REQUIRE(got.cols() == t);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("bias-free stack maps zero input to zero output") {
    std::mt19937_64 rng(707);
    const FleetGraph g = random_graph(4, 0.5, rng);
    const ModelConfig mc = tiny_config(6);
    const auto model = init_params(mc);
    const Eigen::MatrixXd y = branch_forward(Eigen::MatrixXd::Zero(4, 6), g, model[0], mc);
    CHECK(y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("perturbations propagate at most four hops") {
    std::mt19937_64 rng(808);
    const int n = 10, t = 6;
    const FleetGraph g = path_graph(n);
    ModelConfig mc = tiny_config(t);
    const auto model = init_params(mc);

    Eigen::MatrixXd x = random_matrix(n, t, rng);
    const Eigen::MatrixXd base = branch_forward(x, g, model[0], mc);
    x.row(0).array() += 1.0;
    const Eigen::MatrixXd bumped = branch_forward(x, g, model[0], mc);

    const Eigen::MatrixXd diff = (bumped - base).cwiseAbs();
    CHECK(diff.row(0).maxCoeff() > 0.0);
    for (int i = 5; i < n; ++i) CHECK(diff.row(i).maxCoeff() == 0.0);
}

TEST_CASE("model forward emits one aging and k fluctuation terms") {
    std::mt19937_64 rng(909);
    const FleetGraph g = random_graph(5, 0.5, rng);
    ModelConfig mc = tiny_config(8, 2);
    auto model = init_params(mc);
    const Eigen::MatrixXd x = random_matrix(5, 8, rng);

    const Decomposition d = model_forward(x, g, model, mc);
    REQUIRE(d.h_f.size() == 2);
    CHECK(d.h_a.rows() == 5);
    CHECK(d.h_a.cols() == 8);
    CHECK(d.h_f[0].rows() == 5);
    CHECK(d.h_f[1].cols() == 8);

    std::vector<BranchParams> swapped = {model[0], model[2], model[1]};
    const Decomposition ds = model_forward(x, g, swapped, mc);
    CHECK((ds.h_a - d.h_a).cwiseAbs().maxCoeff() == 0.0);
    CHECK((ds.h_f[0] - d.h_f[1]).cwiseAbs().maxCoeff() == 0.0);
    CHECK((ds.h_f[1] - d.h_f[0]).cwiseAbs().maxCoeff() == 0.0);

    model.pop_back();
    CHECK_THROWS(model_forward(x, g, model, mc));
}

TEST_CASE("initialization is deterministic with distinct branch streams") {
    ModelConfig mc = tiny_config(8, 2);
    const auto a = init_params(mc);
    const auto b = init_params(mc);
    REQUIRE(a.size() == 3);
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK((a[i].enc_transformer.w1 - b[i].enc_transformer.w1).cwiseAbs().maxCoeff() == 0.0);

    CHECK((a[0].enc_transformer.w1 - a[1].enc_transformer.w1).cwiseAbs().maxCoeff() > 0.0);
    CHECK((a[1].enc_transformer.w1 - a[2].enc_transformer.w1).cwiseAbs().maxCoeff() > 0.0);

    mc.seed = 13;
    const auto c = init_params(mc);
    CHECK((a[0].enc_transformer.w1 - c[0].enc_transformer.w1).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("initialization respects the fan-based uniform bound") {
    ModelConfig mc = tiny_config(16);
    mc.hidden_dim = 8;
    mc.latent_dim = 4;
    const auto model = init_params(mc);
    for (const auto& b : model) {
        const double limit_enc = std::sqrt(6.0 / (16 + 8));
        CHECK(b.enc_transformer.w1.cwiseAbs().maxCoeff() <= limit_enc);
        CHECK(b.enc_transformer.w2.cwiseAbs().maxCoeff() <= limit_enc);
        const double limit_att = std::sqrt(6.0 / (8 + 4));
        CHECK(b.enc_attention.w.cwiseAbs().maxCoeff() <= limit_att);
        CHECK(b.enc_attention.w.cwiseAbs().maxCoeff() > 0.0);
    }
}

TEST_CASE("per-branch input widths size the encoder and decoder") {
    ModelConfig mc = tiny_config(16, 1);
    const auto model = init_params(mc, {16, 4});
    CHECK(model[0].enc_transformer.w1.cols() == 16);
    CHECK(model[0].dec_attention.w.rows() == 16);
    CHECK(model[1].enc_transformer.w1.cols() == 4);
    CHECK(model[1].dec_attention.w.rows() == 4);
}

TEST_CASE("checkpoint round trip preserves meta and parameters") {
    ModelConfig mc = tiny_config(8, 2);
    Checkpoint ckpt;
    ckpt.config = mc;
    ckpt.branch_windows = {8, 8, 4};
    ckpt.input_scale = 25.75;
    ckpt.input_offset = 4.0;
    ckpt.model = init_params(mc, ckpt.branch_windows);

    const fs::path dir = fs::temp_directory_path() / "gtrend_ckpt_test";
    fs::remove_all(dir);
    save_checkpoint(dir, ckpt);
    const Checkpoint r = load_checkpoint(dir);

    CHECK(r.config.k == 2);
    CHECK(r.config.series_len == 8);
    CHECK(r.config.hidden_dim == mc.hidden_dim);
    CHECK(r.config.seed == mc.seed);
    CHECK(r.branch_windows == ckpt.branch_windows);
    CHECK(r.input_scale == 25.75);
    CHECK(r.input_offset == 4.0);
    auto flatten = [](const BranchParams& p) {
        std::vector<Eigen::MatrixXd> arrs;
        for_each_param(std::as_const(p), [&](const std::string&, const auto& arr) {
            arrs.emplace_back(arr);
        });
        return arrs;
    };
    for (std::size_t b = 0; b < ckpt.model.size(); ++b) {
        const auto want = flatten(ckpt.model[b]);
        const auto got = flatten(r.model[b]);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i)
            CHECK((want[i] - got[i]).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("checkpoint loader rejects foreign versions") {
    ModelConfig mc = tiny_config(8);
    Checkpoint ckpt;
    ckpt.config = mc;
    ckpt.branch_windows = {8, 8};
    ckpt.model = init_params(mc);
    const fs::path dir = fs::temp_directory_path() / "gtrend_ckpt_version";
    fs::remove_all(dir);
    save_checkpoint(dir, ckpt);

    std::ifstream in(dir / "meta.json");
    std::string meta((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const auto pos = meta.find("\"format_version\": 1");
    REQUIRE(pos != std::string::npos);
    meta.replace(pos, 19, "\"format_version\": 2");
    std::ofstream out(dir / "meta.json");
    out << meta;
    out.close();
    CHECK_THROWS_WITH(load_checkpoint(dir),
                      Catch::Matchers::ContainsSubstring("format version"));
}

TEST_CASE("windowed application stitches slices and pads the tail") {
    std::mt19937_64 rng(111);
    const int n = 4, t = 10, w = 4;
    const FleetGraph g = random_graph(n, 0.5, rng);
    const NeighborList nl = NeighborList::with_self_loops(g);
    ModelConfig mc = tiny_config(w);
    const auto model = init_params(mc);
    const Eigen::MatrixXd x = random_matrix(n, t, rng);

    const Eigen::MatrixXd got = branch_apply_windowed(x, nl, model[0], mc.n_heads, 0.2, w);
    REQUIRE(got.cols() == t);

    Eigen::MatrixXd want(n, t);
    want.middleCols(0, 4) = branch_forward(x.middleCols(0, 4), nl, model[0], mc.n_heads, 0.2);
    want.middleCols(4, 4) = branch_forward(x.middleCols(4, 4), nl, model[0], mc.n_heads, 0.2);
    Eigen::MatrixXd tail(n, 4);
    tail.col(0) = x.col(8);
    tail.col(1) = x.col(9);
    tail.col(2) = x.col(9);
    tail.col(3) = x.col(9);
    want.middleCols(8, 2) =
        branch_forward(tail, nl, model[0], mc.n_heads, 0.2).leftCols(2);
    CHECK((got - want).cwiseAbs().maxCoeff() == 0.0);

    CHECK_THROWS(branch_apply_windowed(x, nl, model[0], mc.n_heads, 0.2, t + 1));
}

TEST_CASE("checkpoint application undoes the input normalization") {
    std::mt19937_64 rng(222);
    const int n = 4, t = 8;
    const FleetGraph g = random_graph(n, 0.6, rng);
    const NeighborList nl = NeighborList::with_self_loops(g);
    ModelConfig mc = tiny_config(t);
    Checkpoint ckpt;
    ckpt.config = mc;
    ckpt.branch_windows = {t, 4};
    ckpt.input_scale = 12.5;
    ckpt.input_offset = 2.0;
    ckpt.model = init_params(mc, ckpt.branch_windows);

    const Eigen::MatrixXd x = random_matrix(n, t, rng).array() + 30.0;
    const Decomposition d = model_apply(x, g, ckpt);

    const Eigen::MatrixXd xn = (x / 12.5).array() - 2.0;
    const Eigen::MatrixXd want_ha =
        12.5 * (branch_forward(xn, nl, ckpt.model[0], mc.n_heads, 0.2).array() + 2.0);
    const Eigen::MatrixXd want_hf =
        12.5 * branch_apply_windowed(xn, nl, ckpt.model[1], mc.n_heads, 0.2, 4);
    CHECK((d.h_a - want_ha).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((d.h_f[0] - want_hf).cwiseAbs().maxCoeff() < 1e-12);
}
