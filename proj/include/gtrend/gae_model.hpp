#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gtrend/rng.hpp"

namespace gtrend {

// Shared architecture settings of the branch array. window_sizes drive the
// mean-constraint segmentation, one entry per fluctuation branch.
struct ModelConfig {
    int k = 1;
    int series_len = 0;
    int hidden_dim = 64;
    int latent_dim = 32;
    int n_heads = 4;
    double leaky_slope = 0.2;
    std::vector<int> window_sizes;
    std::uint64_t seed = 0;

    void validate() const {
        if (k < 1) throw std::invalid_argument("ModelConfig.k must be >= 1");
        if (series_len < 2) throw std::invalid_argument("ModelConfig.series_len must be >= 2");
        if (hidden_dim < 1 || latent_dim < 1)
            throw std::invalid_argument("ModelConfig dims must be positive");
        if (n_heads < 1 || hidden_dim % n_heads != 0)
            throw std::invalid_argument("ModelConfig.hidden_dim must be divisible by n_heads");
        if (static_cast<int>(window_sizes.size()) != k)
            throw std::invalid_argument("ModelConfig.window_sizes must have k entries");
        for (int w : window_sizes)
            if (w < 2 || w > series_len)
                throw std::invalid_argument("ModelConfig.window_sizes entries must lie in [2, series_len]");
    }
};

// One graph-transformer layer. w1 carries the node's own features, w2 the
// attention-weighted neighborhood; w3/w4 are the per-head query/key maps.
struct TransformerLayerParams {
    Eigen::MatrixXd w1;
    Eigen::MatrixXd w2;
    std::vector<Eigen::MatrixXd> w3;
    std::vector<Eigen::MatrixXd> w4;
};

// One graph-attention layer: a linear map plus the score vector over the
// concatenated endpoint features.
struct AttentionLayerParams {
    Eigen::MatrixXd w;
    Eigen::VectorXd a;
};

struct BranchParams {
    TransformerLayerParams enc_transformer;
    AttentionLayerParams enc_attention;
    TransformerLayerParams dec_transformer;
    AttentionLayerParams dec_attention;
};

struct Decomposition {
    Eigen::MatrixXd h_a;
    std::vector<Eigen::MatrixXd> h_f;
};

// Visits every parameter array of a branch in a fixed order. Used by the
// optimizer, replica aggregation, and checkpoint serialization, which must
// all agree on the ordering.
template <typename Params, typename Fn>
void for_each_param(Params&& p, Fn&& fn) {
    auto layer_t = [&](auto&& t, const std::string& prefix) {
        fn(prefix + ".w1", t.w1);
        fn(prefix + ".w2", t.w2);
        for (std::size_t h = 0; h < t.w3.size(); ++h)
            fn(prefix + ".w3." + std::to_string(h), t.w3[h]);
        for (std::size_t h = 0; h < t.w4.size(); ++h)
            fn(prefix + ".w4." + std::to_string(h), t.w4[h]);
    };
    auto layer_a = [&](auto&& a, const std::string& prefix) {
        fn(prefix + ".w", a.w);
        fn(prefix + ".a", a.a);
    };
    layer_t(p.enc_transformer, "enc_transformer");
    layer_a(p.enc_attention, "enc_attention");
    layer_t(p.dec_transformer, "dec_transformer");
    layer_a(p.dec_attention, "dec_attention");
}

namespace detail {

inline Eigen::MatrixXd glorot(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in,
                              Eigen::Index fan_out, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
    return m;
}

inline TransformerLayerParams init_transformer(int in_dim, int out_dim, int n_heads,
                                               std::mt19937_64& rng) {
    TransformerLayerParams p;
    const int d = out_dim / n_heads;
    p.w1 = glorot(out_dim, in_dim, in_dim, out_dim, rng);
    p.w2 = glorot(out_dim, in_dim, in_dim, out_dim, rng);
    p.w3.reserve(n_heads);
    p.w4.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) p.w3.push_back(glorot(d, in_dim, in_dim, d, rng));
    for (int h = 0; h < n_heads; ++h) p.w4.push_back(glorot(d, in_dim, in_dim, d, rng));
    return p;
}

inline AttentionLayerParams init_attention(int in_dim, int out_dim, std::mt19937_64& rng) {
    AttentionLayerParams p;
    p.w = glorot(out_dim, in_dim, in_dim, out_dim, rng);
    // The score vector sees the two concatenated endpoint embeddings; its fan
    // is (2*out_dim, 1).
    p.a = glorot(2 * out_dim, 1, 2 * out_dim, 1, rng);
    return p;
}

constexpr std::uint64_t kBranchSeedStream = 0x6165; // offsets branch sub-seeds

} // namespace detail

// Parameters for one branch whose encoder maps series_len -> hidden -> latent
// and whose decoder mirrors it back.
inline BranchParams init_branch(int series_len, int hidden_dim, int latent_dim, int n_heads,
                                std::mt19937_64& rng) {
    BranchParams b;
    b.enc_transformer = detail::init_transformer(series_len, hidden_dim, n_heads, rng);
    b.enc_attention = detail::init_attention(hidden_dim, latent_dim, rng);
    b.dec_transformer = detail::init_transformer(latent_dim, hidden_dim, n_heads, rng);
    b.dec_attention = detail::init_attention(hidden_dim, series_len, rng);
    return b;
}

// Glorot-uniform initialization of all k+1 branches, each from its own
// deterministic sub-seed. branch_windows may override the per-branch input
// width (the parallel trainer sizes replicas to their temporal slice).
inline std::vector<BranchParams> init_params(const ModelConfig& config,
                                             const std::vector<int>& branch_windows = {}) {
    config.validate();
    std::vector<BranchParams> model;
    model.reserve(config.k + 1);
    for (int b = 0; b <= config.k; ++b) {
        const int len =
            branch_windows.empty() ? config.series_len : branch_windows.at(b);
        auto rng = make_engine(config.seed, detail::kBranchSeedStream + b);
        model.push_back(
            init_branch(len, config.hidden_dim, config.latent_dim, config.n_heads, rng));
    }
    return model;
}

// ---- checkpoint IO -------------------------------------------------------
//
// A checkpoint is a directory: meta.json describes the architecture, and
// branch_<i>.bin holds that branch's arrays as little-endian float32 blobs,
// each preceded by a text header line "name rows cols\n".

constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    std::vector<int> branch_windows; // input width per branch
    double input_scale = 1.0;        // series were divided by this before training
    double input_offset = 0.0;       // then this was subtracted; restored into h_a
    std::vector<BranchParams> model;
};

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json meta;
    meta["format_version"] = kCheckpointVersion;
    meta["k"] = ckpt.config.k;
    meta["series_len"] = ckpt.config.series_len;
    meta["hidden_dim"] = ckpt.config.hidden_dim;
    meta["latent_dim"] = ckpt.config.latent_dim;
    meta["n_heads"] = ckpt.config.n_heads;
    meta["leaky_slope"] = ckpt.config.leaky_slope;
    meta["window_sizes"] = ckpt.config.window_sizes;
    meta["seed"] = ckpt.config.seed;
    meta["branch_windows"] = ckpt.branch_windows;
    meta["input_scale"] = ckpt.input_scale;
    meta["input_offset"] = ckpt.input_offset;
    std::ofstream mf(dir / "meta.json");
    mf << meta.dump(2) << "\n";

    for (std::size_t b = 0; b < ckpt.model.size(); ++b) {
        std::ofstream f(dir / ("branch_" + std::to_string(b) + ".bin"), std::ios::binary);
        for_each_param(ckpt.model[b], [&](const std::string& name, const auto& arr) {
            f << name << " " << arr.rows() << " " << arr.cols() << "\n";
            for (Eigen::Index j = 0; j < arr.cols(); ++j)
                for (Eigen::Index i = 0; i < arr.rows(); ++i) {
                    const float v = static_cast<float>(arr(i, j));
                    f.write(reinterpret_cast<const char*>(&v), sizeof v);
                }
        });
        if (!f) throw std::runtime_error("checkpoint write failed: branch " + std::to_string(b));
    }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(dir / "meta.json");
    if (!mf) throw std::runtime_error("checkpoint: cannot open " + (dir / "meta.json").string());
    nlohmann::json meta = nlohmann::json::parse(mf);
    if (meta.at("format_version").get<int>() != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported format version " +
                                 meta.at("format_version").dump());
    Checkpoint ckpt;
    ckpt.config.k = meta.at("k").get<int>();
    ckpt.config.series_len = meta.at("series_len").get<int>();
    ckpt.config.hidden_dim = meta.at("hidden_dim").get<int>();
    ckpt.config.latent_dim = meta.at("latent_dim").get<int>();
    ckpt.config.n_heads = meta.at("n_heads").get<int>();
    ckpt.config.leaky_slope = meta.at("leaky_slope").get<double>();
    ckpt.config.window_sizes = meta.at("window_sizes").get<std::vector<int>>();
    ckpt.config.seed = meta.at("seed").get<std::uint64_t>();
    ckpt.branch_windows = meta.at("branch_windows").get<std::vector<int>>();
    ckpt.input_scale = meta.at("input_scale").get<double>();
    ckpt.input_offset = meta.value("input_offset", 0.0);
    ckpt.config.validate();

    std::mt19937_64 shape_rng(0); // values are overwritten below; only shapes matter
    for (int b = 0; b <= ckpt.config.k; ++b) {
        const fs::path path = dir / ("branch_" + std::to_string(b) + ".bin");
        std::ifstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("checkpoint: cannot open " + path.string());
        BranchParams params =
            init_branch(ckpt.branch_windows.at(b), ckpt.config.hidden_dim,
                        ckpt.config.latent_dim, ckpt.config.n_heads, shape_rng);
        for_each_param(params, [&](const std::string& name, auto& arr) {
            std::string header;
            if (!std::getline(f, header))
                throw std::runtime_error("checkpoint: truncated " + path.string());
            std::istringstream hs(header);
            std::string got;
            Eigen::Index rows = 0;
            Eigen::Index cols = 0;
            hs >> got >> rows >> cols;
            if (got != name || rows != arr.rows() || cols != arr.cols())
                throw std::runtime_error("checkpoint: expected array " + name + " " +
                                         std::to_string(arr.rows()) + "x" +
                                         std::to_string(arr.cols()) + ", found " + header);
            for (Eigen::Index j = 0; j < cols; ++j)
                for (Eigen::Index i = 0; i < rows; ++i) {
                    float v = 0.0f;
                    f.read(reinterpret_cast<char*>(&v), sizeof v);
                    arr(i, j) = v;
                }
            if (!f) throw std::runtime_error("checkpoint: truncated " + path.string());
        });
        ckpt.model.push_back(std::move(params));
    }
    return ckpt;
}

} // namespace gtrend
