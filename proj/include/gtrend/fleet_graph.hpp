#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gtrend/fleet_series.hpp"

namespace gtrend {

// Static undirected fleet graph: symmetric binary adjacency, zero diagonal.
struct FleetGraph {
    int n_nodes = 0;
    Eigen::MatrixXi adjacency;                 // N x N, entries in {0,1}
    std::vector<std::pair<int, int>> edges;    // (i, j) with i < j

    static FleetGraph from_adjacency(Eigen::MatrixXi adj) {
        FleetGraph g;
        g.n_nodes = static_cast<int>(adj.rows());
        if (adj.cols() != adj.rows()) throw std::invalid_argument("adjacency must be square");
        for (int i = 0; i < g.n_nodes; ++i) {
            if (adj(i, i) != 0) throw std::invalid_argument("adjacency diagonal must be zero");
            for (int j = i + 1; j < g.n_nodes; ++j) {
                if (adj(i, j) != adj(j, i)) throw std::invalid_argument("adjacency must be symmetric");
                if (adj(i, j) != 0) g.edges.emplace_back(i, j);
            }
        }
        g.adjacency = std::move(adj);
        return g;
    }

    bool has_edge(int i, int j) const { return adjacency(i, j) != 0; }
};

// A[i][j] = 1 iff i != j and exp(-dist^2/sigma^2) >= epsilon, with sigma the
// population standard deviation of all unordered pairwise distances.
inline FleetGraph build_spatial_adjacency(const Eigen::MatrixXd& locations, double epsilon) {
    const int n = static_cast<int>(locations.rows());
    if (n < 2) throw std::invalid_argument("spatial adjacency needs at least 2 nodes");
    if (locations.cols() != 2) throw std::invalid_argument("locations must be N x 2");
    if (epsilon < 0.0 || epsilon > 1.0) throw std::invalid_argument("epsilon must lie in [0,1]");

    std::vector<double> dists;
    dists.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            dists.push_back((locations.row(i) - locations.row(j)).norm());

    double mean = 0.0;
    for (double d : dists) mean += d;
    mean /= static_cast<double>(dists.size());
    double var = 0.0;
    for (double d : dists) var += (d - mean) * (d - mean);
    var /= static_cast<double>(dists.size());
    const double sigma2 = var;
    if (sigma2 <= 0.0) {
        throw std::invalid_argument(
            "degenerate geometry: pairwise distances have zero spread (sigma = 0); "
            "pass an explicit epsilon=0 complete graph instead");
    }

    Eigen::MatrixXi adj = Eigen::MatrixXi::Zero(n, n);
    std::size_t idx = 0;
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j, ++idx) {
            const double kernel = std::exp(-dists[idx] * dists[idx] / sigma2);
            if (kernel >= epsilon) {
                adj(i, j) = 1;
                adj(j, i) = 1;
            }
        }
    }
    return FleetGraph::from_adjacency(std::move(adj));
}

inline double pearson_correlation(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("pearson: bad lengths");
    const double mx = x.mean(), my = y.mean();
    const Eigen::VectorXd cx = x.array() - mx;
    const Eigen::VectorXd cy = y.array() - my;
    const double sx = cx.norm(), sy = cy.norm();
    if (sx == 0.0 || sy == 0.0) throw std::domain_error("pearson: zero-variance series");
    return cx.dot(cy) / (sx * sy);
}

// A[i][j] = 1 iff i != j and |pearson(values[i], values[j])| >= epsilon.
inline FleetGraph build_correlation_adjacency(const FleetSeries& series, double epsilon) {
    series.validate();
    if (epsilon < 0.0 || epsilon > 1.0) throw std::invalid_argument("epsilon must lie in [0,1]");
    const int n = series.n_nodes();
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd row = series.values.row(i);
        if ((row.array() - row.mean()).matrix().norm() == 0.0) {
            throw std::invalid_argument("node '" + series.node_ids[i] +
                                        "' has zero variance; correlation undefined");
        }
    }
    Eigen::MatrixXi adj = Eigen::MatrixXi::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            const double r = pearson_correlation(series.values.row(i), series.values.row(j));
            if (std::abs(r) >= epsilon) {
                adj(i, j) = 1;
                adj(j, i) = 1;
            }
        }
    }
    return FleetGraph::from_adjacency(std::move(adj));
}

// Edge-list text export: one "i j" pair per line, i < j.
inline void write_edge_list(const std::string& path, const FleetGraph& graph) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    for (const auto& [i, j] : graph.edges) out << i << ' ' << j << "\n";
}

inline FleetGraph load_edge_list(const std::string& path, int n_nodes) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    Eigen::MatrixXi adj = Eigen::MatrixXi::Zero(n_nodes, n_nodes);
    int i, j;
    while (in >> i >> j) {
        if (i < 0 || j < 0 || i >= n_nodes || j >= n_nodes || i == j) {
            throw std::runtime_error("'" + path + "': bad edge " + std::to_string(i) + " " +
                                     std::to_string(j));
        }
        adj(i, j) = 1;
        adj(j, i) = 1;
    }
    return FleetGraph::from_adjacency(std::move(adj));
}

// CSR neighbor lists with self-loops; the propagation structure both
// attention operators run on.
struct NeighborList {
    int n_nodes = 0;
    std::vector<int> offsets;    // n_nodes + 1
    std::vector<int> neighbors;  // node ids, self first

    static NeighborList with_self_loops(const FleetGraph& graph) {
        NeighborList nl;
        nl.n_nodes = graph.n_nodes;
        nl.offsets.resize(graph.n_nodes + 1, 0);
        nl.neighbors.reserve(graph.edges.size() * 2 + graph.n_nodes);
        for (int i = 0; i < graph.n_nodes; ++i) {
            nl.offsets[i] = static_cast<int>(nl.neighbors.size());
            nl.neighbors.push_back(i);
            for (int j = 0; j < graph.n_nodes; ++j) {
                if (j != i && graph.adjacency(i, j) != 0) nl.neighbors.push_back(j);
            }
        }
        nl.offsets[graph.n_nodes] = static_cast<int>(nl.neighbors.size());
        return nl;
    }

    int degree(int i) const { return offsets[i + 1] - offsets[i]; }
};

} // namespace gtrend
