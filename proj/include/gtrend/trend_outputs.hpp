#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "gtrend/gae_model.hpp"

namespace gtrend {

// The aging term is the estimated degradation pattern.
inline const Eigen::MatrixXd& extract_edp(const Decomposition& d) { return d.h_a; }

// Mean percent change over all one-year-apart sample pairs.
inline double global_plr(const Eigen::Ref<const Eigen::RowVectorXd>& h_a_row,
                         int samples_per_year) {
    const auto t = h_a_row.size();
    const auto s = static_cast<Eigen::Index>(samples_per_year);
    if (s < 1) throw std::invalid_argument("global_plr: samples_per_year must be >= 1");
    if (t <= s)
        throw std::invalid_argument("global_plr: series must span more than one year");
    double acc = 0.0;
    for (Eigen::Index i = 0; i + s < t; ++i) {
        const double v = h_a_row(i);
        if (v == 0.0)
            throw std::domain_error("global_plr: zero value at t=" + std::to_string(i));
        acc += (h_a_row(i + s) - v) / v;
    }
    return acc / static_cast<double>(t - s) * 100.0;
}

struct PlrReport {
    Eigen::VectorXd per_node_plr;
    double fleet_mean_plr = 0.0;
    Eigen::MatrixXd edp;
};

inline PlrReport make_plr_report(const Eigen::MatrixXd& edp, int samples_per_year) {
    PlrReport r;
    r.edp = edp;
    r.per_node_plr.resize(edp.rows());
    for (Eigen::Index l = 0; l < edp.rows(); ++l)
        r.per_node_plr(l) = global_plr(edp.row(l), samples_per_year);
    r.fleet_mean_plr = r.per_node_plr.mean();
    return r;
}

inline double mape(const Eigen::MatrixXd& edp, const Eigen::MatrixXd& rdp) {
    if (edp.rows() != rdp.rows() || edp.cols() != rdp.cols())
        throw std::invalid_argument("mape: shape mismatch");
    double acc = 0.0;
    for (Eigen::Index l = 0; l < edp.rows(); ++l)
        for (Eigen::Index t = 0; t < edp.cols(); ++t) {
            const double denom = std::abs(rdp(l, t));
            if (denom == 0.0)
                throw std::domain_error("mape: zero reference at node " + std::to_string(l) +
                                        ", t=" + std::to_string(t));
            acc += std::abs(edp(l, t) - rdp(l, t)) / denom;
        }
    return acc / static_cast<double>(edp.size()) * 100.0;
}

// Per node: scale both rows by their own first value, take the Euclidean
// distance of the scaled rows, then average over nodes.
inline double scaled_ed(const Eigen::MatrixXd& edp, const Eigen::MatrixXd& rdp) {
    if (edp.rows() != rdp.rows() || edp.cols() != rdp.cols())
        throw std::invalid_argument("scaled_ed: shape mismatch");
    double acc = 0.0;
    for (Eigen::Index l = 0; l < edp.rows(); ++l) {
        if (edp(l, 0) == 0.0 || rdp(l, 0) == 0.0)
            throw std::domain_error("scaled_ed: zero first value at node " + std::to_string(l));
        const Eigen::RowVectorXd a = edp.row(l) / edp(l, 0);
        const Eigen::RowVectorXd b = rdp.row(l) / rdp(l, 0);
        acc += (a - b).norm();
    }
    return acc / static_cast<double>(edp.rows());
}

// Centered moving average per node with edge replication; the naive trend
// baseline the model has to beat.
inline Eigen::MatrixXd moving_average_oracle(const Eigen::MatrixXd& series, int window) {
    const auto t = series.cols();
    if (window < 3 || window % 2 == 0 || window > t)
        throw std::invalid_argument("moving_average_oracle: window must be odd, >= 3, <= T");
    const Eigen::Index half = window / 2;
    Eigen::MatrixXd out(series.rows(), t);
    for (Eigen::Index l = 0; l < series.rows(); ++l)
        for (Eigen::Index i = 0; i < t; ++i) {
            double acc = 0.0;
            for (Eigen::Index off = -half; off <= half; ++off) {
                Eigen::Index j = i + off;
                if (j < 0) j = 0;
                if (j >= t) j = t - 1;
                acc += series(l, j);
            }
            out(l, i) = acc / window;
        }
    return out;
}

} // namespace gtrend
