#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "gtrend/gae_model.hpp"

namespace gtrend {

// Trade-off weights of the composite loss. segment_window holds the per-term
// segmentation window (samples) used by the mean constraint, one entry per
// fluctuation term. With `normalized` set every component is averaged over
// its natural index set (entries for the reconstruction error, node x term
// for the flatness constraints, nodes for the smoothness term); cleared, the
// components are raw sums.
struct LossWeights {
    double lambda1 = 5.0;
    double lambda2 = 100.0;
    double lambda3 = 10.0;
    std::vector<int> segment_window;
    bool normalized = true;

    void validate() const {
        if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0)
            throw std::invalid_argument("loss weights must be nonnegative");
        for (int w : segment_window)
            if (w < 2) throw std::invalid_argument("segment_window entries must be >= 2");
    }
};

struct LossBreakdown {
    double re = 0.0;
    double mc = 0.0;
    double sc = 0.0;
    double sr = 0.0;
    double total = 0.0;
};

namespace detail {

inline void check_same_shape(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                             const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

} // namespace detail

inline Eigen::MatrixXd reconstruction_residual(const Eigen::MatrixXd& x,
                                               const Decomposition& d) {
    detail::check_same_shape(x, d.h_a, "reconstruction");
    Eigen::MatrixXd r = x - d.h_a;
    for (const auto& f : d.h_f) {
        detail::check_same_shape(x, f, "reconstruction");
        r -= f;
    }
    return r;
}

inline double reconstruction_error(const Eigen::MatrixXd& x, const Decomposition& d,
                                   bool normalized = true) {
    const Eigen::MatrixXd r = reconstruction_residual(x, d);
    const double ss = r.squaredNorm();
    return normalized ? ss / static_cast<double>(r.size()) : ss;
}

// Means of the floor(T/w) consecutive length-w windows; a trailing remainder
// shorter than w is dropped. Requires at least two full windows.
inline Eigen::VectorXd segment_means(const Eigen::Ref<const Eigen::RowVectorXd>& series,
                                     int w) {
    if (w < 2) throw std::invalid_argument("segment_means: window must be >= 2");
    const auto t = series.size();
    const auto p = t / w;
    if (p < 2)
        throw std::invalid_argument("segment_means: series of length " + std::to_string(t) +
                                    " has fewer than 2 segments at window " + std::to_string(w));
    Eigen::VectorXd means(p);
    for (Eigen::Index q = 0; q < p; ++q) means(q) = series.segment(q * w, w).mean();
    return means;
}

namespace detail {

// Distance-proportional pair weights over ordered segment pairs, normalized
// to sum to 1: W_ij = |i-j| / sum |i'-j'|.
inline Eigen::MatrixXd pair_weights(Eigen::Index p) {
    Eigen::MatrixXd w(p, p);
    double total = 0.0;
    for (Eigen::Index i = 0; i < p; ++i)
        for (Eigen::Index j = 0; j < p; ++j) {
            w(i, j) = static_cast<double>(std::abs(i - j));
            total += w(i, j);
        }
    w /= total;
    return w;
}

inline double mc_one_series(const Eigen::Ref<const Eigen::RowVectorXd>& series, int w) {
    const Eigen::VectorXd m = segment_means(series, w);
    const Eigen::MatrixXd wij = pair_weights(m.size());
    double acc = 0.0;
    for (Eigen::Index i = 0; i < m.size(); ++i)
        for (Eigen::Index j = 0; j < m.size(); ++j) {
            const double diff = m(i) - m(j);
            acc += wij(i, j) * diff * diff;
        }
    return acc;
}

} // namespace detail

// Mean constraint: weighted squared differences of segment means, pushing
// every fluctuation term towards a stable per-window average. Averaged over
// nodes and terms in normalized mode.
inline double mean_constraint(const Decomposition& d, const LossWeights& weights) {
    const auto k = static_cast<int>(d.h_f.size());
    if (static_cast<int>(weights.segment_window.size()) != k)
        throw std::invalid_argument("mean_constraint: need one segment window per term");
    double acc = 0.0;
    for (int q = 0; q < k; ++q)
        for (Eigen::Index l = 0; l < d.h_f[q].rows(); ++l)
            acc += detail::mc_one_series(d.h_f[q].row(l), weights.segment_window[q]);
    if (k == 0) return 0.0;
    return weights.normalized ? acc / (static_cast<double>(k) * d.h_a.rows()) : acc;
}

inline double least_squares_slope(const Eigen::Ref<const Eigen::RowVectorXd>& series) {
    const auto t = series.size();
    if (t < 2) throw std::invalid_argument("least_squares_slope: need at least 2 points");
    const double tbar = (t - 1) / 2.0;
    double sxy = 0.0;
    double sxx = 0.0;
    const double ybar = series.mean();
    for (Eigen::Index i = 0; i < t; ++i) {
        const double dt = i - tbar;
        sxy += dt * (series(i) - ybar);
        sxx += dt * dt;
    }
    return sxy / sxx;
}

// Slope constraint: absolute least-squares slope of every fluctuation term,
// keeping long-run drift out of the fluctuation branches.
inline double slope_constraint(const Decomposition& d, bool normalized = true) {
    const auto k = static_cast<int>(d.h_f.size());
    double acc = 0.0;
    for (const auto& f : d.h_f)
        for (Eigen::Index l = 0; l < f.rows(); ++l)
            acc += std::abs(least_squares_slope(f.row(l)));
    if (k == 0) return 0.0;
    return normalized ? acc / (static_cast<double>(k) * d.h_a.rows()) : acc;
}

// Smoothness: population standard deviation of the first differences of the
// aging term, per node. Zero exactly when the trend is linear.
inline double smoothness_reg(const Decomposition& d, bool normalized = true) {
    const auto t = d.h_a.cols();
    if (t < 3) throw std::invalid_argument("smoothness_reg: need at least 3 points");
    const auto m = t - 1;
    double acc = 0.0;
    for (Eigen::Index l = 0; l < d.h_a.rows(); ++l) {
        const auto row = d.h_a.row(l);
        const Eigen::RowVectorXd diffs = row.tail(m) - row.head(m);
        const double mean = diffs.mean();
        const double var = (diffs.array() - mean).square().sum() / static_cast<double>(m);
        acc += std::sqrt(var);
    }
    return normalized ? acc / static_cast<double>(d.h_a.rows()) : acc;
}

inline LossBreakdown total_loss(const Eigen::MatrixXd& x, const Decomposition& d,
                                const LossWeights& weights) {
    weights.validate();
    LossBreakdown out;
    out.re = reconstruction_error(x, d, weights.normalized);
    out.mc = mean_constraint(d, weights);
    out.sc = slope_constraint(d, weights.normalized);
    out.sr = smoothness_reg(d, weights.normalized);
    out.total = out.re + weights.lambda1 * out.mc + weights.lambda2 * out.sc +
                weights.lambda3 * out.sr;
    return out;
}

// ---- analytic gradients -------------------------------------------------
//
// Each *_grad returns the derivative of the corresponding component above
// (including its normalization) with respect to the matrix argument. The
// trainer assembles the full loss gradient per branch from these plus the
// shared reconstruction residual.

inline Eigen::MatrixXd reconstruction_error_grad(const Eigen::MatrixXd& residual,
                                                 bool normalized = true) {
    const double scale = normalized ? 2.0 / static_cast<double>(residual.size()) : 2.0;
    return (-scale) * residual;
}

// n_terms and n_nodes supply the normalization denominator so the gradient of
// a single term (or of a temporal slice in the parallel trainer) stays
// consistent with mean_constraint over the whole decomposition.
inline Eigen::MatrixXd mean_constraint_grad(const Eigen::MatrixXd& h_f_q, int w, int n_terms,
                                            bool normalized = true) {
    const auto t = h_f_q.cols();
    const auto p = t / w;
    if (p < 2)
        throw std::invalid_argument("mean_constraint_grad: fewer than 2 segments");
    const Eigen::MatrixXd wij = detail::pair_weights(p);
    const double factor =
        normalized ? 1.0 / (static_cast<double>(n_terms) * h_f_q.rows()) : 1.0;
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(h_f_q.rows(), t);
    for (Eigen::Index l = 0; l < h_f_q.rows(); ++l) {
        const Eigen::VectorXd m = segment_means(h_f_q.row(l), w);
        for (Eigen::Index i = 0; i < p; ++i) {
            double g = 0.0;
            for (Eigen::Index j = 0; j < p; ++j) g += wij(i, j) * (m(i) - m(j));
            g *= 4.0 * factor / w;
            grad.row(l).segment(i * w, w).setConstant(g);
        }
    }
    return grad;
}

inline Eigen::MatrixXd slope_constraint_grad(const Eigen::MatrixXd& h_f_q, int n_terms,
                                             bool normalized = true) {
    const auto t = h_f_q.cols();
    if (t < 2) throw std::invalid_argument("slope_constraint_grad: need at least 2 points");
    const double tbar = (t - 1) / 2.0;
    double sxx = 0.0;
    Eigen::RowVectorXd coef(t);
    for (Eigen::Index i = 0; i < t; ++i) {
        coef(i) = i - tbar;
        sxx += coef(i) * coef(i);
    }
    coef /= sxx;
    const double factor =
        normalized ? 1.0 / (static_cast<double>(n_terms) * h_f_q.rows()) : 1.0;
    Eigen::MatrixXd grad(h_f_q.rows(), t);
    for (Eigen::Index l = 0; l < h_f_q.rows(); ++l) {
        const double slope = least_squares_slope(h_f_q.row(l));
        const double s = slope > 0.0 ? 1.0 : (slope < 0.0 ? -1.0 : 0.0);
        grad.row(l) = (factor * s) * coef;
    }
    return grad;
}

inline Eigen::MatrixXd smoothness_reg_grad(const Eigen::MatrixXd& h_a,
                                           bool normalized = true) {
    const auto t = h_a.cols();
    if (t < 3) throw std::invalid_argument("smoothness_reg_grad: need at least 3 points");
    const auto m = t - 1;
    const double factor = normalized ? 1.0 / static_cast<double>(h_a.rows()) : 1.0;
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(h_a.rows(), t);
    for (Eigen::Index l = 0; l < h_a.rows(); ++l) {
        const auto row = h_a.row(l);
        const Eigen::RowVectorXd diffs = row.tail(m) - row.head(m);
        const double mean = diffs.mean();
        const double var = (diffs.array() - mean).square().sum() / static_cast<double>(m);
        const double sd = std::sqrt(var);
        if (sd == 0.0) continue;
        // dSD/d(diff_j) = (diff_j - mean) / (m * SD); each series value feeds
        // the difference on its right with +1 and on its left with -1.
        Eigen::RowVectorXd gd = (diffs.array() - mean) / (static_cast<double>(m) * sd);
        for (Eigen::Index i = 0; i < t; ++i) {
            double g = 0.0;
            if (i > 0) g += gd(i - 1);
            if (i < m) g -= gd(i);
            grad(l, i) = factor * g;
        }
    }
    return grad;
}

// Gradient of total_loss with respect to h_a and each h_f.
struct LossGradients {
    Eigen::MatrixXd d_h_a;
    std::vector<Eigen::MatrixXd> d_h_f;
};

inline LossGradients loss_gradients(const Eigen::MatrixXd& x, const Decomposition& d,
                                    const LossWeights& weights) {
    weights.validate();
    const auto k = static_cast<int>(d.h_f.size());
    const Eigen::MatrixXd r = reconstruction_residual(x, d);
    const Eigen::MatrixXd re_grad = reconstruction_error_grad(r, weights.normalized);
    LossGradients out;
    out.d_h_a = re_grad + weights.lambda3 * smoothness_reg_grad(d.h_a, weights.normalized);
    out.d_h_f.reserve(k);
    for (int q = 0; q < k; ++q) {
        Eigen::MatrixXd g = re_grad;
        if (weights.lambda1 > 0.0)
            g += weights.lambda1 *
                 mean_constraint_grad(d.h_f[q], weights.segment_window.at(q), k,
                                      weights.normalized);
        if (weights.lambda2 > 0.0)
            g += weights.lambda2 * slope_constraint_grad(d.h_f[q], k, weights.normalized);
        out.d_h_f.push_back(std::move(g));
    }
    return out;
}

} // namespace gtrend
