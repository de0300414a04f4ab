#pragma once

// Independent reference implementations used to cross-check the library.
// Everything here works directly off the dense adjacency matrix with naive
// summation, deliberately sharing no code with the production operators.

#include <Eigen/Dense>
#include <cmath>
#include <vector>

namespace oracle {

// Graph transformer operator: x'_i = W1 x_i + sum_{j in N(i)} abar_ij W2 x_j,
// with per-head scores (W3 x_i) . (W4 x_j) / sqrt(D), softmaxed over N(i)
// (self-loop included) and averaged over heads.
inline Eigen::MatrixXd transformer(const Eigen::MatrixXd& x, const Eigen::MatrixXi& adj,
                                   const Eigen::MatrixXd& w1, const Eigen::MatrixXd& w2,
                                   const std::vector<Eigen::MatrixXd>& w3,
                                   const std::vector<Eigen::MatrixXd>& w4) {
    const auto n = x.rows();
    const auto n_heads = static_cast<int>(w3.size());
    const auto d = w3[0].rows();
    Eigen::MatrixXd out(n, w1.rows());
    for (Eigen::Index i = 0; i < n; ++i) {
        std::vector<Eigen::Index> nbr{i};
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i && adj(i, j) != 0) nbr.push_back(j);

        Eigen::VectorXd abar = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nbr.size()));
        for (int h = 0; h < n_heads; ++h) {
            const Eigen::VectorXd qi = w3[h] * x.row(i).transpose();
            Eigen::VectorXd e(static_cast<Eigen::Index>(nbr.size()));
            for (std::size_t s = 0; s < nbr.size(); ++s) {
                const Eigen::VectorXd kj = w4[h] * x.row(nbr[s]).transpose();
                e(static_cast<Eigen::Index>(s)) = qi.dot(kj) / std::sqrt(static_cast<double>(d));
            }
            const Eigen::VectorXd ex = e.array().exp();
            abar += ex / ex.sum() / n_heads;
        }
        Eigen::VectorXd agg = Eigen::VectorXd::Zero(x.cols());
        for (std::size_t s = 0; s < nbr.size(); ++s)
            agg += abar(static_cast<Eigen::Index>(s)) * x.row(nbr[s]).transpose();
        out.row(i) = (w1 * x.row(i).transpose() + w2 * agg).transpose();
    }
    return out;
}

// Graph attention operator: x'_i = act(sum_j alpha_ij W h_j) with
// alpha_ij = softmax_j(LeakyReLU(a^T [W h_i || W h_j])) over N(i) + self-loop.
inline Eigen::MatrixXd gat(const Eigen::MatrixXd& x, const Eigen::MatrixXi& adj,
                           const Eigen::MatrixXd& w, const Eigen::VectorXd& a,
                           double leaky_slope, bool identity_act) {
    const auto n = x.rows();
    const auto f = w.rows();
    Eigen::MatrixXd out(n, f);
    for (Eigen::Index i = 0; i < n; ++i) {
        std::vector<Eigen::Index> nbr{i};
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i && adj(i, j) != 0) nbr.push_back(j);

        Eigen::VectorXd e(static_cast<Eigen::Index>(nbr.size()));
        for (std::size_t s = 0; s < nbr.size(); ++s) {
            Eigen::VectorXd cat(2 * f);
            cat.head(f) = w * x.row(i).transpose();
            cat.tail(f) = w * x.row(nbr[s]).transpose();
            const double z = a.dot(cat);
            e(static_cast<Eigen::Index>(s)) = z > 0.0 ? z : leaky_slope * z;
        }
        const Eigen::VectorXd ex = e.array().exp();
        const Eigen::VectorXd alpha = ex / ex.sum();
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(f);
        for (std::size_t s = 0; s < nbr.size(); ++s)
            acc += alpha(static_cast<Eigen::Index>(s)) * (w * x.row(nbr[s]).transpose());
        for (Eigen::Index c = 0; c < f; ++c)
            out(i, c) = identity_act ? acc(c) : (acc(c) > 0.0 ? acc(c) : std::expm1(acc(c)));
    }
    return out;
}

inline double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double ma = a.mean();
    const double mb = b.mean();
    double num = 0.0, da = 0.0, db = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        num += (a(i) - ma) * (b(i) - mb);
        da += (a(i) - ma) * (a(i) - ma);
        db += (b(i) - mb) * (b(i) - mb);
    }
    return num / std::sqrt(da * db);
}

inline double ols_slope(const Eigen::VectorXd& y) {
    const auto n = y.size();
    double st = 0.0, sy = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        st += static_cast<double>(i);
        sy += y(i);
    }
    const double tbar = st / n, ybar = sy / n;
    double num = 0.0, den = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        num += (i - tbar) * (y(i) - ybar);
        den += (i - tbar) * (i - tbar);
    }
    return num / den;
}

} // namespace oracle
