#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "gtrend/gae_model.hpp"

namespace gtrend {

namespace detail {

template <typename Params>
auto flat_views(Params& params) {
    using Ptr = std::conditional_t<std::is_const_v<Params>, const double*, double*>;
    std::vector<std::pair<Ptr, Eigen::Index>> views;
    for_each_param(params, [&](const std::string&, auto& arr) {
        views.emplace_back(arr.data(), arr.size());
    });
    return views;
}

} // namespace detail

// Adam with fixed betas (0.9, 0.999) and eps 1e-8, one state per branch.
// Moment buffers follow the for_each_param array order.
class AdamState {
public:
    explicit AdamState(double learning_rate) : lr_(learning_rate) {
        if (learning_rate <= 0.0) throw std::invalid_argument("Adam: learning rate must be > 0");
    }

    void step(BranchParams& params, const BranchParams& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(kBeta1, t_);
        const double bc2 = 1.0 - std::pow(kBeta2, t_);
        auto ps = detail::flat_views(params);
        auto gs = detail::flat_views(std::as_const(grads));
        if (m_.empty()) {
            for (const auto& [data, size] : ps) {
                m_.emplace_back(Eigen::VectorXd::Zero(size));
                v_.emplace_back(Eigen::VectorXd::Zero(size));
            }
        }
        if (ps.size() != gs.size()) throw std::invalid_argument("Adam: grads shape mismatch");
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (ps[i].second != gs[i].second || ps[i].second != m_[i].size())
                throw std::invalid_argument("Adam: grads shape mismatch");
            Eigen::Map<Eigen::ArrayXd> p(ps[i].first, ps[i].second);
            Eigen::Map<const Eigen::ArrayXd> g(gs[i].first, gs[i].second);
            auto m = m_[i].array();
            auto v = v_[i].array();
            m = kBeta1 * m + (1.0 - kBeta1) * g;
            v = kBeta2 * v + (1.0 - kBeta2) * g.square();
            p -= lr_ * (m / bc1) / ((v / bc2).sqrt() + kEps);
        }
    }

private:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    double lr_;
    long t_ = 0;
    std::vector<Eigen::VectorXd> m_;
    std::vector<Eigen::VectorXd> v_;
};

} // namespace gtrend
