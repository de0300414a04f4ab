#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gtrend/fleet_series.hpp"
#include "gtrend/rng.hpp"

namespace gtrend {

enum class DegradationCase { linear, piecewise_linear, exponential };

inline std::string to_string(DegradationCase c) {
    switch (c) {
        case DegradationCase::linear: return "linear";
        case DegradationCase::piecewise_linear: return "piecewise_linear";
        case DegradationCase::exponential: return "exponential";
    }
    return "?";
}

// Recipe for a synthetic fleet with a known aging component.
struct DegradationSpec {
    DegradationCase kind = DegradationCase::linear;
    double annual_rate = -1.0;        // %/year (first segment for piecewise)
    double second_rate = -1.0;        // %/year, piecewise second segment
    double breakpoint_years = 2.0;    // piecewise only
    double seasonal_amplitude = 0.1;  // fraction of baseline
    double noise_sd = 0.02;           // fraction of baseline
    int n_clusters = 5;
    double geo_jitter = 0.04;         // fraction of inter-cluster spacing
    double rate_jitter = 0.002;       // per-node/cluster severity noise
    double baseline = 100.0;
    std::uint64_t seed = 0;

    void validate() const {
        auto fail = [](const std::string& field, const std::string& why) {
            throw std::invalid_argument("DegradationSpec." + field + ": " + why);
        };
        if (std::abs(annual_rate) > 50.0) fail("annual_rate", "magnitude exceeds 50 %/year");
        if (std::abs(second_rate) > 50.0) fail("second_rate", "magnitude exceeds 50 %/year");
        if (kind == DegradationCase::piecewise_linear && breakpoint_years <= 0.0)
            fail("breakpoint_years", "must be positive");
        if (seasonal_amplitude < 0.0 || seasonal_amplitude >= 1.0)
            fail("seasonal_amplitude", "must lie in [0,1)");
        if (noise_sd < 0.0 || noise_sd >= 1.0) fail("noise_sd", "must lie in [0,1)");
        if (geo_jitter < 0.0 || geo_jitter >= 1.0) fail("geo_jitter", "must lie in [0,1)");
        if (rate_jitter < 0.0 || rate_jitter >= 1.0) fail("rate_jitter", "must lie in [0,1)");
        if (n_clusters < 1) fail("n_clusters", "must be >= 1");
        if (baseline <= 0.0) fail("baseline", "must be positive");
    }
};

// Noiseless aging component of each node, N x T.
struct GroundTruth {
    Eigen::MatrixXd rdp;
};

namespace detail {

inline double rdp_value(const DegradationSpec& spec, double severity, double years) {
    const double b = spec.baseline;
    switch (spec.kind) {
        case DegradationCase::linear:
            return b * (1.0 + severity * (spec.annual_rate / 100.0) * years);
        case DegradationCase::piecewise_linear: {
            const double r1 = severity * spec.annual_rate / 100.0;
            const double r2 = severity * spec.second_rate / 100.0;
            const double bp = spec.breakpoint_years;
            if (years <= bp) return b * (1.0 + r1 * years);
            return b * (1.0 + r1 * bp + r2 * (years - bp));
        }
        case DegradationCase::exponential:
            return b * std::pow(1.0 + severity * spec.annual_rate / 100.0, years);
    }
    return b;
}

} // namespace detail

// Synthesizes a clustered fleet: nodes sit near one of n_clusters sites and
// nodes of one site share degradation severity up to rate_jitter. The series
// is rdp * (1 + seasonal sinusoid) + additive Gaussian noise.
inline std::pair<FleetSeries, GroundTruth> generate_fleet(const DegradationSpec& spec, int n_nodes,
                                                          double years, int samples_per_year) {
    spec.validate();
    if (n_nodes < spec.n_clusters)
        throw std::invalid_argument("n_nodes must be >= n_clusters");
    if (samples_per_year < 1) throw std::invalid_argument("samples_per_year must be >= 1");
    const auto t_count = static_cast<Eigen::Index>(std::llround(years * samples_per_year));
    if (t_count < 2 * samples_per_year)
        throw std::invalid_argument("span must cover at least two years of samples");

    const int n = n_nodes;
    const int c_count = spec.n_clusters;
    const double spy = static_cast<double>(samples_per_year);

    // Cluster sites on a unit circle; spacing sets the geo-jitter scale.
    const double spacing =
        c_count > 1 ? 2.0 * std::sin(std::numbers::pi / c_count) : 1.0;
    std::vector<std::pair<double, double>> centers(c_count);
    for (int c = 0; c < c_count; ++c) {
        const double ang = 2.0 * std::numbers::pi * c / c_count;
        centers[c] = {std::cos(ang), std::sin(ang)};
    }

    auto cluster_of = [&](int l) { return static_cast<int>((static_cast<long long>(l) * c_count) / n); };

    auto cluster_rng = make_engine(spec.seed, 1);
    auto node_rng = make_engine(spec.seed, 2);
    auto geo_rng = make_engine(spec.seed, 3);
    auto noise_rng = make_engine(spec.seed, 4);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);

    std::vector<double> cluster_jitter(c_count);
    for (int c = 0; c < c_count; ++c) cluster_jitter[c] = spec.rate_jitter * unit(cluster_rng);

    std::vector<double> severity(n);
    for (int l = 0; l < n; ++l) {
        severity[l] = 1.0 + cluster_jitter[cluster_of(l)] + spec.rate_jitter * unit(node_rng);
    }

    Eigen::MatrixXd locations(n, 2);
    for (int l = 0; l < n; ++l) {
        const auto& [cx, cy] = centers[cluster_of(l)];
        locations(l, 0) = cx + spec.geo_jitter * spacing * unit(geo_rng);
        locations(l, 1) = cy + spec.geo_jitter * spacing * unit(geo_rng);
    }

    Eigen::MatrixXd rdp(n, t_count);
    Eigen::MatrixXd values(n, t_count);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double noise_scale = spec.noise_sd * spec.baseline;
    for (int l = 0; l < n; ++l) {
        for (Eigen::Index t = 0; t < t_count; ++t) {
            const double y = static_cast<double>(t) / spy;
            const double aging = detail::rdp_value(spec, severity[l], y);
            if (aging <= 0.0) {
                throw std::invalid_argument(
                    "DegradationSpec.annual_rate: degradation reaches zero power within the span");
            }
            rdp(l, t) = aging;
            const double seasonal =
                1.0 + spec.seasonal_amplitude *
                          std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / spy);
            const double noise = noise_scale > 0.0 ? noise_scale * gauss(noise_rng) : 0.0;
            values(l, t) = aging * seasonal + noise;
        }
    }

    FleetSeries fs;
    fs.node_ids.reserve(n);
    for (int l = 0; l < n; ++l) {
        const int c = cluster_of(l);
        fs.node_ids.push_back("site" + std::to_string(c + 1) + "_inv" + std::to_string(l + 1));
    }
    const std::int64_t interval = kSecondsPerYear / samples_per_year;
    const std::int64_t t0 = parse_iso8601("2010-01-01T00:00:00Z");
    fs.timestamps.resize(t_count);
    for (Eigen::Index t = 0; t < t_count; ++t) fs.timestamps[t] = t0 + t * interval;
    fs.values = std::move(values);
    fs.locations = std::move(locations);
    fs.samples_per_year = samples_per_year;
    fs.validate();
    return {std::move(fs), GroundTruth{std::move(rdp)}};
}

// Fleet-size presets bundled with the degradation recipe.
struct FleetPreset {
    DegradationSpec spec;
    int n_nodes = 100;
    double years = 10.0;
    int samples_per_year = 35040;
};

// Full-scale preset: 100 inverters at 5 sites, 10 calendar years (two leap
// days -> 3652 days) at 15-minute sampling = 350,592 samples per node.
inline FleetPreset paper_preset(DegradationCase kind) {
    FleetPreset p;
    p.spec.kind = kind;
    p.spec.annual_rate = kind == DegradationCase::piecewise_linear ? 2.0 : -1.0;
    p.spec.second_rate = -1.0;
    p.spec.breakpoint_years = 2.0;
    p.spec.n_clusters = 5;
    p.spec.geo_jitter = 0.04;
    p.spec.rate_jitter = 0.002;
    p.spec.seasonal_amplitude = 0.1;
    p.spec.noise_sd = 0.02;
    p.n_nodes = 100;
    p.years = 3652.0 / 365.0;
    p.samples_per_year = 35040;
    return p;
}

// Desk-scale preset: 20 inverters, 3 years, daily sampling. Same recipe,
// small enough to train on one CPU in minutes.
inline FleetPreset desk_preset(DegradationCase kind) {
    FleetPreset p = paper_preset(kind);
    p.n_nodes = 20;
    p.years = 3.0;
    p.samples_per_year = 365;
    return p;
}

inline void write_ground_truth_csv(const std::string& path, const FleetSeries& like,
                                   const GroundTruth& truth) {
    FleetSeries copy = like;
    copy.values = truth.rdp;
    copy.locations.reset();
    write_fleet_csv(path, copy, "rdp");
}

} // namespace gtrend
