#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gtrend {

// One "year" for sampling-rate purposes is 365 days; leap days show up as
// extra samples, not as a different rate.
inline constexpr std::int64_t kSecondsPerYear = 365LL * 86400LL;

namespace detail {

// Howard Hinnant's civil-date algorithms (public domain).
inline std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, int& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y = static_cast<int>(yy + (m <= 2));
}

} // namespace detail

inline std::string format_iso8601(std::int64_t epoch_s) {
    std::int64_t days = epoch_s / 86400;
    std::int64_t rem = epoch_s % 86400;
    if (rem < 0) {
        rem += 86400;
        --days;
    }
    int y;
    unsigned m, d;
    detail::civil_from_days(days, y, m, d);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02lld:%02lld:%02lldZ", y, m, d,
                  static_cast<long long>(rem / 3600), static_cast<long long>((rem / 60) % 60),
                  static_cast<long long>(rem % 60));
    return buf;
}

inline std::int64_t parse_iso8601(const std::string& text) {
    int y, mo, d, h, mi, s;
    char sep;
    if (std::sscanf(text.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &s) != 7 ||
        (sep != 'T' && sep != ' ')) {
        throw std::invalid_argument("unparsable ISO-8601 timestamp: '" + text + "'");
    }
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 ||
        s > 60) {
        throw std::invalid_argument("timestamp field out of range: '" + text + "'");
    }
    return detail::days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 86400 +
           h * 3600 + mi * 60 + s;
}

inline int samples_per_year_from_interval(std::int64_t interval_s) {
    if (interval_s <= 0) throw std::invalid_argument("sampling interval must be positive");
    const auto spy = static_cast<std::int64_t>(
        std::llround(static_cast<double>(kSecondsPerYear) / static_cast<double>(interval_s)));
    return static_cast<int>(std::max<std::int64_t>(1, spy));
}

// Node-indexed, uniformly sampled fleet of timeseries. Row l of `values` is
// node l's series on the shared timestamp grid.
struct FleetSeries {
    std::vector<std::string> node_ids;
    std::vector<std::int64_t> timestamps;
    Eigen::MatrixXd values;                 // N x T
    std::optional<Eigen::MatrixXd> locations; // N x 2 (lat, lon), optional
    int samples_per_year = 1;

    int n_nodes() const { return static_cast<int>(node_ids.size()); }
    int n_samples() const { return static_cast<int>(timestamps.size()); }

    std::int64_t interval_seconds() const {
        if (timestamps.size() < 2) throw std::invalid_argument("need at least two timestamps");
        return timestamps[1] - timestamps[0];
    }

    void validate() const {
        const auto n = static_cast<Eigen::Index>(node_ids.size());
        const auto t = static_cast<Eigen::Index>(timestamps.size());
        if (n < 1 || t < 2) throw std::invalid_argument("fleet needs >= 1 node and >= 2 samples");
        if (values.rows() != n || values.cols() != t) {
            throw std::invalid_argument("values must be N x T (N=" + std::to_string(n) +
                                        ", T=" + std::to_string(t) + ")");
        }
        const double interval = static_cast<double>(timestamps[1] - timestamps[0]);
        if (interval <= 0) throw std::invalid_argument("timestamps must be strictly increasing");
        for (std::size_t i = 1; i < timestamps.size(); ++i) {
            const double step = static_cast<double>(timestamps[i] - timestamps[i - 1]);
            if (step <= 0 || std::abs(step - interval) > 1e-6 * interval) {
                throw std::invalid_argument("timestamp grid is not uniform at index " +
                                            std::to_string(i));
            }
        }
        if (locations && (locations->rows() != n || locations->cols() != 2)) {
            throw std::invalid_argument("locations must be N x 2");
        }
        if (samples_per_year < 1) throw std::invalid_argument("samples_per_year must be >= 1");
    }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& s, std::size_t row) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing junk");
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("row " + std::to_string(row) + ": unparsable value '" + s + "'");
    }
}

} // namespace detail

// CSV schema (UTF-8, header row): system_id,timestamp,power[,lat,lon].
// The value column may carry another name (e.g. "rdp" in ground-truth files).
inline FleetSeries load_fleet_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("'" + path + "': empty file");
    auto header = detail::split_csv_line(detail::trim(line));
    for (auto& h : header) h = detail::trim(h);
    if (header.size() < 3 || header[0] != "system_id" || header[1] != "timestamp") {
        throw std::runtime_error("'" + path +
                                 "': missing columns (expected system_id,timestamp,<value>[,lat,lon])");
    }
    const bool has_geo = header.size() >= 5 && header[3] == "lat" && header[4] == "lon";

    struct NodeData {
        std::vector<std::pair<std::int64_t, double>> points;
        double lat = 0.0, lon = 0.0;
        bool geo_set = false;
    };
    std::vector<std::string> order;
    std::map<std::string, NodeData> nodes;

    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        line = detail::trim(line);
        if (line.empty()) continue;
        auto f = detail::split_csv_line(line);
        if (f.size() < 3) throw std::runtime_error("row " + std::to_string(row) + ": too few fields");
        const std::string id = detail::trim(f[0]);
        std::int64_t ts;
        try {
            ts = parse_iso8601(detail::trim(f[1]));
        } catch (const std::exception& e) {
            throw std::runtime_error("row " + std::to_string(row) + ": " + e.what());
        }
        const double v = detail::parse_double(detail::trim(f[2]), row);
        auto it = nodes.find(id);
        if (it == nodes.end()) {
            order.push_back(id);
            it = nodes.emplace(id, NodeData{}).first;
        }
        it->second.points.emplace_back(ts, v);
        if (has_geo && f.size() >= 5) {
            const std::string lat_s = detail::trim(f[3]), lon_s = detail::trim(f[4]);
            if (!lat_s.empty() && !lon_s.empty()) {
                const double lat = detail::parse_double(lat_s, row);
                const double lon = detail::parse_double(lon_s, row);
                if (it->second.geo_set &&
                    (it->second.lat != lat || it->second.lon != lon)) {
                    throw std::runtime_error("row " + std::to_string(row) + ": node '" + id +
                                             "' has inconsistent lat/lon");
                }
                it->second.lat = lat;
                it->second.lon = lon;
                it->second.geo_set = true;
            }
        }
    }
    if (order.empty()) throw std::runtime_error("'" + path + "': no data rows");

    FleetSeries fs;
    fs.node_ids = order;

    // Reference grid comes from the first node; every node must match it.
    auto& first = nodes[order[0]];
    std::sort(first.points.begin(), first.points.end());
    fs.timestamps.reserve(first.points.size());
    for (auto& [ts, v] : first.points) fs.timestamps.push_back(ts);
    const auto t_count = fs.timestamps.size();

    const auto n = order.size();
    fs.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(t_count));
    bool any_geo = false;
    Eigen::MatrixXd locs(static_cast<Eigen::Index>(n), 2);
    for (std::size_t l = 0; l < n; ++l) {
        auto& nd = nodes[order[l]];
        std::sort(nd.points.begin(), nd.points.end());
        if (nd.points.size() != t_count) {
            throw std::runtime_error("ragged grid: node '" + order[l] + "' has " +
                                     std::to_string(nd.points.size()) + " samples, expected " +
                                     std::to_string(t_count));
        }
        for (std::size_t j = 0; j < t_count; ++j) {
            if (nd.points[j].first != fs.timestamps[j]) {
                throw std::runtime_error("ragged grid: node '" + order[l] +
                                         "' is missing timestamp " +
                                         format_iso8601(fs.timestamps[j]));
            }
            fs.values(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(j)) =
                nd.points[j].second;
        }
        if (nd.geo_set) {
            any_geo = true;
            locs(static_cast<Eigen::Index>(l), 0) = nd.lat;
            locs(static_cast<Eigen::Index>(l), 1) = nd.lon;
        } else {
            locs(static_cast<Eigen::Index>(l), 0) = 0.0;
            locs(static_cast<Eigen::Index>(l), 1) = 0.0;
        }
    }
    if (any_geo) fs.locations = locs;

    if (fs.timestamps.size() >= 2) {
        fs.samples_per_year = samples_per_year_from_interval(fs.timestamps[1] - fs.timestamps[0]);
    }
    fs.validate();
    return fs;
}

inline void write_fleet_csv(const std::string& path, const FleetSeries& fs,
                            const std::string& value_column = "power") {
    fs.validate();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    const bool geo = fs.locations.has_value();
    out << "system_id,timestamp," << value_column;
    if (geo) out << ",lat,lon";
    out << "\n";
    char num[64];
    for (int l = 0; l < fs.n_nodes(); ++l) {
        for (int t = 0; t < fs.n_samples(); ++t) {
            out << fs.node_ids[l] << ',' << format_iso8601(fs.timestamps[t]) << ',';
            std::snprintf(num, sizeof(num), "%.17g", fs.values(l, t));
            out << num;
            if (geo) {
                std::snprintf(num, sizeof(num), "%.17g", (*fs.locations)(l, 0));
                out << ',' << num;
                std::snprintf(num, sizeof(num), "%.17g", (*fs.locations)(l, 1));
                out << ',' << num;
            }
            out << "\n";
        }
    }
    if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

} // namespace gtrend
