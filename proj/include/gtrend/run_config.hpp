#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gtrend/gae_model.hpp"
#include "gtrend/para_trainer.hpp"

namespace gtrend {

// One run's full configuration: architecture, training, graph construction,
// and file locations. Sections of the config file mirror the library
// headers; command-line flags override file values.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    double epsilon = 0.5;
    std::string graph_mode = "spatial"; // or "correlation"
    std::string data_path;
    std::string graph_path;
    std::string rdp_path;
    std::string out_dir = "out";
    std::string format_version = "1";
};

namespace detail {

struct ConfigValue {
    std::string raw;
    int line = 0;
};

using ConfigTable = std::map<std::string, std::map<std::string, ConfigValue>>;

inline std::string config_trim(const std::string& s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"') quoted = !quoted;
        if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
}

inline ConfigTable parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("config: cannot open " + path);
    ConfigTable table;
    std::string section;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        line = config_trim(strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw std::invalid_argument("config: malformed section header at line " +
                                            std::to_string(lineno));
            section = config_trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: expected key = value at line " +
                                        std::to_string(lineno));
        const std::string key = config_trim(line.substr(0, eq));
        const std::string value = config_trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw std::invalid_argument("config: empty key or value at line " +
                                        std::to_string(lineno));
        if (table[section].count(key))
            throw std::invalid_argument("config: duplicate key '" + key + "' at line " +
                                        std::to_string(lineno));
        table[section][key] = {value, lineno};
    }
    return table;
}

inline std::string bad_value(const std::string& key, const ConfigValue& v, const char* want) {
    return "config: key '" + key + "' (line " + std::to_string(v.line) + ") expects " + want +
           ", got '" + v.raw + "'";
}

inline long long as_int(const std::string& key, const ConfigValue& v) {
    try {
        std::size_t pos = 0;
        const long long out = std::stoll(v.raw, &pos);
        if (pos != v.raw.size()) throw std::invalid_argument("");
        return out;
    } catch (...) {
        throw std::invalid_argument(bad_value(key, v, "an integer"));
    }
}

inline double as_double(const std::string& key, const ConfigValue& v) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v.raw, &pos);
        if (pos != v.raw.size()) throw std::invalid_argument("");
        return out;
    } catch (...) {
        throw std::invalid_argument(bad_value(key, v, "a number"));
    }
}

inline bool as_bool(const std::string& key, const ConfigValue& v) {
    if (v.raw == "true") return true;
    if (v.raw == "false") return false;
    throw std::invalid_argument(bad_value(key, v, "true or false"));
}

inline std::string as_string(const std::string& key, const ConfigValue& v) {
    if (v.raw.size() < 2 || v.raw.front() != '"' || v.raw.back() != '"')
        throw std::invalid_argument(bad_value(key, v, "a quoted string"));
    return v.raw.substr(1, v.raw.size() - 2);
}

inline std::vector<std::string> split_list(const std::string& key, const ConfigValue& v) {
    if (v.raw.size() < 2 || v.raw.front() != '[' || v.raw.back() != ']')
        throw std::invalid_argument(bad_value(key, v, "a [list]"));
    std::vector<std::string> items;
    std::string body = v.raw.substr(1, v.raw.size() - 2);
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = config_trim(item);
        if (!item.empty()) items.push_back(item);
    }
    return items;
}

inline std::vector<int> as_int_list(const std::string& key, const ConfigValue& v) {
    std::vector<int> out;
    for (const auto& item : split_list(key, v))
        out.push_back(static_cast<int>(as_int(key, {item, v.line})));
    return out;
}

inline std::vector<double> as_double_list(const std::string& key, const ConfigValue& v) {
    std::vector<double> out;
    for (const auto& item : split_list(key, v)) out.push_back(as_double(key, {item, v.line}));
    return out;
}

} // namespace detail

// Parses the key/value config format. Unknown sections or keys are rejected
// with their line number so typos surface instead of silently using defaults.
inline RunConfig load_run_config(const std::string& path) {
    using detail::as_bool;
    using detail::as_double;
    using detail::as_double_list;
    using detail::as_int;
    using detail::as_int_list;
    using detail::as_string;

    const detail::ConfigTable table = detail::parse_config_file(path);
    RunConfig rc;
    for (const auto& [section, entries] : table) {
        for (const auto& [key, value] : entries) {
            const std::string full = section.empty() ? key : section + "." + key;
            if (section.empty() && key == "format_version") {
                rc.format_version = as_string(key, value);
            } else if (section == "gae_array") {
                if (key == "k") rc.model.k = static_cast<int>(as_int(full, value));
                else if (key == "hidden_dim") rc.model.hidden_dim = static_cast<int>(as_int(full, value));
                else if (key == "latent_dim") rc.model.latent_dim = static_cast<int>(as_int(full, value));
                else if (key == "n_heads") rc.model.n_heads = static_cast<int>(as_int(full, value));
                else if (key == "leaky_slope") rc.model.leaky_slope = as_double(full, value);
                else if (key == "window_sizes") rc.model.window_sizes = as_int_list(full, value);
                else if (key == "seed") rc.model.seed = static_cast<std::uint64_t>(as_int(full, value));
                else throw std::invalid_argument("config: unknown key '" + full + "'");
            } else if (section == "objective") {
                if (key == "lambda1") rc.train.weights.lambda1 = as_double(full, value);
                else if (key == "lambda2") rc.train.weights.lambda2 = as_double(full, value);
                else if (key == "lambda3") rc.train.weights.lambda3 = as_double(full, value);
                else if (key == "normalized") rc.train.weights.normalized = as_bool(full, value);
                else throw std::invalid_argument("config: unknown key '" + full + "'");
            } else if (section == "para_trainer") {
                if (key == "epochs") rc.train.epochs = static_cast<int>(as_int(full, value));
                else if (key == "learning_rate") rc.train.learning_rate = as_double(full, value);
                else if (key == "window_sizes") rc.train.window_sizes = as_int_list(full, value);
                else if (key == "node_batch_size") rc.train.node_batch_size = static_cast<int>(as_int(full, value));
                else if (key == "n_workers") rc.train.n_workers = static_cast<int>(as_int(full, value));
                else if (key == "seed") rc.train.seed = static_cast<std::uint64_t>(as_int(full, value));
                else if (key == "normalize_input") rc.train.normalize_input = as_bool(full, value);
                else if (key == "input_gain") rc.train.input_gain = as_double(full, value);
                else if (key == "aging_warmup_epochs") rc.train.aging_warmup_epochs = static_cast<int>(as_int(full, value));
                else if (key == "weighted_aggregate") rc.train.weighted_aggregate = as_bool(full, value);
                else if (key == "split") {
                    const auto v = as_double_list(full, value);
                    if (v.size() != 3)
                        throw std::invalid_argument("config: '" + full + "' needs 3 fractions");
                    rc.train.split = {v[0], v[1], v[2]};
                } else throw std::invalid_argument("config: unknown key '" + full + "'");
            } else if (section == "fleet_graph") {
                if (key == "epsilon") rc.epsilon = as_double(full, value);
                else if (key == "mode") rc.graph_mode = as_string(full, value);
                else throw std::invalid_argument("config: unknown key '" + full + "'");
            } else if (section == "dataset") {
                if (key == "data") rc.data_path = as_string(full, value);
                else if (key == "graph") rc.graph_path = as_string(full, value);
                else if (key == "rdp") rc.rdp_path = as_string(full, value);
                else throw std::invalid_argument("config: unknown key '" + full + "'");
            } else if (section == "output") {
                if (key == "dir") rc.out_dir = as_string(full, value);
                else throw std::invalid_argument("config: unknown key '" + full + "'");
            } else {
                throw std::invalid_argument("config: unknown key '" + full + "'");
            }
        }
    }
    if (rc.format_version != "1")
        throw std::invalid_argument("config: unsupported format_version '" + rc.format_version +
                                    "'");
    if (rc.graph_mode != "spatial" && rc.graph_mode != "correlation")
        throw std::invalid_argument("config: fleet_graph.mode must be \"spatial\" or \"correlation\"");
    return rc;
}

} // namespace gtrend
