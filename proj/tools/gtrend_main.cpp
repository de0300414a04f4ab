#include <CLI11.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gtrend/fleet_graph.hpp"
#include "gtrend/fleet_series.hpp"
#include "gtrend/gae_layers.hpp"
#include "gtrend/gae_model.hpp"
#include "gtrend/objective.hpp"
#include "gtrend/para_trainer.hpp"
#include "gtrend/run_config.hpp"
#include "gtrend/synth_fleet.hpp"
#include "gtrend/trend_outputs.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool g_verbose = false;

void vlog(const std::string& msg) {
    if (g_verbose) std::cerr << "gtrend: " << msg << "\n";
}

void emit(const json& j) { std::cout << j.dump() << std::endl; }

gtrend::DegradationCase parse_case(const std::string& name) {
    if (name == "linear") return gtrend::DegradationCase::linear;
    if (name == "piecewise" || name == "piecewise_linear")
        return gtrend::DegradationCase::piecewise_linear;
    if (name == "exponential") return gtrend::DegradationCase::exponential;
    throw std::invalid_argument("unknown --case '" + name +
                                "'; valid cases: linear, piecewise, exponential");
}

void write_graph_sidecar(const std::string& edge_path, int n_nodes, double epsilon,
                         const std::string& mode) {
    std::ofstream f(edge_path + ".json");
    if (!f) throw std::runtime_error("cannot write '" + edge_path + ".json'");
    json j;
    j["n_nodes"] = n_nodes;
    j["epsilon"] = epsilon;
    j["mode"] = mode;
    f << j.dump(2) << "\n";
}

gtrend::FleetGraph build_graph_from(const gtrend::FleetSeries& series, const std::string& mode,
                                    double epsilon) {
    if (mode == "spatial") {
        if (!series.locations)
            throw std::invalid_argument("spatial graph requested but data has no lat/lon");
        return gtrend::build_spatial_adjacency(*series.locations, epsilon);
    }
    return gtrend::build_correlation_adjacency(series, epsilon);
}

// Loads the edge list written by build-graph (node count from the sidecar),
// or derives the graph from the data when no edge file is given.
gtrend::FleetGraph resolve_graph(const gtrend::FleetSeries& series, const std::string& graph_path,
                                 const std::string& mode, double epsilon) {
    if (!graph_path.empty()) {
        int n_nodes = series.n_nodes();
        std::ifstream side(graph_path + ".json");
        if (side) {
            json j = json::parse(side);
            n_nodes = j.at("n_nodes").get<int>();
        }
        if (n_nodes != series.n_nodes())
            throw std::invalid_argument("graph node count does not match data");
        vlog("loading graph from " + graph_path);
        return gtrend::load_edge_list(graph_path, n_nodes);
    }
    vlog("building " + mode + " graph, epsilon=" + std::to_string(epsilon));
    return build_graph_from(series, mode, epsilon);
}

gtrend::FleetSeries with_values(const gtrend::FleetSeries& like, const Eigen::MatrixXd& values) {
    gtrend::FleetSeries out = like;
    out.values = values;
    return out;
}

int default_segment_window(int samples_per_year, int series_len) {
    return std::max(2, std::min(samples_per_year, series_len / 2));
}

struct TrainArgs {
    std::string config_path, data, graph, out;
    std::string graph_mode;
    double epsilon = -1.0;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int epochs = -1, workers = -1, batch_size = -1, k = -1, checkpoint_every = -1;
    int hidden_dim = -1, latent_dim = -1, heads = -1, aging_warmup = -1;
    double lr = -1.0, lambda1 = -1.0, lambda2 = -1.0, lambda3 = -1.0, input_gain = -1.0;
    std::vector<int> segment_windows, slice_windows;
    bool serial = false;
};

// Config file first, then flags on top.
gtrend::RunConfig merge_train_config(const TrainArgs& a) {
    gtrend::RunConfig rc;
    if (!a.config_path.empty()) rc = gtrend::load_run_config(a.config_path);
    if (!a.data.empty()) rc.data_path = a.data;
    if (!a.graph.empty()) rc.graph_path = a.graph;
    if (!a.out.empty()) rc.out_dir = a.out;
    if (!a.graph_mode.empty()) rc.graph_mode = a.graph_mode;
    if (a.epsilon >= 0.0) rc.epsilon = a.epsilon;
    if (a.seed_set) {
        rc.model.seed = a.seed;
        rc.train.seed = a.seed;
    }
    if (a.epochs > 0) rc.train.epochs = a.epochs;
    if (a.workers > 0) rc.train.n_workers = a.workers;
    if (a.batch_size >= 0) rc.train.node_batch_size = a.batch_size;
    if (a.k > 0) rc.model.k = a.k;
    if (a.hidden_dim > 0) rc.model.hidden_dim = a.hidden_dim;
    if (a.latent_dim > 0) rc.model.latent_dim = a.latent_dim;
    if (a.heads > 0) rc.model.n_heads = a.heads;
    if (a.checkpoint_every >= 0) rc.train.checkpoint_every = a.checkpoint_every;
    if (a.lr > 0.0) rc.train.learning_rate = a.lr;
    if (a.lambda1 >= 0.0) rc.train.weights.lambda1 = a.lambda1;
    if (a.lambda2 >= 0.0) rc.train.weights.lambda2 = a.lambda2;
    if (a.lambda3 >= 0.0) rc.train.weights.lambda3 = a.lambda3;
    if (a.input_gain > 0.0) rc.train.input_gain = a.input_gain;
    if (a.aging_warmup >= 0) rc.train.aging_warmup_epochs = a.aging_warmup;
    if (!a.segment_windows.empty()) rc.model.window_sizes = a.segment_windows;
    if (!a.slice_windows.empty()) rc.train.window_sizes = a.slice_windows;
    if (rc.data_path.empty()) throw std::invalid_argument("train: no data file (--data or config)");
    return rc;
}

json breakdown_json(const gtrend::LossBreakdown& lb) {
    return json{{"re", lb.re}, {"mc", lb.mc}, {"sc", lb.sc}, {"sr", lb.sr}, {"total", lb.total}};
}

int cmd_train(const TrainArgs& a) {
    gtrend::RunConfig rc = merge_train_config(a);
    vlog("loading data from " + rc.data_path);
    const gtrend::FleetSeries series = gtrend::load_fleet_csv(rc.data_path);
    const gtrend::FleetGraph graph =
        resolve_graph(series, rc.graph_path, rc.graph_mode, rc.epsilon);

    gtrend::ModelConfig mc = rc.model;
    mc.series_len = series.n_samples();
    if (mc.window_sizes.empty())
        mc.window_sizes.assign(
            mc.k, default_segment_window(series.samples_per_year, mc.series_len));

    gtrend::TrainConfig tc = rc.train;
    fs::create_directories(rc.out_dir);
    if (tc.checkpoint_every > 0 && tc.checkpoint_dir.empty())
        tc.checkpoint_dir = (fs::path(rc.out_dir) / "checkpoints").string();

    vlog("training: N=" + std::to_string(series.n_nodes()) +
         " T=" + std::to_string(mc.series_len) + " k=" + std::to_string(mc.k) +
         " epochs=" + std::to_string(tc.epochs) + (a.serial ? " (serial)" : ""));
    const gtrend::TrainResult res = a.serial ? gtrend::train_serial(series.values, graph, mc, tc)
                                             : gtrend::train_parallel(series.values, graph, mc, tc);

    const fs::path out(rc.out_dir);
    gtrend::save_checkpoint(out / "checkpoint", res.checkpoint);
    gtrend::write_training_log(out / "training_log.jsonl", res.log);
    gtrend::write_timing_csv(out / "timing.csv",
                             {{tc.n_workers, res.mean_epoch_time_s, 1.0}});
    {
        json split;
        split["train"] = res.split.train;
        split["val"] = res.split.val;
        split["test"] = res.split.test;
        std::ofstream f(out / "split.json");
        f << split.dump(2) << "\n";
    }

    json j;
    for (auto it = res.log.rbegin(); it != res.log.rend(); ++it)
        if (it->branch == -1) {
            j = breakdown_json(it->loss);
            break;
        }
    j["val_loss"] = res.val_loss.empty() ? json() : json(res.val_loss.back());
    j["diverged"] = res.diverged;
    j["mean_epoch_time_s"] = res.mean_epoch_time_s;
    j["checkpoint"] = (out / "checkpoint").string();
    emit(j);
    if (res.diverged) {
        std::cerr << "gtrend: training diverged (non-finite loss)\n";
        return 3;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fleet timeseries trend/fluctuation decomposition"};
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "Synthesize a fleet with known degradation");
    std::string gen_case = "linear", gen_out = ".", gen_name = "fleet";
    int gen_nodes = 20, gen_spy = 365, gen_clusters = 5;
    double gen_years = 3.0, gen_rate = -1.0, gen_second = -1.0, gen_break = 2.0;
    double gen_noise = 0.02, gen_season = 0.1, gen_baseline = 100.0;
    double gen_rate_jitter = 0.002, gen_geo_jitter = 0.04;
    std::uint64_t gen_seed = 0;
    gen->add_option("--case", gen_case, "linear | piecewise | exponential");
    gen->add_option("--nodes", gen_nodes, "fleet size");
    gen->add_option("--years", gen_years, "span in years");
    gen->add_option("--samples-per-year", gen_spy, "sampling rate");
    gen->add_option("--seed", gen_seed, "master seed");
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--name", gen_name, "dataset basename");
    gen->add_option("--rate", gen_rate, "annual degradation %/year");
    gen->add_option("--second-rate", gen_second, "piecewise second-segment %/year");
    gen->add_option("--breakpoint-years", gen_break, "piecewise breakpoint");
    gen->add_option("--noise-sd", gen_noise, "noise SD, fraction of baseline");
    gen->add_option("--seasonal-amplitude", gen_season, "seasonal amplitude fraction");
    gen->add_option("--clusters", gen_clusters, "number of sites");
    gen->add_option("--baseline", gen_baseline, "initial power level");
    gen->add_option("--rate-jitter", gen_rate_jitter, "severity jitter");
    gen->add_option("--geo-jitter", gen_geo_jitter, "location jitter fraction");
    gen->add_flag("--verbose", g_verbose, "log progress to stderr");

    // build-graph
    auto* bg = app.add_subcommand("build-graph", "Build the fleet graph from a dataset");
    std::string bg_data, bg_mode = "spatial", bg_out = "fleet.edges";
    double bg_eps = 0.5;
    bg->add_option("--data", bg_data, "fleet CSV")->required();
    bg->add_option("--mode", bg_mode, "spatial | correlation");
    bg->add_option("--epsilon", bg_eps, "edge threshold");
    bg->add_option("--out", bg_out, "edge-list output path");
    bg->add_flag("--verbose", g_verbose, "log progress to stderr");

    // train
    auto* tr = app.add_subcommand("train", "Train the decomposition model");
    TrainArgs ta;
    tr->add_option("--config", ta.config_path, "run config file");
    tr->add_option("--data", ta.data, "fleet CSV");
    tr->add_option("--graph", ta.graph, "edge-list path (otherwise built from data)");
    tr->add_option("--out", ta.out, "output directory");
    tr->add_option("--mode", ta.graph_mode, "graph mode when building");
    tr->add_option("--epsilon", ta.epsilon, "graph edge threshold");
    auto* seed_opt = tr->add_option("--seed", ta.seed, "master seed");
    tr->add_option("--epochs", ta.epochs, "training epochs");
    tr->add_option("--workers", ta.workers, "worker threads");
    tr->add_option("--batch-size", ta.batch_size, "node batch size (0 = full graph)");
    tr->add_option("--k", ta.k, "fluctuation branch count");
    tr->add_option("--hidden-dim", ta.hidden_dim, "encoder hidden width");
    tr->add_option("--latent-dim", ta.latent_dim, "latent width");
    tr->add_option("--heads", ta.heads, "attention heads");
    tr->add_option("--lr", ta.lr, "learning rate");
    tr->add_option("--lambda1", ta.lambda1, "flatness (segment-mean) weight");
    tr->add_option("--lambda2", ta.lambda2, "flatness (slope) weight");
    tr->add_option("--lambda3", ta.lambda3, "aging smoothness weight");
    tr->add_option("--input-gain", ta.input_gain, "normalized-input amplification");
    tr->add_option("--aging-warmup", ta.aging_warmup,
                   "epochs training only the aging branch first (serial)");
    tr->add_option("--segment-windows", ta.segment_windows, "per-branch segment window")
        ->delimiter(',');
    tr->add_option("--slice-windows", ta.slice_windows, "temporal slice lengths")
        ->delimiter(',');
    tr->add_option("--checkpoint-every", ta.checkpoint_every, "snapshot every c epochs");
    tr->add_flag("--serial", ta.serial, "reference single-thread trainer");
    tr->add_flag("--verbose", g_verbose, "log progress to stderr");

    // decompose
    auto* dec = app.add_subcommand("decompose", "Apply a checkpoint to a dataset");
    std::string dec_ckpt, dec_data, dec_graph, dec_out = "out", dec_mode = "spatial";
    double dec_eps = 0.5;
    bool dec_verify = false;
    dec->add_option("--checkpoint", dec_ckpt, "checkpoint directory")->required();
    dec->add_option("--data", dec_data, "fleet CSV")->required();
    dec->add_option("--graph", dec_graph, "edge-list path (otherwise built from data)");
    dec->add_option("--mode", dec_mode, "graph mode when building");
    dec->add_option("--epsilon", dec_eps, "graph edge threshold");
    dec->add_option("--out", dec_out, "output directory");
    dec->add_flag("--verify", dec_verify, "print reconstruction error of the emitted files");
    dec->add_flag("--verbose", g_verbose, "log progress to stderr");

    // plr
    auto* pl = app.add_subcommand("plr", "Performance-loss-rate report from an aging trend");
    std::string pl_edp, pl_out;
    pl->add_option("--edp", pl_edp, "aging-trend CSV (decompose output h_a.csv)")->required();
    pl->add_option("--out", pl_out, "directory for plr.json + edp.csv");
    pl->add_flag("--verbose", g_verbose, "log progress to stderr");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Compare an estimated trend against ground truth");
    std::string ev_edp, ev_rdp;
    ev->add_option("--edp", ev_edp, "estimated trend CSV")->required();
    ev->add_option("--rdp", ev_rdp, "reference trend CSV")->required();
    ev->add_flag("--verbose", g_verbose, "log progress to stderr");

    // benchmark
    auto* bm = app.add_subcommand("benchmark", "Epoch-time speedup across worker counts");
    TrainArgs ba;
    std::vector<int> bm_workers{1, 2, 4};
    bm->add_option("--config", ba.config_path, "run config file");
    bm->add_option("--data", ba.data, "fleet CSV");
    bm->add_option("--graph", ba.graph, "edge-list path");
    bm->add_option("--out", ba.out, "output directory");
    bm->add_option("--mode", ba.graph_mode, "graph mode when building");
    bm->add_option("--epsilon", ba.epsilon, "graph edge threshold");
    auto* bm_seed_opt = bm->add_option("--seed", ba.seed, "master seed");
    bm->add_option("--epochs", ba.epochs, "epochs per measurement");
    bm->add_option("--batch-size", ba.batch_size, "node batch size");
    bm->add_option("--k", ba.k, "fluctuation branch count");
    bm->add_option("--hidden-dim", ba.hidden_dim, "encoder hidden width");
    bm->add_option("--latent-dim", ba.latent_dim, "latent width");
    bm->add_option("--heads", ba.heads, "attention heads");
    bm->add_option("--segment-windows", ba.segment_windows, "per-branch segment window")
        ->delimiter(',');
    bm->add_option("--slice-windows", ba.slice_windows, "temporal slice lengths")
        ->delimiter(',');
    bm->add_option("--workers", bm_workers, "worker counts, ascending from 1")->delimiter(',');
    bm->add_flag("--verbose", g_verbose, "log progress to stderr");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen) {
            gtrend::DegradationSpec spec;
            spec.kind = parse_case(gen_case);
            if (spec.kind == gtrend::DegradationCase::piecewise_linear && gen_rate < 0.0 &&
                gen->count("--rate") == 0)
                gen_rate = 2.0; // rise first, then decline
            spec.annual_rate = gen_rate;
            spec.second_rate = gen_second;
            spec.breakpoint_years = gen_break;
            spec.noise_sd = gen_noise;
            spec.seasonal_amplitude = gen_season;
            spec.n_clusters = gen_clusters;
            spec.baseline = gen_baseline;
            spec.rate_jitter = gen_rate_jitter;
            spec.geo_jitter = gen_geo_jitter;
            spec.seed = gen_seed;
            vlog("generating " + gen_case + " fleet: N=" + std::to_string(gen_nodes));
            const auto [series, truth] =
                gtrend::generate_fleet(spec, gen_nodes, gen_years, gen_spy);
            fs::create_directories(gen_out);
            const std::string data_path = (fs::path(gen_out) / (gen_name + ".csv")).string();
            const std::string rdp_path = (fs::path(gen_out) / (gen_name + ".rdp.csv")).string();
            gtrend::write_fleet_csv(data_path, series);
            gtrend::write_ground_truth_csv(rdp_path, series, truth);
            emit(json{{"case", to_string(spec.kind)},
                      {"nodes", series.n_nodes()},
                      {"samples", series.n_samples()},
                      {"data", data_path},
                      {"rdp", rdp_path}});
        } else if (*bg) {
            const gtrend::FleetSeries series = gtrend::load_fleet_csv(bg_data);
            const gtrend::FleetGraph graph = build_graph_from(series, bg_mode, bg_eps);
            gtrend::write_edge_list(bg_out, graph);
            write_graph_sidecar(bg_out, graph.n_nodes, bg_eps, bg_mode);
            emit(json{{"n_nodes", graph.n_nodes},
                      {"n_edges", graph.edges.size()},
                      {"mode", bg_mode},
                      {"path", bg_out}});
        } else if (*tr) {
            ta.seed_set = seed_opt->count() > 0;
            return cmd_train(ta);
        } else if (*dec) {
            const gtrend::Checkpoint ckpt = gtrend::load_checkpoint(dec_ckpt);
            const gtrend::FleetSeries series = gtrend::load_fleet_csv(dec_data);
            if (series.n_samples() != ckpt.config.series_len)
                throw std::invalid_argument("decompose: data length " +
                                            std::to_string(series.n_samples()) +
                                            " does not match checkpoint series_len " +
                                            std::to_string(ckpt.config.series_len));
            const gtrend::FleetGraph graph = resolve_graph(series, dec_graph, dec_mode, dec_eps);
            vlog("decomposing " + std::to_string(series.n_nodes()) + " series");
            const gtrend::Decomposition d = gtrend::model_apply(series.values, graph, ckpt);
            fs::create_directories(dec_out);
            std::vector<std::string> files;
            const std::string ha_path = (fs::path(dec_out) / "h_a.csv").string();
            gtrend::write_fleet_csv(ha_path, with_values(series, d.h_a));
            files.push_back(ha_path);
            for (std::size_t q = 0; q < d.h_f.size(); ++q) {
                const std::string p =
                    (fs::path(dec_out) / ("h_f_" + std::to_string(q + 1) + ".csv")).string();
                gtrend::write_fleet_csv(p, with_values(series, d.h_f[q]));
                files.push_back(p);
            }
            json j{{"files", files},
                   {"n_nodes", series.n_nodes()},
                   {"series_len", series.n_samples()}};
            if (dec_verify) {
                gtrend::Decomposition emitted;
                emitted.h_a = gtrend::load_fleet_csv(files[0]).values;
                for (std::size_t q = 1; q < files.size(); ++q)
                    emitted.h_f.push_back(gtrend::load_fleet_csv(files[q]).values);
                j["re"] = gtrend::reconstruction_error(series.values, emitted);
            }
            emit(j);
        } else if (*pl) {
            const gtrend::FleetSeries series = gtrend::load_fleet_csv(pl_edp);
            const gtrend::PlrReport report =
                gtrend::make_plr_report(series.values, series.samples_per_year);
            json j;
            j["per_node_plr"] = std::vector<double>(
                report.per_node_plr.data(), report.per_node_plr.data() + report.per_node_plr.size());
            j["fleet_mean_plr"] = report.fleet_mean_plr;
            j["samples_per_year"] = series.samples_per_year;
            if (!pl_out.empty()) {
                fs::create_directories(pl_out);
                std::ofstream f(fs::path(pl_out) / "plr.json");
                f << j.dump(2) << "\n";
                gtrend::write_fleet_csv((fs::path(pl_out) / "edp.csv").string(),
                                        with_values(series, report.edp));
            }
            emit(j);
        } else if (*ev) {
            const gtrend::FleetSeries edp = gtrend::load_fleet_csv(ev_edp);
            const gtrend::FleetSeries rdp = gtrend::load_fleet_csv(ev_rdp);
            json j;
            j["mape"] = gtrend::mape(edp.values, rdp.values);
            j["ed"] = gtrend::scaled_ed(edp.values, rdp.values);
            if (edp.n_samples() > edp.samples_per_year) {
                const gtrend::PlrReport r =
                    gtrend::make_plr_report(edp.values, edp.samples_per_year);
                j["per_node_plr_summary"] = json{{"mean", r.fleet_mean_plr},
                                                 {"min", r.per_node_plr.minCoeff()},
                                                 {"max", r.per_node_plr.maxCoeff()}};
            } else {
                j["per_node_plr_summary"] = nullptr; // series shorter than one year
            }
            emit(j);
        } else if (*bm) {
            ba.seed_set = bm_seed_opt->count() > 0;
            gtrend::RunConfig rc = merge_train_config(ba);
            const gtrend::FleetSeries series = gtrend::load_fleet_csv(rc.data_path);
            const gtrend::FleetGraph graph =
                resolve_graph(series, rc.graph_path, rc.graph_mode, rc.epsilon);
            gtrend::ModelConfig mc = rc.model;
            mc.series_len = series.n_samples();
            if (mc.window_sizes.empty())
                mc.window_sizes.assign(
                    mc.k, default_segment_window(series.samples_per_year, mc.series_len));
            gtrend::TrainConfig tc = rc.train;
            const std::vector<gtrend::TimingRow> rows =
                gtrend::benchmark_speedup(series.values, graph, mc, tc, bm_workers);

            // Level-I task count: replicas times node batches. Workers beyond
            // it can only idle.
            std::size_t n_replicas = 0;
            for (int w : gtrend::detail::resolve_branch_windows(mc, tc))
                n_replicas += gtrend::detail::build_slices(mc.series_len, w).size();
            const int n = series.n_nodes();
            const int bs = tc.node_batch_size <= 0 || tc.node_batch_size >= n
                               ? n
                               : tc.node_batch_size;
            const std::size_t n_batches = (n + bs - 1) / bs;
            const std::size_t max_tasks = n_replicas * n_batches;

            fs::create_directories(rc.out_dir);
            gtrend::write_timing_csv(fs::path(rc.out_dir) / "timing.csv", rows);
            json table = json::array();
            for (const auto& r : rows)
                table.push_back(json{{"workers", r.workers},
                                     {"epoch_time_s", r.epoch_time_s},
                                     {"speedup", r.speedup},
                                     {"overhead_s", r.overhead_s},
                                     {"saturated", static_cast<std::size_t>(r.workers) > max_tasks}});
            emit(json{{"rows", table},
                      {"max_parallel_tasks", max_tasks},
                      {"timing_csv", (fs::path(rc.out_dir) / "timing.csv").string()}});
        }
    } catch (const std::domain_error& e) {
        std::cerr << "gtrend: numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "gtrend: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
