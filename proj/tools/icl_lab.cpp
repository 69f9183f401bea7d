// icl_lab: exemplar libraries, clustering, training runs and curve analysis.
//
// Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "icl_lab/config.hpp"
#include "icl_lab/curves.hpp"
#include "icl_lab/embedcluster.hpp"
#include "icl_lab/episodes.hpp"
#include "icl_lab/errors.hpp"
#include "icl_lab/svgplot.hpp"
#include "icl_lab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kConfig = 2, kDivergence = 3, kIo = 4 };

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw icl::IoError("cannot open " + path + " for writing");
    }
    os << text;
    if (!os) {
        throw icl::IoError("failed writing " + path);
    }
}

void print_library(const icl::ExemplarLibrary& lib, const std::string& path) {
    std::printf("wrote %s: K=%d E=%d D_x=%d (%zu exemplars), separability=%.6g\n", path.c_str(), lib.num_classes(),
                lib.exemplars_per_class(), lib.exemplar_dim(), lib.size(), icl::separability_ratio(lib, 0));
}

// --- cluster pipeline ------------------------------------------------------

struct ClusterArgs {
    std::string input;
    std::string preset;
    int k = 0;
    int min_size = 0;
    int classes = 0;
    int per_class = 0;
    int lo = icl::kSubselectFirstToken;
    int hi = icl::kSubselectLastToken;
    bool no_subselect = false;
    std::uint64_t kmeans_seed = 0;
    std::uint64_t select_seed = 0;
    int max_iters = 100;
    double tol = 1e-6;
    int restarts = 10;
};

void add_cluster_options(CLI::App* cmd, ClusterArgs& a, bool input_required) {
    auto* in = cmd->add_option(input_required ? "--input" : "--from-embeddings", a.input, "embedding matrix (.emb)");
    if (input_required) {
        in->required();
    }
    cmd->add_option("--preset", a.preset, "1600x10 or 3200x5");
    cmd->add_option("--k", a.k, "number of clusters");
    cmd->add_option("--min-size", a.min_size, "keep clusters with more than this many points");
    cmd->add_option("--num-classes", a.classes, "clusters to sample as classes");
    cmd->add_option("--per-class", a.per_class, "furthest points kept per class");
    cmd->add_option("--lo", a.lo, "first row kept (inclusive)");
    cmd->add_option("--hi", a.hi, "last row kept (inclusive)");
    cmd->add_flag("--no-subselect", a.no_subselect, "cluster every row");
    cmd->add_option("--kmeans-seed", a.kmeans_seed, "k-means++ seed");
    cmd->add_option("--select-seed", a.select_seed, "cluster sampling seed");
    cmd->add_option("--max-iters", a.max_iters, "k-means iteration cap");
    cmd->add_option("--tol", a.tol, "relative cost improvement for convergence");
    cmd->add_option("--restarts", a.restarts, "independent k-means++ seedings; lowest cost wins");
}

icl::ExemplarLibrary run_cluster_pipeline(ClusterArgs a) {
    if (!a.preset.empty()) {
        icl::ClusterPreset p{};
        if (a.preset == "1600x10") {
            p = icl::kPreset1600x10;
        } else if (a.preset == "3200x5") {
            p = icl::kPreset3200x5;
        } else {
            throw icl::ConfigError("unknown preset '" + a.preset + "' (1600x10, 3200x5)");
        }
        a.k = a.k ? a.k : p.k;
        a.min_size = a.min_size ? a.min_size : p.min_size;
        a.classes = a.classes ? a.classes : p.num_classes;
        a.per_class = a.per_class ? a.per_class : p.per_class;
    }
    icl::require(a.k > 0 && a.min_size > 0 && a.classes > 0 && a.per_class > 0,
                 "give --preset or all of --k, --min-size, --num-classes, --per-class");
    icl::EmbeddingMatrix m = icl::load_embeddings(a.input);
    if (!a.no_subselect) {
        m = icl::subselect_rows(m, a.lo, std::min(a.hi, m.rows() - 1));
    }
    icl::KMeansOptions opts;
    opts.max_iters = a.max_iters;
    opts.tol = a.tol;
    opts.restarts = a.restarts;
    opts.threads = icl::worker_count();
    std::fprintf(stderr, "clustering %d rows of dim %d into %d clusters\n", m.rows(), m.dim(), a.k);
    const icl::ClusterResult c = icl::spherical_kmeans(m, a.k, a.kmeans_seed, opts);
    std::fprintf(stderr, "k-means: %d iterations, mean cosine distance %.6g\n", c.iterations, c.cost);
    return icl::select_classes(c, m, a.min_size, a.classes, a.per_class, a.select_seed);
}

// --- analyze / plot helpers --------------------------------------------------

icl::Series column(const std::vector<icl::MetricRecord>& records, const std::string& metric) {
    double icl::MetricRecord::*field = nullptr;
    if (metric == "train_loss") field = &icl::MetricRecord::train_loss;
    else if (metric == "train_loss_total") field = &icl::MetricRecord::train_loss_total;
    else if (metric == "train_acc") field = &icl::MetricRecord::train_acc;
    else if (metric == "icl_acc") field = &icl::MetricRecord::icl_acc;
    else if (metric == "iwl_acc") field = &icl::MetricRecord::iwl_acc;
    else if (metric == "flipped_icl_acc") field = &icl::MetricRecord::flipped_icl_acc;
    else if (metric == "flipped_iwl_rate") field = &icl::MetricRecord::flipped_iwl_rate;
    else if (metric == "iwl_copy_acc") field = &icl::MetricRecord::iwl_copy_acc;
    else if (metric == "lr") field = &icl::MetricRecord::lr;
    else throw icl::ConfigError("unknown metric column '" + metric + "'");
    icl::Series s;
    for (const auto& r : records) {
        s.push_back({r.step, r.*field});
    }
    return s;
}

std::string run_label(const std::string& path) {
    const fs::path p(path);
    if (p.filename() == "metrics.csv" && p.has_parent_path()) {
        return p.parent_path().filename().string();
    }
    return p.stem().string();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"In-context vs in-weights learning lab"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    // gen-library
    auto* gen = app.add_subcommand("gen-library", "write an exemplar library (.icllib)");
    std::string gen_out;
    int gen_classes = 1600, gen_exemplars = 20, gen_dim = 64;
    double gen_class_spread = 1.0, gen_within = 0.1;
    std::uint64_t gen_seed = 0;
    ClusterArgs gen_cluster;
    gen->add_option("--out", gen_out, "output .icllib")->required();
    auto* o_classes = gen->add_option("--classes", gen_classes, "number of classes K");
    auto* o_exemplars = gen->add_option("--exemplars", gen_exemplars, "exemplars per class E");
    auto* o_dim = gen->add_option("--dim", gen_dim, "exemplar dimension D_x");
    auto* o_cs = gen->add_option("--class-spread", gen_class_spread, "std of class centroids");
    auto* o_ws = gen->add_option("--within-spread", gen_within, "std of within-class noise");
    auto* o_seed = gen->add_option("--seed", gen_seed, "generator seed");
    add_cluster_options(gen, gen_cluster, false);

    // cluster-embeddings
    auto* cluster = app.add_subcommand("cluster-embeddings", "embedding matrix -> clustered exemplar library");
    std::string cluster_out;
    ClusterArgs cluster_args;
    cluster->add_option("--out", cluster_out, "output .icllib")->required();
    add_cluster_options(cluster, cluster_args, true);

    // train
    auto* train = app.add_subcommand("train", "run a training experiment");
    std::string train_config, train_out, train_family, train_library;
    std::vector<std::string> train_sets;
    long long train_steps = -1;
    bool train_resume = false;
    int train_threads = 0;
    train->add_option("config", train_config, "key = value config file")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--steps", train_steps, "override train.total_steps");
    train->add_option("--train-family", train_family, "bursty, icl-only or iwl-only");
    train->add_option("--library", train_library, "override library.path");
    train->add_option("--set", train_sets, "extra key=value overrides");
    train->add_option("--threads", train_threads, "worker threads (default ICL_LAB_THREADS or all cores)");
    train->add_flag("--resume", train_resume, "continue from the latest checkpoint in --out");

    // analyze
    auto* analyze = app.add_subcommand("analyze", "curve summaries (JSON lines) of metrics CSVs");
    std::vector<std::string> analyze_inputs;
    std::string analyze_metric = "icl_acc", analyze_out, analyze_compare, analyze_window = "end";
    double analyze_chance = -1.0;
    icl::CurveOptions curve_opts;
    analyze->add_option("csv", analyze_inputs, "metrics.csv files")->required();
    analyze->add_option("--metric", analyze_metric, "column to summarize");
    analyze->add_option("--chance", analyze_chance, "chance level (default 0.5 for ICL columns, else 0)");
    analyze->add_option("--halflife", curve_opts.halflife, "EMA halflife in eval points");
    analyze->add_option("--delta", curve_opts.emergence_margin, "emergence margin above chance");
    analyze->add_option("--tau", curve_opts.transience_drop, "drop below peak that counts as transient");
    analyze->add_option("--window-end", analyze_window, "decay window end: end or chance");
    analyze->add_option("--compare", analyze_compare, "print a comparison table by peak, onset or slope");
    analyze->add_option("--out", analyze_out, "write JSON lines here instead of stdout");

    // plot
    auto* plot = app.add_subcommand("plot", "SVG accuracy and loss curves");
    std::vector<std::string> plot_inputs;
    std::string plot_out;
    double plot_chance = 0.5;
    plot->add_option("csv", plot_inputs, "metrics.csv files")->required();
    plot->add_option("--out", plot_out, "output .svg")->required();
    plot->add_option("--chance", plot_chance, "chance rule on the accuracy panel");

    // count-sequences
    auto* count = app.add_subcommand("count-sequences", "number of distinct bursty training sequences");
    int count_classes = 1600, count_exemplars = 20;
    count->add_option("--classes", count_classes, "K");
    count->add_option("--exemplars", count_exemplars, "E");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfig;
    }

    try {
        if (*gen) {
            const bool gaussian_flags = o_classes->count() + o_exemplars->count() + o_dim->count() + o_cs->count() +
                                            o_ws->count() + o_seed->count() >
                                        0;
            if (!gen_cluster.input.empty() && gaussian_flags) {
                throw icl::ConfigError("--from-embeddings conflicts with Gaussian library flags");
            }
            const icl::ExemplarLibrary lib =
                gen_cluster.input.empty()
                    ? icl::make_gaussian_library(gen_classes, gen_exemplars, gen_dim, gen_class_spread, gen_within,
                                                 gen_seed)
                    : run_cluster_pipeline(gen_cluster);
            icl::save_library(gen_out, lib);
            print_library(lib, gen_out);
        } else if (*cluster) {
            const icl::ExemplarLibrary lib = run_cluster_pipeline(cluster_args);
            icl::save_library(cluster_out, lib);
            print_library(lib, cluster_out);
        } else if (*train) {
            const auto t0 = std::chrono::steady_clock::now();
            icl::ExperimentConfig cfg = icl::load_config(train_config);
            for (const auto& s : train_sets) {
                icl::apply_assignment(cfg, s);
            }
            if (train_steps >= 0) {
                cfg.train.total_steps = train_steps;
                cfg.train.eval_every = std::min<long long>(cfg.train.eval_every, std::max<long long>(1, train_steps));
            }
            if (!train_family.empty()) {
                icl::apply_setting(cfg, "train.family", train_family);
            }
            if (!train_library.empty()) {
                cfg.library.path = train_library;
            }
            const icl::ExemplarLibrary lib = cfg.library.materialize();
            cfg.bind(lib);
            cfg.train.validate();

            fs::create_directories(train_out);
            const std::string snapshot = icl::describe(cfg);
            write_text((fs::path(train_out) / "config.snapshot").string(), snapshot);

            icl::RunOptions opts;
            opts.out_dir = train_out;
            opts.resume = train_resume;
            opts.threads = train_threads;
            opts.on_record = [](const icl::MetricRecord& r) {
                std::printf("step %lld loss %.4f train_acc %.3f icl %.3f iwl %.3f flipped %.3f copy %.3f\n", r.step,
                            r.train_loss, r.train_acc, r.icl_acc, r.iwl_acc, r.flipped_icl_acc, r.iwl_copy_acc);
                std::fflush(stdout);
                return true;
            };
            const auto t1 = std::chrono::steady_clock::now();
            const icl::RunResult run = icl::run_experiment(cfg.train, lib, opts);
            const auto t2 = std::chrono::steady_clock::now();

            json manifest;
            manifest["tool"] = "icl_lab";
            manifest["version"] = kVersion;
            manifest["config"] = snapshot;
            manifest["library"] = cfg.library.path.empty()
                                      ? json{{"source", "gaussian"},
                                             {"num_classes", cfg.library.num_classes},
                                             {"exemplars_per_class", cfg.library.exemplars_per_class},
                                             {"exemplar_dim", cfg.library.exemplar_dim},
                                             {"class_spread", cfg.library.class_spread},
                                             {"within_spread", cfg.library.within_spread},
                                             {"seed", cfg.library.seed}}
                                      : json{{"source", "file"}, {"path", cfg.library.path}};
            manifest["threads"] = train_threads > 0 ? train_threads : icl::worker_count();
            manifest["resumed"] = train_resume;
            manifest["final_step"] = run.final_step;
            std::vector<std::string> artifacts{"config.snapshot", "metrics.csv"};
            for (const auto& entry : fs::directory_iterator(train_out)) {
                if (entry.path().extension() == ".ckpt") {
                    artifacts.push_back(entry.path().filename().string());
                }
            }
            std::sort(artifacts.begin() + 2, artifacts.end());
            artifacts.push_back("manifest.json");
            manifest["artifacts"] = artifacts;
            manifest["timings_seconds"] = {{"setup", std::chrono::duration<double>(t1 - t0).count()},
                                           {"training", std::chrono::duration<double>(t2 - t1).count()}};
            write_text((fs::path(train_out) / "manifest.json").string(), manifest.dump(2) + "\n");
        } else if (*analyze) {
            if (analyze_window == "end") {
                curve_opts.window_end = icl::DecayWindowEnd::EndOfSeries;
            } else if (analyze_window == "chance") {
                curve_opts.window_end = icl::DecayWindowEnd::ReturnToChance;
            } else {
                throw icl::ConfigError("--window-end must be 'end' or 'chance'");
            }
            const bool icl_column = analyze_metric == "icl_acc" || analyze_metric == "flipped_icl_acc";
            const double chance = analyze_chance >= 0.0 ? analyze_chance : (icl_column ? 0.5 : 0.0);
            std::vector<icl::CurveSummary> summaries;
            std::vector<std::string> labels;
            std::ostringstream lines;
            for (const auto& path : analyze_inputs) {
                const auto records = icl::read_metrics_csv(path);
                summaries.push_back(icl::summarize(column(records, analyze_metric), chance, curve_opts));
                labels.push_back(run_label(path));
                json j = icl::to_json(summaries.back());
                j["run"] = path;
                j["metric"] = analyze_metric;
                lines << j.dump() << '\n';
            }
            if (summaries.size() > 1) {
                json j{{"aggregate", icl::to_json(icl::aggregate(summaries))},
                       {"runs", analyze_inputs},
                       {"metric", analyze_metric}};
                lines << j.dump() << '\n';
            }
            if (analyze_out.empty()) {
                std::cout << lines.str();
            } else {
                write_text(analyze_out, lines.str());
            }
            if (!analyze_compare.empty()) {
                icl::CompareKey key{};
                if (analyze_compare == "peak") key = icl::CompareKey::PeakHeight;
                else if (analyze_compare == "onset") key = icl::CompareKey::OnsetStep;
                else if (analyze_compare == "slope") key = icl::CompareKey::DecaySlope;
                else throw icl::ConfigError("--compare must be peak, onset or slope");
                std::cerr << icl::compare(summaries, key, labels).table();
            }
        } else if (*plot) {
            std::vector<std::pair<std::string, std::vector<icl::MetricRecord>>> runs;
            for (const auto& path : plot_inputs) {
                runs.emplace_back(run_label(path), icl::read_metrics_csv(path));
            }
            write_text(plot_out, icl::plot_metrics(runs, plot_chance));
            std::printf("wrote %s\n", plot_out.c_str());
        } else if (*count) {
            const icl::SequenceCount c = icl::count_train_sequences(count_classes, count_exemplars);
            std::printf("exact %s\napprox %.6e\n", c.exact.str().c_str(), c.approx);
        }
    } catch (const icl::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfig;
    } catch (const icl::DivergenceError& e) {
        std::fprintf(stderr, "divergence: %s\n", e.what());
        return kDivergence;
    } catch (const icl::IoError& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return kIo;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return kIo;
    }
    return kOk;
}
