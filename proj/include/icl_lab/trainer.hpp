#pragma once

// Training loop, evaluator suite, oracle baselines and the metrics log.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "icl_lab/episodes.hpp"
#include "icl_lab/errors.hpp"
#include "icl_lab/nanoformer.hpp"
#include "icl_lab/optimstack.hpp"
#include "icl_lab/parallel.hpp"
#include "icl_lab/rng.hpp"

namespace icl {

enum class TrainFamily { Bursty, IclOnly, IwlOnly };

inline std::string_view train_family_name(TrainFamily f) {
    switch (f) {
        case TrainFamily::Bursty: return "bursty";
        case TrainFamily::IclOnly: return "icl-only";
        case TrainFamily::IwlOnly: return "iwl-only";
    }
    return "unknown";
}

inline std::optional<TrainFamily> parse_train_family(std::string_view s) {
    for (auto f : {TrainFamily::Bursty, TrainFamily::IclOnly, TrainFamily::IwlOnly}) {
        if (train_family_name(f) == s) {
            return f;
        }
    }
    return std::nullopt;
}

struct TrainConfig {
    ModelConfig model;
    OptimConfig optim;
    RegularizerConfig reg;
    SamplerConfig sampler;  // sampler.seed is the training-data seed
    TrainFamily train_family = TrainFamily::Bursty;
    long long total_steps = 100000;
    long long eval_every = 1000;
    int eval_episodes_per_family = 2000;
    long long checkpoint_every = 10000;
    std::uint64_t init_seed = 0;
    std::uint64_t eval_seed = 0;
    // Zipf exponent of IWL-evaluator query classes (0 = uniform).
    double iwl_eval_query_alpha = 0.0;

    void validate() const {
        model.validate();
        optim.validate();
        reg.validate();
        sampler.validate();
        require(total_steps >= 0, "total_steps must be >= 0");
        require(eval_every >= 1, "eval_every must be >= 1");
        require(total_steps == 0 || eval_every <= total_steps, "eval_every must be <= total_steps");
        require(eval_episodes_per_family >= 100, "eval_episodes_per_family must be >= 100");
        require(checkpoint_every >= 1, "checkpoint_every must be >= 1");
        require(iwl_eval_query_alpha >= 0.0, "iwl_eval_query_alpha must be >= 0");
    }
};

struct MetricRecord {
    long long step = 0;
    double train_loss = 0.0;
    double train_loss_total = 0.0;
    double train_acc = 0.0;
    double icl_acc = 0.0;
    double iwl_acc = 0.0;
    double flipped_icl_acc = 0.0;
    double flipped_iwl_rate = 0.0;
    double iwl_copy_acc = 0.0;
    double lr = 0.0;
};

// ---------------------------------------------------------------------------
// Metrics CSV

inline constexpr std::string_view kMetricsHeader =
    "step,train_loss,train_loss_total,train_acc,icl_acc,iwl_acc,flipped_icl_acc,flipped_iwl_rate,iwl_copy_acc,lr";

inline std::string format_g6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::string format_metric_row(const MetricRecord& r) {
    std::string line = std::to_string(r.step);
    for (double v : {r.train_loss, r.train_loss_total, r.train_acc, r.icl_acc, r.iwl_acc, r.flipped_icl_acc,
                     r.flipped_iwl_rate, r.iwl_copy_acc, r.lr}) {
        line += ',';
        line += format_g6(v);
    }
    line += '\n';
    return line;
}

inline std::vector<MetricRecord> parse_metrics_csv(std::istream& is, const std::string& source = "metrics") {
    std::vector<MetricRecord> rows;
    std::string line;
    int line_no = 0;
    if (!std::getline(is, line)) {
        throw IoError(source + ": empty metrics file");
    }
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    if (line != kMetricsHeader) {
        throw IoError(source + ":1: unexpected header");
    }
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) {
            fields.push_back(field);
        }
        auto fail = [&](const std::string& why) {
            throw IoError(source + ":" + std::to_string(line_no) + ": malformed row (" + why + ")");
        };
        if (fields.size() != 10) {
            fail("expected 10 fields, got " + std::to_string(fields.size()));
        }
        MetricRecord r;
        std::array<double, 9> vals{};
        try {
            std::size_t used = 0;
            r.step = std::stoll(fields[0], &used);
            if (used != fields[0].size()) {
                fail("bad step");
            }
            for (std::size_t i = 0; i < 9; ++i) {
                vals[i] = std::stod(fields[i + 1], &used);
                if (used != fields[i + 1].size()) {
                    fail("bad number in column " + std::to_string(i + 2));
                }
            }
        } catch (const std::logic_error&) {
            fail("unparseable number");
        }
        r.train_loss = vals[0];
        r.train_loss_total = vals[1];
        r.train_acc = vals[2];
        r.icl_acc = vals[3];
        r.iwl_acc = vals[4];
        r.flipped_icl_acc = vals[5];
        r.flipped_iwl_rate = vals[6];
        r.iwl_copy_acc = vals[7];
        r.lr = vals[8];
        if (!rows.empty() && r.step <= rows.back().step) {
            fail("steps must strictly increase");
        }
        rows.push_back(r);
    }
    return rows;
}

inline std::vector<MetricRecord> read_metrics_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("cannot open " + path);
    }
    return parse_metrics_csv(is, path);
}

// ---------------------------------------------------------------------------
// Oracle baselines

namespace detail {

inline double cosine(std::span<const float> a, std::span<const float> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        return 0.0;
    }
    return dot / std::sqrt(na * nb);
}

}  // namespace detail

// In-context strategy: copy the label paired with the context exemplar that
// is most cosine-similar to the query.
inline int baseline_icl_predict(const Episode& episode) {
    int best_slot = 0;
    double best = -2.0;
    for (int slot = 0; slot < kContextPairs; ++slot) {
        const double sim = detail::cosine(episode.context_exemplar(slot), episode.query());
        if (sim > best) {
            best = sim;
            best_slot = slot;
        }
    }
    return episode.labels[static_cast<std::size_t>(best_slot)];
}

inline int baseline_icl_predict(const ExemplarLibrary& /*lib*/, const Episode& episode) {
    return baseline_icl_predict(episode);
}

// In-weights strategy: the library's label for the class whose mean exemplar
// is most cosine-similar to the query. Context is ignored.
class TableLookupBaseline {
public:
    explicit TableLookupBaseline(const ExemplarLibrary& lib) : lib_(&lib), means_(lib.class_means()) {}

    [[nodiscard]] int predict(const Episode& episode) const {
        const int dim = lib_->exemplar_dim();
        int best_cls = 0;
        double best = -2.0;
        for (int c = 0; c < lib_->num_classes(); ++c) {
            const std::span<const float> mean(means_.data() + static_cast<std::size_t>(c) * dim,
                                              static_cast<std::size_t>(dim));
            const double sim = detail::cosine(mean, episode.query());
            if (sim > best) {
                best = sim;
                best_cls = c;
            }
        }
        return lib_->label_of(best_cls);
    }

private:
    const ExemplarLibrary* lib_;
    std::vector<float> means_;
};

inline int baseline_iwl_predict(const ExemplarLibrary& lib, const Episode& episode) {
    return TableLookupBaseline(lib).predict(episode);
}

// Maps a free answer onto a restricted label set: kept when allowed, else the
// allowed label with the nearest index (ties to the smaller).
inline int project_to_restricted(int label, const std::optional<std::vector<int>>& restricted) {
    if (!restricted || restricted->empty()) {
        return label;
    }
    int best = restricted->front();
    for (int cand : *restricted) {
        if (cand == label) {
            return label;
        }
        const auto d_cand = std::abs(cand - label);
        const auto d_best = std::abs(best - label);
        if (d_cand < d_best || (d_cand == d_best && cand < best)) {
            best = cand;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
    Family family = Family::IclEval;
    int episodes = 0;
    double accuracy = 0.0;
    double ci_low = 0.0;   // 95% Wilson interval
    double ci_high = 0.0;
    std::optional<double> unflipped_rate;
};

inline std::pair<double, double> wilson_interval(double successes, double n, double z = 1.959963984540054) {
    if (n <= 0.0) {
        return {0.0, 1.0};
    }
    const double p = successes / n;
    const double denom = 1.0 + z * z / n;
    const double centre = (p + z * z / (2.0 * n)) / denom;
    const double half = z * std::sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom;
    return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

// A fixed evaluation set: identical for identical (family, n, eval_seed).
inline std::vector<Episode> make_eval_set(const EpisodeSampler& sampler, Family family, int n,
                                          std::uint64_t eval_seed) {
    require(n > 0, "evaluation needs n > 0 episodes");
    Rng rng = Rng::stream(eval_seed, family_name(family));
    std::vector<Episode> set;
    set.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        set.push_back(sampler.episode(family, rng));
    }
    return set;
}

// Scores per-episode predictions. `predictions[i]` is the label chosen for episode i.
inline EvalResult score_predictions(std::span<const Episode> episodes, std::span<const int> predictions) {
    require(!episodes.empty(), "evaluation needs n > 0 episodes");
    EvalResult out;
    out.family = episodes.front().family;
    out.episodes = static_cast<int>(episodes.size());
    double correct = 0.0;
    double unflipped = 0.0;
    bool any_flipped = false;
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        correct += predictions[i] == episodes[i].target_label ? 1.0 : 0.0;
        if (episodes[i].unflipped_label) {
            any_flipped = true;
            unflipped += predictions[i] == *episodes[i].unflipped_label ? 1.0 : 0.0;
        }
    }
    const double n = static_cast<double>(episodes.size());
    out.accuracy = correct / n;
    std::tie(out.ci_low, out.ci_high) = wilson_interval(correct, n);
    if (any_flipped) {
        out.unflipped_rate = unflipped / n;
    }
    return out;
}

template <typename Predictor>
EvalResult evaluate_predictor(Predictor&& predictor, std::span<const Episode> episodes) {
    std::vector<int> preds;
    preds.reserve(episodes.size());
    for (const auto& ep : episodes) {
        preds.push_back(project_to_restricted(predictor(ep), ep.restricted_labels));
    }
    return score_predictions(episodes, preds);
}

template <typename T>
std::vector<int> model_predictions(const ModelParams<T>& params, std::span<const Episode> episodes,
                                   int threads = 1, std::size_t chunk = 256) {
    std::vector<int> preds(episodes.size());
    const std::size_t chunks = (episodes.size() + chunk - 1) / chunk;
    const std::size_t shards = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), chunks);
    run_shards(shards, [&](std::size_t shard) {
        for (std::size_t c = shard; c < chunks; c += shards) {
            const std::size_t begin = c * chunk;
            const std::size_t end = std::min(episodes.size(), begin + chunk);
            const auto part = episodes.subspan(begin, end - begin);
            const Matrix<T> out = logits(params, part);
            for (std::size_t i = 0; i < part.size(); ++i) {
                preds[begin + i] = predict_from_logits(out.row(static_cast<Eigen::Index>(i)), part[i].restricted_labels);
            }
        }
    });
    return preds;
}

template <typename T>
EvalResult evaluate(const ModelParams<T>& params, std::span<const Episode> episodes, int threads = 1) {
    const auto preds = model_predictions(params, episodes, threads);
    return score_predictions(episodes, preds);
}

template <typename T>
EvalResult evaluate(const ModelParams<T>& params, const EpisodeSampler& sampler, Family family, int n,
                    std::uint64_t eval_seed, int threads = 1) {
    const auto set = make_eval_set(sampler, family, n, eval_seed);
    return evaluate(params, std::span<const Episode>(set), threads);
}

// ---------------------------------------------------------------------------
// Training

inline std::vector<Episode> make_train_batch(const EpisodeSampler& sampler, TrainFamily family, int batch_size,
                                             std::uint64_t data_seed, long long step) {
    Rng rng = Rng::stream(data_seed, "train", static_cast<std::uint64_t>(step));
    std::vector<Episode> batch;
    batch.reserve(static_cast<std::size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) {
        switch (family) {
            case TrainFamily::Bursty: batch.push_back(sampler.train_episode(rng)); break;
            case TrainFamily::IclOnly: batch.push_back(sampler.icl_only_train_episode(rng)); break;
            case TrainFamily::IwlOnly: batch.push_back(sampler.iwl_only_train_episode(rng)); break;
        }
    }
    return batch;
}

struct StepResult {
    double loss = 0.0;
    double accuracy = 0.0;
    ModelParams<float> grads;
};

// Loss, accuracy and (optionally) mean gradients over a batch split into
// `threads` contiguous shards reduced in shard order.
inline StepResult loss_and_gradients(const ModelParams<float>& params, std::span<const Episode> batch, int threads,
                                     bool want_grads) {
    const std::size_t shards = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), batch.size());
    std::vector<double> losses(shards, 0.0);
    std::vector<double> correct(shards, 0.0);
    std::vector<ModelParams<float>> grads(shards);
    run_shards(shards, [&](std::size_t s) {
        const auto [begin, end] = shard_range(batch.size(), shards, s);
        const auto part = batch.subspan(begin, end - begin);
        auto fwd = forward(params, part);
        const auto targets = targets_of(part);
        losses[s] = loss(fwd.logits, std::span<const int>(targets));
        for (std::size_t i = 0; i < part.size(); ++i) {
            correct[s] += predict_from_logits(fwd.logits.row(static_cast<Eigen::Index>(i)), part[i].restricted_labels) ==
                                  part[i].target_label
                              ? 1.0
                              : 0.0;
        }
        if (want_grads) {
            grads[s] = backward(params, std::move(fwd.cache), std::span<const int>(targets));
        }
    });
    StepResult out;
    const double n = static_cast<double>(batch.size());
    for (std::size_t s = 0; s < shards; ++s) {
        const auto [begin, end] = shard_range(batch.size(), shards, s);
        const double weight = static_cast<double>(end - begin) / n;
        out.loss += weight * losses[s];
        out.accuracy += correct[s] / n;
        if (want_grads) {
            if (s == 0 && shards == 1) {
                out.grads = std::move(grads[0]);
            } else {
                if (s == 0) {
                    out.grads = ModelParams<float>::zeros(params.config());
                }
                out.grads.add_scaled(grads[s], static_cast<float>(weight));
            }
        }
    }
    return out;
}

struct EvalSuite {
    std::vector<Episode> icl;
    std::vector<Episode> iwl;
    std::vector<Episode> flipped;
    std::vector<Episode> iwl_copy;

    static EvalSuite build(const EpisodeSampler& sampler, int n, std::uint64_t eval_seed) {
        EvalSuite s;
        s.icl = make_eval_set(sampler, Family::IclEval, n, eval_seed);
        s.iwl = make_eval_set(sampler, Family::IwlEval, n, eval_seed);
        s.flipped = make_eval_set(sampler, Family::FlippedIclEval, n, eval_seed);
        s.iwl_copy = make_eval_set(sampler, Family::IwlCopyAvailableEval, n, eval_seed);
        return s;
    }
};

struct RunOptions {
    // Directory for metrics.csv and checkpoints; empty = keep nothing on disk.
    std::string out_dir;
    bool resume = false;
    int threads = 0;  // 0 = worker_count()
    // Called after each record; returning false stops the run early
    // (a final checkpoint is still written).
    std::function<bool(const MetricRecord&)> on_record;
};

struct RunResult {
    std::vector<MetricRecord> records;
    ModelParams<float> params;
    AdamState<float> optimizer;
    long long final_step = 0;
    bool stopped_early = false;
};

inline std::string checkpoint_path(const std::string& dir, long long step) {
    char name[64];
    std::snprintf(name, sizeof name, "step_%010lld.ckpt", step);
    return (std::filesystem::path(dir) / name).string();
}

// Highest-step checkpoint in `dir`, if any.
inline std::optional<std::pair<long long, std::string>> latest_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::optional<std::pair<long long, std::string>> best;
    if (!fs::is_directory(dir)) {
        return best;
    }
    static const std::regex pattern(R"(step_(\d+)\.ckpt)");
    for (const auto& entry : fs::directory_iterator(dir)) {
        std::smatch m;
        const std::string name = entry.path().filename().string();
        if (std::regex_match(name, m, pattern)) {
            const long long step = std::stoll(m[1].str());
            if (!best || step > best->first) {
                best = {step, entry.path().string()};
            }
        }
    }
    return best;
}

inline Checkpoint make_training_checkpoint(const ModelParams<float>& params, const AdamState<float>& adam) {
    Checkpoint ckpt;
    ckpt.config = params.config();
    append_params(ckpt, params);
    append_adam_state(ckpt, adam);
    return ckpt;
}

class MetricsLog {
public:
    MetricsLog() = default;

    // Opens (creating or truncating to the rows before `keep_before_step`).
    MetricsLog(const std::string& path, std::optional<long long> keep_before_step) : path_(path) {
        std::vector<MetricRecord> kept;
        if (keep_before_step && std::filesystem::exists(path)) {
            for (const auto& r : read_metrics_csv(path)) {
                if (r.step < *keep_before_step) {
                    kept.push_back(r);
                }
            }
        }
        {
            std::ofstream os(path + ".tmp", std::ios::binary | std::ios::trunc);
            if (!os) {
                throw IoError("cannot open " + path + ".tmp for writing");
            }
            os << kMetricsHeader << '\n';
            for (const auto& r : kept) {
                os << format_metric_row(r);
            }
            if (!os) {
                throw IoError("failed writing " + path);
            }
        }
        std::filesystem::rename(path + ".tmp", path);
        existing_ = std::move(kept);
        stream_.open(path, std::ios::binary | std::ios::app);
        if (!stream_) {
            throw IoError("cannot open " + path + " for appending");
        }
    }

    [[nodiscard]] const std::vector<MetricRecord>& existing() const { return existing_; }

    void append(const MetricRecord& r) {
        if (!stream_.is_open()) {
            return;
        }
        const std::string line = format_metric_row(r);
        stream_.write(line.data(), static_cast<std::streamsize>(line.size()));
        stream_.flush();
        if (!stream_) {
            throw IoError("failed appending to " + path_);
        }
    }

private:
    std::string path_;
    std::ofstream stream_;
    std::vector<MetricRecord> existing_;
};

// Trains for cfg.total_steps optimizer steps. A record at step s describes
// the parameters after s updates: training loss/accuracy on the step-s batch
// and accuracy on every fixed evaluation set. Records are emitted every
// eval_every steps and at the final step; checkpoints every checkpoint_every
// steps and at the end.
inline RunResult run_experiment(const TrainConfig& cfg_in, const ExemplarLibrary& lib, const RunOptions& opts = {}) {
    TrainConfig cfg = cfg_in;
    cfg.validate();
    require(cfg.model.label_vocab == lib.num_classes(),
            "model label_vocab (" + std::to_string(cfg.model.label_vocab) + ") must equal library K (" +
                std::to_string(lib.num_classes()) + ")");
    require(cfg.model.exemplar_dim == lib.exemplar_dim(),
            "model exemplar_dim (" + std::to_string(cfg.model.exemplar_dim) + ") must equal library D_x (" +
                std::to_string(lib.exemplar_dim()) + ")");
    const int threads = opts.threads > 0 ? opts.threads : worker_count();

    const EpisodeSampler sampler(lib, cfg.sampler, cfg.iwl_eval_query_alpha);
    const EvalSuite suite = EvalSuite::build(sampler, cfg.eval_episodes_per_family, cfg.eval_seed);

    RunResult run;
    long long start = 0;
    bool resumed = false;
    const bool on_disk = !opts.out_dir.empty();
    if (on_disk) {
        std::filesystem::create_directories(opts.out_dir);
    }
    if (opts.resume) {
        require(on_disk, "resume needs an output directory");
        const auto latest = latest_checkpoint(opts.out_dir);
        if (!latest) {
            throw IoError("no checkpoint to resume from in " + opts.out_dir);
        }
        const Checkpoint ckpt = load_checkpoint(latest->second);
        require(same_architecture(ckpt.config, cfg.model), "checkpoint model config does not match the run config");
        run.params = extract_params<float>(ckpt);
        run.optimizer = extract_adam_state<float>(ckpt);
        start = static_cast<long long>(run.optimizer.step);
        require(start == latest->first, "checkpoint step does not match its optimizer state");
        require(start <= cfg.total_steps, "checkpoint is beyond total_steps");
        resumed = true;
    } else {
        run.params = ModelParams<float>::initialize(cfg.model, cfg.init_seed);
        run.optimizer = AdamState<float>::for_params(run.params);
    }

    MetricsLog log;
    if (on_disk) {
        log = MetricsLog((std::filesystem::path(opts.out_dir) / "metrics.csv").string(),
                         resumed ? std::optional<long long>(start) : std::nullopt);
        run.records = log.existing();
    }

    for (long long step = start;; ++step) {
        const bool last = step == cfg.total_steps;
        const auto batch = make_train_batch(sampler, cfg.train_family, cfg.optim.batch_size, cfg.sampler.seed, step);
        StepResult sr = loss_and_gradients(run.params, std::span<const Episode>(batch), threads, !last);
        if (!std::isfinite(sr.loss)) {
            throw DivergenceError("non-finite training loss at step " + std::to_string(step));
        }
        const double penalty = l2_penalty(run.params, cfg.reg, last ? nullptr : &sr.grads);

        bool keep_going = true;
        if (step % cfg.eval_every == 0 || last) {
            MetricRecord r;
            r.step = step;
            r.train_loss = sr.loss;
            r.train_loss_total = sr.loss + penalty;
            r.train_acc = sr.accuracy;
            r.icl_acc = evaluate(run.params, std::span<const Episode>(suite.icl), threads).accuracy;
            r.iwl_acc = evaluate(run.params, std::span<const Episode>(suite.iwl), threads).accuracy;
            const EvalResult flipped = evaluate(run.params, std::span<const Episode>(suite.flipped), threads);
            r.flipped_icl_acc = flipped.accuracy;
            r.flipped_iwl_rate = flipped.unflipped_rate.value_or(0.0);
            r.iwl_copy_acc = evaluate(run.params, std::span<const Episode>(suite.iwl_copy), threads).accuracy;
            r.lr = lr_at(step, cfg.optim);
            log.append(r);
            run.records.push_back(r);
            if (opts.on_record) {
                keep_going = opts.on_record(r);
            }
        }
        const bool checkpoint_due = step % cfg.checkpoint_every == 0 && !(resumed && step == start);
        if (on_disk && (checkpoint_due || last || !keep_going)) {
            save_checkpoint(checkpoint_path(opts.out_dir, step), make_training_checkpoint(run.params, run.optimizer));
        }
        if (last || !keep_going) {
            run.final_step = step;
            run.stopped_early = !last;
            break;
        }
        adam_step(run.params, sr.grads, run.optimizer, lr_at(step + 1, cfg.optim), cfg.optim);
    }
    return run;
}

}  // namespace icl
