#pragma once

// Plain-text experiment configs: one `key = value` per line, '#' comments.
// Unknown keys and malformed values are ConfigErrors that name the line.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "icl_lab/episodes.hpp"
#include "icl_lab/errors.hpp"
#include "icl_lab/trainer.hpp"

namespace icl {

// Where the exemplar library comes from: a .icllib file or a Gaussian recipe.
struct LibrarySpec {
    std::string path;
    int num_classes = 1600;
    int exemplars_per_class = 20;
    int exemplar_dim = 64;
    double class_spread = 1.0;
    double within_spread = 0.1;
    std::uint64_t seed = 0;

    [[nodiscard]] ExemplarLibrary materialize() const {
        if (!path.empty()) {
            return load_library(path);
        }
        return make_gaussian_library(num_classes, exemplars_per_class, exemplar_dim, class_spread, within_spread,
                                     seed);
    }
};

struct ExperimentConfig {
    TrainConfig train;
    LibrarySpec library;
    // label_vocab / exemplar_dim follow the library unless set explicitly.
    bool label_vocab_set = false;
    bool exemplar_dim_set = false;

    // Aligns the model's vocabulary and input width with `lib` where not pinned.
    void bind(const ExemplarLibrary& lib) {
        if (!label_vocab_set) {
            train.model.label_vocab = lib.num_classes();
        }
        if (!exemplar_dim_set) {
            train.model.exemplar_dim = lib.exemplar_dim();
        }
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    std::istringstream is(value);
    T out{};
    is >> out;
    if (!is || !is.eof()) {
        throw ConfigError("invalid value '" + value + "' for " + key);
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") {
        return true;
    }
    if (value == "false" || value == "0" || value == "no") {
        return false;
    }
    throw ConfigError("invalid boolean '" + value + "' for " + key);
}

inline std::set<ParamGroup> parse_groups(const std::string& key, const std::string& value) {
    std::set<ParamGroup> out;
    if (value == "none" || value.empty()) {
        return out;
    }
    if (value == "all") {
        return non_norm_groups();
    }
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        const auto g = parse_group(item);
        if (!g) {
            throw ConfigError("unknown parameter group '" + item + "' in " + key);
        }
        if (*g == ParamGroup::Norm) {
            throw ConfigError("norm parameters cannot be L2-regularised (" + key + ")");
        }
        out.insert(*g);
    }
    return out;
}

}  // namespace detail

// Applies one setting; throws ConfigError for unknown keys or bad values.
inline void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_number;
    auto& t = cfg.train;
    auto i32 = [&] { return parse_number<int>(key, value); };
    auto i64 = [&] { return parse_number<long long>(key, value); };
    auto u64 = [&] { return parse_number<std::uint64_t>(key, value); };
    auto f64 = [&] { return parse_number<double>(key, value); };

    if (key == "model.layers") t.model.layers = i32();
    else if (key == "model.model_dim") t.model.model_dim = i32();
    else if (key == "model.heads") t.model.heads = i32();
    else if (key == "model.mlp_hidden") t.model.mlp_hidden = i32();
    else if (key == "model.label_vocab") { t.model.label_vocab = i32(); cfg.label_vocab_set = true; }
    else if (key == "model.exemplar_dim") { t.model.exemplar_dim = i32(); cfg.exemplar_dim_set = true; }
    else if (key == "model.pe_timescale") t.model.pe_timescale = f64();
    else if (key == "model.init_scale") t.model.init_scale = f64();
    else if (key == "optim.peak_lr") t.optim.peak_lr = f64();
    else if (key == "optim.warmup_steps") t.optim.warmup_steps = i32();
    else if (key == "optim.batch_size") t.optim.batch_size = i32();
    else if (key == "optim.beta1") t.optim.beta1 = f64();
    else if (key == "optim.beta2") t.optim.beta2 = f64();
    else if (key == "optim.eps") t.optim.eps = f64();
    else if (key == "reg.lambda") t.reg.lambda = f64();
    else if (key == "reg.groups") t.reg.groups = detail::parse_groups(key, value);
    else if (key == "data.p_bursty") t.sampler.p_bursty = f64();
    else if (key == "data.zipf_alpha") t.sampler.zipf_alpha = f64();
    else if (key == "data.bursty_count") t.sampler.bursty_count = i32();
    else if (key == "data.distractor_count") t.sampler.distractor_count = i32();
    else if (key == "data.sample_without_replacement") t.sampler.sample_without_replacement = parse_bool(key, value);
    else if (key == "data.distinct_query_exemplar") t.sampler.distinct_query_exemplar = parse_bool(key, value);
    else if (key == "data.seed") t.sampler.seed = u64();
    else if (key == "train.family") {
        const auto f = parse_train_family(value);
        if (!f) {
            throw ConfigError("unknown training family '" + value + "' (bursty, icl-only, iwl-only)");
        }
        t.train_family = *f;
    }
    else if (key == "train.total_steps") t.total_steps = i64();
    else if (key == "train.eval_every") t.eval_every = i64();
    else if (key == "train.checkpoint_every") t.checkpoint_every = i64();
    else if (key == "train.init_seed") t.init_seed = u64();
    else if (key == "eval.episodes") t.eval_episodes_per_family = i32();
    else if (key == "eval.seed") t.eval_seed = u64();
    else if (key == "eval.iwl_query_alpha") t.iwl_eval_query_alpha = f64();
    else if (key == "library.path") cfg.library.path = value;
    else if (key == "library.num_classes") cfg.library.num_classes = i32();
    else if (key == "library.exemplars_per_class") cfg.library.exemplars_per_class = i32();
    else if (key == "library.exemplar_dim") cfg.library.exemplar_dim = i32();
    else if (key == "library.class_spread") cfg.library.class_spread = f64();
    else if (key == "library.within_spread") cfg.library.within_spread = f64();
    else if (key == "library.seed") cfg.library.seed = u64();
    else throw ConfigError("unknown config key '" + key + "'");
}

// Parses "key=value" (used for --set overrides).
inline void apply_assignment(ExperimentConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("expected key=value, got '" + assignment + "'");
    }
    apply_setting(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

inline void apply_config_text(ExperimentConfig& cfg, std::istream& is, const std::string& source = "config") {
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        line = detail::trim(line);
        if (line.empty()) {
            continue;
        }
        try {
            apply_assignment(cfg, line);
        } catch (const ConfigError& e) {
            throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("cannot open config " + path);
    }
    ExperimentConfig cfg;
    apply_config_text(cfg, is, path);
    return cfg;
}

// Canonical listing of every setting, loadable by apply_config_text.
inline std::string describe(const ExperimentConfig& cfg) {
    const auto& t = cfg.train;
    std::ostringstream os;
    os.precision(17);
    std::string groups;
    for (auto g : t.reg.groups) {
        groups += (groups.empty() ? "" : ",") + std::string(group_name(g));
    }
    os << "model.layers = " << t.model.layers << '\n'
       << "model.model_dim = " << t.model.model_dim << '\n'
       << "model.heads = " << t.model.heads << '\n'
       << "model.mlp_hidden = " << t.model.mlp_hidden << '\n'
       << "model.label_vocab = " << t.model.label_vocab << '\n'
       << "model.exemplar_dim = " << t.model.exemplar_dim << '\n'
       << "model.pe_timescale = " << t.model.pe_timescale << '\n'
       << "model.init_scale = " << t.model.init_scale << '\n'
       << "optim.peak_lr = " << t.optim.peak_lr << '\n'
       << "optim.warmup_steps = " << t.optim.warmup_steps << '\n'
       << "optim.batch_size = " << t.optim.batch_size << '\n'
       << "optim.beta1 = " << t.optim.beta1 << '\n'
       << "optim.beta2 = " << t.optim.beta2 << '\n'
       << "optim.eps = " << t.optim.eps << '\n'
       << "reg.lambda = " << t.reg.lambda << '\n'
       << "reg.groups = " << (groups.empty() ? "none" : groups) << '\n'
       << "data.p_bursty = " << t.sampler.p_bursty << '\n'
       << "data.zipf_alpha = " << t.sampler.zipf_alpha << '\n'
       << "data.bursty_count = " << t.sampler.bursty_count << '\n'
       << "data.distractor_count = " << t.sampler.distractor_count << '\n'
       << "data.sample_without_replacement = " << (t.sampler.sample_without_replacement ? "true" : "false") << '\n'
       << "data.distinct_query_exemplar = " << (t.sampler.distinct_query_exemplar ? "true" : "false") << '\n'
       << "data.seed = " << t.sampler.seed << '\n'
       << "train.family = " << train_family_name(t.train_family) << '\n'
       << "train.total_steps = " << t.total_steps << '\n'
       << "train.eval_every = " << t.eval_every << '\n'
       << "train.checkpoint_every = " << t.checkpoint_every << '\n'
       << "train.init_seed = " << t.init_seed << '\n'
       << "eval.episodes = " << t.eval_episodes_per_family << '\n'
       << "eval.seed = " << t.eval_seed << '\n'
       << "eval.iwl_query_alpha = " << t.iwl_eval_query_alpha << '\n';
    if (!cfg.library.path.empty()) {
        os << "library.path = " << cfg.library.path << '\n';
    } else {
        os << "library.num_classes = " << cfg.library.num_classes << '\n'
           << "library.exemplars_per_class = " << cfg.library.exemplars_per_class << '\n'
           << "library.exemplar_dim = " << cfg.library.exemplar_dim << '\n'
           << "library.class_spread = " << cfg.library.class_spread << '\n'
           << "library.within_spread = " << cfg.library.within_spread << '\n'
           << "library.seed = " << cfg.library.seed << '\n';
    }
    return os.str();
}

}  // namespace icl
