#pragma once

// Exemplar libraries and the episode families used for training and
// evaluation. An episode is 8 (exemplar, label) context pairs followed by a
// query exemplar, i.e. a 17-token input sequence.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "icl_lab/binary_io.hpp"
#include "icl_lab/errors.hpp"
#include "icl_lab/rng.hpp"

namespace icl {

inline constexpr int kContextPairs = 8;
inline constexpr int kSeqLen = 2 * kContextPairs + 1;
inline constexpr int kQueryRow = kContextPairs;

// ---------------------------------------------------------------------------
// ExemplarLibrary

class ExemplarLibrary {
public:
    ExemplarLibrary() = default;

    ExemplarLibrary(int num_classes, int exemplars_per_class, int exemplar_dim,
                    std::vector<float> vectors, std::vector<int> label_of)
        : num_classes_(num_classes),
          exemplars_per_class_(exemplars_per_class),
          exemplar_dim_(exemplar_dim),
          vectors_(std::move(vectors)),
          label_of_(std::move(label_of)) {
        validate();
    }

    // Identity class->label map.
    ExemplarLibrary(int num_classes, int exemplars_per_class, int exemplar_dim,
                    std::vector<float> vectors)
        : ExemplarLibrary(num_classes, exemplars_per_class, exemplar_dim, std::move(vectors),
                          identity_labels(num_classes)) {}

    [[nodiscard]] int num_classes() const { return num_classes_; }
    [[nodiscard]] int exemplars_per_class() const { return exemplars_per_class_; }
    [[nodiscard]] int exemplar_dim() const { return exemplar_dim_; }
    [[nodiscard]] std::size_t size() const {
        return static_cast<std::size_t>(num_classes_) * static_cast<std::size_t>(exemplars_per_class_);
    }

    [[nodiscard]] std::span<const float> exemplar(int cls, int idx) const {
        const std::size_t row = static_cast<std::size_t>(cls) * exemplars_per_class_ + idx;
        return {vectors_.data() + row * exemplar_dim_, static_cast<std::size_t>(exemplar_dim_)};
    }

    [[nodiscard]] int label_of(int cls) const { return label_of_[static_cast<std::size_t>(cls)]; }
    [[nodiscard]] const std::vector<int>& labels() const { return label_of_; }
    [[nodiscard]] const std::vector<float>& vectors() const { return vectors_; }

    // Mean exemplar per class, K x D_x row-major.
    [[nodiscard]] std::vector<float> class_means() const {
        std::vector<float> means(static_cast<std::size_t>(num_classes_) * exemplar_dim_, 0.0f);
        for (int c = 0; c < num_classes_; ++c) {
            float* dst = means.data() + static_cast<std::size_t>(c) * exemplar_dim_;
            for (int e = 0; e < exemplars_per_class_; ++e) {
                const auto x = exemplar(c, e);
                for (int d = 0; d < exemplar_dim_; ++d) {
                    dst[d] += x[static_cast<std::size_t>(d)];
                }
            }
            for (int d = 0; d < exemplar_dim_; ++d) {
                dst[d] /= static_cast<float>(exemplars_per_class_);
            }
        }
        return means;
    }

    bool operator==(const ExemplarLibrary&) const = default;

    static std::vector<int> identity_labels(int k) {
        std::vector<int> labels(static_cast<std::size_t>(std::max(k, 0)));
        std::iota(labels.begin(), labels.end(), 0);
        return labels;
    }

private:
    void validate() const {
        require(num_classes_ >= 1 && exemplars_per_class_ >= 1 && exemplar_dim_ >= 1,
                "library dimensions must be positive");
        require(vectors_.size() == size() * static_cast<std::size_t>(exemplar_dim_),
                "library vector storage does not match K*E*D_x");
        require(std::all_of(vectors_.begin(), vectors_.end(), [](float v) { return std::isfinite(v); }),
                "library contains non-finite values");
        require(label_of_.size() == static_cast<std::size_t>(num_classes_), "label_of must have K entries");
        std::vector<char> seen(label_of_.size(), 0);
        for (int label : label_of_) {
            require(label >= 0 && label < num_classes_ && !seen[static_cast<std::size_t>(label)],
                    "label_of is not a bijection over [0, K)");
            seen[static_cast<std::size_t>(label)] = 1;
        }
    }

    int num_classes_ = 0;
    int exemplars_per_class_ = 0;
    int exemplar_dim_ = 0;
    std::vector<float> vectors_;
    std::vector<int> label_of_;
};

// .icllib: "ICL1", u32 K, u32 E, u32 D_x, K*E*D_x f32, K u32 labels.
inline void write_library(std::ostream& os, const ExemplarLibrary& lib) {
    io::write_magic(os, "ICL1");
    io::write_u32(os, static_cast<std::uint32_t>(lib.num_classes()));
    io::write_u32(os, static_cast<std::uint32_t>(lib.exemplars_per_class()));
    io::write_u32(os, static_cast<std::uint32_t>(lib.exemplar_dim()));
    io::write_f32_span(os, lib.vectors());
    for (int label : lib.labels()) {
        io::write_u32(os, static_cast<std::uint32_t>(label));
    }
}

inline ExemplarLibrary read_library(std::istream& is) {
    io::expect_magic(is, "ICL1");
    const auto k = io::read_u32(is, "K");
    const auto e = io::read_u32(is, "E");
    const auto d = io::read_u32(is, "D_x");
    if (k == 0 || e == 0 || d == 0) {
        throw IoError("library header has a zero dimension");
    }
    std::vector<float> vectors(static_cast<std::size_t>(k) * e * d);
    io::read_f32_span(is, vectors, "library vectors");
    std::vector<int> labels(k);
    for (auto& label : labels) {
        label = static_cast<int>(io::read_u32(is, "label_of"));
    }
    try {
        return ExemplarLibrary(static_cast<int>(k), static_cast<int>(e), static_cast<int>(d),
                               std::move(vectors), std::move(labels));
    } catch (const ConfigError& err) {
        throw IoError(std::string("invalid library file: ") + err.what());
    }
}

inline void save_library(const std::string& path, const ExemplarLibrary& lib) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw IoError("cannot open " + path + " for writing");
    }
    write_library(os, lib);
    if (!os) {
        throw IoError("failed writing " + path);
    }
}

inline ExemplarLibrary load_library(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open " + path);
    }
    return read_library(is);
}

// Class centroids are drawn from substream 0 and within-class noise from
// substream 1 of the "library" stream, so centroids can be regenerated alone.
inline std::vector<float> gaussian_library_centroids(int num_classes, int exemplar_dim, double class_spread,
                                                     std::uint64_t seed) {
    require(num_classes >= 1 && exemplar_dim >= 1, "library dimensions must be positive");
    require(class_spread > 0.0, "class_spread must be positive");
    Rng rng = Rng::stream(seed, "library", 0);
    std::vector<float> centroids(static_cast<std::size_t>(num_classes) * exemplar_dim);
    for (auto& c : centroids) {
        c = static_cast<float>(class_spread * rng.normal());
    }
    return centroids;
}

inline ExemplarLibrary make_gaussian_library(int num_classes, int exemplars_per_class, int exemplar_dim,
                                             double class_spread, double within_spread, std::uint64_t seed) {
    require(num_classes >= 1 && exemplars_per_class >= 1 && exemplar_dim >= 1,
            "library dimensions must be positive");
    require(class_spread > 0.0 && within_spread > 0.0, "spreads must be positive");
    const auto centroids = gaussian_library_centroids(num_classes, exemplar_dim, class_spread, seed);
    Rng noise = Rng::stream(seed, "library", 1);
    std::vector<float> vectors(static_cast<std::size_t>(num_classes) * exemplars_per_class * exemplar_dim);
    std::size_t out = 0;
    for (int c = 0; c < num_classes; ++c) {
        const float* centroid = centroids.data() + static_cast<std::size_t>(c) * exemplar_dim;
        for (int e = 0; e < exemplars_per_class; ++e) {
            for (int d = 0; d < exemplar_dim; ++d) {
                vectors[out++] = static_cast<float>(centroid[d] + within_spread * noise.normal());
            }
        }
    }
    return {num_classes, exemplars_per_class, exemplar_dim, std::move(vectors)};
}

// Ratio of mean within-class to mean between-class Euclidean distance over a
// sample of exemplar pairs (exhaustive when the library is small).
inline double separability_ratio(const ExemplarLibrary& lib, std::uint64_t seed, int max_pairs = 200000) {
    auto dist = [&](int c1, int e1, int c2, int e2) {
        const auto a = lib.exemplar(c1, e1);
        const auto b = lib.exemplar(c2, e2);
        double s = 0.0;
        for (std::size_t d = 0; d < a.size(); ++d) {
            const double diff = static_cast<double>(a[d]) - b[d];
            s += diff * diff;
        }
        return std::sqrt(s);
    };
    double within = 0.0;
    double between = 0.0;
    std::size_t n_within = 0;
    std::size_t n_between = 0;
    const int k = lib.num_classes();
    const int e = lib.exemplars_per_class();
    if (lib.size() * lib.size() / 2 <= static_cast<std::size_t>(max_pairs)) {
        for (std::size_t i = 0; i < lib.size(); ++i) {
            for (std::size_t j = i + 1; j < lib.size(); ++j) {
                const int ci = static_cast<int>(i) / e;
                const int cj = static_cast<int>(j) / e;
                const double dd = dist(ci, static_cast<int>(i) % e, cj, static_cast<int>(j) % e);
                if (ci == cj) {
                    within += dd;
                    ++n_within;
                } else {
                    between += dd;
                    ++n_between;
                }
            }
        }
    } else {
        Rng rng = Rng::stream(seed, "separability");
        for (int p = 0; p < max_pairs / 2; ++p) {
            const int c = rng.uniform_index(k);
            if (e > 1) {
                const int e1 = rng.uniform_index(e);
                int e2 = rng.uniform_index(e - 1);
                e2 += e2 >= e1 ? 1 : 0;
                within += dist(c, e1, c, e2);
                ++n_within;
            }
            if (k > 1) {
                int c2 = rng.uniform_index(k - 1);
                c2 += c2 >= c ? 1 : 0;
                between += dist(c, rng.uniform_index(e), c2, rng.uniform_index(e));
                ++n_between;
            }
        }
    }
    if (n_within == 0 || n_between == 0) {
        return 0.0;
    }
    return (within / static_cast<double>(n_within)) / (between / static_cast<double>(n_between));
}

// ---------------------------------------------------------------------------
// Zipfian class sampling: rank r (1-based) has weight r^-alpha.

class ClassSampler {
public:
    ClassSampler() = default;

    ClassSampler(int num_classes, double alpha) : num_classes_(num_classes), alpha_(alpha) {
        require(num_classes >= 1, "class sampler needs K >= 1");
        require(alpha >= 0.0 && std::isfinite(alpha), "Zipf exponent must be finite and >= 0");
        if (alpha_ > 0.0) {
            cumulative_.resize(static_cast<std::size_t>(num_classes));
            double total = 0.0;
            for (int r = 1; r <= num_classes; ++r) {
                total += std::pow(static_cast<double>(r), -alpha_);
                cumulative_[static_cast<std::size_t>(r - 1)] = total;
            }
        }
    }

    [[nodiscard]] int num_classes() const { return num_classes_; }
    [[nodiscard]] double alpha() const { return alpha_; }

    [[nodiscard]] double probability(int index) const {
        if (alpha_ == 0.0) {
            return 1.0 / num_classes_;
        }
        return std::pow(static_cast<double>(index + 1), -alpha_) / cumulative_.back();
    }

    // P(X <= index) for the 0-based class index.
    [[nodiscard]] double cdf(int index) const {
        if (alpha_ == 0.0) {
            return static_cast<double>(index + 1) / num_classes_;
        }
        return cumulative_[static_cast<std::size_t>(index)] / cumulative_.back();
    }

    int operator()(Rng& rng) const {
        if (alpha_ == 0.0) {
            return rng.uniform_index(num_classes_);
        }
        const double u = rng.uniform() * cumulative_.back();
        const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
        return std::min(static_cast<int>(it - cumulative_.begin()), num_classes_ - 1);
    }

    // Exact draw conditioned on not landing in `excluded`. Rejection first,
    // explicit renormalisation when the excluded mass is large.
    int sample_excluding(Rng& rng, std::span<const int> excluded) const {
        require(excluded.size() < static_cast<std::size_t>(num_classes_),
                "cannot exclude every class");
        auto is_excluded = [&](int c) { return std::find(excluded.begin(), excluded.end(), c) != excluded.end(); };
        for (int attempt = 0; attempt < 64; ++attempt) {
            const int c = (*this)(rng);
            if (!is_excluded(c)) {
                return c;
            }
        }
        double remaining = 0.0;
        for (int c = 0; c < num_classes_; ++c) {
            remaining += is_excluded(c) ? 0.0 : probability(c);
        }
        double u = rng.uniform() * remaining;
        int last_allowed = -1;
        for (int c = 0; c < num_classes_; ++c) {
            if (is_excluded(c)) {
                continue;
            }
            last_allowed = c;
            u -= probability(c);
            if (u < 0.0) {
                return c;
            }
        }
        return last_allowed;
    }

private:
    int num_classes_ = 0;
    double alpha_ = 0.0;
    std::vector<double> cumulative_;
};

inline int sample_class(double alpha, int num_classes, Rng& rng) {
    return ClassSampler(num_classes, alpha)(rng);
}

// ---------------------------------------------------------------------------
// Episodes

enum class Family {
    TrainBursty,
    TrainNonBursty,
    IclEval,
    IwlEval,
    FlippedIclEval,
    IwlCopyAvailableEval,
    IclOnlyTrain,
    IwlOnlyTrain,
};

inline std::string_view family_name(Family f) {
    switch (f) {
        case Family::TrainBursty: return "train_bursty";
        case Family::TrainNonBursty: return "train_non_bursty";
        case Family::IclEval: return "icl_eval";
        case Family::IwlEval: return "iwl_eval";
        case Family::FlippedIclEval: return "flipped_icl_eval";
        case Family::IwlCopyAvailableEval: return "iwl_copy_available_eval";
        case Family::IclOnlyTrain: return "icl_only_train";
        case Family::IwlOnlyTrain: return "iwl_only_train";
    }
    return "unknown";
}

struct Episode {
    int exemplar_dim = 0;
    // kContextPairs context rows followed by the query row, each exemplar_dim wide.
    std::vector<float> exemplars;
    std::array<int, kContextPairs> labels{};
    // Provenance of every row; evaluators and tests use it, models never see it.
    std::array<int, kContextPairs> context_classes{};
    std::array<int, kContextPairs> context_exemplar_ids{};
    int query_class = 0;
    int query_exemplar_id = 0;
    int target_label = 0;
    Family family = Family::TrainBursty;
    std::optional<std::vector<int>> restricted_labels;
    // Flipped-ICL only: the label the class carries in the library.
    std::optional<int> unflipped_label;

    [[nodiscard]] std::span<const float> context_exemplar(int slot) const {
        return {exemplars.data() + static_cast<std::size_t>(slot) * exemplar_dim,
                static_cast<std::size_t>(exemplar_dim)};
    }
    [[nodiscard]] std::span<const float> query() const { return context_exemplar(kQueryRow); }

    bool operator==(const Episode&) const = default;
};

struct SamplerConfig {
    int bursty_count = 3;
    int distractor_count = 3;
    double p_bursty = 1.0;
    double zipf_alpha = 0.0;
    // Within-class exemplar draws avoid repeats when the class has enough exemplars.
    bool sample_without_replacement = true;
    // Query exemplar must differ from every same-class context exemplar (eval builders too).
    bool distinct_query_exemplar = false;
    std::uint64_t seed = 0;

    void validate() const {
        require(bursty_count >= 1, "bursty_count must be >= 1");
        require(distractor_count >= 0, "distractor_count must be >= 0");
        require(bursty_count + distractor_count <= kContextPairs, "bursty_count + distractor_count must be <= 8");
        require(p_bursty >= 0.0 && p_bursty <= 1.0, "p_bursty must lie in [0, 1]");
        require(zipf_alpha >= 0.0 && std::isfinite(zipf_alpha), "zipf_alpha must be finite and >= 0");
    }

    // Distinct classes present in a bursty context.
    [[nodiscard]] int bursty_class_count() const {
        return 1 + (distractor_count > 0 ? 1 : 0) + (kContextPairs - bursty_count - distractor_count);
    }
};

namespace detail {

inline Episode blank_episode(const ExemplarLibrary& lib, Family family) {
    Episode ep;
    ep.exemplar_dim = lib.exemplar_dim();
    ep.exemplars.resize(static_cast<std::size_t>(kContextPairs + 1) * lib.exemplar_dim());
    ep.family = family;
    return ep;
}

inline void copy_exemplar(const ExemplarLibrary& lib, Episode& ep, int row, int cls, int idx) {
    const auto src = lib.exemplar(cls, idx);
    std::copy(src.begin(), src.end(), ep.exemplars.begin() + static_cast<std::ptrdiff_t>(row) * ep.exemplar_dim);
}

// `count` exemplar ids from a class; distinct when allowed and possible.
inline std::vector<int> draw_exemplar_ids(Rng& rng, int per_class, int count, bool without_replacement) {
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(count));
    const bool distinct = without_replacement && per_class >= count;
    while (static_cast<int>(ids.size()) < count) {
        const int id = rng.uniform_index(per_class);
        if (distinct && std::find(ids.begin(), ids.end(), id) != ids.end()) {
            continue;
        }
        ids.push_back(id);
    }
    return ids;
}

inline int draw_query_id(Rng& rng, int per_class, std::span<const int> used, bool distinct) {
    if (!distinct || static_cast<int>(used.size()) >= per_class) {
        return rng.uniform_index(per_class);
    }
    for (;;) {
        const int id = rng.uniform_index(per_class);
        if (std::find(used.begin(), used.end(), id) == used.end()) {
            return id;
        }
    }
}

struct Slot {
    int cls;
    int exemplar_id;
    int label;
};

inline void fill_context(const ExemplarLibrary& lib, Episode& ep, std::array<Slot, kContextPairs>& slots,
                         Rng& rng) {
    rng.shuffle(slots.begin(), slots.end());
    for (int i = 0; i < kContextPairs; ++i) {
        const auto& s = slots[static_cast<std::size_t>(i)];
        copy_exemplar(lib, ep, i, s.cls, s.exemplar_id);
        ep.labels[static_cast<std::size_t>(i)] = s.label;
        ep.context_classes[static_cast<std::size_t>(i)] = s.cls;
        ep.context_exemplar_ids[static_cast<std::size_t>(i)] = s.exemplar_id;
    }
}

inline void set_query(const ExemplarLibrary& lib, Episode& ep, int cls, int exemplar_id, int target) {
    copy_exemplar(lib, ep, kQueryRow, cls, exemplar_id);
    ep.query_class = cls;
    ep.query_exemplar_id = exemplar_id;
    ep.target_label = target;
}

}  // namespace detail

// Builds every episode family from one library. Holds the Zipf tables so the
// hot training path does not rebuild them per episode. Stateless apart from
// that cache: all randomness comes from the caller's Rng.
class EpisodeSampler {
public:
    EpisodeSampler(const ExemplarLibrary& lib, SamplerConfig cfg, double iwl_eval_query_alpha = 0.0)
        : lib_(&lib),
          cfg_(cfg),
          train_classes_(lib.num_classes(), cfg.zipf_alpha),
          iwl_query_classes_(lib.num_classes(), iwl_eval_query_alpha),
          uniform_classes_(lib.num_classes(), 0.0) {
        cfg_.validate();
    }

    [[nodiscard]] const ExemplarLibrary& library() const { return *lib_; }
    [[nodiscard]] const SamplerConfig& config() const { return cfg_; }

    Episode train_episode(Rng& rng) const {
        require(lib_->num_classes() >= cfg_.bursty_class_count(),
                "bursty episodes need K >= " + std::to_string(cfg_.bursty_class_count()));
        if (cfg_.p_bursty >= 1.0 || rng.bernoulli(cfg_.p_bursty)) {
            return bursty_episode(rng);
        }
        return non_query_context_episode(rng, Family::TrainNonBursty, train_classes_, train_classes_);
    }

    Episode icl_eval_episode(Rng& rng, Family family = Family::IclEval) const {
        require(lib_->num_classes() >= 2, "ICL evaluation episodes need K >= 2");
        const auto classes = two_classes(rng);
        const bool first_gets_zero = rng.bernoulli(0.5);
        const std::array<int, 2> labels = {first_gets_zero ? 0 : 1, first_gets_zero ? 1 : 0};
        Episode ep = two_class_episode(rng, family, classes, labels);
        ep.restricted_labels = std::vector<int>{0, 1};
        return ep;
    }

    Episode flipped_icl_episode(Rng& rng) const {
        require(lib_->num_classes() >= 2, "flipped-ICL episodes need K >= 2");
        const auto classes = two_classes(rng);
        const int a = lib_->label_of(classes[0]);
        const int b = lib_->label_of(classes[1]);
        Episode ep = two_class_episode(rng, Family::FlippedIclEval, classes, {b, a});
        ep.unflipped_label = lib_->label_of(ep.query_class);
        ep.restricted_labels = std::vector<int>{std::min(a, b), std::max(a, b)};
        return ep;
    }

    Episode iwl_eval_episode(Rng& rng, Family family = Family::IwlEval) const {
        return non_query_context_episode(rng, family, iwl_query_classes_, uniform_classes_);
    }

    Episode iwl_copy_available_episode(Rng& rng) const {
        Episode ep = non_query_context_episode(rng, Family::IwlCopyAvailableEval, iwl_query_classes_,
                                               uniform_classes_);
        ep.labels[static_cast<std::size_t>(rng.uniform_index(kContextPairs))] = ep.target_label;
        return ep;
    }

    Episode icl_only_train_episode(Rng& rng) const { return icl_eval_episode(rng, Family::IclOnlyTrain); }

    Episode iwl_only_train_episode(Rng& rng) const {
        return non_query_context_episode(rng, Family::IwlOnlyTrain, train_classes_, uniform_classes_);
    }

    Episode episode(Family family, Rng& rng) const {
        switch (family) {
            case Family::TrainBursty: return bursty_episode(rng);
            case Family::TrainNonBursty:
                return non_query_context_episode(rng, Family::TrainNonBursty, train_classes_, train_classes_);
            case Family::IclEval: return icl_eval_episode(rng);
            case Family::IwlEval: return iwl_eval_episode(rng);
            case Family::FlippedIclEval: return flipped_icl_episode(rng);
            case Family::IwlCopyAvailableEval: return iwl_copy_available_episode(rng);
            case Family::IclOnlyTrain: return icl_only_train_episode(rng);
            case Family::IwlOnlyTrain: return iwl_only_train_episode(rng);
        }
        throw ConfigError("unknown episode family");
    }

private:
    Episode bursty_episode(Rng& rng) const {
        const ExemplarLibrary& lib = *lib_;
        require(lib.num_classes() >= cfg_.bursty_class_count(),
                "bursty episodes need K >= " + std::to_string(cfg_.bursty_class_count()));
        Episode ep = detail::blank_episode(lib, Family::TrainBursty);
        const int per_class = lib.exemplars_per_class();

        std::vector<int> used_classes;
        const int query_cls = train_classes_(rng);
        used_classes.push_back(query_cls);

        std::array<detail::Slot, kContextPairs> slots{};
        std::size_t next = 0;
        auto add_group = [&](int cls, int count) {
            for (int id : detail::draw_exemplar_ids(rng, per_class, count, cfg_.sample_without_replacement)) {
                slots[next++] = {cls, id, lib.label_of(cls)};
            }
        };
        add_group(query_cls, cfg_.bursty_count);
        if (cfg_.distractor_count > 0) {
            const int distractor = train_classes_.sample_excluding(rng, used_classes);
            used_classes.push_back(distractor);
            add_group(distractor, cfg_.distractor_count);
        }
        while (next < slots.size()) {
            const int other = train_classes_.sample_excluding(rng, used_classes);
            used_classes.push_back(other);
            add_group(other, 1);
        }

        std::vector<int> query_ids;
        for (std::size_t i = 0; i < static_cast<std::size_t>(cfg_.bursty_count); ++i) {
            query_ids.push_back(slots[i].exemplar_id);
        }
        const int query_id = detail::draw_query_id(rng, per_class, query_ids, cfg_.distinct_query_exemplar);
        detail::fill_context(lib, ep, slots, rng);
        detail::set_query(lib, ep, query_cls, query_id, lib.label_of(query_cls));
        return ep;
    }

    // Query class from `query_classes`, 8 distinct context classes (none equal
    // to the query class) from `context_classes`, true labels throughout.
    Episode non_query_context_episode(Rng& rng, Family family, const ClassSampler& query_classes,
                                      const ClassSampler& context_classes) const {
        const ExemplarLibrary& lib = *lib_;
        require(lib.num_classes() >= kContextPairs + 1,
                std::string(family_name(family)) + " episodes need K >= 9");
        Episode ep = detail::blank_episode(lib, family);
        const int per_class = lib.exemplars_per_class();
        const int query_cls = query_classes(rng);
        std::vector<int> used = {query_cls};
        std::array<detail::Slot, kContextPairs> slots{};
        for (auto& slot : slots) {
            const int cls = context_classes.sample_excluding(rng, used);
            used.push_back(cls);
            slot = {cls, rng.uniform_index(per_class), lib.label_of(cls)};
        }
        const int query_id = rng.uniform_index(per_class);
        detail::fill_context(lib, ep, slots, rng);
        detail::set_query(lib, ep, query_cls, query_id, lib.label_of(query_cls));
        return ep;
    }

    std::array<int, 2> two_classes(Rng& rng) const {
        const int k = lib_->num_classes();
        const int a = rng.uniform_index(k);
        int b = rng.uniform_index(k - 1);
        b += b >= a ? 1 : 0;
        return {a, b};
    }

    // 4 exemplars from each of two classes with the given per-class labels;
    // the query comes from either class with equal probability.
    Episode two_class_episode(Rng& rng, Family family, std::array<int, 2> classes,
                              std::array<int, 2> labels) const {
        const ExemplarLibrary& lib = *lib_;
        Episode ep = detail::blank_episode(lib, family);
        const int per_class = lib.exemplars_per_class();
        constexpr int kPerClass = kContextPairs / 2;
        std::array<detail::Slot, kContextPairs> slots{};
        std::array<std::vector<int>, 2> ids;
        for (std::size_t c = 0; c < 2; ++c) {
            ids[c] = detail::draw_exemplar_ids(rng, per_class, kPerClass, cfg_.sample_without_replacement);
            for (std::size_t i = 0; i < static_cast<std::size_t>(kPerClass); ++i) {
                slots[c * kPerClass + i] = {classes[c], ids[c][i], labels[c]};
            }
        }
        const std::size_t pick = rng.bernoulli(0.5) ? 1 : 0;
        const int query_id = detail::draw_query_id(rng, per_class, ids[pick], cfg_.distinct_query_exemplar);
        detail::fill_context(lib, ep, slots, rng);
        detail::set_query(lib, ep, classes[pick], query_id, labels[pick]);
        return ep;
    }

    const ExemplarLibrary* lib_;
    SamplerConfig cfg_;
    ClassSampler train_classes_;
    ClassSampler iwl_query_classes_;
    ClassSampler uniform_classes_;
};

// Free-function entry points over a temporary sampler.
inline Episode build_train_episode(const ExemplarLibrary& lib, const SamplerConfig& cfg, Rng& rng) {
    require(lib.num_classes() >= 4, "training episodes need K >= 4");
    return EpisodeSampler(lib, cfg).train_episode(rng);
}
inline Episode build_icl_eval_episode(const ExemplarLibrary& lib, Rng& rng, const SamplerConfig& cfg = {}) {
    return EpisodeSampler(lib, cfg).icl_eval_episode(rng);
}
inline Episode build_iwl_eval_episode(const ExemplarLibrary& lib, Rng& rng, double query_distribution_alpha = 0.0) {
    return EpisodeSampler(lib, SamplerConfig{}, query_distribution_alpha).iwl_eval_episode(rng);
}
inline Episode build_flipped_icl_episode(const ExemplarLibrary& lib, Rng& rng) {
    return EpisodeSampler(lib, SamplerConfig{}).flipped_icl_episode(rng);
}
inline Episode build_iwl_copy_available_episode(const ExemplarLibrary& lib, Rng& rng) {
    return EpisodeSampler(lib, SamplerConfig{}).iwl_copy_available_episode(rng);
}
inline Episode build_icl_only_train_episode(const ExemplarLibrary& lib, Rng& rng) {
    return EpisodeSampler(lib, SamplerConfig{}).icl_only_train_episode(rng);
}
inline Episode build_iwl_only_train_episode(const ExemplarLibrary& lib, Rng& rng) {
    return EpisodeSampler(lib, SamplerConfig{}).iwl_only_train_episode(rng);
}

// ---------------------------------------------------------------------------
// Size of the bursty training-sequence space:
//   K (K-1) * (K-2)(K-3)/2 * 8!/(3! 3!) * E^9

struct SequenceCount {
    boost::multiprecision::cpp_int exact;
    double approx = 0.0;
};

inline SequenceCount count_train_sequences(int num_classes, int exemplars_per_class) {
    using boost::multiprecision::cpp_int;
    require(num_classes >= 4, "count_train_sequences needs K >= 4");
    require(exemplars_per_class >= 1, "count_train_sequences needs E >= 1");
    const cpp_int k = num_classes;
    const cpp_int arrangements = cpp_int(40320) / (cpp_int(6) * 6);
    cpp_int e9 = 1;
    for (int i = 0; i < 9; ++i) {
        e9 *= exemplars_per_class;
    }
    SequenceCount out;
    out.exact = k * (k - 1) * ((k - 2) * (k - 3) / 2) * arrangements * e9;
    out.approx = out.exact.convert_to<double>();
    return out;
}

}  // namespace icl
