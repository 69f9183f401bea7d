#pragma once

// Token-embedding matrices (.emb), spherical k-means, and selection of the
// furthest-from-centroid members of sampled clusters as an exemplar library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "icl_lab/binary_io.hpp"
#include "icl_lab/episodes.hpp"
#include "icl_lab/errors.hpp"
#include "icl_lab/parallel.hpp"
#include "icl_lab/rng.hpp"

namespace icl {

class EmbeddingMatrix {
public:
    EmbeddingMatrix() = default;

    EmbeddingMatrix(int rows, int dim, std::vector<float> data) : rows_(rows), dim_(dim), data_(std::move(data)) {
        require(rows >= 1 && dim >= 1, "embedding matrix needs rows >= 1 and dim >= 1");
        require(data_.size() == static_cast<std::size_t>(rows) * static_cast<std::size_t>(dim),
                "embedding data size does not match rows x dim");
        for (float v : data_) {
            require(std::isfinite(v), "embedding matrix contains a non-finite value");
        }
    }

    [[nodiscard]] int rows() const { return rows_; }
    [[nodiscard]] int dim() const { return dim_; }
    [[nodiscard]] const std::vector<float>& data() const { return data_; }

    [[nodiscard]] std::span<const float> row(int r) const {
        require(r >= 0 && r < rows_, "embedding row out of range");
        return {data_.data() + static_cast<std::size_t>(r) * dim_, static_cast<std::size_t>(dim_)};
    }

    bool operator==(const EmbeddingMatrix&) const = default;

private:
    int rows_ = 0;
    int dim_ = 0;
    std::vector<float> data_;
};

// .emb: "EMB1", u32 rows, u32 dim, rows*dim f32 row-major.
inline void write_embeddings(std::ostream& os, const EmbeddingMatrix& m) {
    io::write_magic(os, "EMB1");
    io::write_u32(os, static_cast<std::uint32_t>(m.rows()));
    io::write_u32(os, static_cast<std::uint32_t>(m.dim()));
    io::write_f32_span(os, m.data());
}

inline EmbeddingMatrix read_embeddings(std::istream& is) {
    io::expect_magic(is, "EMB1");
    const auto rows = io::read_u32(is, "rows");
    const auto dim = io::read_u32(is, "dim");
    if (rows == 0 || dim == 0) {
        throw IoError("embedding header has a zero dimension");
    }
    std::vector<float> data(static_cast<std::size_t>(rows) * dim);
    io::read_f32_span(is, data, "embedding values");
    for (std::uint32_t r = 0; r < rows; ++r) {
        double norm = 0.0;
        for (std::uint32_t c = 0; c < dim; ++c) {
            const double v = data[static_cast<std::size_t>(r) * dim + c];
            if (!std::isfinite(v)) {
                throw IoError("embedding row " + std::to_string(r) + " contains a non-finite value");
            }
            norm += v * v;
        }
        if (norm == 0.0) {
            throw IoError("embedding row " + std::to_string(r) + " has zero norm");
        }
    }
    return EmbeddingMatrix(static_cast<int>(rows), static_cast<int>(dim), std::move(data));
}

inline void save_embeddings(const std::string& path, const EmbeddingMatrix& m) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw IoError("cannot open " + path + " for writing");
    }
    write_embeddings(os, m);
    if (!os) {
        throw IoError("failed writing " + path);
    }
}

inline EmbeddingMatrix load_embeddings(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open " + path);
    }
    return read_embeddings(is);
}

// Rows lo..hi inclusive.
inline EmbeddingMatrix subselect_rows(const EmbeddingMatrix& m, int lo, int hi) {
    require(lo >= 0 && lo <= hi && hi < m.rows(),
            "subselect bounds must satisfy 0 <= lo <= hi < rows (got lo=" + std::to_string(lo) +
                ", hi=" + std::to_string(hi) + ", rows=" + std::to_string(m.rows()) + ")");
    const auto d = static_cast<std::size_t>(m.dim());
    std::vector<float> out(m.data().begin() + static_cast<std::ptrdiff_t>(lo * d),
                           m.data().begin() + static_cast<std::ptrdiff_t>((hi + 1) * d));
    return EmbeddingMatrix(hi - lo + 1, m.dim(), std::move(out));
}

// ---------------------------------------------------------------------------
// Spherical k-means

struct KMeansOptions {
    int max_iters = 100;
    double tol = 1e-6;  // relative cost improvement
    int threads = 1;
    int restarts = 10;  // independent seedings; the lowest final cost wins
};

struct ClusterResult {
    int k = 0;
    int dim = 0;
    std::vector<double> centroids;  // k x dim, unit norm
    std::vector<int> assignment;
    double cost = 0.0;                // mean cosine distance to the assigned centroid
    std::vector<double> cost_history;  // one entry per completed iteration
    int iterations = 0;

    [[nodiscard]] std::span<const double> centroid(int c) const {
        return {centroids.data() + static_cast<std::size_t>(c) * dim, static_cast<std::size_t>(dim)};
    }
    [[nodiscard]] std::vector<int> cluster_sizes() const {
        std::vector<int> sizes(static_cast<std::size_t>(k), 0);
        for (int a : assignment) {
            ++sizes[static_cast<std::size_t>(a)];
        }
        return sizes;
    }
};

namespace detail {

inline std::vector<double> unit_rows(const EmbeddingMatrix& m) {
    const auto d = static_cast<std::size_t>(m.dim());
    std::vector<double> out(m.data().begin(), m.data().end());
    for (int r = 0; r < m.rows(); ++r) {
        double* row = out.data() + static_cast<std::size_t>(r) * d;
        double norm = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            norm += row[c] * row[c];
        }
        norm = std::sqrt(norm);
        require(norm > 0.0, "embedding row " + std::to_string(r) + " has zero norm");
        for (std::size_t c = 0; c < d; ++c) {
            row[c] /= norm;
        }
    }
    return out;
}

inline double dot(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double norm(const double* a, std::size_t d) { return std::sqrt(dot(a, a, d)); }

// Cluster sums S_c of unit points; summed in row order.
inline std::vector<double> cluster_sums(const std::vector<double>& x, const std::vector<int>& assignment, int k,
                                        std::size_t d) {
    std::vector<double> sums(static_cast<std::size_t>(k) * d, 0.0);
    for (std::size_t r = 0; r < assignment.size(); ++r) {
        double* s = sums.data() + static_cast<std::size_t>(assignment[r]) * d;
        const double* p = x.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) {
            s[c] += p[c];
        }
    }
    return sums;
}

// Mean of 1 - cos(x, c) with c the normalized cluster sum, which equals
// (N - sum_c |S_c|) / N.
inline double partition_cost(const std::vector<double>& sums, int k, std::size_t d, std::size_t n) {
    double total = 0.0;
    for (int c = 0; c < k; ++c) {
        total += norm(sums.data() + static_cast<std::size_t>(c) * d, d);
    }
    return std::max(0.0, (static_cast<double>(n) - total) / static_cast<double>(n));
}

}  // namespace detail

namespace detail {

// One seeding plus refinement on unit rows `x`.
inline ClusterResult kmeans_single(const std::vector<double>& x, std::size_t n, std::size_t d, int k, Rng rng,
                                   const KMeansOptions& opts) {
    const auto point = [&](std::size_t r) { return x.data() + r * d; };

    ClusterResult res;
    res.k = k;
    res.dim = static_cast<int>(d);
    res.centroids.assign(static_cast<std::size_t>(k) * d, 0.0);
    res.assignment.assign(n, 0);
    auto centroid = [&](int c) { return res.centroids.data() + static_cast<std::size_t>(c) * d; };

    // Seeding.
    std::vector<double> nearest(n, 2.0);
    std::vector<char> chosen(n, 0);
    std::size_t first = rng.uniform_index(static_cast<int>(n));
    for (int c = 0; c < k; ++c) {
        std::size_t pick = first;
        if (c > 0) {
            double total = 0.0;
            for (std::size_t r = 0; r < n; ++r) {
                total += chosen[r] ? 0.0 : nearest[r];
            }
            if (total <= 0.0) {
                // Remaining points duplicate chosen ones: take the first unchosen.
                pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), 0) - chosen.begin());
            } else {
                double u = rng.uniform() * total;
                pick = n;
                for (std::size_t r = 0; r < n; ++r) {
                    if (chosen[r]) {
                        continue;
                    }
                    pick = r;
                    u -= nearest[r];
                    if (u < 0.0) {
                        break;
                    }
                }
            }
        }
        chosen[pick] = 1;
        std::copy(point(pick), point(pick) + d, centroid(c));
        for (std::size_t r = 0; r < n; ++r) {
            nearest[r] = std::min(nearest[r], std::max(0.0, 1.0 - detail::dot(point(r), centroid(c), d)));
        }
    }

    std::vector<double> best_sim(n, 0.0);
    const std::size_t shards = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(opts.threads), n));
    auto assign = [&] {
        run_shards(shards, [&](std::size_t s) {
            const auto [lo, hi] = shard_range(n, shards, s);
            for (std::size_t r = lo; r < hi; ++r) {
                int best = 0;
                double sim = detail::dot(point(r), centroid(0), d);
                for (int c = 1; c < k; ++c) {
                    const double v = detail::dot(point(r), centroid(c), d);
                    if (v > sim) {
                        sim = v;
                        best = c;
                    }
                }
                res.assignment[r] = best;
                best_sim[r] = sim;
            }
        });
    };
    // Recomputes centroids from sums; returns false when no cluster was reseeded.
    auto update = [&](std::vector<double>& sums) {
        bool reseeded = false;
        std::vector<char> taken(n, 0);
        for (int c = 0; c < k; ++c) {
            double* s = sums.data() + static_cast<std::size_t>(c) * d;
            const double len = detail::norm(s, d);
            if (len > 1e-12) {
                for (std::size_t i = 0; i < d; ++i) {
                    centroid(c)[i] = s[i] / len;
                }
                continue;
            }
            // Empty (or degenerate) cluster: reseed from the worst-fitting point.
            std::size_t worst = n;
            for (std::size_t r = 0; r < n; ++r) {
                if (!taken[r] && (worst == n || best_sim[r] < best_sim[worst])) {
                    worst = r;
                }
            }
            taken[worst] = 1;
            std::copy(point(worst), point(worst) + d, centroid(c));
            best_sim[worst] = 1.0;
            reseeded = true;
        }
        return reseeded;
    };

    double prev = std::numeric_limits<double>::infinity();
    int iter = 0;
    std::vector<double> sums;
    for (; iter < opts.max_iters; ++iter) {
        assign();
        sums = detail::cluster_sums(x, res.assignment, k, d);
        const double cost = detail::partition_cost(sums, k, d, n);
        res.cost_history.push_back(cost);
        const bool reseeded = update(sums);
        if (!reseeded && prev - cost <= opts.tol * std::max(prev, 1e-300)) {
            ++iter;
            break;
        }
        prev = cost;
    }

    // Single-point moves: x leaves A for B when |S_A - x| + |S_B + x| > |S_A| + |S_B|.
    assign();
    sums = detail::cluster_sums(x, res.assignment, k, d);
    std::vector<double> len(static_cast<std::size_t>(k));
    std::vector<int> sizes = res.cluster_sizes();
    for (int c = 0; c < k; ++c) {
        len[static_cast<std::size_t>(c)] = detail::norm(sums.data() + static_cast<std::size_t>(c) * d, d);
    }
    for (int pass = 0; pass < opts.max_iters; ++pass) {
        bool moved = false;
        for (std::size_t r = 0; r < n; ++r) {
            const int a = res.assignment[r];
            if (sizes[static_cast<std::size_t>(a)] == 1) {
                continue;
            }
            double* sa = sums.data() + static_cast<std::size_t>(a) * d;
            const double xa = detail::dot(point(r), sa, d);
            const double la = len[static_cast<std::size_t>(a)];
            const double loss = la - std::sqrt(std::max(0.0, la * la - 2.0 * xa + 1.0));
            int target = -1;
            double best_gain = loss + 1e-12;
            for (int b = 0; b < k; ++b) {
                if (b == a) {
                    continue;
                }
                const double lb = len[static_cast<std::size_t>(b)];
                const double xb = detail::dot(point(r), sums.data() + static_cast<std::size_t>(b) * d, d);
                const double gain = std::sqrt(std::max(0.0, lb * lb + 2.0 * xb + 1.0)) - lb;
                if (gain > best_gain) {
                    best_gain = gain;
                    target = b;
                }
            }
            if (target < 0) {
                continue;
            }
            double* sb = sums.data() + static_cast<std::size_t>(target) * d;
            for (std::size_t i = 0; i < d; ++i) {
                sa[i] -= point(r)[i];
                sb[i] += point(r)[i];
            }
            len[static_cast<std::size_t>(a)] = detail::norm(sa, d);
            len[static_cast<std::size_t>(target)] = detail::norm(sb, d);
            --sizes[static_cast<std::size_t>(a)];
            ++sizes[static_cast<std::size_t>(target)];
            res.assignment[r] = target;
            moved = true;
        }
        if (!moved) {
            break;
        }
        // Fresh sums after a pass so rounding does not accumulate.
        sums = detail::cluster_sums(x, res.assignment, k, d);
        for (int c = 0; c < k; ++c) {
            len[static_cast<std::size_t>(c)] = detail::norm(sums.data() + static_cast<std::size_t>(c) * d, d);
        }
        res.cost_history.push_back(detail::partition_cost(sums, k, d, n));
        ++iter;
    }
    for (int c = 0; c < k; ++c) {
        const double* s = sums.data() + static_cast<std::size_t>(c) * d;
        const double l = len[static_cast<std::size_t>(c)];
        if (l > 1e-12) {
            for (std::size_t i = 0; i < d; ++i) {
                centroid(c)[i] = s[i] / l;
            }
        } else {
            // Members cancel out; every unit vector is equally close, keep a member.
            const auto r = static_cast<std::size_t>(std::find(res.assignment.begin(), res.assignment.end(), c) -
                                                    res.assignment.begin());
            if (r < n) {
                std::copy(point(r), point(r) + d, centroid(c));
            }
        }
    }
    res.cost = detail::partition_cost(sums, k, d, n);
    res.iterations = iter;
    return res;
}

}  // namespace detail

// k-means++ seeding under cosine distance, then Lloyd iterations (assign to
// max-cosine centroid, centroid = normalized mean) followed by single-point
// moves that strictly lower the cost. Empty clusters are reseeded from the
// point least similar to its centroid. Repeated for `opts.restarts` seedings;
// the lowest cost wins, ties going to the earliest restart.
inline ClusterResult spherical_kmeans(const EmbeddingMatrix& m, int k, std::uint64_t seed,
                                      const KMeansOptions& opts = {}) {
    require(k >= 1, "k must be >= 1");
    require(k <= m.rows(), "k = " + std::to_string(k) + " exceeds the number of rows (" + std::to_string(m.rows()) + ")");
    require(opts.max_iters >= 1, "max_iters must be >= 1");
    require(opts.tol >= 0.0, "tol must be >= 0");
    require(opts.restarts >= 1, "restarts must be >= 1");
    const std::size_t n = static_cast<std::size_t>(m.rows());
    const std::size_t d = static_cast<std::size_t>(m.dim());
    const std::vector<double> x = detail::unit_rows(m);
    ClusterResult best;
    for (int r = 0; r < opts.restarts; ++r) {
        ClusterResult res = detail::kmeans_single(x, n, d, k, Rng::stream(seed, "kmeans", static_cast<std::uint64_t>(r)), opts);
        if (r == 0 || res.cost < best.cost - 1e-15) {
            best = std::move(res);
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Class selection

inline constexpr int kSubselectFirstToken = 259;
inline constexpr int kSubselectLastToken = 29870;

struct ClusterPreset {
    int k;
    int min_size;
    int num_classes;
    int per_class;
};

inline constexpr ClusterPreset kPreset1600x10{2400, 10, 1600, 10};
inline constexpr ClusterPreset kPreset3200x5{4800, 5, 3200, 5};

// Keeps clusters with more than `min_size` points, samples `num_classes` of
// them uniformly without replacement and, from each, takes the `per_class`
// points with the largest cosine distance to its centroid. Class i of the
// library is the i-th sampled cluster; the stored vectors are the original rows.
inline ExemplarLibrary select_classes(const ClusterResult& c, const EmbeddingMatrix& m, int min_size, int num_classes,
                                      int per_class, std::uint64_t seed) {
    require(per_class >= 1 && num_classes >= 1, "num_classes and per_class must be >= 1");
    require(per_class <= min_size, "per_class must not exceed min_size");
    require(static_cast<int>(c.assignment.size()) == m.rows() && c.dim == m.dim(),
            "cluster result does not match the embedding matrix");
    std::vector<std::vector<int>> members(static_cast<std::size_t>(c.k));
    for (int r = 0; r < m.rows(); ++r) {
        members[static_cast<std::size_t>(c.assignment[static_cast<std::size_t>(r)])].push_back(r);
    }
    std::vector<int> qualifying;
    for (int id = 0; id < c.k; ++id) {
        if (static_cast<int>(members[static_cast<std::size_t>(id)].size()) > min_size) {
            qualifying.push_back(id);
        }
    }
    if (static_cast<int>(qualifying.size()) < num_classes) {
        throw ConfigError("only " + std::to_string(qualifying.size()) + " clusters have more than " +
                          std::to_string(min_size) + " points but " + std::to_string(num_classes) +
                          " classes were requested (shortfall " +
                          std::to_string(num_classes - static_cast<int>(qualifying.size())) + ")");
    }
    Rng rng = Rng::stream(seed, "select_classes", 0);
    for (int i = 0; i < num_classes; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(qualifying.size() - i)));
        std::swap(qualifying[static_cast<std::size_t>(i)], qualifying[static_cast<std::size_t>(j)]);
    }

    const auto d = static_cast<std::size_t>(m.dim());
    std::vector<float> vectors;
    vectors.reserve(static_cast<std::size_t>(num_classes) * per_class * d);
    for (int i = 0; i < num_classes; ++i) {
        const int id = qualifying[static_cast<std::size_t>(i)];
        const auto cen = c.centroid(id);
        struct Ranked {
            double distance;
            std::span<const float> row;
        };
        std::vector<Ranked> ranked;
        for (int r : members[static_cast<std::size_t>(id)]) {
            const auto row = m.row(r);
            double dotp = 0.0, nn = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                dotp += row[k] * cen[k];
                nn += static_cast<double>(row[k]) * row[k];
            }
            ranked.push_back({1.0 - dotp / std::sqrt(nn), row});
        }
        // Ties broken by vector contents so row order never matters.
        std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
            if (a.distance != b.distance) {
                return a.distance > b.distance;
            }
            return std::lexicographical_compare(a.row.begin(), a.row.end(), b.row.begin(), b.row.end());
        });
        for (int p = 0; p < per_class; ++p) {
            vectors.insert(vectors.end(), ranked[static_cast<std::size_t>(p)].row.begin(),
                           ranked[static_cast<std::size_t>(p)].row.end());
        }
    }
    return ExemplarLibrary(num_classes, per_class, m.dim(), std::move(vectors));
}

}  // namespace icl
