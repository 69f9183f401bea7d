#pragma once

// A compact pre-norm causal transformer over interleaved exemplar/label
// sequences with hand-written backward pass. Templated on the scalar type:
// float for training, double for gradient checking.
//
// Sequence layout (17 tokens): exemplar_0 label_0 ... exemplar_7 label_7 query.
// Exemplar tokens go through a linear embedder, label tokens through a lookup
// table, and sinusoidal positional encodings are added to every token. Only
// the final (query) position is read out.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "icl_lab/binary_io.hpp"
#include "icl_lab/episodes.hpp"
#include "icl_lab/errors.hpp"
#include "icl_lab/rng.hpp"

namespace icl {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

enum class ParamGroup { Embedder, Attention, Mlp, Norm, Head };

inline std::string_view group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::Embedder: return "embedder";
        case ParamGroup::Attention: return "attention";
        case ParamGroup::Mlp: return "mlp";
        case ParamGroup::Norm: return "norm";
        case ParamGroup::Head: return "head";
    }
    return "unknown";
}

inline std::optional<ParamGroup> parse_group(std::string_view s) {
    for (auto g : {ParamGroup::Embedder, ParamGroup::Attention, ParamGroup::Mlp, ParamGroup::Norm,
                   ParamGroup::Head}) {
        if (group_name(g) == s) {
            return g;
        }
    }
    return std::nullopt;
}

struct ModelConfig {
    int layers = 12;
    int model_dim = 64;
    int heads = 8;
    int mlp_hidden = 256;
    int label_vocab = 1600;
    int exemplar_dim = 64;
    int seq_len = kSeqLen;
    double pe_timescale = 30.0;
    double init_scale = 0.02;

    [[nodiscard]] int head_dim() const { return model_dim / heads; }

    void validate() const {
        require(layers >= 1, "layers must be >= 1");
        require(model_dim >= 2 && model_dim % 2 == 0, "model_dim must be even and >= 2");
        require(heads >= 1 && model_dim % heads == 0, "model_dim must be divisible by heads");
        require(mlp_hidden >= 1, "mlp_hidden must be >= 1");
        require(label_vocab >= 2, "label_vocab must be >= 2");
        require(exemplar_dim >= 1, "exemplar_dim must be >= 1");
        require(seq_len == kSeqLen, "seq_len is fixed at 17");
        require(pe_timescale > 0.0, "pe_timescale must be positive");
        require(init_scale >= 0.0, "init_scale must be non-negative");
    }

    bool operator==(const ModelConfig&) const = default;
};

// Shape-defining fields match; real-valued fields compared at checkpoint (f32) precision.
inline bool same_architecture(const ModelConfig& a, const ModelConfig& b) {
    return a.layers == b.layers && a.model_dim == b.model_dim && a.heads == b.heads &&
           a.mlp_hidden == b.mlp_hidden && a.label_vocab == b.label_vocab && a.exemplar_dim == b.exemplar_dim &&
           a.seq_len == b.seq_len && static_cast<float>(a.pe_timescale) == static_cast<float>(b.pe_timescale);
}

// Sinusoidal position code: (sin, cos) pairs at frequencies timescale^(-2i/D).
template <typename T = double>
RowVector<T> sinusoidal_pe(int pos, int dim, double timescale) {
    require(dim % 2 == 0, "positional encoding dimension must be even");
    require(pos >= 0 && pos < kSeqLen, "position out of range");
    RowVector<T> pe(dim);
    for (int i = 0; i < dim / 2; ++i) {
        const double angle = pos / std::pow(timescale, 2.0 * i / dim);
        pe(2 * i) = static_cast<T>(std::sin(angle));
        pe(2 * i + 1) = static_cast<T>(std::cos(angle));
    }
    return pe;
}

template <typename T>
struct ParamTensor {
    std::string name;
    ParamGroup group;
    Matrix<T> value;
};

struct LayerSlots {
    std::size_t ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

// All trainable tensors, in a fixed order. The same type doubles as the
// gradient container (identical names, shapes and groups).
template <typename T>
class ModelParams {
public:
    ModelParams() = default;

    static ModelParams zeros(const ModelConfig& cfg) {
        cfg.validate();
        ModelParams p;
        p.cfg_ = cfg;
        const int d = cfg.model_dim;
        auto add = [&](std::string name, ParamGroup g, int rows, int cols) {
            p.tensors_.push_back({std::move(name), g, Matrix<T>::Zero(rows, cols)});
            return p.tensors_.size() - 1;
        };
        p.exemplar_w_ = add("embed.exemplar.w", ParamGroup::Embedder, cfg.exemplar_dim, d);
        p.exemplar_b_ = add("embed.exemplar.b", ParamGroup::Embedder, 1, d);
        p.label_table_ = add("embed.label", ParamGroup::Embedder, cfg.label_vocab, d);
        for (int l = 0; l < cfg.layers; ++l) {
            const std::string prefix = "layer" + std::to_string(l) + ".";
            LayerSlots s{};
            s.ln1_g = add(prefix + "ln1.g", ParamGroup::Norm, 1, d);
            s.ln1_b = add(prefix + "ln1.b", ParamGroup::Norm, 1, d);
            s.wqkv = add(prefix + "attn.wqkv", ParamGroup::Attention, d, 3 * d);
            s.bqkv = add(prefix + "attn.bqkv", ParamGroup::Attention, 1, 3 * d);
            s.wo = add(prefix + "attn.wo", ParamGroup::Attention, d, d);
            s.bo = add(prefix + "attn.bo", ParamGroup::Attention, 1, d);
            s.ln2_g = add(prefix + "ln2.g", ParamGroup::Norm, 1, d);
            s.ln2_b = add(prefix + "ln2.b", ParamGroup::Norm, 1, d);
            s.w1 = add(prefix + "mlp.w1", ParamGroup::Mlp, d, cfg.mlp_hidden);
            s.b1 = add(prefix + "mlp.b1", ParamGroup::Mlp, 1, cfg.mlp_hidden);
            s.w2 = add(prefix + "mlp.w2", ParamGroup::Mlp, cfg.mlp_hidden, d);
            s.b2 = add(prefix + "mlp.b2", ParamGroup::Mlp, 1, d);
            p.layers_.push_back(s);
        }
        p.final_g_ = add("final_ln.g", ParamGroup::Norm, 1, d);
        p.final_b_ = add("final_ln.b", ParamGroup::Norm, 1, d);
        p.head_w_ = add("head.w", ParamGroup::Head, d, cfg.label_vocab);
        p.head_b_ = add("head.b", ParamGroup::Head, 1, cfg.label_vocab);
        return p;
    }

    // Gaussian init with std init_scale; residual output projections are
    // additionally scaled by 1/sqrt(2L). Norm gains start at 1, biases at 0.
    static ModelParams initialize(const ModelConfig& cfg, std::uint64_t seed) {
        ModelParams p = zeros(cfg);
        Rng rng = Rng::stream(seed, "init");
        const double residual_scale = 1.0 / std::sqrt(2.0 * cfg.layers);
        for (auto& t : p.tensors_) {
            const bool is_bias = t.name.ends_with(".b") || t.name.ends_with(".bqkv") || t.name.ends_with(".bo") ||
                                 t.name.ends_with(".b1") || t.name.ends_with(".b2");
            if (t.group == ParamGroup::Norm) {
                if (t.name.ends_with(".g")) {
                    t.value.setOnes();
                }
                continue;
            }
            if (is_bias) {
                continue;
            }
            double scale = cfg.init_scale;
            if (t.name.ends_with("attn.wo") || t.name.ends_with("mlp.w2")) {
                scale *= residual_scale;
            }
            for (Eigen::Index i = 0; i < t.value.size(); ++i) {
                t.value.data()[i] = static_cast<T>(scale * rng.normal());
            }
        }
        return p;
    }

    [[nodiscard]] const ModelConfig& config() const { return cfg_; }
    [[nodiscard]] std::vector<ParamTensor<T>>& tensors() { return tensors_; }
    [[nodiscard]] const std::vector<ParamTensor<T>>& tensors() const { return tensors_; }
    [[nodiscard]] std::size_t layer_count() const { return layers_.size(); }
    [[nodiscard]] const LayerSlots& layer(std::size_t l) const { return layers_[l]; }

    Matrix<T>& operator[](std::size_t slot) { return tensors_[slot].value; }
    const Matrix<T>& operator[](std::size_t slot) const { return tensors_[slot].value; }

    [[nodiscard]] std::size_t exemplar_w() const { return exemplar_w_; }
    [[nodiscard]] std::size_t exemplar_b() const { return exemplar_b_; }
    [[nodiscard]] std::size_t label_table() const { return label_table_; }
    [[nodiscard]] std::size_t final_g() const { return final_g_; }
    [[nodiscard]] std::size_t final_b() const { return final_b_; }
    [[nodiscard]] std::size_t head_w() const { return head_w_; }
    [[nodiscard]] std::size_t head_b() const { return head_b_; }

    [[nodiscard]] std::optional<std::size_t> find(std::string_view name) const {
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            if (tensors_[i].name == name) {
                return i;
            }
        }
        return std::nullopt;
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) {
            n += static_cast<std::size_t>(t.value.size());
        }
        return n;
    }

    void set_zero() {
        for (auto& t : tensors_) {
            t.value.setZero();
        }
    }

    [[nodiscard]] bool all_finite() const {
        return std::all_of(tensors_.begin(), tensors_.end(), [](const auto& t) { return t.value.allFinite(); });
    }

    [[nodiscard]] bool same_shape(const ModelParams& other) const {
        if (tensors_.size() != other.tensors_.size()) {
            return false;
        }
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            if (tensors_[i].value.rows() != other.tensors_[i].value.rows() ||
                tensors_[i].value.cols() != other.tensors_[i].value.cols()) {
                return false;
            }
        }
        return true;
    }

    // this += scale * other
    void add_scaled(const ModelParams& other, T scale) {
        require(same_shape(other), "parameter shape mismatch");
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            tensors_[i].value += scale * other.tensors_[i].value;
        }
    }

    template <typename U>
    [[nodiscard]] ModelParams<U> cast() const {
        ModelParams<U> out = ModelParams<U>::zeros(cfg_);
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            out.tensors()[i].value = tensors_[i].value.template cast<U>();
        }
        return out;
    }

    bool operator==(const ModelParams& other) const {
        if (!(cfg_ == other.cfg_) || !same_shape(other)) {
            return false;
        }
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            if (tensors_[i].value != other.tensors_[i].value) {
                return false;
            }
        }
        return true;
    }

private:
    ModelConfig cfg_;
    std::vector<ParamTensor<T>> tensors_;
    std::vector<LayerSlots> layers_;
    std::size_t exemplar_w_ = 0, exemplar_b_ = 0, label_table_ = 0;
    std::size_t final_g_ = 0, final_b_ = 0, head_w_ = 0, head_b_ = 0;
};

template <typename T>
struct LayerCache {
    Matrix<T> input;      // residual stream entering the layer
    Matrix<T> ln1_hat;    // normalised input
    Matrix<T> ln1_rstd;   // R x 1
    Matrix<T> ln1_out;
    Matrix<T> qkv;        // R x 3D
    Matrix<T> probs;      // (N*H*T) x T attention weights
    Matrix<T> attn_concat;
    Matrix<T> mid;        // residual after attention
    Matrix<T> ln2_hat;
    Matrix<T> ln2_rstd;
    Matrix<T> ln2_out;
    Matrix<T> mlp_pre;
    Matrix<T> mlp_act;
};

// Everything backward() needs. Consumed (moved from) by backward().
template <typename T>
struct ActivationCache {
    bool valid = false;
    int batch = 0;
    Matrix<T> exemplar_inputs;  // (N*9) x D_x
    std::vector<int> labels;    // N*8 context labels
    std::vector<LayerCache<T>> layers;
    Matrix<T> final_stream;     // residual stream after the last layer, R x D
    Matrix<T> final_hat;        // N x D (query rows only)
    Matrix<T> final_rstd;
    Matrix<T> final_out;
    Matrix<T> logits;           // N x V
};

template <typename T>
struct ForwardResult {
    Matrix<T> logits;
    ActivationCache<T> cache;
};

namespace detail {

template <typename T>
constexpr T kLayerNormEps = static_cast<T>(1e-5);

template <typename T>
void layer_norm_forward(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias, Matrix<T>& hat,
                        Matrix<T>& rstd, Matrix<T>& out) {
    const auto rows = x.rows();
    const auto d = static_cast<T>(x.cols());
    hat.resize(rows, x.cols());
    rstd.resize(rows, 1);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const T mean = x.row(r).sum() / d;
        const auto centered = (x.row(r).array() - mean);
        const T var = centered.square().sum() / d;
        const T inv = T(1) / std::sqrt(var + kLayerNormEps<T>);
        rstd(r, 0) = inv;
        hat.row(r) = centered * inv;
    }
    out = (hat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dout, const Matrix<T>& hat, const Matrix<T>& rstd,
                              const Matrix<T>& gain, Matrix<T>& dgain, Matrix<T>& dbias) {
    dgain.row(0) += (dout.array() * hat.array()).colwise().sum().matrix();
    dbias.row(0) += dout.colwise().sum();
    const Matrix<T> dhat = (dout.array().rowwise() * gain.row(0).array()).matrix();
    const auto d = static_cast<T>(dout.cols());
    Matrix<T> dx(dout.rows(), dout.cols());
    for (Eigen::Index r = 0; r < dout.rows(); ++r) {
        const T mean_dhat = dhat.row(r).sum() / d;
        const T mean_dhat_hat = dhat.row(r).dot(hat.row(r)) / d;
        dx.row(r) = rstd(r, 0) * (dhat.row(r).array() - mean_dhat - hat.row(r).array() * mean_dhat_hat).matrix();
    }
    return dx;
}

// GELU, tanh approximation.
template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);

template <typename T>
Matrix<T> gelu(const Matrix<T>& x) {
    const auto a = x.array();
    return (T(0.5) * a * (T(1) + (kGeluC<T> * (a + kGeluA<T> * a.cube())).tanh())).matrix();
}

template <typename T>
Matrix<T> gelu_backward(const Matrix<T>& x, const Matrix<T>& dout) {
    const auto a = x.array();
    const auto t = (kGeluC<T> * (a + kGeluA<T> * a.cube())).tanh().eval();
    const auto dinner = kGeluC<T> * (T(1) + T(3) * kGeluA<T> * a.square());
    return (dout.array() * (T(0.5) * (T(1) + t) + T(0.5) * a * (T(1) - t.square()) * dinner)).matrix();
}

template <typename T>
Matrix<T> positional_table(const ModelConfig& cfg) {
    Matrix<T> pe(kSeqLen, cfg.model_dim);
    for (int t = 0; t < kSeqLen; ++t) {
        pe.row(t) = sinusoidal_pe<T>(t, cfg.model_dim, cfg.pe_timescale);
    }
    return pe;
}

}  // namespace detail

// Token embeddings plus positional codes for a batch, (N*17) x D.
template <typename T>
Matrix<T> embed_batch(const ModelParams<T>& params, std::span<const Episode> batch, Matrix<T>* exemplar_inputs = nullptr,
                      std::vector<int>* labels = nullptr) {
    const ModelConfig& cfg = params.config();
    const auto n = static_cast<Eigen::Index>(batch.size());
    const int d = cfg.model_dim;
    constexpr int kRowsPerEpisode = kContextPairs + 1;
    Matrix<T> inputs(n * kRowsPerEpisode, cfg.exemplar_dim);
    std::vector<int> label_ids(static_cast<std::size_t>(n) * kContextPairs);
    for (Eigen::Index e = 0; e < n; ++e) {
        const Episode& ep = batch[static_cast<std::size_t>(e)];
        require(ep.exemplar_dim == cfg.exemplar_dim,
                "episode exemplar dim " + std::to_string(ep.exemplar_dim) + " != model exemplar_dim " +
                    std::to_string(cfg.exemplar_dim));
        for (int r = 0; r < kRowsPerEpisode; ++r) {
            const auto src = ep.context_exemplar(r);
            for (int c = 0; c < cfg.exemplar_dim; ++c) {
                inputs(e * kRowsPerEpisode + r, c) = static_cast<T>(src[static_cast<std::size_t>(c)]);
            }
        }
        for (int j = 0; j < kContextPairs; ++j) {
            const int label = ep.labels[static_cast<std::size_t>(j)];
            require(label >= 0 && label < cfg.label_vocab, "context label outside the label vocabulary");
            label_ids[static_cast<std::size_t>(e * kContextPairs + j)] = label;
        }
    }
    const Matrix<T> projected =
        (inputs * params[params.exemplar_w()]).rowwise() + params[params.exemplar_b()].row(0);
    const Matrix<T> pe = detail::positional_table<T>(cfg);
    const Matrix<T>& table = params[params.label_table()];
    Matrix<T> x(n * kSeqLen, d);
    for (Eigen::Index e = 0; e < n; ++e) {
        for (int t = 0; t < kSeqLen; ++t) {
            const Eigen::Index row = e * kSeqLen + t;
            if (t % 2 == 0) {
                x.row(row) = projected.row(e * kRowsPerEpisode + t / 2) + pe.row(t);
            } else {
                x.row(row) = table.row(label_ids[static_cast<std::size_t>(e * kContextPairs + t / 2)]) + pe.row(t);
            }
        }
    }
    if (exemplar_inputs != nullptr) {
        *exemplar_inputs = std::move(inputs);
    }
    if (labels != nullptr) {
        *labels = std::move(label_ids);
    }
    return x;
}

// 17 x D embedding of one episode.
template <typename T>
Matrix<T> embed_sequence(const ModelParams<T>& params, const Episode& episode) {
    return embed_batch(params, std::span<const Episode>(&episode, 1));
}

template <typename T>
ForwardResult<T> forward(const ModelParams<T>& params, std::span<const Episode> batch) {
    const ModelConfig& cfg = params.config();
    require(!batch.empty(), "forward needs a non-empty batch");
    const auto n = static_cast<Eigen::Index>(batch.size());
    const int d = cfg.model_dim;
    const int heads = cfg.heads;
    const int hd = cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    ForwardResult<T> result;
    ActivationCache<T>& cache = result.cache;
    cache.batch = static_cast<int>(n);
    Matrix<T> x = embed_batch(params, batch, &cache.exemplar_inputs, &cache.labels);
    cache.layers.resize(params.layer_count());

    for (std::size_t l = 0; l < params.layer_count(); ++l) {
        const LayerSlots& s = params.layer(l);
        LayerCache<T>& lc = cache.layers[l];
        lc.input = std::move(x);
        detail::layer_norm_forward(lc.input, params[s.ln1_g], params[s.ln1_b], lc.ln1_hat, lc.ln1_rstd, lc.ln1_out);
        lc.qkv.noalias() = lc.ln1_out * params[s.wqkv];
        lc.qkv.rowwise() += params[s.bqkv].row(0);

        lc.probs.resize(n * heads * kSeqLen, kSeqLen);
        lc.attn_concat.resize(n * kSeqLen, d);
        Matrix<T> scores(kSeqLen, kSeqLen);
        for (Eigen::Index e = 0; e < n; ++e) {
            for (int h = 0; h < heads; ++h) {
                const auto q = lc.qkv.block(e * kSeqLen, h * hd, kSeqLen, hd);
                const auto k = lc.qkv.block(e * kSeqLen, d + h * hd, kSeqLen, hd);
                const auto v = lc.qkv.block(e * kSeqLen, 2 * d + h * hd, kSeqLen, hd);
                scores.noalias() = q * k.transpose();
                auto p = lc.probs.block((e * heads + h) * kSeqLen, 0, kSeqLen, kSeqLen);
                for (int i = 0; i < kSeqLen; ++i) {
                    T row_max = -std::numeric_limits<T>::infinity();
                    for (int j = 0; j <= i; ++j) {
                        row_max = std::max(row_max, scores(i, j) * scale);
                    }
                    T total = 0;
                    for (int j = 0; j <= i; ++j) {
                        const T w = std::exp(scores(i, j) * scale - row_max);
                        p(i, j) = w;
                        total += w;
                    }
                    for (int j = 0; j <= i; ++j) {
                        p(i, j) /= total;
                    }
                    for (int j = i + 1; j < kSeqLen; ++j) {
                        p(i, j) = 0;
                    }
                }
                lc.attn_concat.block(e * kSeqLen, h * hd, kSeqLen, hd).noalias() = p * v;
            }
        }
        lc.mid = lc.input;
        lc.mid.noalias() += lc.attn_concat * params[s.wo];
        lc.mid.rowwise() += params[s.bo].row(0);

        detail::layer_norm_forward(lc.mid, params[s.ln2_g], params[s.ln2_b], lc.ln2_hat, lc.ln2_rstd, lc.ln2_out);
        lc.mlp_pre.noalias() = lc.ln2_out * params[s.w1];
        lc.mlp_pre.rowwise() += params[s.b1].row(0);
        lc.mlp_act = detail::gelu(lc.mlp_pre);
        x = lc.mid;
        x.noalias() += lc.mlp_act * params[s.w2];
        x.rowwise() += params[s.b2].row(0);
        if (!x.allFinite()) {
            throw DivergenceError("non-finite activations in layer " + std::to_string(l));
        }
    }

    cache.final_stream = std::move(x);
    Matrix<T> query_rows(n, d);
    for (Eigen::Index e = 0; e < n; ++e) {
        query_rows.row(e) = cache.final_stream.row(e * kSeqLen + kSeqLen - 1);
    }
    detail::layer_norm_forward(query_rows, params[params.final_g()], params[params.final_b()], cache.final_hat,
                               cache.final_rstd, cache.final_out);
    cache.logits.noalias() = cache.final_out * params[params.head_w()];
    cache.logits.rowwise() += params[params.head_b()].row(0);
    if (!cache.logits.allFinite()) {
        throw DivergenceError("non-finite activations in output head");
    }
    cache.valid = true;
    result.logits = cache.logits;
    return result;
}

template <typename T>
Matrix<T> logits(const ModelParams<T>& params, std::span<const Episode> batch) {
    return forward(params, batch).logits;
}

inline std::vector<int> targets_of(std::span<const Episode> batch) {
    std::vector<int> t;
    t.reserve(batch.size());
    for (const auto& ep : batch) {
        t.push_back(ep.target_label);
    }
    return t;
}

// Mean cross-entropy of the targets under softmax(logits).
template <typename T>
double loss(const Matrix<T>& logits, std::span<const int> targets) {
    require(static_cast<std::size_t>(logits.rows()) == targets.size(), "one target per logits row required");
    double total = 0.0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const int target = targets[static_cast<std::size_t>(r)];
        require(target >= 0 && target < logits.cols(), "target label outside [0, V)");
        const double m = static_cast<double>(logits.row(r).maxCoeff());
        double z = 0.0;
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
            z += std::exp(static_cast<double>(logits(r, c)) - m);
        }
        total += m + std::log(z) - static_cast<double>(logits(r, target));
    }
    return total / static_cast<double>(logits.rows());
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
    Matrix<T> p(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const T m = logits.row(r).maxCoeff();
        p.row(r) = (logits.row(r).array() - m).exp().matrix();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

// Gradients of the mean cross-entropy with respect to every parameter.
template <typename T>
ModelParams<T> backward(const ModelParams<T>& params, ActivationCache<T>&& cache, std::span<const int> targets) {
    if (!cache.valid) {
        throw ConfigError("backward requires the activation cache of a preceding forward call");
    }
    ActivationCache<T> c = std::move(cache);
    cache.valid = false;
    const ModelConfig& cfg = params.config();
    const Eigen::Index n = c.batch;
    require(static_cast<Eigen::Index>(targets.size()) == n, "one target per episode required");
    const int d = cfg.model_dim;
    const int heads = cfg.heads;
    const int hd = cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    ModelParams<T> g = ModelParams<T>::zeros(cfg);

    Matrix<T> dlogits = softmax_rows(c.logits);
    for (Eigen::Index r = 0; r < n; ++r) {
        const int target = targets[static_cast<std::size_t>(r)];
        require(target >= 0 && target < cfg.label_vocab, "target label outside [0, V)");
        dlogits(r, target) -= T(1);
    }
    dlogits /= static_cast<T>(n);

    g[g.head_w()].noalias() = c.final_out.transpose() * dlogits;
    g[g.head_b()] = dlogits.colwise().sum();
    const Matrix<T> dfinal_out = dlogits * params[params.head_w()].transpose();
    const Matrix<T> dquery = detail::layer_norm_backward(dfinal_out, c.final_hat, c.final_rstd,
                                                         params[params.final_g()], g[g.final_g()], g[g.final_b()]);
    Matrix<T> dx = Matrix<T>::Zero(n * kSeqLen, d);
    for (Eigen::Index e = 0; e < n; ++e) {
        dx.row(e * kSeqLen + kSeqLen - 1) = dquery.row(e);
    }

    Matrix<T> dscores(kSeqLen, kSeqLen);
    Matrix<T> dp(kSeqLen, kSeqLen);
    for (std::size_t li = params.layer_count(); li-- > 0;) {
        const LayerSlots& s = params.layer(li);
        const LayerCache<T>& lc = c.layers[li];

        // MLP sublayer
        g[s.w2].noalias() = lc.mlp_act.transpose() * dx;
        g[s.b2] = dx.colwise().sum();
        const Matrix<T> dact = dx * params[s.w2].transpose();
        const Matrix<T> dpre = detail::gelu_backward(lc.mlp_pre, dact);
        g[s.w1].noalias() = lc.ln2_out.transpose() * dpre;
        g[s.b1] = dpre.colwise().sum();
        const Matrix<T> dln2 = dpre * params[s.w1].transpose();
        dx += detail::layer_norm_backward(dln2, lc.ln2_hat, lc.ln2_rstd, params[s.ln2_g], g[s.ln2_g], g[s.ln2_b]);

        // Attention sublayer
        g[s.wo].noalias() = lc.attn_concat.transpose() * dx;
        g[s.bo] = dx.colwise().sum();
        const Matrix<T> dconcat = dx * params[s.wo].transpose();
        Matrix<T> dqkv(n * kSeqLen, 3 * d);
        for (Eigen::Index e = 0; e < n; ++e) {
            for (int h = 0; h < heads; ++h) {
                const auto q = lc.qkv.block(e * kSeqLen, h * hd, kSeqLen, hd);
                const auto k = lc.qkv.block(e * kSeqLen, d + h * hd, kSeqLen, hd);
                const auto v = lc.qkv.block(e * kSeqLen, 2 * d + h * hd, kSeqLen, hd);
                const auto p = lc.probs.block((e * heads + h) * kSeqLen, 0, kSeqLen, kSeqLen);
                const auto dout = dconcat.block(e * kSeqLen, h * hd, kSeqLen, hd);
                dp.noalias() = dout * v.transpose();
                dqkv.block(e * kSeqLen, 2 * d + h * hd, kSeqLen, hd).noalias() = p.transpose() * dout;
                for (int i = 0; i < kSeqLen; ++i) {
                    T inner = 0;
                    for (int j = 0; j <= i; ++j) {
                        inner += dp(i, j) * p(i, j);
                    }
                    for (int j = 0; j < kSeqLen; ++j) {
                        dscores(i, j) = j <= i ? p(i, j) * (dp(i, j) - inner) * scale : T(0);
                    }
                }
                dqkv.block(e * kSeqLen, h * hd, kSeqLen, hd).noalias() = dscores * k;
                dqkv.block(e * kSeqLen, d + h * hd, kSeqLen, hd).noalias() = dscores.transpose() * q;
            }
        }
        g[s.wqkv].noalias() = lc.ln1_out.transpose() * dqkv;
        g[s.bqkv] = dqkv.colwise().sum();
        const Matrix<T> dln1 = dqkv * params[s.wqkv].transpose();
        dx += detail::layer_norm_backward(dln1, lc.ln1_hat, lc.ln1_rstd, params[s.ln1_g], g[s.ln1_g], g[s.ln1_b]);
    }

    constexpr int kRowsPerEpisode = kContextPairs + 1;
    Matrix<T> dprojected(n * kRowsPerEpisode, d);
    Matrix<T>& dtable = g[g.label_table()];
    for (Eigen::Index e = 0; e < n; ++e) {
        for (int t = 0; t < kSeqLen; ++t) {
            const Eigen::Index row = e * kSeqLen + t;
            if (t % 2 == 0) {
                dprojected.row(e * kRowsPerEpisode + t / 2) = dx.row(row);
            } else {
                dtable.row(c.labels[static_cast<std::size_t>(e * kContextPairs + t / 2)]) += dx.row(row);
            }
        }
    }
    g[g.exemplar_w()].noalias() = c.exemplar_inputs.transpose() * dprojected;
    g[g.exemplar_b()] = dprojected.colwise().sum();
    return g;
}

// Argmax over the allowed labels (all labels when unrestricted); ties go to
// the smaller label index.
template <typename Row>
int predict_from_logits(const Row& logit_row, const std::optional<std::vector<int>>& restricted) {
    if (restricted) {
        require(!restricted->empty(), "restricted label set must not be empty");
        std::vector<int> allowed = *restricted;
        std::sort(allowed.begin(), allowed.end());
        int best = allowed.front();
        for (int label : allowed) {
            require(label >= 0 && label < logit_row.size(), "restricted label outside [0, V)");
            if (logit_row(label) > logit_row(best)) {
                best = label;
            }
        }
        return best;
    }
    int best = 0;
    for (int label = 1; label < static_cast<int>(logit_row.size()); ++label) {
        if (logit_row(label) > logit_row(best)) {
            best = label;
        }
    }
    return best;
}

template <typename T>
int predict(const ModelParams<T>& params, const Episode& episode,
            const std::optional<std::vector<int>>& restricted) {
    const Matrix<T> out = logits(params, std::span<const Episode>(&episode, 1));
    return predict_from_logits(out.row(0), restricted);
}

// ---------------------------------------------------------------------------
// Checkpoints (.ckpt):
//   "NFM1", u32 layers, model_dim, heads, mlp_hidden, label_vocab,
//   exemplar_dim, seq_len, f32 pe_timescale, init_scale, then until EOF:
//   u32 name length, UTF-8 name, u32 rank, rank x u32 dims, f32 data.

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;

    bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
    ModelConfig config;
    std::vector<NamedTensor> tensors;

    [[nodiscard]] const NamedTensor* find(std::string_view name) const {
        for (const auto& t : tensors) {
            if (t.name == name) {
                return &t;
            }
        }
        return nullptr;
    }

    bool operator==(const Checkpoint&) const = default;
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
    const ModelConfig& c = ckpt.config;
    io::write_magic(os, "NFM1");
    for (int v : {c.layers, c.model_dim, c.heads, c.mlp_hidden, c.label_vocab, c.exemplar_dim, c.seq_len}) {
        io::write_u32(os, static_cast<std::uint32_t>(v));
    }
    io::write_f32(os, static_cast<float>(c.pe_timescale));
    io::write_f32(os, static_cast<float>(c.init_scale));
    for (const auto& t : ckpt.tensors) {
        io::write_u32(os, static_cast<std::uint32_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        io::write_u32(os, static_cast<std::uint32_t>(t.dims.size()));
        for (auto dim : t.dims) {
            io::write_u32(os, dim);
        }
        io::write_f32_span(os, t.data);
    }
}

inline Checkpoint read_checkpoint(std::istream& is) {
    io::expect_magic(is, "NFM1");
    Checkpoint ckpt;
    ModelConfig& c = ckpt.config;
    c.layers = static_cast<int>(io::read_u32(is, "layers"));
    c.model_dim = static_cast<int>(io::read_u32(is, "model_dim"));
    c.heads = static_cast<int>(io::read_u32(is, "heads"));
    c.mlp_hidden = static_cast<int>(io::read_u32(is, "mlp_hidden"));
    c.label_vocab = static_cast<int>(io::read_u32(is, "label_vocab"));
    c.exemplar_dim = static_cast<int>(io::read_u32(is, "exemplar_dim"));
    c.seq_len = static_cast<int>(io::read_u32(is, "seq_len"));
    c.pe_timescale = io::read_f32(is, "pe_timescale");
    c.init_scale = io::read_f32(is, "init_scale");
    while (is.peek() != std::char_traits<char>::eof()) {
        NamedTensor t;
        const auto len = io::read_u32(is, "tensor name length");
        if (len > 4096) {
            throw IoError("implausible tensor name length in checkpoint");
        }
        t.name.resize(len);
        is.read(t.name.data(), static_cast<std::streamsize>(len));
        io::check_stream(is, "tensor name");
        const auto rank = io::read_u32(is, "tensor rank");
        if (rank > 8) {
            throw IoError("implausible tensor rank in checkpoint for " + t.name);
        }
        std::size_t count = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            t.dims.push_back(io::read_u32(is, "tensor dims"));
            count *= t.dims.back();
        }
        t.data.resize(count);
        io::read_f32_span(is, t.data, "tensor data");
        ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) {
            throw IoError("cannot open " + tmp + " for writing");
        }
        write_checkpoint(os, ckpt);
        if (!os) {
            throw IoError("failed writing " + tmp);
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw IoError("cannot move " + tmp + " to " + path);
    }
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open " + path);
    }
    return read_checkpoint(is);
}

template <typename T>
NamedTensor to_named(const std::string& name, const Matrix<T>& m) {
    NamedTensor t;
    t.name = name;
    t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    t.data.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        t.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
    }
    return t;
}

template <typename T>
void from_named(const NamedTensor& t, Matrix<T>& m) {
    if (t.dims.size() != 2 || t.dims[0] != static_cast<std::uint32_t>(m.rows()) ||
        t.dims[1] != static_cast<std::uint32_t>(m.cols())) {
        throw IoError("checkpoint tensor " + t.name + " has the wrong shape");
    }
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<T>(t.data[static_cast<std::size_t>(i)]);
    }
}

// Tensors stored under `prefix + name` for every parameter.
template <typename T>
void append_params(Checkpoint& ckpt, const ModelParams<T>& params, const std::string& prefix = "") {
    for (const auto& t : params.tensors()) {
        ckpt.tensors.push_back(to_named(prefix + t.name, t.value));
    }
}

template <typename T>
ModelParams<T> extract_params(const Checkpoint& ckpt, const std::string& prefix = "") {
    ModelParams<T> params = ModelParams<T>::zeros(ckpt.config);
    for (auto& t : params.tensors()) {
        const NamedTensor* stored = ckpt.find(prefix + t.name);
        if (stored == nullptr) {
            throw IoError("checkpoint is missing tensor " + prefix + t.name);
        }
        from_named(*stored, t.value);
    }
    return params;
}

}  // namespace icl
