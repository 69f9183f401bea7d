#pragma once

// Adam, the warmup + inverse-square-root learning-rate schedule, and an L2
// penalty that can be restricted to chosen parameter groups.

#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <string>

#include "icl_lab/errors.hpp"
#include "icl_lab/nanoformer.hpp"

namespace icl {

struct OptimConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double peak_lr = 3e-4;
    int warmup_steps = 4000;
    int batch_size = 32;

    void validate() const {
        require(beta1 >= 0.0 && beta1 < 1.0, "beta1 must lie in [0, 1)");
        require(beta2 >= 0.0 && beta2 < 1.0, "beta2 must lie in [0, 1)");
        require(eps > 0.0, "eps must be positive");
        require(peak_lr > 0.0, "peak_lr must be positive");
        require(warmup_steps >= 1, "warmup_steps must be >= 1");
        require(batch_size >= 1, "batch_size must be >= 1");
    }
};

inline const std::set<ParamGroup>& non_norm_groups() {
    static const std::set<ParamGroup> groups = {ParamGroup::Embedder, ParamGroup::Attention, ParamGroup::Mlp,
                                                ParamGroup::Head};
    return groups;
}

struct RegularizerConfig {
    double lambda = 0.0;
    std::set<ParamGroup> groups = non_norm_groups();

    void validate() const {
        require(lambda >= 0.0 && std::isfinite(lambda), "L2 lambda must be finite and >= 0");
        require(lambda == 0.0 || !groups.empty(), "L2 groups must be non-empty when lambda > 0");
        require(!groups.contains(ParamGroup::Norm), "norm parameters cannot be L2-regularised");
    }

    [[nodiscard]] bool applies_to(ParamGroup g) const { return g != ParamGroup::Norm && groups.contains(g); }
};

// peak * min(step / warmup, sqrt(warmup / step)); zero at step 0.
inline double lr_at(long long step, const OptimConfig& cfg) {
    require(step >= 0, "learning-rate step must be non-negative");
    if (step == 0) {
        return 0.0;
    }
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(cfg.warmup_steps);
    return cfg.peak_lr * std::min(s / w, std::sqrt(w / s));
}

// lambda * sum(w^2) over selected tensors. When `grads` is non-empty the
// 2*lambda*w contribution is added to the matching gradient tensors.
template <typename T>
double l2_penalty(std::span<const ParamTensor<T>> params, const RegularizerConfig& reg,
                  std::span<ParamTensor<T>> grads = {}) {
    reg.validate();
    require(grads.empty() || grads.size() == params.size(), "gradient set does not match parameter set");
    if (reg.lambda == 0.0) {
        return 0.0;
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (!reg.applies_to(p.group)) {
            continue;
        }
        sum += p.value.template cast<double>().squaredNorm();
        if (!grads.empty()) {
            grads[i].value += static_cast<T>(2.0 * reg.lambda) * p.value;
        }
    }
    return reg.lambda * sum;
}

template <typename T>
double l2_penalty(const ModelParams<T>& params, const RegularizerConfig& reg, ModelParams<T>* grads = nullptr) {
    std::span<ParamTensor<T>> g;
    if (grads != nullptr) {
        require(grads->same_shape(params), "gradient set does not match parameter set");
        g = grads->tensors();
    }
    return l2_penalty<T>(std::span<const ParamTensor<T>>(params.tensors()), reg, g);
}

template <typename T>
struct AdamState {
    ModelParams<T> first_moment;
    ModelParams<T> second_moment;
    std::uint64_t step = 0;

    static AdamState for_params(const ModelParams<T>& params) {
        return {ModelParams<T>::zeros(params.config()), ModelParams<T>::zeros(params.config()), 0};
    }
};

// Bias-corrected Adam update with learning rate `lr`.
template <typename T>
void adam_step(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state, double lr,
               const OptimConfig& cfg) {
    require(params.same_shape(grads), "gradient shape mismatch in adam_step");
    require(params.same_shape(state.first_moment) && params.same_shape(state.second_moment),
            "optimizer state shape mismatch in adam_step");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const T b1 = static_cast<T>(cfg.beta1);
    const T b2 = static_cast<T>(cfg.beta2);
    const T correction1 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
    const T correction2 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
    const T step_size = static_cast<T>(lr);
    const T eps = static_cast<T>(cfg.eps);
    for (std::size_t i = 0; i < params.tensors().size(); ++i) {
        auto w = params.tensors()[i].value.array();
        const auto g = grads.tensors()[i].value.array();
        auto m = state.first_moment.tensors()[i].value.array();
        auto v = state.second_moment.tensors()[i].value.array();
        m = b1 * m + (T(1) - b1) * g;
        v = b2 * v + (T(1) - b2) * g.square();
        w -= step_size * (m * correction1) / ((v * correction2).sqrt() + eps);
    }
}

// Optimizer state inside a checkpoint: "adam.m/<name>", "adam.v/<name>" and
// "adam.step" (four exact 16-bit limbs, least significant first).
template <typename T>
void append_adam_state(Checkpoint& ckpt, const AdamState<T>& state) {
    append_params(ckpt, state.first_moment, "adam.m/");
    append_params(ckpt, state.second_moment, "adam.v/");
    NamedTensor step{"adam.step", {4}, {}};
    for (int limb = 0; limb < 4; ++limb) {
        step.data.push_back(static_cast<float>((state.step >> (16 * limb)) & 0xFFFF));
    }
    ckpt.tensors.push_back(std::move(step));
}

template <typename T>
AdamState<T> extract_adam_state(const Checkpoint& ckpt) {
    AdamState<T> state;
    state.first_moment = extract_params<T>(ckpt, "adam.m/");
    state.second_moment = extract_params<T>(ckpt, "adam.v/");
    const NamedTensor* step = ckpt.find("adam.step");
    if (step == nullptr || step->data.size() != 4) {
        throw IoError("checkpoint is missing the adam.step tensor");
    }
    for (int limb = 0; limb < 4; ++limb) {
        state.step |= static_cast<std::uint64_t>(step->data[static_cast<std::size_t>(limb)]) << (16 * limb);
    }
    return state;
}

}  // namespace icl
