#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "icl_lab/optimstack.hpp"
#include "test_util.hpp"

using namespace icl;

TEST(Schedule, ValuesAndContinuity) {
    const OptimConfig cfg;
    EXPECT_EQ(lr_at(0, cfg), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(4000, cfg), 3e-4);
    EXPECT_DOUBLE_EQ(lr_at(2000, cfg), 1.5e-4);
    EXPECT_DOUBLE_EQ(lr_at(16000, cfg), 1.5e-4);
    EXPECT_NEAR(lr_at(3999, cfg), lr_at(4001, cfg), 1e-7);
    EXPECT_EQ(lr_at(4000, cfg), cfg.peak_lr);
    EXPECT_THROW(lr_at(-1, cfg), ConfigError);
    double prev = 0;
    for (long long s = 1; s <= 4000; s += 37) {
        EXPECT_GT(lr_at(s, cfg), prev);
        prev = lr_at(s, cfg);
    }
}

TEST(L2, HandArithmetic) {
    std::vector<ParamTensor<double>> params{{"w", ParamGroup::Mlp, Matrix<double>(2, 1)}};
    params[0].value << 3, 4;
    std::vector<ParamTensor<double>> grads{{"w", ParamGroup::Mlp, Matrix<double>::Zero(2, 1)}};
    RegularizerConfig reg;
    reg.lambda = 0.1;
    EXPECT_NEAR(l2_penalty<double>(params, reg, grads), 2.5, 1e-15);
    EXPECT_NEAR(grads[0].value(0), 0.6, 1e-15);
    EXPECT_NEAR(grads[0].value(1), 0.8, 1e-15);

    reg.lambda = 0;
    grads[0].value.setZero();
    EXPECT_EQ(l2_penalty<double>(params, reg, grads), 0.0);
    EXPECT_TRUE(grads[0].value.isZero(0.0));

    params[0].group = ParamGroup::Norm;
    grads[0].group = ParamGroup::Norm;
    for (double lambda : {1e-6, 1.0, 1e3}) {
        reg.lambda = lambda;
        EXPECT_EQ(l2_penalty<double>(params, reg, grads), 0.0);
    }
    EXPECT_TRUE(grads[0].value.isZero(0.0));

    reg.lambda = -1;
    EXPECT_THROW(l2_penalty<double>(params, reg), ConfigError);
    reg.lambda = 1e-3;
    reg.groups.clear();
    EXPECT_THROW(l2_penalty<double>(params, reg), ConfigError);
}

TEST(L2, GroupSelectivityLeavesOtherGradientsBitwiseEqual) {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.model_dim = 8;
    cfg.heads = 2;
    cfg.mlp_hidden = 16;
    cfg.label_vocab = 8;
    cfg.exemplar_dim = 4;
    const auto p = ModelParams<float>::initialize(cfg, 1);
    ModelParams<float> base = ModelParams<float>::zeros(cfg);
    Rng rng = Rng::stream(1, "g");
    for (auto& t : base.tensors()) {
        for (Eigen::Index i = 0; i < t.value.size(); ++i) {
            t.value.data()[i] = static_cast<float>(rng.normal());
        }
    }
    ModelParams<float> with = base;
    RegularizerConfig reg;
    reg.lambda = 1e-2;
    reg.groups = {ParamGroup::Mlp};
    double expected = 0;
    for (const auto& t : p.tensors()) {
        if (t.group == ParamGroup::Mlp) {
            expected += t.value.cast<double>().squaredNorm();
        }
    }
    EXPECT_NEAR(l2_penalty(p, reg, &with), 1e-2 * expected, 1e-12);
    for (std::size_t k = 0; k < p.tensors().size(); ++k) {
        if (p.tensors()[k].group == ParamGroup::Mlp) {
            const Matrix<float> expect = base.tensors()[k].value + 2e-2f * p.tensors()[k].value;
            EXPECT_EQ(with.tensors()[k].value, expect) << p.tensors()[k].name;
        } else {
            EXPECT_EQ(with.tensors()[k].value, base.tensors()[k].value) << p.tensors()[k].name;
        }
    }
}

namespace {

ModelParams<double> scalar_params(double w, double g, ModelParams<double>* grads) {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.model_dim = 2;
    cfg.heads = 1;
    cfg.mlp_hidden = 2;
    cfg.label_vocab = 2;
    cfg.exemplar_dim = 1;
    auto p = ModelParams<double>::zeros(cfg);
    *grads = ModelParams<double>::zeros(cfg);
    p[p.head_b()](0, 0) = w;
    (*grads)[grads->head_b()](0, 0) = g;
    return p;
}

}  // namespace

TEST(Adam, FirstStepClosedForm) {
    const OptimConfig cfg;
    for (double g : {2.5, -0.003, 1e-7}) {
        ModelParams<double> grads;
        auto p = scalar_params(1.0, g, &grads);
        auto state = AdamState<double>::for_params(p);
        adam_step(p, grads, state, 1e-3, cfg);
        // m_hat = g, v_hat = g^2 after bias correction.
        EXPECT_NEAR(p[p.head_b()](0, 0), 1.0 - 1e-3 * g / (std::abs(g) + cfg.eps), 1e-15);
        EXPECT_EQ(state.step, 1u);
        // Untouched entries with zero gradient stay put.
        EXPECT_EQ(p[p.head_b()](0, 1), 0.0);
    }
}

TEST(Adam, ZeroGradientFixedPointAndMonotoneMotion) {
    const OptimConfig cfg;
    ModelParams<double> grads;
    auto p = scalar_params(0.7, 0.0, &grads);
    auto state = AdamState<double>::for_params(p);
    for (int i = 0; i < 5; ++i) {
        adam_step(p, grads, state, 1e-2, cfg);
    }
    EXPECT_EQ(p[p.head_b()](0, 0), 0.7);

    grads[grads.head_b()](0, 0) = 0.4;
    double prev = p[p.head_b()](0, 0);
    for (int i = 0; i < 2; ++i) {
        adam_step(p, grads, state, 1e-2, cfg);
        EXPECT_LT(p[p.head_b()](0, 0), prev);
        prev = p[p.head_b()](0, 0);
    }
    ModelParams<double> other;
    scalar_params(0, 0, &other);
    ModelConfig wider = other.config();
    wider.label_vocab = 3;
    auto mismatched = ModelParams<double>::zeros(wider);
    EXPECT_THROW(adam_step(p, mismatched, state, 1e-2, cfg), ConfigError);
}

TEST(Adam, StateRoundTripsThroughCheckpoint) {
    ModelParams<double> grads;
    auto p = scalar_params(0.2, 0.9, &grads);
    auto pf = p.cast<float>();
    auto gf = grads.cast<float>();
    auto state = AdamState<float>::for_params(pf);
    for (int i = 0; i < 70000; i += 7000) {
        adam_step(pf, gf, state, 1e-3, OptimConfig{});
    }
    state.step = 0x0001'2345'6789'ABCDull;
    Checkpoint ckpt;
    ckpt.config = pf.config();
    append_params(ckpt, pf);
    append_adam_state(ckpt, state);
    std::stringstream ss;
    write_checkpoint(ss, ckpt);
    const auto back = extract_adam_state<float>(read_checkpoint(ss));
    EXPECT_EQ(back.step, state.step);
    for (std::size_t k = 0; k < pf.tensors().size(); ++k) {
        EXPECT_EQ(back.first_moment.tensors()[k].value, state.first_moment.tensors()[k].value);
        EXPECT_EQ(back.second_moment.tensors()[k].value, state.second_moment.tensors()[k].value);
    }
}
