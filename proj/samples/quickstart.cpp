// Trains a two-layer model for a few hundred steps on a small Gaussian
// library and prints the evaluator accuracies.

#include <cstdio>

#include "icl_lab/trainer.hpp"

int main() {
    const icl::ExemplarLibrary lib = icl::make_gaussian_library(64, 20, 16, 1.0, 0.2, 1);

    icl::TrainConfig cfg;
    cfg.model.layers = 2;
    cfg.model.model_dim = 32;
    cfg.model.heads = 4;
    cfg.model.mlp_hidden = 128;
    cfg.model.label_vocab = lib.num_classes();
    cfg.model.exemplar_dim = lib.exemplar_dim();
    cfg.optim.warmup_steps = 100;
    cfg.optim.peak_lr = 1e-3;
    cfg.total_steps = 400;
    cfg.eval_every = 100;
    cfg.eval_episodes_per_family = 200;

    icl::RunOptions opts;
    opts.threads = 1;
    opts.on_record = [](const icl::MetricRecord& r) {
        std::printf("step %4lld  loss %.3f  train %.2f  icl %.2f  iwl %.2f  flipped %.2f\n", r.step, r.train_loss,
                    r.train_acc, r.icl_acc, r.iwl_acc, r.flipped_icl_acc);
        return true;
    };
    icl::run_experiment(cfg, lib, opts);
}
