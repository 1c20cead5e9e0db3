#pragma once

#include <cstdint>
#include <vector>

#include "debias/ensemble.hpp"
#include "debias/model.hpp"
#include "debias/synth.hpp"

// Adam optimizer and the end-to-end training loop for one
// (method, bias kind, seed) configuration. A run owns all of its mutable
// state; everything it touches is derived from the seed, so a rerun with
// the same inputs reproduces the loss history exactly.

namespace debias {

// Defaults tuned so a default-scale run reaches the loss plateau of every
// objective, including the slow gate saturation of the learned-mixin
// ensembles; 60 epochs at batch 32 is 37.5k optimizer steps on the default
// 20k-example train split.
struct TrainConfig {
    int epochs = 60;
    int batch_size = 32;
    double learning_rate = 2e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double lr_decay = 1.0;  // step size multiplier applied every 100 steps
    std::uint64_t seed = 0;
};

struct AdamMoments {
    std::vector<double> m;
    std::vector<double> v;
};

/// One Adam update on a parameter block. `t` is the 1-based global step;
/// the step size is learning_rate * lr_decay^(t div 100) with bias-corrected
/// moments.
void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& moments,
               long t, const TrainConfig& cfg);

struct RunRecord {
    TrainConfig config;
    EnsembleConfig ensemble;
    std::vector<double> loss_history;  // per-epoch mean total loss
    Classifier classifier;
    double wall_time_s = 0.0;
};

/// JSON mirror of a run record (config echo, loss history, final model).
std::string run_record_to_json(const RunRecord& rec);

/// Train with precomputed (frozen) bias predictions. `bias.b` may be empty
/// for methods that do not consume it.
RunRecord train_run(const SynthDataset& ds_train, const TrainConfig& cfg,
                    const EnsembleConfig& ecfg, const BiasPredictions& bias);

/// Fit the bias-only model on ds_train, freeze its predictions, then train.
/// For Method::unbiased the caller must pass a dataset that already went
/// through randomize_bias.
RunRecord train_run(const SynthDataset& ds_train, const TrainConfig& cfg,
                    const EnsembleConfig& ecfg, BiasMode bias_mode);

}  // namespace debias
