#include "debias/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace debias {

void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& moments,
               long t, const TrainConfig& cfg) {
    if (params.size() != grads.size()) throw std::invalid_argument("adam_step: shape mismatch");
    if (moments.m.empty()) {
        moments.m.assign(params.size(), 0.0);
        moments.v.assign(params.size(), 0.0);
    }
    if (moments.m.size() != params.size()) throw std::invalid_argument("adam_step: stale moments");

    const double step_size =
        cfg.learning_rate * std::pow(cfg.lr_decay, static_cast<double>(t / 100));
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        moments.m[i] = cfg.adam_beta1 * moments.m[i] + (1.0 - cfg.adam_beta1) * grads[i];
        moments.v[i] = cfg.adam_beta2 * moments.v[i] + (1.0 - cfg.adam_beta2) * grads[i] * grads[i];
        const double mhat = moments.m[i] / c1;
        const double vhat = moments.v[i] / c2;
        params[i] -= step_size * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
}

namespace {

bool method_uses_bias(Method m) {
    return m == Method::reweight || m == Method::bias_product || m == Method::learned_mixin ||
           m == Method::learned_mixin_h;
}

bool method_uses_gate(Method m) {
    return m == Method::learned_mixin || m == Method::learned_mixin_h;
}

}  // namespace

RunRecord train_run(const SynthDataset& ds_train, const TrainConfig& cfg,
                    const EnsembleConfig& ecfg, const BiasPredictions& bias) {
    if (cfg.epochs < 1) throw std::invalid_argument("train_run: epochs must be >= 1");
    if (cfg.batch_size < 1) throw std::invalid_argument("train_run: batch_size must be >= 1");
    if (!(cfg.learning_rate > 0.0)) throw std::invalid_argument("train_run: learning_rate must be > 0");

    const auto t0 = std::chrono::steady_clock::now();

    const Matrix x = feature_matrix(ds_train);
    const std::vector<int> y = labels(ds_train);
    const std::size_t n = x.rows;
    const std::size_t num_classes = static_cast<std::size_t>(ds_train.spec.num_classes);
    const bool uses_bias = method_uses_bias(ecfg.method);
    const bool uses_gate = method_uses_gate(ecfg.method);
    if (uses_bias && (bias.b.rows != n || bias.b.cols != num_classes))
        throw std::invalid_argument("train_run: bias predictions do not match the dataset");

    Prng prng(cfg.seed);
    RunRecord rec;
    rec.config = cfg;
    rec.ensemble = ecfg;
    rec.classifier = init_classifier(x.cols, kDefaultHidden, num_classes, prng);

    std::vector<AdamMoments> moments(rec.classifier.param_blocks().size());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    const std::size_t bsz = static_cast<std::size_t>(cfg.batch_size);
    Matrix xb;
    BiasPredictions bias_view;
    std::vector<int> yb;
    long step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with the run's own prng.
        for (std::size_t i = n - 1; i > 0; --i) {
            const std::size_t j = prng.uniform_index(i + 1);
            std::swap(order[i], order[j]);
        }

        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n; start += bsz) {
            const std::size_t bn = std::min(bsz, n - start);
            xb = Matrix(bn, x.cols);
            yb.resize(bn);
            if (uses_bias) bias_view.b = Matrix(bn, num_classes);
            for (std::size_t i = 0; i < bn; ++i) {
                const std::size_t src = order[start + i];
                const auto row = x.row(src);
                std::copy(row.begin(), row.end(), xb.row(i).begin());
                yb[i] = y[src];
                if (uses_bias) {
                    const auto brow = bias.b.row(src);
                    std::copy(brow.begin(), brow.end(), bias_view.b.row(i).begin());
                }
            }

            const ForwardTrace trace = forward(rec.classifier, xb);
            std::vector<double> g;
            if (uses_gate) g = gating(rec.classifier, trace);

            auto [report, grads] = ensemble_loss_and_grad(ecfg, trace, g, bias_view, yb);

            const Gradients pgrads = backward(rec.classifier, trace, xb, grads.d_logits, grads.d_g);

            ++step;
            auto params = rec.classifier.param_blocks();
            const auto gblocks = pgrads.param_blocks();
            for (std::size_t blk = 0; blk < params.size(); ++blk)
                adam_step(params[blk], gblocks[blk], moments[blk], step, cfg);

            epoch_loss += report.total_loss * static_cast<double>(bn);
        }
        rec.loss_history.push_back(epoch_loss / static_cast<double>(n));
    }

    rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

RunRecord train_run(const SynthDataset& ds_train, const TrainConfig& cfg,
                    const EnsembleConfig& ecfg, BiasMode bias_mode) {
    BiasPredictions bias;
    if (method_uses_bias(ecfg.method)) {
        Prng bias_prng(cfg.seed ^ fnv1a64("bias_only"));
        bias = fit_bias_only(ds_train, bias_mode, bias_prng);
    }
    return train_run(ds_train, cfg, ecfg, bias);
}

std::string run_record_to_json(const RunRecord& rec) {
    nlohmann::json doc = {
        {"config",
         {{"epochs", rec.config.epochs},
          {"batch_size", rec.config.batch_size},
          {"learning_rate", rec.config.learning_rate},
          {"adam_beta1", rec.config.adam_beta1},
          {"adam_beta2", rec.config.adam_beta2},
          {"adam_eps", rec.config.adam_eps},
          {"lr_decay", rec.config.lr_decay},
          {"seed", rec.config.seed}}},
        {"ensemble",
         {{"method", to_string(rec.ensemble.method)},
          {"lambda_H", rec.ensemble.lambda_h},
          {"divide_prior", rec.ensemble.divide_prior},
          {"alpha", rec.ensemble.alpha}}},
        {"loss_history", rec.loss_history},
        {"classifier", nlohmann::json::parse(classifier_to_json(rec.classifier))},
        {"wall_time_s", rec.wall_time_s},
    };
    return doc.dump();
}

}  // namespace debias
