#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "debias/numeric.hpp"
#include "debias/synth.hpp"

// The main classifier f(x; theta): one tanh hidden layer feeding a softmax
// output, plus the gating vector w used by the learned-mixin ensembles.
// Gradients are hand-derived and checked against finite differences; there
// is no autodiff anywhere in this project.

namespace debias {

inline constexpr int kDefaultHidden = 64;

struct Classifier {
    std::size_t input_dim = 0;
    std::size_t hidden = 0;
    std::size_t num_classes = 0;

    Matrix w1;                    // hidden x input
    std::vector<double> b1;       // hidden
    Matrix w2;                    // classes x hidden
    std::vector<double> b2;       // classes
    std::vector<double> w_mixin;  // hidden; gating weights for learned-mixin

    /// Mutable views over the five parameter blocks, in a fixed order
    /// shared with Gradients and the optimizer state.
    std::vector<std::span<double>> param_blocks();
    std::vector<std::span<const double>> param_blocks() const;
};

struct Gradients {
    Matrix w1;
    std::vector<double> b1;
    Matrix w2;
    std::vector<double> b2;
    std::vector<double> w_mixin;

    std::vector<std::span<const double>> param_blocks() const;
};

struct ForwardTrace {
    Matrix p;       // batch x classes, rows are simplexes
    Matrix h;       // batch x hidden, post-tanh activations
    Matrix logits;  // batch x classes
};

/// Frozen per-example class distributions from the bias-only model. Never
/// written by robust-model training.
struct BiasPredictions {
    Matrix b;  // examples x classes
};

enum class BiasMode { analytic, trained };

/// Token -> class-distribution table. The analytic mode holds the exact
/// Bayes posterior of the generator; the trained mode holds a softmax-linear
/// model fit on the one-hot token.
struct BiasModel {
    Matrix posterior_by_token;  // tokens x classes

    BiasPredictions predict(const SynthDataset& ds) const;
};

/// Gaussian init with std sqrt(1/fan_in) for the weight matrices; biases and
/// the gating vector start at zero, so the initial gate value is softplus(0).
Classifier init_classifier(std::size_t input_dim, std::size_t hidden, std::size_t num_classes,
                           Prng& prng);

/// h = tanh(W1 x + b1); logits = W2 h + b2; p = softmax(logits).
/// Rejects non-finite activations.
ForwardTrace forward(const Classifier& clf, const Matrix& batch);

/// Per-example gate g = softplus(w_mixin . h).
std::vector<double> gating(const Classifier& clf, const ForwardTrace& trace);

/// Chain rule through the network. d_logits is dL/d(logits); d_g is dL/dg
/// and flows through the softplus into w_mixin and, via h, into W1/b1.
/// Pass an empty d_g when no gating path is in use.
Gradients backward(const Classifier& clf, const ForwardTrace& trace, const Matrix& batch,
                   const Matrix& d_logits, std::span<const double> d_g);

/// Fit the bias-only model on a train split. Trained mode runs 50 full-batch
/// gradient-descent epochs on the one-hot token and must land within mean
/// KL 0.01 of the analytic posterior, else it is rejected as a generator or
/// trainer bug.
BiasModel fit_bias_model(const SynthDataset& ds, BiasMode mode, Prng& prng);

/// Fit on `ds` and return the frozen predictions for `ds` itself.
BiasPredictions fit_bias_only(const SynthDataset& ds, BiasMode mode, Prng& prng);

std::string classifier_to_json(const Classifier& clf);
Classifier classifier_from_json(const std::string& text);

}  // namespace debias
