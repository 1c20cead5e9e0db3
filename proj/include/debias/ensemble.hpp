#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "debias/model.hpp"
#include "debias/numeric.hpp"

// Debiasing objectives. Each returns the training loss together with the
// upstream gradients (d_logits, d_g) that model::backward propagates into
// the classifier parameters. The bias distributions b are frozen inputs:
// no gradient ever flows into them.

namespace debias {

enum class Method { none, reweight, bias_product, learned_mixin, learned_mixin_h, unbiased };

std::string to_string(Method method);
Method method_from_string(std::string_view name);

struct EnsembleConfig {
    Method method = Method::none;
    double lambda_h = 0.0;     // entropy-penalty weight, learned_mixin_h only
    bool divide_prior = false; // divide the bias by the class prior (bias_product)
    double alpha = 0.0;        // binary-ensemble smoothing parameter, learned

    // Diagnostic switch: clamp the gate to zero (and stop its gradient) so a
    // learned-mixin run can be compared against plain training.
    bool force_gate_zero = false;

    // Empirical train label frequencies; required when divide_prior is on.
    std::vector<double> class_prior;
};

struct LossReport {
    double total_loss = 0.0;
    double data_loss = 0.0;
    double penalty = 0.0;
    std::vector<double> per_example_weights;  // reweight only
    std::vector<double> g_values;             // mixin methods only
};

struct LossGrads {
    Matrix d_logits;            // dL/d(logits), batch x classes
    std::vector<double> d_g;    // dL/dg, batch (empty for non-mixin methods)
};

/// Product of experts: output proportional to p * b, renormalized. With
/// divide_prior the product is divided elementwise by `prior` first.
std::vector<double> bias_product(std::span<const double> p, std::span<const double> b);
std::vector<double> bias_product(std::span<const double> p, std::span<const double> b,
                                 std::span<const double> prior);

/// Gated product: output proportional to p * b^g. Reduces to bias_product
/// at g = 1 and to p at g = 0. g must be nonnegative.
std::vector<double> learned_mixin(std::span<const double> p, std::span<const double> b, double g);

/// lambda_h * H(softmax(g * log b)). Minimizing it pushes the scaled bias
/// component away from uniform, i.e. the gate away from zero.
double entropy_penalty(std::span<const double> b, double g, double lambda_h);

/// Per-example weights 1 - b[i][y_i]. Rejects the degenerate case where
/// every weight is zero.
std::vector<double> reweight_weights(const Matrix& b, std::span<const int> y);

/// Loss and upstream gradients for a batch under the configured method.
/// `g` are the per-example gate values (ignored for non-mixin methods) and
/// must come from the same forward trace.
std::pair<LossReport, LossGrads> ensemble_loss_and_grad(const EnsembleConfig& cfg,
                                                        const ForwardTrace& trace,
                                                        std::span<const double> g,
                                                        const BiasPredictions& bias,
                                                        std::span<const int> y);

/// Two-class learned-mixin over one answer with bias softening
/// b' = (b + sigmoid(alpha)) / (1 + 2 sigmoid(alpha)); returns the ensembled
/// positive-class probability.
double binary_ensemble(double p, double b, double g, double alpha);

struct BinaryEnsembleGrad {
    double value = 0.0;
    double d_p = 0.0;
    double d_g = 0.0;
    double d_alpha = 0.0;
};

BinaryEnsembleGrad binary_ensemble_with_grad(double p, double b, double g, double alpha);

}  // namespace debias
