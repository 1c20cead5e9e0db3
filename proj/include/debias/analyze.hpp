#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "debias/model.hpp"
#include "debias/synth.hpp"

// Diagnostic measurements over trained classifiers: accuracies, the
// bias-agreement probability, gate statistics, expected bias accuracy and
// the rank/linear correlations. Evaluation always goes through the
// classifier alone; the bias distributions only ever enter as a frozen
// reference, never as part of the prediction.

namespace debias {

/// Class probabilities for every example, evaluated in batches.
Matrix predict_probs(const Classifier& clf, const SynthDataset& ds);

/// Fraction of examples whose argmax p equals the label. Argmax ties break
/// toward the lowest class index.
double accuracy(const Classifier& clf, const SynthDataset& ds);

/// Mean probability the classifier assigns to the class the bias model
/// ranks first, over the examples selected by `slice` (all examples when
/// the predicate is empty). Rejects an empty slice.
double bias_agreement(const Classifier& clf, const SynthDataset& ds, const BiasPredictions& bias,
                      const std::function<bool(const SynthExample&)>& slice = {});

/// Bias-weighted mean score: sum_j scores[j] * b[j] / sum_j b[j]. With
/// one-hot scores this reduces to the bias probability of the labeled class.
double expected_bias_accuracy(std::span<const double> b, std::span<const double> scores);

struct GateStats {
    double mean = 0.0;
    double stddev = 0.0;  // population standard deviation
    std::size_t count = 0;
};

/// Per-example gate values g = softplus(w_mixin . h).
std::vector<double> gate_values(const Classifier& clf, const SynthDataset& ds);

/// Gate statistics g = softplus(w_mixin . h) over the whole dataset.
GateStats gate_statistics(const Classifier& clf, const SynthDataset& ds);

/// Gate statistics split by the dependent indicator (first: indicator 0,
/// second: indicator 1). Rejects datasets without the dependent bias.
std::pair<GateStats, GateStats> gate_statistics_by_indicator(const Classifier& clf,
                                                             const SynthDataset& ds);

/// Product-moment correlation. Rejects inputs shorter than 2 or with zero
/// variance on either side.
double pearson(std::span<const double> x, std::span<const double> y);

/// Fractional ranks (ties get the average of their positions).
std::vector<double> fractional_ranks(std::span<const double> x);

/// Pearson correlation of the fractional ranks.
double spearman(std::span<const double> x, std::span<const double> y);

struct RunMetrics {
    double acc_in_domain = 0.0;
    double acc_ood = 0.0;
    std::optional<double> bias_agreement;
    std::optional<double> g_mean_ind0, g_std_ind0;
    std::optional<double> g_mean_ind1, g_std_ind1;
    std::optional<double> pearson_g_biasacc;
    std::optional<double> spearman_g_biasacc;
};

}  // namespace debias
