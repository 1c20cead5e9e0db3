#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "debias/numeric.hpp"

// Synthetic biased-classification benchmark: a 3-class Gaussian base task
// (class means at the vertices of an equilateral triangle in the first two
// coordinates) plus a spurious token feature whose correlation with the
// label differs between train and out-of-domain test splits. Exact Bayes
// oracles over the generative model back the analysis and the tests.

namespace debias {

enum class BiasKind { none, indicator, excluder, dependent };
enum class Split { train, in_domain_test, ood_test };

std::string to_string(BiasKind kind);
std::string to_string(Split split);
BiasKind bias_kind_from_string(std::string_view name);
Split split_from_string(std::string_view name);

struct GenerativeSpec {
    int num_classes = 3;
    int base_dim = 20;
    double separation = 2.5;  // triangle side length; see calibrate_separation
    BiasKind bias_kind = BiasKind::none;

    // Train-split bias emission parameters.
    double indicator_agree = 0.8;    // P(token == y)
    double excluder_agree = 0.03;    // P(token == y)
    double dependent_branch_a = 0.8; // P(reliable branch); appends indicator 0
    double dependent_agree = 0.9;    // P(token == y) inside the reliable branch

    /// Class means: vertices of an equilateral triangle of side `separation`
    /// embedded in the first two coordinates, zero elsewhere.
    std::vector<std::vector<double>> class_means() const;
};

struct SynthExample {
    std::vector<double> base;  // base_dim features
    int token = 0;             // bias token in [0, num_classes)
    int indicator = -1;        // 0/1 for dependent bias, -1 otherwise
    int label = 0;
};

struct SynthDataset {
    GenerativeSpec spec;
    Split split = Split::train;
    std::uint64_t seed = 0;
    std::vector<SynthExample> examples;
};

/// Bisect the triangle side length until the Monte Carlo Bayes accuracy of
/// the base task (200k samples, oracle posterior argmax) lands within
/// `tolerance` of `target_bayes_acc`. Deterministic given the prng seed.
double calibrate_separation(double target_bayes_acc, double tolerance, Prng& prng);

SynthDataset sample_dataset(const GenerativeSpec& spec, std::size_t n, Split split, Prng& prng);

/// Exact P(y | token) under the train-split generative rules and uniform
/// class prior. The dependent indicator is deliberately not an input: the
/// bias-only view sees the token alone.
std::vector<double> analytic_bias_posterior(const GenerativeSpec& spec, int token);

/// Exact P(y | base features) from the Gaussian mixture alone.
std::vector<double> base_posterior(const GenerativeSpec& spec, std::span<const double> base);

/// Exact P(y | base features, token, indicator-if-present) under the
/// train-split generative rules.
std::vector<double> analytic_full_posterior(const GenerativeSpec& spec, const SynthExample& ex);

/// Copy of `ds` with every bias token resampled uniformly; base features,
/// labels and indicators untouched. Identity for bias_kind none.
SynthDataset randomize_bias(const SynthDataset& ds, Prng& prng);

/// Width of the model input: base features, then a one-hot token (except
/// for bias_kind none), then the 0/1 indicator for the dependent bias.
std::size_t input_dim(const GenerativeSpec& spec);

/// Dense model inputs, one row per example, laid out as described above.
Matrix feature_matrix(const SynthDataset& ds);

std::vector<int> labels(const SynthDataset& ds);

std::string dataset_to_json(const SynthDataset& ds);
SynthDataset dataset_from_json(const std::string& text);
void save_dataset(const SynthDataset& ds, const std::string& path);
SynthDataset load_dataset(const std::string& path);

}  // namespace debias
