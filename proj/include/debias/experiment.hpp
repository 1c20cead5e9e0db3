#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "debias/analyze.hpp"
#include "debias/ensemble.hpp"
#include "debias/train.hpp"

// Experiment runner: JSON config parsing, single runs, method x bias x seed
// sweeps with a bounded worker pool, and CSV/markdown reporting.

namespace debias {

struct ExperimentConfig {
    std::vector<BiasKind> bias_kinds = {BiasKind::indicator};
    std::vector<Method> methods = {Method::none};
    std::vector<std::uint64_t> seeds = {1};
    std::size_t n_train = 20000;
    std::size_t n_test = 10000;
    double target_bayes_acc = 0.79;
    double bayes_tolerance = 0.01;
    TrainConfig train;  // per-run seed is filled in by the runner
    std::map<BiasKind, double> lambda_h = {
        {BiasKind::none, 0.01},
        {BiasKind::indicator, 0.01},
        {BiasKind::excluder, 0.005},
        {BiasKind::dependent, 0.005},
    };
    BiasMode bias_mode = BiasMode::analytic;
    bool divide_prior = false;
    int parallelism = 0;  // 0 = DEBIAS_PARALLELISM env var, then hardware
    std::string out_csv = "results.csv";
    std::string out_agg_csv;   // default: out_csv with an _agg suffix
    std::string out_markdown = "results.md";
};

/// Parse a config document. Unknown keys are rejected so typos fail loudly.
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

/// Calibrate the base-task separation for this config. Deterministic: the
/// calibration stream is seeded by a fixed constant, so equal configs give
/// equal task geometry across runs and processes.
double resolve_separation(const ExperimentConfig& cfg);

struct RunRow {
    std::string run_id;
    Method method = Method::none;
    BiasKind bias = BiasKind::none;
    std::uint64_t seed = 0;
    RunMetrics metrics;
    double wall_time_s = 0.0;
    bool failed = false;
    std::string error;
};

/// One end-to-end run: generate splits, fit the bias-only model, train the
/// robust model, evaluate both test splits and the diagnostics.
/// `separation` <= 0 means calibrate on the fly.
RunRow run_experiment(const ExperimentConfig& cfg, BiasKind kind, Method method,
                      std::uint64_t seed, double separation = 0.0);

struct AggregateRow {
    Method method = Method::none;
    BiasKind bias = BiasKind::none;
    std::size_t n_seeds = 0;
    double acc_ood_mean = 0.0, acc_ood_std = 0.0;
    double acc_in_mean = 0.0, acc_in_std = 0.0;
};

struct ResultsTable {
    std::vector<AggregateRow> rows;  // canonical method order within each bias kind
};

struct SweepResult {
    std::vector<RunRow> raw;  // ordered by (bias, method, seed) as configured
    ResultsTable table;
    bool any_failed = false;
};

/// Run every (bias kind, method, seed) combination on a bounded worker pool
/// and aggregate. Row order is independent of scheduling.
SweepResult sweep(const ExperimentConfig& cfg);

ResultsTable aggregate_rows(const std::vector<RunRow>& rows);

// Raw CSV schema, one row per run:
// run_id,method,bias,seed,acc_in,acc_ood,bias_agreement,g_mean_ind0,
// g_std_ind0,g_mean_ind1,g_std_ind1,pearson_g_biasacc,spearman_g_biasacc,
// wall_time_s
// Inapplicable fields stay empty. wall_time_s is a measurement and is the
// one column excluded from rerun-identity comparisons.
std::string raw_csv(const std::vector<RunRow>& rows);
std::vector<RunRow> parse_raw_csv(const std::string& text);

std::string aggregate_csv(const ResultsTable& table);
std::string markdown_table(const ResultsTable& table);

void write_file(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

/// Default aggregate-CSV path for a config.
std::string agg_csv_path(const ExperimentConfig& cfg);

struct GradCheckEntry {
    std::string objective;
    double worst_rel_error = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    bool pass = false;
};

/// Finite-difference audit of every objective's hand-derived gradients,
/// >= 20 random instances each, pass bar 1e-4 relative error. `corruption`
/// injects an offset into one analytic gradient component; the negative
/// control in the tests uses it to prove the suite can fail.
GradCheckReport gradcheck_suite(std::ostream& out, double corruption = 0.0);

}  // namespace debias
