#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "debias/experiment.hpp"

// Experiment runner CLI.
// Exit codes: 0 success, 1 any failed run row, 2 config error.

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailedRow = 1;
constexpr int kExitConfigError = 2;

// An unreadable config file is a config error, same as a malformed one.
debias::ExperimentConfig load_config(const std::string& path) {
    try {
        return debias::load_experiment_config(path);
    } catch (const std::runtime_error& e) {
        throw std::invalid_argument(e.what());
    }
}

int cmd_sweep(const std::string& config_path) {
    const auto cfg = load_config(config_path);
    const auto result = debias::sweep(cfg);

    debias::write_file(cfg.out_csv, debias::raw_csv(result.raw));
    debias::write_file(debias::agg_csv_path(cfg), debias::aggregate_csv(result.table));
    debias::write_file(cfg.out_markdown, debias::markdown_table(result.table));

    std::cout << debias::markdown_table(result.table) << "\n"
              << "raw rows: " << result.raw.size() << " -> " << cfg.out_csv << "\n"
              << "aggregate: " << debias::agg_csv_path(cfg) << "\n"
              << "markdown: " << cfg.out_markdown << "\n";
    for (const auto& row : result.raw)
        if (row.failed) std::cerr << "FAILED " << row.run_id << ": " << row.error << "\n";
    return result.any_failed ? kExitFailedRow : kExitOk;
}

int cmd_run(const std::string& config_path, const std::string& method_name, std::uint64_t seed) {
    const auto cfg = load_config(config_path);
    const auto method = debias::method_from_string(method_name);

    std::vector<debias::RunRow> rows;
    const double separation = debias::resolve_separation(cfg);
    for (const auto kind : cfg.bias_kinds)
        rows.push_back(debias::run_experiment(cfg, kind, method, seed, separation));

    std::cout << debias::raw_csv(rows);
    bool failed = false;
    for (const auto& row : rows) {
        if (row.failed) {
            failed = true;
            std::cerr << "FAILED " << row.run_id << ": " << row.error << "\n";
        }
    }
    return failed ? kExitFailedRow : kExitOk;
}

int cmd_gradcheck() {
    const auto report = debias::gradcheck_suite(std::cout);
    return report.pass ? kExitOk : kExitFailedRow;
}

int cmd_gen(const std::string& config_path, const std::string& out_path,
            const std::string& split_name) {
    const auto cfg = load_config(config_path);
    const auto split = debias::split_from_string(split_name);

    debias::GenerativeSpec spec;
    spec.separation = debias::resolve_separation(cfg);
    spec.bias_kind = cfg.bias_kinds.front();

    const std::uint64_t seed = cfg.seeds.front();
    const std::string stream =
        split == debias::Split::train
            ? "data_train"
            : (split == debias::Split::in_domain_test ? "data_in_domain" : "data_ood");
    debias::Prng prng(seed ^ debias::fnv1a64(stream));
    const std::size_t n = split == debias::Split::train ? cfg.n_train : cfg.n_test;
    const auto ds = debias::sample_dataset(spec, n, split, prng);
    debias::save_dataset(ds, out_path);
    std::cout << "wrote " << ds.examples.size() << " examples (" << debias::to_string(spec.bias_kind)
              << ", " << split_name << ") to " << out_path << "\n";
    return kExitOk;
}

int cmd_analyze(const std::string& csv_path) {
    const auto rows = debias::parse_raw_csv(debias::read_file(csv_path));
    const auto table = debias::aggregate_rows(rows);
    std::cout << debias::aggregate_csv(table) << "\n" << debias::markdown_table(table);
    bool failed = false;
    for (const auto& row : rows) failed = failed || row.failed;
    return failed ? kExitFailedRow : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bias-robust training laboratory: synthetic biased datasets, "
                 "ensemble debiasing objectives, and diagnostic sweeps."};
    app.require_subcommand(1);

    std::string config_path, out_path, csv_path, method_name;
    std::string split_name = "train";
    std::uint64_t seed = 1;

    auto* sweep_cmd = app.add_subcommand("sweep", "Run the configured method x bias x seed sweep");
    sweep_cmd->add_option("--config", config_path, "JSON experiment config")->required();

    auto* run_cmd = app.add_subcommand("run", "Run a single (method, seed) experiment");
    run_cmd->add_option("--config", config_path, "JSON experiment config")->required();
    run_cmd->add_option("--method", method_name, "Debiasing method name")->required();
    run_cmd->add_option("--seed", seed, "Run seed")->required();

    app.add_subcommand("gradcheck", "Finite-difference audit of every objective's gradients");

    auto* gen_cmd = app.add_subcommand("gen", "Generate a dataset dump");
    gen_cmd->add_option("--config", config_path, "JSON experiment config")->required();
    gen_cmd->add_option("--out", out_path, "Output JSON path")->required();
    gen_cmd->add_option("--split", split_name, "train | in_domain_test | ood_test");

    auto* analyze_cmd = app.add_subcommand("analyze", "Recompute aggregates from a raw results CSV");
    analyze_cmd->add_option("--csv", csv_path, "Raw results CSV")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitConfigError;
    }

    try {
        if (sweep_cmd->parsed()) return cmd_sweep(config_path);
        if (run_cmd->parsed()) return cmd_run(config_path, method_name, seed);
        if (app.get_subcommand("gradcheck")->parsed()) return cmd_gradcheck();
        if (gen_cmd->parsed()) return cmd_gen(config_path, out_path, split_name);
        if (analyze_cmd->parsed()) return cmd_analyze(csv_path);
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailedRow;
    }
    return kExitOk;
}
