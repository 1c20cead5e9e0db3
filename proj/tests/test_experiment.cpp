#include <doctest.h>

#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "debias/experiment.hpp"

using namespace debias;

namespace {

// Small enough to run in seconds, large enough to exercise every path.
const char* kTinyConfig = R"({
  "bias_kind": ["indicator", "dependent"],
  "methods": ["none", "bias_product", "learned_mixin"],
  "seeds": [1, 2],
  "n_train": 800,
  "n_test": 500,
  "epochs": 2,
  "batch_size": 128,
  "learning_rate": 0.001,
  "target_bayes_acc": 0.79
})";

std::string strip_wall_time(const std::string& csv) {
    std::istringstream in(csv);
    std::ostringstream out;
    std::string line;
    while (std::getline(in, line)) {
        const auto cut = line.rfind(',');
        out << line.substr(0, cut) << '\n';
    }
    return out.str();
}

}  // namespace

TEST_CASE("config parsing: defaults, overrides, unknown keys") {
    const auto cfg = parse_experiment_config(kTinyConfig);
    CHECK(cfg.bias_kinds.size() == 2);
    CHECK(cfg.methods.size() == 3);
    CHECK(cfg.n_train == 800);
    CHECK(cfg.n_test == 500);
    CHECK(cfg.train.epochs == 2);
    CHECK(cfg.train.batch_size == 128);
    CHECK(cfg.train.learning_rate == 1e-3);
    CHECK(cfg.train.adam_beta1 == 0.9);
    CHECK(cfg.lambda_h.at(BiasKind::indicator) == 0.01);
    CHECK(cfg.lambda_h.at(BiasKind::excluder) == 0.005);
    CHECK(cfg.lambda_h.at(BiasKind::dependent) == 0.005);
    CHECK(cfg.bias_mode == BiasMode::analytic);
    CHECK_FALSE(cfg.divide_prior);

    const auto defaults = parse_experiment_config("{}");
    CHECK(defaults.n_train == 20000);
    CHECK(defaults.n_test == 10000);
    CHECK(defaults.target_bayes_acc == 0.79);
    CHECK(defaults.train.epochs == 60);
    CHECK(defaults.train.batch_size == 32);
    CHECK(defaults.train.learning_rate == 2e-3);

    CHECK_THROWS_AS(parse_experiment_config(R"({"n_trian": 100})"), std::invalid_argument);
    CHECK_THROWS_AS(parse_experiment_config(R"({"methods": ["bogus"]})"), std::invalid_argument);
    CHECK_THROWS_AS(parse_experiment_config(R"({"seeds": []})"), std::invalid_argument);
    CHECK_THROWS_AS(parse_experiment_config(R"({"lambda_H": -0.1})"), std::invalid_argument);
    CHECK_THROWS_AS(parse_experiment_config(R"({"epochs": 0})"), std::invalid_argument);
    CHECK_THROWS_AS(parse_experiment_config("not json"), std::invalid_argument);

    const auto per_kind = parse_experiment_config(R"({"lambda_H": {"indicator": 0.2}})");
    CHECK(per_kind.lambda_h.at(BiasKind::indicator) == 0.2);
    CHECK(per_kind.lambda_h.at(BiasKind::excluder) == 0.005);

    const auto scalar = parse_experiment_config(R"({"lambda_H": 0.05})");
    CHECK(scalar.lambda_h.at(BiasKind::dependent) == 0.05);
}

TEST_CASE("gradcheck suite: all objectives pass; corruption makes it fail") {
    std::ostringstream out;
    const auto report = gradcheck_suite(out);
    CHECK(report.pass);
    REQUIRE(report.entries.size() == 6);
    for (const auto& entry : report.entries) {
        CHECK(entry.pass);
        CHECK(entry.worst_rel_error < 1e-4);
    }

    // Exactly one entry per objective with a gate path.
    int gate_entries = 0;
    for (const auto& entry : report.entries)
        gate_entries += entry.objective == "learned_mixin" || entry.objective == "learned_mixin_h" ||
                        entry.objective == "binary_ensemble";
    CHECK(gate_entries == 3);

    std::ostringstream out2;
    const auto corrupted = gradcheck_suite(out2, 0.05);
    CHECK_FALSE(corrupted.pass);
}

TEST_CASE("run_experiment: deterministic rows, sensible metrics") {
    const auto cfg = parse_experiment_config(kTinyConfig);
    const double separation = resolve_separation(cfg);

    const auto row = run_experiment(cfg, BiasKind::indicator, Method::none, 1, separation);
    REQUIRE_FALSE(row.failed);
    CHECK(row.run_id == "indicator-none-s1");
    CHECK(row.metrics.acc_in_domain > 0.3);
    CHECK(row.metrics.acc_in_domain <= 1.0);
    CHECK(row.metrics.acc_ood > 0.3);
    CHECK(row.metrics.bias_agreement.has_value());
    CHECK_FALSE(row.metrics.g_mean_ind0.has_value());
    CHECK_FALSE(row.metrics.pearson_g_biasacc.has_value());

    const auto again = run_experiment(cfg, BiasKind::indicator, Method::none, 1, separation);
    const auto csv1 = raw_csv({row});
    const auto csv2 = raw_csv({again});
    CHECK(strip_wall_time(csv1) == strip_wall_time(csv2));

    // Gate diagnostics appear for mixin methods on the dependent bias.
    const auto mixin = run_experiment(cfg, BiasKind::dependent, Method::learned_mixin, 1, separation);
    REQUIRE_FALSE(mixin.failed);
    CHECK(mixin.metrics.g_mean_ind0.has_value());
    CHECK(mixin.metrics.g_mean_ind1.has_value());
    CHECK(mixin.metrics.g_std_ind0.has_value());
    CHECK(mixin.metrics.g_std_ind1.has_value());
}

TEST_CASE("sweep: counts, ordering, aggregate recompute, concurrency") {
    auto cfg = parse_experiment_config(kTinyConfig);
    cfg.parallelism = 1;
    const auto serial = sweep(cfg);
    CHECK_FALSE(serial.any_failed);
    CHECK(serial.raw.size() == 2 * 3 * 2);        // kinds x methods x seeds
    CHECK(serial.table.rows.size() == 2 * 3);     // kinds x methods

    // Raw rows keep the configured (kind, method, seed) order.
    CHECK(serial.raw.front().run_id == "indicator-none-s1");
    CHECK(serial.raw.back().run_id == "dependent-learned_mixin-s2");

    cfg.parallelism = 3;
    const auto threaded = sweep(cfg);
    CHECK(strip_wall_time(raw_csv(threaded.raw)) == strip_wall_time(raw_csv(serial.raw)));
    CHECK(aggregate_csv(threaded.table) == aggregate_csv(serial.table));

    // An independent pass over the serialized rows reproduces the aggregates.
    const auto parsed = parse_raw_csv(raw_csv(serial.raw));
    REQUIRE(parsed.size() == serial.raw.size());
    const auto recomputed = aggregate_rows(parsed);
    CHECK(aggregate_csv(recomputed) == aggregate_csv(serial.table));

    for (std::size_t i = 0; i < parsed.size(); ++i) {
        CHECK(parsed[i].run_id == serial.raw[i].run_id);
        CHECK(parsed[i].seed == serial.raw[i].seed);
        CHECK(parsed[i].metrics.acc_ood == serial.raw[i].metrics.acc_ood);
        CHECK(parsed[i].metrics.bias_agreement == serial.raw[i].metrics.bias_agreement);
        CHECK(parsed[i].metrics.g_mean_ind1 == serial.raw[i].metrics.g_mean_ind1);
    }

    // Markdown keeps the reporting order: None first, mixin methods later.
    const auto md = markdown_table(serial.table);
    CHECK(md.find("| None |") != std::string::npos);
    CHECK(md.find("| None |") < md.find("| Bias Product |"));
    CHECK(md.find("| Bias Product |") < md.find("| Learned-Mixin |"));
    CHECK(md.find("Indicator Acc.") != std::string::npos);
}

TEST_CASE("unbiased training: both test splits look alike") {
    auto cfg = parse_experiment_config(R"({
      "bias_kind": "indicator",
      "methods": ["unbiased"],
      "seeds": [3],
      "n_train": 2000,
      "n_test": 2000,
      "epochs": 3,
      "batch_size": 128
    })");
    const auto row = run_experiment(cfg, BiasKind::indicator, Method::unbiased, 3,
                                    resolve_separation(cfg));
    REQUIRE_FALSE(row.failed);
    CHECK(std::abs(row.metrics.acc_in_domain - row.metrics.acc_ood) < 0.06);
}

TEST_CASE("csv schema: header and empty-cell policy") {
    const auto text0 = raw_csv({});
    const auto header = text0.substr(0, text0.find('\n'));
    CHECK(header ==
          "run_id,method,bias,seed,acc_in,acc_ood,bias_agreement,g_mean_ind0,g_std_ind0,"
          "g_mean_ind1,g_std_ind1,pearson_g_biasacc,spearman_g_biasacc,wall_time_s");

    RunRow failed;
    failed.run_id = "indicator-none-s9";
    failed.method = Method::none;
    failed.bias = BiasKind::indicator;
    failed.seed = 9;
    failed.failed = true;
    failed.wall_time_s = 0.25;
    const auto text = raw_csv({failed});
    CHECK(text.find("indicator-none-s9,none,indicator,9,,,,,,,,,,") != std::string::npos);
    const auto parsed = parse_raw_csv(text);
    REQUIRE(parsed.size() == 1);
    CHECK(parsed[0].failed);
}

TEST_CASE("file io round trip") {
    const std::string path = "experiment_io_test.txt";
    write_file(path, "hello\n");
    CHECK(read_file(path) == "hello\n");
    std::remove(path.c_str());
    CHECK_THROWS_AS(read_file("does_not_exist_anywhere.txt"), std::runtime_error);
}
