#include "debias/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace debias {

namespace {

constexpr std::uint64_t kCalibrationSeed = 0x5ca1ab1ecafef00dull;

const std::vector<Method> kMethodOrder = {Method::none,          Method::reweight,
                                          Method::bias_product,  Method::learned_mixin,
                                          Method::learned_mixin_h, Method::unbiased};

const std::vector<BiasKind> kKindOrder = {BiasKind::indicator, BiasKind::excluder,
                                          BiasKind::dependent, BiasKind::none};

int order_index(Method m) {
    return static_cast<int>(std::find(kMethodOrder.begin(), kMethodOrder.end(), m) -
                            kMethodOrder.begin());
}

int order_index(BiasKind k) {
    return static_cast<int>(std::find(kKindOrder.begin(), kKindOrder.end(), k) - kKindOrder.begin());
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string format_cell(const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
}

double require_positive(double v, const char* what) {
    if (!(v > 0.0)) throw std::invalid_argument(std::string(what) + " must be positive");
    return v;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw std::invalid_argument("config must be a JSON object");

    static const std::vector<std::string> known = {
        "bias_kind",  "methods",    "seeds",      "n_train",    "n_test",
        "target_bayes_acc", "bayes_tolerance", "epochs", "batch_size", "learning_rate",
        "adam_beta1", "adam_beta2", "adam_eps",   "lr_decay",   "lambda_H",
        "bias_mode",  "divide_prior", "parallelism", "out_csv",  "out_agg_csv",
        "out_markdown"};
    for (const auto& [key, _] : doc.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw std::invalid_argument("unknown config key: " + key);

    ExperimentConfig cfg;
    if (doc.contains("bias_kind")) {
        cfg.bias_kinds.clear();
        const auto& bk = doc.at("bias_kind");
        if (bk.is_string()) {
            cfg.bias_kinds.push_back(bias_kind_from_string(bk.get<std::string>()));
        } else if (bk.is_array()) {
            for (const auto& k : bk) cfg.bias_kinds.push_back(bias_kind_from_string(k.get<std::string>()));
        } else {
            throw std::invalid_argument("bias_kind must be a string or an array of strings");
        }
    }
    if (doc.contains("methods")) {
        cfg.methods.clear();
        for (const auto& m : doc.at("methods")) cfg.methods.push_back(method_from_string(m.get<std::string>()));
    }
    if (doc.contains("seeds")) {
        cfg.seeds.clear();
        for (const auto& s : doc.at("seeds")) cfg.seeds.push_back(s.get<std::uint64_t>());
    }
    if (doc.contains("n_train")) cfg.n_train = doc.at("n_train").get<std::size_t>();
    if (doc.contains("n_test")) cfg.n_test = doc.at("n_test").get<std::size_t>();
    if (doc.contains("target_bayes_acc")) cfg.target_bayes_acc = doc.at("target_bayes_acc").get<double>();
    if (doc.contains("bayes_tolerance")) cfg.bayes_tolerance = doc.at("bayes_tolerance").get<double>();
    if (doc.contains("epochs")) cfg.train.epochs = doc.at("epochs").get<int>();
    if (doc.contains("batch_size")) cfg.train.batch_size = doc.at("batch_size").get<int>();
    if (doc.contains("learning_rate")) cfg.train.learning_rate = doc.at("learning_rate").get<double>();
    if (doc.contains("adam_beta1")) cfg.train.adam_beta1 = doc.at("adam_beta1").get<double>();
    if (doc.contains("adam_beta2")) cfg.train.adam_beta2 = doc.at("adam_beta2").get<double>();
    if (doc.contains("adam_eps")) cfg.train.adam_eps = doc.at("adam_eps").get<double>();
    if (doc.contains("lr_decay")) cfg.train.lr_decay = doc.at("lr_decay").get<double>();
    if (doc.contains("lambda_H")) {
        const auto& lh = doc.at("lambda_H");
        if (lh.is_number()) {
            const double v = lh.get<double>();
            for (auto& [_, slot] : cfg.lambda_h) slot = v;
        } else if (lh.is_object()) {
            for (const auto& [key, value] : lh.items())
                cfg.lambda_h[bias_kind_from_string(key)] = value.get<double>();
        } else {
            throw std::invalid_argument("lambda_H must be a number or an object keyed by bias kind");
        }
    }
    if (doc.contains("bias_mode")) {
        const auto mode = doc.at("bias_mode").get<std::string>();
        if (mode == "analytic")
            cfg.bias_mode = BiasMode::analytic;
        else if (mode == "trained")
            cfg.bias_mode = BiasMode::trained;
        else
            throw std::invalid_argument("bias_mode must be \"analytic\" or \"trained\"");
    }
    if (doc.contains("divide_prior")) cfg.divide_prior = doc.at("divide_prior").get<bool>();
    if (doc.contains("parallelism")) cfg.parallelism = doc.at("parallelism").get<int>();
    if (doc.contains("out_csv")) cfg.out_csv = doc.at("out_csv").get<std::string>();
    if (doc.contains("out_agg_csv")) cfg.out_agg_csv = doc.at("out_agg_csv").get<std::string>();
    if (doc.contains("out_markdown")) cfg.out_markdown = doc.at("out_markdown").get<std::string>();

    if (cfg.bias_kinds.empty()) throw std::invalid_argument("bias_kind must not be empty");
    if (cfg.methods.empty()) throw std::invalid_argument("methods must not be empty");
    if (cfg.seeds.empty()) throw std::invalid_argument("seeds must not be empty");
    if (cfg.n_train == 0 || cfg.n_test == 0)
        throw std::invalid_argument("n_train and n_test must be positive");
    if (!(cfg.target_bayes_acc > 1.0 / 3.0 && cfg.target_bayes_acc < 1.0))
        throw std::invalid_argument("target_bayes_acc must lie in (1/3, 1)");
    require_positive(cfg.bayes_tolerance, "bayes_tolerance");
    if (cfg.train.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (cfg.train.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    require_positive(cfg.train.learning_rate, "learning_rate");
    for (const auto& [kind, v] : cfg.lambda_h)
        if (v < 0.0) throw std::invalid_argument("lambda_H must be nonnegative");
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    return parse_experiment_config(read_file(path));
}

double resolve_separation(const ExperimentConfig& cfg) {
    Prng prng(kCalibrationSeed);
    return calibrate_separation(cfg.target_bayes_acc, cfg.bayes_tolerance, prng);
}

namespace {

std::vector<double> empirical_class_prior(const SynthDataset& ds) {
    std::vector<double> prior(ds.spec.num_classes, 0.0);
    for (const auto& ex : ds.examples) prior[ex.label] += 1.0;
    for (auto& p : prior) p /= static_cast<double>(ds.examples.size());
    return prior;
}

}  // namespace

RunRow run_experiment(const ExperimentConfig& cfg, BiasKind kind, Method method,
                      std::uint64_t seed, double separation) {
    RunRow row;
    row.method = method;
    row.bias = kind;
    row.seed = seed;
    row.run_id = to_string(kind) + "-" + to_string(method) + "-s" + std::to_string(seed);

    const auto t0 = std::chrono::steady_clock::now();
    try {
        if (separation <= 0.0) separation = resolve_separation(cfg);

        GenerativeSpec spec;
        spec.separation = separation;
        spec.bias_kind = kind;

        // Data draws depend on the seed alone, so every method sees the same
        // datasets for a given seed.
        Prng train_prng(seed ^ fnv1a64("data_train"));
        Prng in_prng(seed ^ fnv1a64("data_in_domain"));
        Prng ood_prng(seed ^ fnv1a64("data_ood"));
        SynthDataset ds_train = sample_dataset(spec, cfg.n_train, Split::train, train_prng);
        SynthDataset ds_in = sample_dataset(spec, cfg.n_test, Split::in_domain_test, in_prng);
        const SynthDataset ds_ood = sample_dataset(spec, cfg.n_test, Split::ood_test, ood_prng);

        Prng bias_prng(seed ^ fnv1a64("bias_model"));
        const BiasModel bias_model = fit_bias_model(ds_train, cfg.bias_mode, bias_prng);

        if (method == Method::unbiased) {
            // The upper bound trains and tests on the same randomized
            // features the OOD split uses.
            Prng rt(seed ^ fnv1a64("randomize_train"));
            ds_train = randomize_bias(ds_train, rt);
            Prng ri(seed ^ fnv1a64("randomize_test"));
            ds_in = randomize_bias(ds_in, ri);
        }

        TrainConfig tc = cfg.train;
        tc.seed = seed ^ fnv1a64(to_string(method));

        EnsembleConfig ec;
        ec.method = method;
        ec.lambda_h = method == Method::learned_mixin_h ? cfg.lambda_h.at(kind) : 0.0;
        if (cfg.divide_prior && method == Method::bias_product) {
            ec.divide_prior = true;
            ec.class_prior = empirical_class_prior(ds_train);
        }

        const bool uses_bias = method == Method::reweight || method == Method::bias_product ||
                               method == Method::learned_mixin || method == Method::learned_mixin_h;
        BiasPredictions bias_train;
        if (uses_bias) bias_train = bias_model.predict(ds_train);
        const RunRecord rec = train_run(ds_train, tc, ec, bias_train);

        row.metrics.acc_in_domain = accuracy(rec.classifier, ds_in);
        row.metrics.acc_ood = accuracy(rec.classifier, ds_ood);

        const BiasPredictions bias_ood = bias_model.predict(ds_ood);
        if (kind == BiasKind::dependent) {
            row.metrics.bias_agreement = bias_agreement(
                rec.classifier, ds_ood, bias_ood,
                [](const SynthExample& ex) { return ex.indicator == 1; });
        } else {
            row.metrics.bias_agreement = bias_agreement(rec.classifier, ds_ood, bias_ood);
        }

        const bool mixin = method == Method::learned_mixin || method == Method::learned_mixin_h;
        if (mixin) {
            if (kind == BiasKind::dependent) {
                const auto [s0, s1] = gate_statistics_by_indicator(rec.classifier, ds_ood);
                row.metrics.g_mean_ind0 = s0.mean;
                row.metrics.g_std_ind0 = s0.stddev;
                row.metrics.g_mean_ind1 = s1.mean;
                row.metrics.g_std_ind1 = s1.stddev;
            }
            const auto g = gate_values(rec.classifier, ds_ood);
            std::vector<double> expected_acc(ds_ood.examples.size());
            std::vector<double> onehot(ds_ood.spec.num_classes, 0.0);
            for (std::size_t i = 0; i < ds_ood.examples.size(); ++i) {
                onehot.assign(onehot.size(), 0.0);
                onehot[ds_ood.examples[i].label] = 1.0;
                expected_acc[i] = expected_bias_accuracy(bias_ood.b.row(i), onehot);
            }
            try {
                row.metrics.pearson_g_biasacc = pearson(g, expected_acc);
                row.metrics.spearman_g_biasacc = spearman(g, expected_acc);
            } catch (const std::invalid_argument&) {
                // Zero variance on either side; leave the cells empty.
            }
        }
    } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
    }
    row.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return row;
}

namespace {

int effective_parallelism(const ExperimentConfig& cfg) {
    if (const char* env = std::getenv("DEBIAS_PARALLELISM")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    if (cfg.parallelism > 0) return cfg.parallelism;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace

SweepResult sweep(const ExperimentConfig& cfg) {
    struct Task {
        BiasKind kind;
        Method method;
        std::uint64_t seed;
    };
    std::vector<Task> tasks;
    for (const BiasKind kind : cfg.bias_kinds)
        for (const Method method : cfg.methods)
            for (const std::uint64_t seed : cfg.seeds) tasks.push_back({kind, method, seed});

    const double separation = resolve_separation(cfg);

    SweepResult result;
    result.raw.resize(tasks.size());

    const int workers = std::min<int>(effective_parallelism(cfg), static_cast<int>(tasks.size()));
    if (workers <= 1) {
        for (std::size_t i = 0; i < tasks.size(); ++i)
            result.raw[i] =
                run_experiment(cfg, tasks[i].kind, tasks[i].method, tasks[i].seed, separation);
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&]() {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= tasks.size()) return;
                result.raw[i] =
                    run_experiment(cfg, tasks[i].kind, tasks[i].method, tasks[i].seed, separation);
            }
        };
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    for (const auto& row : result.raw) result.any_failed = result.any_failed || row.failed;
    result.table = aggregate_rows(result.raw);
    return result;
}

ResultsTable aggregate_rows(const std::vector<RunRow>& rows) {
    struct Key {
        BiasKind kind;
        Method method;
        bool operator<(const Key& o) const {
            if (order_index(kind) != order_index(o.kind)) return order_index(kind) < order_index(o.kind);
            return order_index(method) < order_index(o.method);
        }
    };
    std::map<Key, std::vector<const RunRow*>> groups;
    for (const auto& row : rows) {
        if (row.failed) continue;
        groups[{row.bias, row.method}].push_back(&row);
    }
    ResultsTable table;
    for (const auto& [key, members] : groups) {
        AggregateRow agg;
        agg.bias = key.kind;
        agg.method = key.method;
        agg.n_seeds = members.size();
        double sum_ood = 0.0, sum_in = 0.0;
        for (const auto* r : members) {
            sum_ood += r->metrics.acc_ood;
            sum_in += r->metrics.acc_in_domain;
        }
        agg.acc_ood_mean = sum_ood / members.size();
        agg.acc_in_mean = sum_in / members.size();
        double ss_ood = 0.0, ss_in = 0.0;
        for (const auto* r : members) {
            ss_ood += (r->metrics.acc_ood - agg.acc_ood_mean) * (r->metrics.acc_ood - agg.acc_ood_mean);
            ss_in += (r->metrics.acc_in_domain - agg.acc_in_mean) *
                     (r->metrics.acc_in_domain - agg.acc_in_mean);
        }
        agg.acc_ood_std = std::sqrt(ss_ood / members.size());
        agg.acc_in_std = std::sqrt(ss_in / members.size());
        table.rows.push_back(agg);
    }
    return table;
}

std::string raw_csv(const std::vector<RunRow>& rows) {
    std::ostringstream out;
    out << "run_id,method,bias,seed,acc_in,acc_ood,bias_agreement,g_mean_ind0,g_std_ind0,"
           "g_mean_ind1,g_std_ind1,pearson_g_biasacc,spearman_g_biasacc,wall_time_s\n";
    for (const auto& row : rows) {
        out << row.run_id << ',' << to_string(row.method) << ',' << to_string(row.bias) << ','
            << row.seed << ',';
        if (row.failed) {
            out << ",,,,,,,,,";
        } else {
            const auto& m = row.metrics;
            out << format_double(m.acc_in_domain) << ',' << format_double(m.acc_ood) << ','
                << format_cell(m.bias_agreement) << ',' << format_cell(m.g_mean_ind0) << ','
                << format_cell(m.g_std_ind0) << ',' << format_cell(m.g_mean_ind1) << ','
                << format_cell(m.g_std_ind1) << ',' << format_cell(m.pearson_g_biasacc) << ','
                << format_cell(m.spearman_g_biasacc) << ',';
        }
        out << format_double(row.wall_time_s) << '\n';
    }
    return out.str();
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cell);
            cell.clear();
        } else {
            cell.push_back(c);
        }
    }
    cells.push_back(cell);
    return cells;
}

std::optional<double> parse_cell(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
}

}  // namespace

std::vector<RunRow> parse_raw_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw std::invalid_argument("parse_raw_csv: empty document");
    std::vector<RunRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != 14) throw std::invalid_argument("parse_raw_csv: malformed row: " + line);
        RunRow row;
        row.run_id = cells[0];
        row.method = method_from_string(cells[1]);
        row.bias = bias_kind_from_string(cells[2]);
        row.seed = std::stoull(cells[3]);
        const auto acc_in = parse_cell(cells[4]);
        const auto acc_ood = parse_cell(cells[5]);
        row.failed = !acc_in || !acc_ood;
        if (!row.failed) {
            row.metrics.acc_in_domain = *acc_in;
            row.metrics.acc_ood = *acc_ood;
            row.metrics.bias_agreement = parse_cell(cells[6]);
            row.metrics.g_mean_ind0 = parse_cell(cells[7]);
            row.metrics.g_std_ind0 = parse_cell(cells[8]);
            row.metrics.g_mean_ind1 = parse_cell(cells[9]);
            row.metrics.g_std_ind1 = parse_cell(cells[10]);
            row.metrics.pearson_g_biasacc = parse_cell(cells[11]);
            row.metrics.spearman_g_biasacc = parse_cell(cells[12]);
        }
        if (const auto wt = parse_cell(cells[13])) row.wall_time_s = *wt;
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string aggregate_csv(const ResultsTable& table) {
    std::ostringstream out;
    out << "method,bias,n_seeds,acc_ood_mean,acc_ood_std,acc_in_mean,acc_in_std\n";
    for (const auto& row : table.rows) {
        out << to_string(row.method) << ',' << to_string(row.bias) << ',' << row.n_seeds << ','
            << format_double(row.acc_ood_mean) << ',' << format_double(row.acc_ood_std) << ','
            << format_double(row.acc_in_mean) << ',' << format_double(row.acc_in_std) << '\n';
    }
    return out.str();
}

namespace {

std::string display_name(Method m) {
    switch (m) {
        case Method::none: return "None";
        case Method::reweight: return "Reweight";
        case Method::bias_product: return "Bias Product";
        case Method::learned_mixin: return "Learned-Mixin";
        case Method::learned_mixin_h: return "Learned-Mixin +H";
        case Method::unbiased: return "Unbiased Training";
    }
    return "?";
}

std::string display_name(BiasKind k) {
    std::string s = to_string(k);
    s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return s;
}

std::string percent_pm(double mean, double std) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f ± %.2f", mean * 100.0, std * 100.0);
    return buf;
}

}  // namespace

std::string markdown_table(const ResultsTable& table) {
    // Column pairs (Acc., w/Bias) per bias kind, methods as rows.
    std::vector<BiasKind> kinds;
    std::vector<Method> methods;
    for (const auto& row : table.rows) {
        if (std::find(kinds.begin(), kinds.end(), row.bias) == kinds.end()) kinds.push_back(row.bias);
        if (std::find(methods.begin(), methods.end(), row.method) == methods.end())
            methods.push_back(row.method);
    }
    std::sort(kinds.begin(), kinds.end(),
              [](BiasKind a, BiasKind b) { return order_index(a) < order_index(b); });
    std::sort(methods.begin(), methods.end(),
              [](Method a, Method b) { return order_index(a) < order_index(b); });

    std::ostringstream out;
    out << "| Method |";
    for (const auto kind : kinds) out << ' ' << display_name(kind) << " Acc. | " << display_name(kind) << " w/Bias |";
    out << "\n|---|";
    for (std::size_t i = 0; i < kinds.size(); ++i) out << "---|---|";
    out << '\n';
    for (const auto method : methods) {
        out << "| " << display_name(method) << " |";
        for (const auto kind : kinds) {
            const auto it = std::find_if(table.rows.begin(), table.rows.end(), [&](const AggregateRow& r) {
                return r.method == method && r.bias == kind;
            });
            if (it == table.rows.end()) {
                out << " - | - |";
            } else {
                out << ' ' << percent_pm(it->acc_ood_mean, it->acc_ood_std) << " | "
                    << percent_pm(it->acc_in_mean, it->acc_in_std) << " |";
            }
        }
        out << '\n';
    }
    return out.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << content;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::string agg_csv_path(const ExperimentConfig& cfg) {
    if (!cfg.out_agg_csv.empty()) return cfg.out_agg_csv;
    std::string path = cfg.out_csv;
    const auto dot = path.rfind(".csv");
    if (dot != std::string::npos && dot == path.size() - 4)
        return path.substr(0, dot) + "_agg.csv";
    return path + "_agg.csv";
}

// ---------------------------------------------------------------------------
// Gradient audit
// ---------------------------------------------------------------------------

namespace {

struct GradInstance {
    Classifier clf;
    Matrix x;
    std::vector<int> y;
    BiasPredictions bias;
};

GradInstance random_instance(Prng& prng) {
    GradInstance inst;
    const std::size_t input_dim = 6, hidden = 5, classes = 3, batch = 4;
    inst.clf = init_classifier(input_dim, hidden, classes, prng);
    for (auto& v : inst.clf.b1) v = 0.3 * prng.normal();
    for (auto& v : inst.clf.b2) v = 0.3 * prng.normal();
    for (auto& v : inst.clf.w_mixin) v = 0.5 * prng.normal();
    inst.x = Matrix(batch, input_dim);
    for (auto& v : inst.x.data) v = prng.normal();
    inst.y.resize(batch);
    inst.bias.b = Matrix(batch, classes);
    for (std::size_t i = 0; i < batch; ++i) {
        inst.y[i] = static_cast<int>(prng.uniform_index(classes));
        double z = 0.0;
        for (std::size_t j = 0; j < classes; ++j) {
            // Dirichlet(1) row via normalized exponentials.
            inst.bias.b.at(i, j) = -std::log(1.0 - prng.uniform());
            z += inst.bias.b.at(i, j);
        }
        for (std::size_t j = 0; j < classes; ++j) inst.bias.b.at(i, j) /= z;
    }
    return inst;
}

std::vector<double> flatten_params(const Classifier& clf) {
    std::vector<double> theta;
    for (const auto block : clf.param_blocks()) theta.insert(theta.end(), block.begin(), block.end());
    return theta;
}

void unflatten_params(Classifier& clf, const std::vector<double>& theta) {
    std::size_t off = 0;
    for (auto block : clf.param_blocks()) {
        std::copy(theta.begin() + off, theta.begin() + off + block.size(), block.begin());
        off += block.size();
    }
}

std::vector<double> flatten_grads(const Gradients& grads) {
    std::vector<double> flat;
    for (const auto block : grads.param_blocks()) flat.insert(flat.end(), block.begin(), block.end());
    return flat;
}

double relative_error(double a, double n) {
    return std::abs(a - n) / std::max({1e-6, std::abs(a), std::abs(n)});
}

double check_objective(const EnsembleConfig& ecfg, Prng& prng, int instances, double corruption) {
    double worst = 0.0;
    const bool uses_gate =
        ecfg.method == Method::learned_mixin || ecfg.method == Method::learned_mixin_h;
    for (int rep = 0; rep < instances; ++rep) {
        GradInstance inst = random_instance(prng);

        const auto loss_at = [&](const std::vector<double>& theta) {
            Classifier clf = inst.clf;
            unflatten_params(clf, theta);
            const ForwardTrace trace = forward(clf, inst.x);
            std::vector<double> g;
            if (uses_gate) g = gating(clf, trace);
            const auto [report, grads] = ensemble_loss_and_grad(ecfg, trace, g, inst.bias, inst.y);
            return report.total_loss;
        };

        const ForwardTrace trace = forward(inst.clf, inst.x);
        std::vector<double> g;
        if (uses_gate) g = gating(inst.clf, trace);
        const auto [report, upstream] = ensemble_loss_and_grad(ecfg, trace, g, inst.bias, inst.y);
        const Gradients grads = backward(inst.clf, trace, inst.x, upstream.d_logits, upstream.d_g);

        std::vector<double> analytic = flatten_grads(grads);
        if (corruption != 0.0) analytic[0] += corruption;
        const std::vector<double> numeric = finite_diff_grad(loss_at, flatten_params(inst.clf));
        for (std::size_t k = 0; k < analytic.size(); ++k)
            worst = std::max(worst, relative_error(analytic[k], numeric[k]));
    }
    return worst;
}

double check_binary_ensemble(Prng& prng, int instances, double corruption) {
    double worst = 0.0;
    for (int rep = 0; rep < instances; ++rep) {
        const double b = 0.05 + 0.9 * prng.uniform();
        const std::vector<double> theta = {0.05 + 0.9 * prng.uniform(),  // p
                                           3.0 * prng.uniform(),         // g
                                           -2.0 + 4.0 * prng.uniform()}; // alpha
        const auto value_at = [&](const std::vector<double>& t) {
            return binary_ensemble(t[0], b, t[1], t[2]);
        };
        const auto grad = binary_ensemble_with_grad(theta[0], b, theta[1], theta[2]);
        std::vector<double> analytic = {grad.d_p, grad.d_g, grad.d_alpha};
        if (corruption != 0.0) analytic[0] += corruption;
        const auto numeric = finite_diff_grad(value_at, theta);
        for (std::size_t k = 0; k < analytic.size(); ++k)
            worst = std::max(worst, relative_error(analytic[k], numeric[k]));
    }
    return worst;
}

}  // namespace

GradCheckReport gradcheck_suite(std::ostream& out, double corruption) {
    constexpr int kInstances = 20;
    constexpr double kBar = 1e-4;

    GradCheckReport report;

    const auto add_entry = [&](const std::string& name, double worst) {
        GradCheckEntry entry{name, worst, worst < kBar};
        out << (entry.pass ? "[PASS] " : "[FAIL] ") << name << ": worst relative error "
            << format_double(worst) << "\n";
        report.entries.push_back(std::move(entry));
    };

    {
        Prng p(101);
        EnsembleConfig ec;
        ec.method = Method::none;
        add_entry("none", check_objective(ec, p, kInstances, corruption));
    }
    {
        Prng p(102);
        EnsembleConfig ec;
        ec.method = Method::reweight;
        add_entry("reweight", check_objective(ec, p, kInstances, corruption));
    }
    {
        Prng p(103);
        EnsembleConfig ec;
        ec.method = Method::bias_product;
        add_entry("bias_product", check_objective(ec, p, kInstances, corruption));
    }
    {
        Prng p(104);
        EnsembleConfig ec;
        ec.method = Method::learned_mixin;
        add_entry("learned_mixin", check_objective(ec, p, kInstances, corruption));
    }
    {
        Prng p(105);
        EnsembleConfig ec;
        ec.method = Method::learned_mixin_h;
        ec.lambda_h = 0.3;
        add_entry("learned_mixin_h", check_objective(ec, p, kInstances, corruption));
    }
    {
        Prng p(106);
        add_entry("binary_ensemble", check_binary_ensemble(p, kInstances, corruption));
    }

    report.pass = std::all_of(report.entries.begin(), report.entries.end(),
                              [](const GradCheckEntry& e) { return e.pass; });
    return report;
}

}  // namespace debias
