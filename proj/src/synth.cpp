#include "debias/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace debias {

std::string to_string(BiasKind kind) {
    switch (kind) {
        case BiasKind::none: return "none";
        case BiasKind::indicator: return "indicator";
        case BiasKind::excluder: return "excluder";
        case BiasKind::dependent: return "dependent";
    }
    throw std::logic_error("unknown BiasKind");
}

std::string to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::in_domain_test: return "in_domain_test";
        case Split::ood_test: return "ood_test";
    }
    throw std::logic_error("unknown Split");
}

BiasKind bias_kind_from_string(std::string_view name) {
    if (name == "none") return BiasKind::none;
    if (name == "indicator") return BiasKind::indicator;
    if (name == "excluder") return BiasKind::excluder;
    if (name == "dependent") return BiasKind::dependent;
    throw std::invalid_argument("unknown bias kind: " + std::string(name));
}

Split split_from_string(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "in_domain_test") return Split::in_domain_test;
    if (name == "ood_test") return Split::ood_test;
    throw std::invalid_argument("unknown split: " + std::string(name));
}

std::vector<std::vector<double>> GenerativeSpec::class_means() const {
    if (num_classes != 3) throw std::invalid_argument("generator is defined for 3 classes");
    if (!(separation > 0.0)) throw std::invalid_argument("separation must be positive");
    // Circumradius of an equilateral triangle with side `separation`.
    const double r = separation / std::sqrt(3.0);
    const double c30 = std::sqrt(3.0) / 2.0;
    std::vector<std::vector<double>> means(3, std::vector<double>(base_dim, 0.0));
    means[0][0] = 0.0;
    means[0][1] = r;
    means[1][0] = -r * c30;
    means[1][1] = -r * 0.5;
    means[2][0] = r * c30;
    means[2][1] = -r * 0.5;
    return means;
}

namespace {

constexpr std::size_t kCalibrationSamples = 200000;

// Unit-side triangle geometry in 2D; the class means are these scaled by
// the side length.
struct UnitTriangle {
    double u[3][2];
    UnitTriangle() {
        const double r = 1.0 / std::sqrt(3.0);
        const double c30 = std::sqrt(3.0) / 2.0;
        u[0][0] = 0.0;
        u[0][1] = r;
        u[1][0] = -r * c30;
        u[1][1] = -r * 0.5;
        u[2][0] = r * c30;
        u[2][1] = -r * 0.5;
    }
};

int token_emission_draw(const GenerativeSpec& spec, int label, Prng& prng) {
    // One categorical draw over all three token values.
    double agree = 0.0;
    switch (spec.bias_kind) {
        case BiasKind::indicator: agree = spec.indicator_agree; break;
        case BiasKind::excluder: agree = spec.excluder_agree; break;
        default: throw std::logic_error("token_emission_draw: wrong bias kind");
    }
    double probs[3];
    for (int c = 0; c < 3; ++c) probs[c] = (c == label) ? agree : (1.0 - agree) / 2.0;
    return static_cast<int>(draw_categorical(prng, {probs, 3}));
}

}  // namespace

double calibrate_separation(double target_bayes_acc, double tolerance, Prng& prng) {
    if (!(target_bayes_acc > 1.0 / 3.0 && target_bayes_acc < 1.0))
        throw std::invalid_argument("calibrate_separation: target must lie in (1/3, 1)");
    if (!(tolerance > 0.0)) throw std::invalid_argument("calibrate_separation: tolerance must be positive");

    // A sample with label y and 2D noise e is classified correctly at side
    // length d iff d > max_{c != y} -2 e.(u_y - u_c), because the pairwise
    // margin is d^2 ||u_y - u_c||^2 + 2 d e.(u_y - u_c) with unit side
    // lengths. Sorting those per-sample thresholds makes the Monte Carlo
    // accuracy an exact, monotone function of d.
    const UnitTriangle tri;
    std::vector<double> thresholds(kCalibrationSamples);
    const double uniform_probs[3] = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    for (std::size_t i = 0; i < kCalibrationSamples; ++i) {
        const int y = static_cast<int>(draw_categorical(prng, {uniform_probs, 3}));
        const double e0 = prng.normal();
        const double e1 = prng.normal();
        double worst = -1e300;
        for (int c = 0; c < 3; ++c) {
            if (c == y) continue;
            const double d0 = tri.u[y][0] - tri.u[c][0];
            const double d1 = tri.u[y][1] - tri.u[c][1];
            worst = std::max(worst, -2.0 * (e0 * d0 + e1 * d1));
        }
        thresholds[i] = worst;
    }
    std::sort(thresholds.begin(), thresholds.end());

    const auto accuracy_at = [&](double d) {
        const auto it = std::upper_bound(thresholds.begin(), thresholds.end(), d);
        const std::size_t correct = kCalibrationSamples - (thresholds.end() - it);
        return static_cast<double>(correct) / kCalibrationSamples;
    };

    double lo = 0.01, hi = 20.0;
    if (accuracy_at(lo) > target_bayes_acc + tolerance)
        throw std::invalid_argument("calibrate_separation: target below the bracket minimum");
    if (accuracy_at(hi) < target_bayes_acc - tolerance)
        throw std::invalid_argument("calibrate_separation: target above the bracket maximum");

    for (int iter = 0; iter < 200 && hi - lo > 1e-10; ++iter) {
        const double mid = 0.5 * (lo + hi);
        if (accuracy_at(mid) < target_bayes_acc)
            lo = mid;
        else
            hi = mid;
    }
    const double delta = 0.5 * (lo + hi);
    if (std::abs(accuracy_at(delta) - target_bayes_acc) > tolerance)
        throw std::invalid_argument("calibrate_separation: bisection did not reach the target");
    return delta;
}

SynthDataset sample_dataset(const GenerativeSpec& spec, std::size_t n, Split split, Prng& prng) {
    if (n == 0) throw std::invalid_argument("sample_dataset: n must be positive");
    const auto means = spec.class_means();
    SynthDataset ds;
    ds.spec = spec;
    ds.split = split;
    ds.seed = prng.seed();
    ds.examples.resize(n);

    const double uniform_probs[3] = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    const bool ood = split == Split::ood_test;

    for (auto& ex : ds.examples) {
        ex.label = static_cast<int>(draw_categorical(prng, {uniform_probs, 3}));
        ex.base.resize(spec.base_dim);
        const auto& mean = means[ex.label];
        for (int d = 0; d < spec.base_dim; ++d) ex.base[d] = mean[d] + prng.normal();

        switch (spec.bias_kind) {
            case BiasKind::none:
                ex.token = static_cast<int>(draw_categorical(prng, {uniform_probs, 3}));
                break;
            case BiasKind::indicator:
            case BiasKind::excluder:
                ex.token = ood ? static_cast<int>(draw_categorical(prng, {uniform_probs, 3}))
                               : token_emission_draw(spec, ex.label, prng);
                break;
            case BiasKind::dependent: {
                // The branch variable is generated in every split; only the
                // token rule is replaced by a uniform draw out of domain.
                const bool reliable = prng.uniform() < spec.dependent_branch_a;
                ex.indicator = reliable ? 0 : 1;
                if (ood || !reliable) {
                    ex.token = static_cast<int>(draw_categorical(prng, {uniform_probs, 3}));
                } else {
                    double probs[3];
                    for (int c = 0; c < 3; ++c)
                        probs[c] = (c == ex.label) ? spec.dependent_agree
                                                   : (1.0 - spec.dependent_agree) / 2.0;
                    ex.token = static_cast<int>(draw_categorical(prng, {probs, 3}));
                }
                break;
            }
        }
    }
    return ds;
}

std::vector<double> analytic_bias_posterior(const GenerativeSpec& spec, int token) {
    if (token < 0 || token >= spec.num_classes)
        throw std::invalid_argument("analytic_bias_posterior: token out of range");
    std::vector<double> post(spec.num_classes, 1.0 / spec.num_classes);
    const auto emission = [&](int c) -> double {
        switch (spec.bias_kind) {
            case BiasKind::none:
                return 1.0 / 3.0;
            case BiasKind::indicator:
                return c == token ? spec.indicator_agree : (1.0 - spec.indicator_agree) / 2.0;
            case BiasKind::excluder:
                return c == token ? spec.excluder_agree : (1.0 - spec.excluder_agree) / 2.0;
            case BiasKind::dependent: {
                // Marginal over the branch variable, which the bias view
                // does not observe.
                const double a = spec.dependent_branch_a;
                const double in_branch =
                    c == token ? spec.dependent_agree : (1.0 - spec.dependent_agree) / 2.0;
                return a * in_branch + (1.0 - a) / 3.0;
            }
        }
        throw std::logic_error("unknown BiasKind");
    };
    double z = 0.0;
    for (int c = 0; c < spec.num_classes; ++c) {
        post[c] = emission(c);
        z += post[c];
    }
    for (auto& p : post) p /= z;
    return post;
}

std::vector<double> base_posterior(const GenerativeSpec& spec, std::span<const double> base) {
    const auto means = spec.class_means();
    std::vector<double> logits(spec.num_classes);
    for (int c = 0; c < spec.num_classes; ++c) {
        double d2 = 0.0;
        for (int d = 0; d < spec.base_dim; ++d) {
            const double diff = base[d] - means[c][d];
            d2 += diff * diff;
        }
        logits[c] = -0.5 * d2;
    }
    return softmax(logits);
}

std::vector<double> analytic_full_posterior(const GenerativeSpec& spec, const SynthExample& ex) {
    const auto means = spec.class_means();
    const auto emission_log = [&](int c) -> double {
        switch (spec.bias_kind) {
            case BiasKind::none:
                return 0.0;
            case BiasKind::indicator:
                return std::log(c == ex.token ? spec.indicator_agree
                                              : (1.0 - spec.indicator_agree) / 2.0);
            case BiasKind::excluder:
                return std::log(c == ex.token ? spec.excluder_agree
                                              : (1.0 - spec.excluder_agree) / 2.0);
            case BiasKind::dependent: {
                if (ex.indicator != 0 && ex.indicator != 1)
                    throw std::invalid_argument("dependent example without indicator");
                const double a = spec.dependent_branch_a;
                if (ex.indicator == 1) return std::log((1.0 - a) / 3.0);
                const double in_branch =
                    c == ex.token ? spec.dependent_agree : (1.0 - spec.dependent_agree) / 2.0;
                return std::log(a * in_branch);
            }
        }
        throw std::logic_error("unknown BiasKind");
    };
    std::vector<double> logits(spec.num_classes);
    for (int c = 0; c < spec.num_classes; ++c) {
        double d2 = 0.0;
        for (int d = 0; d < spec.base_dim; ++d) {
            const double diff = ex.base[d] - means[c][d];
            d2 += diff * diff;
        }
        logits[c] = -0.5 * d2 + emission_log(c);
    }
    return softmax(logits);
}

SynthDataset randomize_bias(const SynthDataset& ds, Prng& prng) {
    SynthDataset out = ds;
    if (ds.spec.bias_kind == BiasKind::none) return out;
    const double uniform_probs[3] = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    for (auto& ex : out.examples)
        ex.token = static_cast<int>(draw_categorical(prng, {uniform_probs, 3}));
    return out;
}

std::size_t input_dim(const GenerativeSpec& spec) {
    std::size_t dim = static_cast<std::size_t>(spec.base_dim);
    if (spec.bias_kind != BiasKind::none) dim += spec.num_classes;
    if (spec.bias_kind == BiasKind::dependent) dim += 1;
    return dim;
}

Matrix feature_matrix(const SynthDataset& ds) {
    const std::size_t dim = input_dim(ds.spec);
    Matrix x(ds.examples.size(), dim);
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
        const auto& ex = ds.examples[i];
        auto row = x.row(i);
        std::copy(ex.base.begin(), ex.base.end(), row.begin());
        if (ds.spec.bias_kind != BiasKind::none) {
            row[ds.spec.base_dim + ex.token] = 1.0;
            if (ds.spec.bias_kind == BiasKind::dependent)
                row[dim - 1] = static_cast<double>(ex.indicator);
        }
    }
    return x;
}

std::vector<int> labels(const SynthDataset& ds) {
    std::vector<int> y(ds.examples.size());
    for (std::size_t i = 0; i < ds.examples.size(); ++i) y[i] = ds.examples[i].label;
    return y;
}

std::string dataset_to_json(const SynthDataset& ds) {
    nlohmann::json spec = {
        {"num_classes", ds.spec.num_classes},
        {"base_dim", ds.spec.base_dim},
        {"separation", ds.spec.separation},
        {"bias_kind", to_string(ds.spec.bias_kind)},
        {"bias_params",
         {{"indicator_agree", ds.spec.indicator_agree},
          {"excluder_agree", ds.spec.excluder_agree},
          {"dependent_branch_a", ds.spec.dependent_branch_a},
          {"dependent_agree", ds.spec.dependent_agree}}},
    };
    nlohmann::json examples = nlohmann::json::array();
    for (const auto& ex : ds.examples) {
        nlohmann::json e = {{"x", ex.base}, {"token", ex.token}, {"y", ex.label}};
        if (ds.spec.bias_kind == BiasKind::dependent) e["indicator"] = ex.indicator;
        examples.push_back(std::move(e));
    }
    nlohmann::json doc = {
        {"spec", std::move(spec)},
        {"split", to_string(ds.split)},
        {"seed", ds.seed},
        {"examples", std::move(examples)},
    };
    return doc.dump();
}

SynthDataset dataset_from_json(const std::string& text) {
    const auto doc = nlohmann::json::parse(text);
    SynthDataset ds;
    const auto& spec = doc.at("spec");
    ds.spec.num_classes = spec.at("num_classes").get<int>();
    ds.spec.base_dim = spec.at("base_dim").get<int>();
    ds.spec.separation = spec.at("separation").get<double>();
    ds.spec.bias_kind = bias_kind_from_string(spec.at("bias_kind").get<std::string>());
    const auto& params = spec.at("bias_params");
    ds.spec.indicator_agree = params.at("indicator_agree").get<double>();
    ds.spec.excluder_agree = params.at("excluder_agree").get<double>();
    ds.spec.dependent_branch_a = params.at("dependent_branch_a").get<double>();
    ds.spec.dependent_agree = params.at("dependent_agree").get<double>();
    ds.split = split_from_string(doc.at("split").get<std::string>());
    ds.seed = doc.at("seed").get<std::uint64_t>();
    for (const auto& e : doc.at("examples")) {
        SynthExample ex;
        ex.base = e.at("x").get<std::vector<double>>();
        ex.token = e.at("token").get<int>();
        ex.label = e.at("y").get<int>();
        ex.indicator = e.contains("indicator") ? e.at("indicator").get<int>() : -1;
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

void save_dataset(const SynthDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << dataset_to_json(ds) << '\n';
}

SynthDataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return dataset_from_json(buf.str());
}

}  // namespace debias
