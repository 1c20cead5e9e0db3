#include "debias/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace debias {

std::vector<std::span<double>> Classifier::param_blocks() {
    return {std::span<double>(w1.data), std::span<double>(b1), std::span<double>(w2.data),
            std::span<double>(b2), std::span<double>(w_mixin)};
}

std::vector<std::span<const double>> Classifier::param_blocks() const {
    return {std::span<const double>(w1.data), std::span<const double>(b1),
            std::span<const double>(w2.data), std::span<const double>(b2),
            std::span<const double>(w_mixin)};
}

std::vector<std::span<const double>> Gradients::param_blocks() const {
    return {std::span<const double>(w1.data), std::span<const double>(b1),
            std::span<const double>(w2.data), std::span<const double>(b2),
            std::span<const double>(w_mixin)};
}

Classifier init_classifier(std::size_t input_dim, std::size_t hidden, std::size_t num_classes,
                           Prng& prng) {
    if (input_dim < 1 || hidden < 1 || num_classes < 1)
        throw std::invalid_argument("init_classifier: dimensions must be positive");
    Classifier clf;
    clf.input_dim = input_dim;
    clf.hidden = hidden;
    clf.num_classes = num_classes;
    clf.w1 = Matrix(hidden, input_dim);
    clf.b1.assign(hidden, 0.0);
    clf.w2 = Matrix(num_classes, hidden);
    clf.b2.assign(num_classes, 0.0);
    clf.w_mixin.assign(hidden, 0.0);
    const double s1 = std::sqrt(1.0 / static_cast<double>(input_dim));
    for (auto& w : clf.w1.data) w = s1 * prng.normal();
    const double s2 = std::sqrt(1.0 / static_cast<double>(hidden));
    for (auto& w : clf.w2.data) w = s2 * prng.normal();
    return clf;
}

ForwardTrace forward(const Classifier& clf, const Matrix& batch) {
    if (batch.cols != clf.input_dim)
        throw std::invalid_argument("forward: batch width does not match input_dim");
    ForwardTrace trace;
    trace.h = matmul_nt(batch, clf.w1);
    for (std::size_t i = 0; i < trace.h.rows; ++i) {
        auto row = trace.h.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] = std::tanh(row[j] + clf.b1[j]);
    }
    trace.logits = matmul_nt(trace.h, clf.w2);
    trace.p = Matrix(batch.rows, clf.num_classes);
    for (std::size_t i = 0; i < trace.logits.rows; ++i) {
        auto lrow = trace.logits.row(i);
        for (std::size_t j = 0; j < lrow.size(); ++j) lrow[j] += clf.b2[j];
        if (!all_finite(lrow)) throw std::runtime_error("forward: non-finite logits");
        // Max-shifted softmax, inlined over the row.
        const double m = *std::max_element(lrow.begin(), lrow.end());
        auto prow = trace.p.row(i);
        double z = 0.0;
        for (std::size_t j = 0; j < lrow.size(); ++j) {
            prow[j] = std::exp(lrow[j] - m);
            z += prow[j];
        }
        for (auto& v : prow) v /= z;
    }
    return trace;
}

std::vector<double> gating(const Classifier& clf, const ForwardTrace& trace) {
    std::vector<double> g(trace.h.rows);
    for (std::size_t i = 0; i < trace.h.rows; ++i) {
        auto hrow = trace.h.row(i);
        double s = 0.0;
        for (std::size_t j = 0; j < hrow.size(); ++j) s += clf.w_mixin[j] * hrow[j];
        g[i] = softplus(s);
    }
    return g;
}

Gradients backward(const Classifier& clf, const ForwardTrace& trace, const Matrix& batch,
                   const Matrix& d_logits, std::span<const double> d_g) {
    if (d_logits.rows != batch.rows || d_logits.cols != clf.num_classes)
        throw std::invalid_argument("backward: d_logits shape mismatch");
    if (!d_g.empty() && d_g.size() != batch.rows)
        throw std::invalid_argument("backward: d_g length mismatch");

    Gradients grads;
    grads.w2 = matmul_tn(d_logits, trace.h);
    grads.b2.assign(clf.num_classes, 0.0);
    for (std::size_t i = 0; i < d_logits.rows; ++i) {
        auto row = d_logits.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) grads.b2[j] += row[j];
    }

    Matrix dh = matmul(d_logits, clf.w2);

    grads.w_mixin.assign(clf.hidden, 0.0);
    if (!d_g.empty()) {
        for (std::size_t i = 0; i < batch.rows; ++i) {
            if (d_g[i] == 0.0) continue;
            auto hrow = trace.h.row(i);
            double s = 0.0;
            for (std::size_t j = 0; j < hrow.size(); ++j) s += clf.w_mixin[j] * hrow[j];
            // g = softplus(s), so dL/ds = dL/dg * sigmoid(s).
            const double ds = d_g[i] * sigmoid(s);
            auto dhrow = dh.row(i);
            for (std::size_t j = 0; j < hrow.size(); ++j) {
                grads.w_mixin[j] += ds * hrow[j];
                dhrow[j] += ds * clf.w_mixin[j];
            }
        }
    }

    // Through tanh: da = dh * (1 - h^2).
    for (std::size_t i = 0; i < dh.rows; ++i) {
        auto dhrow = dh.row(i);
        auto hrow = trace.h.row(i);
        for (std::size_t j = 0; j < dhrow.size(); ++j) dhrow[j] *= 1.0 - hrow[j] * hrow[j];
    }

    grads.w1 = matmul_tn(dh, batch);
    grads.b1.assign(clf.hidden, 0.0);
    for (std::size_t i = 0; i < dh.rows; ++i) {
        auto row = dh.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) grads.b1[j] += row[j];
    }
    return grads;
}

BiasPredictions BiasModel::predict(const SynthDataset& ds) const {
    BiasPredictions preds;
    preds.b = Matrix(ds.examples.size(), posterior_by_token.cols);
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
        const auto src = posterior_by_token.row(ds.examples[i].token);
        std::copy(src.begin(), src.end(), preds.b.row(i).begin());
    }
    return preds;
}

namespace {

constexpr int kBiasEpochs = 50;
constexpr double kBiasLearningRate = 8.0;
constexpr double kBiasKlBound = 0.01;

Matrix train_token_model(const SynthDataset& ds) {
    const int num_tokens = ds.spec.num_classes;
    const int num_classes = ds.spec.num_classes;
    // Joint counts fully determine the full-batch gradient.
    Matrix counts(num_tokens, num_classes);
    std::vector<double> token_totals(num_tokens, 0.0);
    for (const auto& ex : ds.examples) {
        counts.at(ex.token, ex.label) += 1.0;
        token_totals[ex.token] += 1.0;
    }
    const double n = static_cast<double>(ds.examples.size());

    Matrix logits(num_tokens, num_classes);
    for (int epoch = 0; epoch < kBiasEpochs; ++epoch) {
        for (int t = 0; t < num_tokens; ++t) {
            const auto p = softmax(logits.row(t));
            auto row = logits.row(t);
            for (int c = 0; c < num_classes; ++c) {
                const double grad = (token_totals[t] * p[c] - counts.at(t, c)) / n;
                row[c] -= kBiasLearningRate * grad;
            }
        }
    }

    Matrix table(num_tokens, num_classes);
    for (int t = 0; t < num_tokens; ++t) {
        const auto p = softmax(logits.row(t));
        std::copy(p.begin(), p.end(), table.row(t).begin());
    }
    return table;
}

}  // namespace

BiasModel fit_bias_model(const SynthDataset& ds, BiasMode mode, Prng& /*prng*/) {
    BiasModel model;
    const int num_tokens = ds.spec.num_classes;
    if (mode == BiasMode::analytic) {
        model.posterior_by_token = Matrix(num_tokens, ds.spec.num_classes);
        for (int t = 0; t < num_tokens; ++t) {
            const auto post = analytic_bias_posterior(ds.spec, t);
            std::copy(post.begin(), post.end(), model.posterior_by_token.row(t).begin());
        }
        return model;
    }

    model.posterior_by_token = train_token_model(ds);

    double kl_sum = 0.0;
    for (int t = 0; t < num_tokens; ++t) {
        const auto analytic = analytic_bias_posterior(ds.spec, t);
        const auto fitted = model.posterior_by_token.row(t);
        double kl = 0.0;
        for (int c = 0; c < ds.spec.num_classes; ++c)
            if (analytic[c] > 0.0) kl += analytic[c] * (std::log(analytic[c]) - safe_log(fitted[c]));
        kl_sum += kl;
    }
    const double mean_kl = kl_sum / num_tokens;
    if (mean_kl > kBiasKlBound)
        throw std::runtime_error("fit_bias_model: trained bias model is KL " +
                                 std::to_string(mean_kl) +
                                 " from the analytic posterior (bound 0.01)");
    return model;
}

BiasPredictions fit_bias_only(const SynthDataset& ds, BiasMode mode, Prng& prng) {
    return fit_bias_model(ds, mode, prng).predict(ds);
}

std::string classifier_to_json(const Classifier& clf) {
    nlohmann::json doc = {
        {"input_dim", clf.input_dim}, {"hidden", clf.hidden}, {"C", clf.num_classes},
        {"W1", clf.w1.data},          {"b1", clf.b1},         {"W2", clf.w2.data},
        {"b2", clf.b2},               {"w_mixin", clf.w_mixin},
    };
    return doc.dump();
}

Classifier classifier_from_json(const std::string& text) {
    const auto doc = nlohmann::json::parse(text);
    Classifier clf;
    clf.input_dim = doc.at("input_dim").get<std::size_t>();
    clf.hidden = doc.at("hidden").get<std::size_t>();
    clf.num_classes = doc.at("C").get<std::size_t>();
    clf.w1 = Matrix(clf.hidden, clf.input_dim);
    clf.w1.data = doc.at("W1").get<std::vector<double>>();
    clf.b1 = doc.at("b1").get<std::vector<double>>();
    clf.w2 = Matrix(clf.num_classes, clf.hidden);
    clf.w2.data = doc.at("W2").get<std::vector<double>>();
    clf.b2 = doc.at("b2").get<std::vector<double>>();
    clf.w_mixin = doc.at("w_mixin").get<std::vector<double>>();
    if (clf.w1.data.size() != clf.hidden * clf.input_dim ||
        clf.w2.data.size() != clf.num_classes * clf.hidden || clf.b1.size() != clf.hidden ||
        clf.b2.size() != clf.num_classes || clf.w_mixin.size() != clf.hidden)
        throw std::invalid_argument("classifier_from_json: inconsistent shapes");
    return clf;
}

}  // namespace debias
