#include "debias/analyze.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace debias {

namespace {

constexpr std::size_t kEvalBatch = 2048;

std::size_t argmax_lowest(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

}  // namespace

Matrix predict_probs(const Classifier& clf, const SynthDataset& ds) {
    const Matrix x = feature_matrix(ds);
    Matrix probs(x.rows, clf.num_classes);
    for (std::size_t start = 0; start < x.rows; start += kEvalBatch) {
        const std::size_t bn = std::min(kEvalBatch, x.rows - start);
        Matrix xb(bn, x.cols);
        std::copy(x.data.begin() + start * x.cols, x.data.begin() + (start + bn) * x.cols,
                  xb.data.begin());
        const ForwardTrace trace = forward(clf, xb);
        std::copy(trace.p.data.begin(), trace.p.data.end(),
                  probs.data.begin() + start * probs.cols);
    }
    return probs;
}

double accuracy(const Classifier& clf, const SynthDataset& ds) {
    if (ds.examples.empty()) throw std::invalid_argument("accuracy: empty dataset");
    const Matrix probs = predict_probs(clf, ds);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < probs.rows; ++i)
        if (argmax_lowest(probs.row(i)) == static_cast<std::size_t>(ds.examples[i].label))
            ++correct;
    return static_cast<double>(correct) / static_cast<double>(probs.rows);
}

double bias_agreement(const Classifier& clf, const SynthDataset& ds, const BiasPredictions& bias,
                      const std::function<bool(const SynthExample&)>& slice) {
    if (bias.b.rows != ds.examples.size())
        throw std::invalid_argument("bias_agreement: bias predictions do not match the dataset");
    const Matrix probs = predict_probs(clf, ds);
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < probs.rows; ++i) {
        if (slice && !slice(ds.examples[i])) continue;
        sum += probs.at(i, argmax_lowest(bias.b.row(i)));
        ++count;
    }
    if (count == 0) throw std::invalid_argument("bias_agreement: empty slice");
    return sum / static_cast<double>(count);
}

double expected_bias_accuracy(std::span<const double> b, std::span<const double> scores) {
    if (b.size() != scores.size())
        throw std::invalid_argument("expected_bias_accuracy: size mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < b.size(); ++j) {
        if (scores[j] < 0.0 || scores[j] > 1.0)
            throw std::invalid_argument("expected_bias_accuracy: scores must lie in [0, 1]");
        num += scores[j] * b[j];
        den += b[j];
    }
    if (!(den > 0.0)) throw std::invalid_argument("expected_bias_accuracy: zero bias mass");
    return num / den;
}

std::vector<double> gate_values(const Classifier& clf, const SynthDataset& ds) {
    const Matrix x = feature_matrix(ds);
    std::vector<double> g;
    g.reserve(x.rows);
    for (std::size_t start = 0; start < x.rows; start += kEvalBatch) {
        const std::size_t bn = std::min(kEvalBatch, x.rows - start);
        Matrix xb(bn, x.cols);
        std::copy(x.data.begin() + start * x.cols, x.data.begin() + (start + bn) * x.cols,
                  xb.data.begin());
        const ForwardTrace trace = forward(clf, xb);
        const auto gb = gating(clf, trace);
        g.insert(g.end(), gb.begin(), gb.end());
    }
    return g;
}

namespace {

GateStats stats_of(std::span<const double> values) {
    GateStats s;
    s.count = values.size();
    if (values.empty()) return s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / values.size();
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / values.size());
    return s;
}

}  // namespace

GateStats gate_statistics(const Classifier& clf, const SynthDataset& ds) {
    const auto g = gate_values(clf, ds);
    return stats_of(g);
}

std::pair<GateStats, GateStats> gate_statistics_by_indicator(const Classifier& clf,
                                                             const SynthDataset& ds) {
    if (ds.spec.bias_kind != BiasKind::dependent)
        throw std::invalid_argument("gate_statistics_by_indicator: dataset has no indicator");
    const auto g = gate_values(clf, ds);
    std::vector<double> g0, g1;
    for (std::size_t i = 0; i < g.size(); ++i)
        (ds.examples[i].indicator == 1 ? g1 : g0).push_back(g[i]);
    return {stats_of(g0), stats_of(g1)};
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("pearson: size mismatch");
    if (x.size() < 2) throw std::invalid_argument("pearson: need at least two points");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pearson: zero variance input");
    return sxy / std::sqrt(sxx * syy);
}

std::vector<double> fractional_ranks(std::span<const double> x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
        // 1-based ranks; ties share the average of their positions.
        const double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
    const auto rx = fractional_ranks(x);
    const auto ry = fractional_ranks(y);
    return pearson(rx, ry);
}

}  // namespace debias
