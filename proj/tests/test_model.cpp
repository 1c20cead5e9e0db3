#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "debias/model.hpp"

using namespace debias;

namespace {

Matrix random_batch(Prng& prng, std::size_t rows, std::size_t cols) {
    Matrix x(rows, cols);
    for (auto& v : x.data) v = prng.normal();
    return x;
}

}  // namespace

TEST_CASE("init_classifier: valid forward, gate at softplus(0), seed replay") {
    Prng prng(21);
    const auto clf = init_classifier(10, 16, 3, prng);
    Prng data(22);
    const auto x = random_batch(data, 5, 10);
    const auto trace = forward(clf, x);
    for (std::size_t i = 0; i < trace.p.rows; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(trace.p.at(i, j) >= 0.0);
            sum += trace.p.at(i, j);
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }

    for (double g : gating(clf, trace)) CHECK(g == doctest::Approx(std::log(2.0)).epsilon(1e-15));

    Prng p1(33), p2(33);
    const auto a = init_classifier(7, 9, 3, p1);
    const auto b = init_classifier(7, 9, 3, p2);
    CHECK(a.w1.data == b.w1.data);
    CHECK(a.w2.data == b.w2.data);

    CHECK_THROWS_AS(init_classifier(0, 4, 3, p1), std::invalid_argument);
}

TEST_CASE("forward: zero weights give uniform output, duplicates match") {
    Classifier clf;
    clf.input_dim = 6;
    clf.hidden = 4;
    clf.num_classes = 3;
    clf.w1 = Matrix(4, 6);
    clf.b1.assign(4, 0.0);
    clf.w2 = Matrix(3, 4);
    clf.b2.assign(3, 0.0);
    clf.w_mixin.assign(4, 0.0);

    Prng prng(34);
    auto x = random_batch(prng, 4, 6);
    // Duplicate row 0 into row 3.
    for (std::size_t d = 0; d < 6; ++d) x.at(3, d) = x.at(0, d);

    const auto trace = forward(clf, x);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            CHECK(trace.p.at(i, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    Prng prng2(35);
    const auto clf2 = init_classifier(6, 4, 3, prng2);
    const auto trace2 = forward(clf2, x);
    for (std::size_t j = 0; j < 3; ++j) CHECK(trace2.p.at(3, j) == trace2.p.at(0, j));

    // Batch-order equivariance: reversing rows reverses outputs bitwise.
    Matrix rev(4, 6);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t d = 0; d < 6; ++d) rev.at(i, d) = x.at(3 - i, d);
    const auto trace3 = forward(clf2, rev);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) CHECK(trace3.p.at(i, j) == trace2.p.at(3 - i, j));

    CHECK_THROWS_AS(forward(clf, Matrix(2, 5)), std::invalid_argument);
}

TEST_CASE("backward: zero upstream gives zero gradients") {
    Prng prng(36);
    const auto clf = init_classifier(6, 5, 3, prng);
    const auto x = random_batch(prng, 4, 6);
    const auto trace = forward(clf, x);
    const Matrix d_logits(4, 3);
    const std::vector<double> d_g(4, 0.0);
    const auto grads = backward(clf, trace, x, d_logits, d_g);
    for (const auto block : grads.param_blocks())
        for (double v : block) CHECK(v == 0.0);
}

TEST_CASE("backward: gate path derivative at w_mixin = 0 is 0.5 * d_g * h") {
    Prng prng(37);
    auto clf = init_classifier(6, 5, 3, prng);
    std::fill(clf.w_mixin.begin(), clf.w_mixin.end(), 0.0);
    const auto x = random_batch(prng, 1, 6);
    const auto trace = forward(clf, x);
    const Matrix d_logits(1, 3);
    const std::vector<double> d_g = {0.8};
    const auto grads = backward(clf, trace, x, d_logits, d_g);
    for (std::size_t j = 0; j < clf.hidden; ++j)
        CHECK(grads.w_mixin[j] == doctest::Approx(0.5 * 0.8 * trace.h.at(0, j)).epsilon(1e-14));
}

TEST_CASE("fit_bias_model: analytic tables per kind") {
    GenerativeSpec spec;
    spec.separation = 2.5;
    spec.bias_kind = BiasKind::indicator;
    Prng gen(38);
    const auto ds = sample_dataset(spec, 2000, Split::train, gen);

    Prng fit(39);
    const auto model = fit_bias_model(ds, BiasMode::analytic, fit);
    const auto preds = model.predict(ds);
    REQUIRE(preds.b.rows == ds.examples.size());
    for (std::size_t i = 0; i < 64; ++i) {
        const auto& ex = ds.examples[i];
        for (int c = 0; c < 3; ++c)
            CHECK(std::abs(preds.b.at(i, c) - (c == ex.token ? 0.8 : 0.1)) < 1e-12);
    }

    spec.bias_kind = BiasKind::excluder;
    Prng gen2(40);
    const auto ds2 = sample_dataset(spec, 2000, Split::train, gen2);
    const auto preds2 = fit_bias_only(ds2, BiasMode::analytic, fit);
    for (std::size_t i = 0; i < 64; ++i) {
        const auto& ex = ds2.examples[i];
        for (int c = 0; c < 3; ++c)
            CHECK(std::abs(preds2.b.at(i, c) - (c == ex.token ? 0.03 : 0.485)) < 1e-12);
    }
}

TEST_CASE("fit_bias_model: trained mode converges to the analytic posterior") {
    GenerativeSpec spec;
    spec.separation = 2.5;
    spec.bias_kind = BiasKind::indicator;
    Prng gen(41);
    const auto ds = sample_dataset(spec, 100000, Split::train, gen);
    Prng fit(42);
    const auto model = fit_bias_model(ds, BiasMode::trained, fit);
    for (int t = 0; t < 3; ++t) {
        const auto analytic = analytic_bias_posterior(spec, t);
        for (int c = 0; c < 3; ++c)
            CHECK(std::abs(model.posterior_by_token.at(t, c) - analytic[c]) < 0.01);
    }
}

TEST_CASE("fit_bias_model: trained mode rejects a generator mismatch") {
    // Tokens that always equal the label are far from the 0.8 posterior,
    // so the KL gate has to fire.
    GenerativeSpec spec;
    spec.separation = 2.5;
    spec.bias_kind = BiasKind::indicator;
    SynthDataset ds;
    ds.spec = spec;
    ds.split = Split::train;
    for (int i = 0; i < 300; ++i) {
        SynthExample ex;
        ex.base.assign(spec.base_dim, 0.0);
        ex.label = i % 3;
        ex.token = ex.label;
        ds.examples.push_back(ex);
    }
    Prng fit(43);
    CHECK_THROWS_AS(fit_bias_model(ds, BiasMode::trained, fit), std::runtime_error);
}

TEST_CASE("classifier json round trip") {
    Prng prng(44);
    const auto clf = init_classifier(8, 6, 3, prng);
    const auto text = classifier_to_json(clf);
    const auto back = classifier_from_json(text);
    CHECK(back.input_dim == clf.input_dim);
    CHECK(back.hidden == clf.hidden);
    CHECK(back.num_classes == clf.num_classes);
    CHECK(back.w1.data == clf.w1.data);
    CHECK(back.b1 == clf.b1);
    CHECK(back.w2.data == clf.w2.data);
    CHECK(back.b2 == clf.b2);
    CHECK(back.w_mixin == clf.w_mixin);
}
