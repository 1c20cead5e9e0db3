#include "debias/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace debias {

std::string to_string(Method method) {
    switch (method) {
        case Method::none: return "none";
        case Method::reweight: return "reweight";
        case Method::bias_product: return "bias_product";
        case Method::learned_mixin: return "learned_mixin";
        case Method::learned_mixin_h: return "learned_mixin_h";
        case Method::unbiased: return "unbiased";
    }
    throw std::logic_error("unknown Method");
}

Method method_from_string(std::string_view name) {
    if (name == "none") return Method::none;
    if (name == "reweight") return Method::reweight;
    if (name == "bias_product") return Method::bias_product;
    if (name == "learned_mixin") return Method::learned_mixin;
    if (name == "learned_mixin_h") return Method::learned_mixin_h;
    if (name == "unbiased") return Method::unbiased;
    throw std::invalid_argument("unknown method: " + std::string(name));
}

namespace {

// Clamped log of a bias row. A row with all entries equal carries no signal,
// so it is mapped to exact zeros; that makes a uniform expert the exact
// identity instead of an identity up to rounding.
std::vector<double> log_bias_row(std::span<const double> b) {
    std::vector<double> l(b.size());
    for (std::size_t j = 0; j < b.size(); ++j) l[j] = safe_log(b[j]);
    const auto [lo, hi] = std::minmax_element(l.begin(), l.end());
    if (*lo == *hi) std::fill(l.begin(), l.end(), 0.0);
    return l;
}

std::vector<double> renormalize(std::vector<double> q) {
    double z = 0.0;
    for (double v : q) z += v;
    if (!(z > 0.0)) throw std::runtime_error("ensemble: zero-mass product");
    for (double& v : q) v /= z;
    return q;
}

// dH(softmax(u))/du_j = -s_j (log s_j + H); contracted with dl to give the
// derivative along u = g * dl.
double entropy_grad_wrt_gate(std::span<const double> s, std::span<const double> l, double h) {
    double d = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j)
        if (s[j] > 0.0) d -= s[j] * (std::log(s[j]) + h) * l[j];
    return d;
}

}  // namespace

std::vector<double> bias_product(std::span<const double> p, std::span<const double> b) {
    return learned_mixin(p, b, 1.0);
}

std::vector<double> bias_product(std::span<const double> p, std::span<const double> b,
                                 std::span<const double> prior) {
    if (p.size() != b.size() || p.size() != prior.size())
        throw std::invalid_argument("bias_product: size mismatch");
    std::vector<double> q(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) {
        if (!(prior[j] > 0.0)) throw std::invalid_argument("bias_product: prior must be positive");
        q[j] = p[j] * std::max(b[j], kProbFloor) / prior[j];
    }
    return renormalize(std::move(q));
}

std::vector<double> learned_mixin(std::span<const double> p, std::span<const double> b, double g) {
    if (p.size() != b.size()) throw std::invalid_argument("learned_mixin: size mismatch");
    if (!(g >= 0.0)) throw std::invalid_argument("learned_mixin: gate must be nonnegative");
    const auto l = log_bias_row(b);
    if (g == 0.0 || std::all_of(l.begin(), l.end(), [](double v) { return v == 0.0; }))
        return {p.begin(), p.end()};
    // Shift by the row max so b^g never underflows all entries at once.
    const double lmax = *std::max_element(l.begin(), l.end());
    std::vector<double> q(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) q[j] = p[j] * std::exp(g * (l[j] - lmax));
    return renormalize(std::move(q));
}

double entropy_penalty(std::span<const double> b, double g, double lambda_h) {
    if (lambda_h < 0.0) throw std::invalid_argument("entropy_penalty: weight must be nonnegative");
    if (lambda_h == 0.0) return 0.0;
    std::vector<double> u(b.size());
    for (std::size_t j = 0; j < b.size(); ++j) u[j] = g * safe_log(b[j]);
    return lambda_h * entropy(softmax(u));
}

std::vector<double> reweight_weights(const Matrix& b, std::span<const int> y) {
    if (b.rows != y.size()) throw std::invalid_argument("reweight_weights: size mismatch");
    std::vector<double> w(b.rows);
    double total = 0.0;
    for (std::size_t i = 0; i < b.rows; ++i) {
        const int yi = y[i];
        if (yi < 0 || static_cast<std::size_t>(yi) >= b.cols)
            throw std::invalid_argument("reweight_weights: label out of range");
        w[i] = 1.0 - b.at(i, yi);
        total += w[i];
    }
    if (total <= 0.0)
        throw std::runtime_error("reweight_weights: all weights are zero (bias is perfect everywhere)");
    return w;
}

std::pair<LossReport, LossGrads> ensemble_loss_and_grad(const EnsembleConfig& cfg,
                                                        const ForwardTrace& trace,
                                                        std::span<const double> g,
                                                        const BiasPredictions& bias,
                                                        std::span<const int> y) {
    const std::size_t n = trace.p.rows;
    const std::size_t c = trace.p.cols;
    if (y.size() != n) throw std::invalid_argument("ensemble_loss_and_grad: label count mismatch");

    const bool mixin =
        cfg.method == Method::learned_mixin || cfg.method == Method::learned_mixin_h;
    const bool uses_bias = mixin || cfg.method == Method::bias_product;
    if ((uses_bias || cfg.method == Method::reweight) && (bias.b.rows != n || bias.b.cols != c))
        throw std::invalid_argument("ensemble_loss_and_grad: bias prediction shape mismatch");
    if (mixin && g.size() != n)
        throw std::invalid_argument("ensemble_loss_and_grad: gate count mismatch");

    LossReport report;
    LossGrads grads;
    grads.d_logits = Matrix(n, c);

    std::vector<double> weights;
    double weight_total = static_cast<double>(n);
    if (cfg.method == Method::reweight) {
        weights = reweight_weights(bias.b, y);
        weight_total = 0.0;
        for (double w : weights) weight_total += w;
        report.per_example_weights = weights;
    }

    std::vector<double> log_prior;
    if (cfg.method == Method::bias_product && cfg.divide_prior) {
        if (cfg.class_prior.size() != c)
            throw std::invalid_argument("ensemble_loss_and_grad: divide_prior needs a class prior");
        log_prior.resize(c);
        for (std::size_t j = 0; j < c; ++j) {
            if (!(cfg.class_prior[j] > 0.0))
                throw std::invalid_argument("ensemble_loss_and_grad: prior must be positive");
            log_prior[j] = std::log(cfg.class_prior[j]);
        }
    }

    if (mixin) report.g_values.assign(g.begin(), g.end());
    if (mixin) grads.d_g.assign(n, 0.0);

    double data_loss = 0.0;
    double penalty = 0.0;
    std::vector<double> zhat(c), l(c);
    for (std::size_t i = 0; i < n; ++i) {
        const int yi = y[i];
        if (yi < 0 || static_cast<std::size_t>(yi) >= c)
            throw std::invalid_argument("ensemble_loss_and_grad: label out of range");
        const auto logits = trace.logits.row(i);
        auto drow = grads.d_logits.row(i);

        double gate = 1.0;  // effective exponent on the bias expert
        if (mixin) gate = cfg.force_gate_zero ? 0.0 : g[i];
        if (mixin && cfg.force_gate_zero) report.g_values[i] = 0.0;

        std::vector<double> phat;
        if (uses_bias) {
            l = log_bias_row(bias.b.row(i));
            for (std::size_t j = 0; j < c; ++j) {
                zhat[j] = logits[j] + gate * l[j];
                if (!log_prior.empty()) zhat[j] -= log_prior[j];
            }
            phat = softmax(zhat);
        } else {
            const auto prow = trace.p.row(i);
            phat.assign(prow.begin(), prow.end());
        }

        const double w = cfg.method == Method::reweight ? weights[i] : 1.0;
        data_loss += -w * std::log(std::max(phat[yi], 1e-300));
        for (std::size_t j = 0; j < c; ++j)
            drow[j] = w * (phat[j] - (static_cast<int>(j) == yi ? 1.0 : 0.0)) / weight_total;

        if (mixin && !cfg.force_gate_zero) {
            double dg = 0.0;
            for (std::size_t j = 0; j < c; ++j)
                dg += (phat[j] - (static_cast<int>(j) == yi ? 1.0 : 0.0)) * l[j];
            grads.d_g[i] = dg / weight_total;

            if (cfg.method == Method::learned_mixin_h && cfg.lambda_h > 0.0) {
                for (std::size_t j = 0; j < c; ++j) zhat[j] = gate * l[j];
                const auto s = softmax(zhat);
                const double h = entropy(s);
                penalty += cfg.lambda_h * h;
                grads.d_g[i] += cfg.lambda_h * entropy_grad_wrt_gate(s, l, h) / weight_total;
            }
        }
    }

    report.data_loss = data_loss / weight_total;
    report.penalty = penalty / weight_total;
    report.total_loss = report.data_loss + report.penalty;
    if (!std::isfinite(report.total_loss))
        throw std::runtime_error("ensemble_loss_and_grad: non-finite loss");
    return {std::move(report), std::move(grads)};
}

namespace {

struct BinaryParts {
    double b_soft = 0.0;
    double l1 = 0.0, l0 = 0.0;  // safe logs of b_soft and 1 - b_soft
    double a = 0.0, b = 0.0;    // unnormalized two-class masses
};

BinaryParts binary_parts(double p, double b, double g, double alpha) {
    if (!(p >= 0.0 && p <= 1.0) || !(b >= 0.0 && b <= 1.0))
        throw std::invalid_argument("binary_ensemble: probabilities must lie in [0, 1]");
    if (!(g >= 0.0)) throw std::invalid_argument("binary_ensemble: gate must be nonnegative");
    BinaryParts parts;
    // Unbounded smoothing, so alpha -> +inf washes the pair out to (1/2, 1/2).
    const double s = softplus(alpha);
    parts.b_soft = (b + s) / (1.0 + 2.0 * s);
    parts.l1 = safe_log(parts.b_soft);
    parts.l0 = safe_log(1.0 - parts.b_soft);
    parts.a = p * std::exp(g * parts.l1);
    parts.b = (1.0 - p) * std::exp(g * parts.l0);
    if (!(parts.a + parts.b > 0.0)) throw std::runtime_error("binary_ensemble: zero-mass pair");
    return parts;
}

}  // namespace

double binary_ensemble(double p, double b, double g, double alpha) {
    const auto parts = binary_parts(p, b, g, alpha);
    return parts.a / (parts.a + parts.b);
}

BinaryEnsembleGrad binary_ensemble_with_grad(double p, double b, double g, double alpha) {
    const auto parts = binary_parts(p, b, g, alpha);
    const double z = parts.a + parts.b;
    const double e1 = std::exp(g * parts.l1);
    const double e0 = std::exp(g * parts.l0);

    BinaryEnsembleGrad out;
    out.value = parts.a / z;
    out.d_p = (e1 * parts.b + e0 * parts.a) / (z * z);
    out.d_g = parts.a * parts.b * (parts.l1 - parts.l0) / (z * z);

    // Through the softening: b' = (b + s)/(1 + 2s), s = softplus(alpha).
    const double s = softplus(alpha);
    const double db_ds = (1.0 - 2.0 * b) / ((1.0 + 2.0 * s) * (1.0 + 2.0 * s));
    const double dl1_db = parts.b_soft > kProbFloor ? 1.0 / parts.b_soft : 0.0;
    const double dl0_db = 1.0 - parts.b_soft > kProbFloor ? -1.0 / (1.0 - parts.b_soft) : 0.0;
    const double dv_dl1 = g * parts.a * parts.b / (z * z);
    out.d_alpha = dv_dl1 * (dl1_db - dl0_db) * db_ds * sigmoid(alpha);
    return out;
}

}  // namespace debias
