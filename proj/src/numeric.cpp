#include "debias/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace debias {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions disagree");
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        double* crow = c.data.data() + i * c.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) throw std::invalid_argument("matmul_nt: inner dimensions disagree");
    Matrix c(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        double* crow = c.data.data() + i * c.cols;
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* brow = b.data.data() + j * b.cols;
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
            crow[j] = s;
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) throw std::invalid_argument("matmul_tn: inner dimensions disagree");
    Matrix c(a.cols, b.cols);
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double* arow = a.data.data() + k * a.cols;
        const double* brow = b.data.data() + k * b.cols;
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* crow = c.data.data() + i * c.cols;
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Prng::Prng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
}

std::uint64_t Prng::next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Prng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Prng::normal() {
    // u1 shifted into (0, 1] so the log is finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Prng::uniform_index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
    // Rejection sampling over the largest multiple of n to avoid modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t draw;
    do {
        draw = next_u64();
    } while (draw >= limit);
    return static_cast<std::size_t>(draw % n);
}

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

bool all_finite(std::span<const double> xs) {
    return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw std::invalid_argument("softmax: empty input");
    if (!all_finite(logits)) throw std::invalid_argument("softmax: non-finite logit");
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double z = 0.0;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        out[j] = std::exp(logits[j] - m);
        z += out[j];
    }
    for (double& v : out) v /= z;
    return out;
}

double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double entropy(std::span<const double> z) {
    double sum = 0.0;
    for (double v : z) {
        if (v < 0.0) throw std::invalid_argument("entropy: negative entry");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw std::invalid_argument("entropy: input is not a simplex");
    double h = 0.0;
    for (double v : z)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

double safe_log(double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("safe_log: p outside [0, 1]");
    return std::log(std::max(p, kProbFloor));
}

std::size_t draw_categorical(Prng& prng, std::span<const double> probs) {
    double sum = 0.0;
    for (double p : probs) {
        if (p < 0.0) throw std::invalid_argument("draw_categorical: negative probability");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw std::invalid_argument("draw_categorical: input is not a simplex");
    const double u = prng.uniform() * sum;
    double acc = 0.0;
    for (std::size_t j = 0; j + 1 < probs.size(); ++j) {
        acc += probs[j];
        if (u < acc) return j;
    }
    return probs.size() - 1;
}

std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                     const std::vector<double>& theta,
                                     double h) {
    std::vector<double> grad(theta.size());
    std::vector<double> point = theta;
    for (std::size_t k = 0; k < theta.size(); ++k) {
        point[k] = theta[k] + h;
        const double fp = f(point);
        point[k] = theta[k] - h;
        const double fm = f(point);
        point[k] = theta[k];
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::invalid_argument("finite_diff_grad: non-finite objective value");
        grad[k] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

}  // namespace debias
