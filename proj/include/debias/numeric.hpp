#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

// Minimal deterministic numeric kernel shared by the rest of the library:
// a dense row-major matrix, a seedable PRNG, numerically stable elementwise
// functions, and a central-difference gradient checker used as the test
// oracle for every hand-derived gradient.

namespace debias {

// Probabilities below this floor are clamped before taking logs.
inline constexpr double kProbFloor = 1e-7;

// Default step for central finite differences.
inline constexpr double kFiniteDiffStep = 1e-5;

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major, rows*cols entries

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
// C = A * B^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// C = A^T * B
Matrix matmul_tn(const Matrix& a, const Matrix& b);

/// xoshiro256** seeded through splitmix64. Identical seeds give identical
/// draw sequences; every draw advances the state. Single-owner mutable
/// state, never share one instance across threads.
class Prng {
  public:
    explicit Prng(std::uint64_t seed);

    std::uint64_t next_u64();

    /// Uniform double in [0, 1), 53 random bits.
    double uniform();

    /// Standard normal via Box-Muller; consumes exactly two uniforms.
    double normal();

    /// Uniform index in [0, n). n must be positive.
    std::size_t uniform_index(std::size_t n);

    std::uint64_t seed() const { return seed_; }

  private:
    std::uint64_t seed_;
    std::uint64_t state_[4];
};

/// Stable 64-bit string hash (FNV-1a), used to derive per-run sub-seeds.
std::uint64_t fnv1a64(std::string_view s);

bool all_finite(std::span<const double> xs);

/// Max-shifted softmax. Rejects non-finite input.
std::vector<double> softmax(std::span<const double> logits);

/// log(1 + e^x) with overflow-safe branches: returns x for x > 30 and
/// e^x for x < -30.
double softplus(double x);

/// Logistic function; also the derivative of softplus.
double sigmoid(double x);

/// Shannon entropy -sum z_j log z_j; zero entries contribute zero.
/// Rejects input whose sum deviates from 1 by more than 1e-6.
double entropy(std::span<const double> z);

/// log(max(p, kProbFloor)). Rejects p outside [0, 1].
double safe_log(double p);

/// Inverse-CDF draw from a categorical distribution.
std::size_t draw_categorical(Prng& prng, std::span<const double> probs);

/// Central-difference gradient of f at theta. Rejects non-finite f values.
std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                     const std::vector<double>& theta,
                                     double h = kFiniteDiffStep);

}  // namespace debias
