#pragma once

// Small dense linear algebra, a fixed cross-platform PRNG, Adam, and a
// central-difference gradient checker. Everything is 64-bit floating point.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "advprobe/errors.hpp"

namespace advprobe {

using Vector = std::vector<double>;

// ---------------------------------------------------------------------------
// Rng: xoshiro256** seeded through splitmix64. The algorithm and the way
// doubles / bounded integers are derived from it are fixed; do not swap in
// <random> distributions, whose output is implementation-defined.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Mixes a base seed with an index into a new seed (e.g. per-episode seeds).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t x = base ^ (index * 0xD1B54A32D192ED03ULL);
    splitmix64(x);
    return splitmix64(x);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
        std::uint64_t x = seed;
        for (auto& s : state_) s = splitmix64(x);
    }

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() {
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

    /// Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw InvalidInput("Rng::below: empty range");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Index drawn from a discrete distribution (weights need not be normalized).
    std::size_t categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (!(total > 0.0) || !std::isfinite(total))
            throw InvalidInput("Rng::categorical: weights must have positive finite sum");
        double u = uniform() * total;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (u < weights[i]) return i;
            u -= weights[i];
        }
        // Rounding can leave u marginally above the last bucket.
        for (std::size_t i = weights.size(); i-- > 0;)
            if (weights[i] > 0.0) return i;
        return weights.size() - 1;
    }

    /// Independent stream `k`: this generator advanced by k * 2^128 draws.
    /// Streams of one parent never overlap for fewer than 2^128 draws each.
    Rng split(unsigned k) const {
        Rng child = *this;
        for (unsigned i = 0; i < k; ++i) child.jump();
        return child;
    }

    bool operator==(const Rng& other) const { return state_ == other.state_; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    void jump() {
        static constexpr std::array<std::uint64_t, 4> kJump = {
            0x180ec6d33cfd0abaULL, 0xd5a61266f0c9392cULL, 0xa9582618e03fc9aaULL,
            0x39abdc4529b1661cULL};
        std::array<std::uint64_t, 4> acc{};
        for (std::uint64_t word : kJump) {
            for (int b = 0; b < 64; ++b) {
                if (word & (1ULL << b))
                    for (int i = 0; i < 4; ++i) acc[i] ^= state_[i];
                next_u64();
            }
        }
        state_ = acc;
    }

    std::uint64_t seed_;
    std::array<std::uint64_t, 4> state_{};
};

/// Purposes that get their own non-overlapping streams from a run seed.
enum class Stream : unsigned { data = 0, init = 1, exploration = 2, evaluation = 3 };

inline Rng stream(std::uint64_t seed, Stream s) {
    return Rng(seed).split(static_cast<unsigned>(s));
}

// ---------------------------------------------------------------------------
// Matrices. Weight blocks live inside flat parameter vectors, so most code
// works on non-owning views; Matrix is the owning counterpart.
// ---------------------------------------------------------------------------

template <typename T>
class BasicMatrixView {
public:
    BasicMatrixView(T* data, std::size_t rows, std::size_t cols)
        : data_(data), rows_(rows), cols_(cols) {}

    template <typename U>
        requires std::is_same_v<T, const U>
    BasicMatrixView(const BasicMatrixView<U>& other)
        : data_(other.data()), rows_(other.rows()), cols_(other.cols()) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    T* data() const noexcept { return data_; }

    T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) const { return {data_ + r * cols_, cols_}; }

private:
    T* data_;
    std::size_t rows_;
    std::size_t cols_;
};

using MatrixView = BasicMatrixView<double>;
using ConstMatrixView = BasicMatrixView<const double>;

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    MatrixView view() { return {data_.data(), rows_, cols_}; }
    ConstMatrixView view() const { return {data_.data(), rows_, cols_}; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Vector data_;
};

/// y += A x
inline void gemv_acc(ConstMatrixView a, std::span<const double> x, std::span<double> y) {
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double* row = a.data() + r * a.cols();
        double acc = 0.0;
        for (std::size_t c = 0; c < a.cols(); ++c) acc += row[c] * x[c];
        y[r] += acc;
    }
}

/// y += A^T x
inline void gemv_t_acc(ConstMatrixView a, std::span<const double> x, std::span<double> y) {
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double* row = a.data() + r * a.cols();
        const double xr = x[r];
        if (xr == 0.0) continue;
        for (std::size_t c = 0; c < a.cols(); ++c) y[c] += row[c] * xr;
    }
}

/// A += u v^T
inline void ger_acc(MatrixView a, std::span<const double> u, std::span<const double> v) {
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double ur = u[r];
        if (ur == 0.0) continue;
        double* row = a.data() + r * a.cols();
        for (std::size_t c = 0; c < a.cols(); ++c) row[c] += ur * v[c];
    }
}

inline double logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

/// Rescales `g` in place so its L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
inline double clip_by_norm(std::span<double> g, double max_norm) {
    const double n = l2_norm(g);
    if (max_norm > 0.0 && n > max_norm) {
        const double s = max_norm / n;
        for (double& x : g) x *= s;
    }
    return n;
}

inline Vector softmax(std::span<const double> logits) {
    if (logits.empty()) throw InvalidInput("softmax: empty input");
    if (!all_finite(logits)) throw InvalidInput("softmax: non-finite logit");
    const double mx = *std::max_element(logits.begin(), logits.end());
    Vector out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        total += out[i];
    }
    for (double& p : out) p /= total;
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::uint64_t step = 0;
    Vector m;
    Vector v;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    AdamState() = default;
    explicit AdamState(std::size_t n, double learning_rate = 1e-3)
        : m(n, 0.0), v(n, 0.0), lr(learning_rate) {}
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
    if (params.size() != grads.size() || state.m.size() != params.size() ||
        state.v.size() != params.size())
        throw InvalidInput("adam_step: params, grads and moment vectors differ in length");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

using LossFn = std::function<double(std::span<const double>)>;

/// Relative error used by grad_check for one coordinate.
inline double grad_rel_error(double numeric, double analytic) {
    return std::abs(numeric - analytic) /
           std::max(1e-8, std::abs(numeric) + std::abs(analytic));
}

/// Central finite differences over every coordinate of `params`; returns the
/// maximum relative error against `analytic`.
inline double grad_check(const LossFn& loss, std::span<const double> params,
                         std::span<const double> analytic, double h = 1e-5) {
    if (!(h > 0.0)) throw InvalidInput("grad_check: step size must be positive");
    if (params.size() != analytic.size())
        throw InvalidInput("grad_check: params and gradient differ in length");
    Vector p(params.begin(), params.end());
    if (loss(p) != loss(p))
        throw NonDeterministic("grad_check: loss function is not deterministic");
    double worst = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + h;
        const double up = loss(p);
        p[i] = orig - h;
        const double down = loss(p);
        p[i] = orig;
        worst = std::max(worst, grad_rel_error((up - down) / (2.0 * h), analytic[i]));
    }
    return worst;
}

}  // namespace advprobe
