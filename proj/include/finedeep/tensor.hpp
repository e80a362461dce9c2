#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "finedeep/errors.hpp"

namespace finedeep {

// Dense row-major N-d array of doubles. 64-bit is the reference precision;
// parameters that round-trip through checkpoints hold float32-representable
// values (see LmModel / Adam), which are exact doubles.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s, double fill = 0.0) : shape(std::move(s)) {
        data.assign(numel_of(shape), fill);
    }
    Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel_of(shape)) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }
    std::size_t numel() const { return data.size(); }
    std::size_t ndim() const { return shape.size(); }

    // 2-d accessors (the model is built almost entirely from matrices)
    std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    static std::string shape_str(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << "]";
        return os.str();
    }
    std::string shape_str() const { return shape_str(shape); }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
    static Tensor ones(std::vector<std::size_t> s) { return Tensor(std::move(s), 1.0); }
    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    static Tensor randn(std::vector<std::size_t> s, std::mt19937_64& rng, double stddev) {
        Tensor t(std::move(s));
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& v : t.data) v = dist(rng);
        return t;
    }

    // Snap every element to its nearest float32 value (exact as a double).
    void round_to_f32() {
        for (double& v : data) v = static_cast<double>(static_cast<float>(v));
    }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

namespace ops {

// Thread-local multiply-add counter (2 FLOPs per MAC), flipped on by tests
// and the instrumented-forward oracle. Counts matmul work only, matching the
// accounting convention in analysis.hpp.
inline thread_local std::uint64_t g_flops = 0;
inline thread_local bool g_count_flops = false;

struct FlopCounterScope {
    FlopCounterScope() {
        g_flops = 0;
        g_count_flops = true;
    }
    ~FlopCounterScope() { g_count_flops = false; }
    std::uint64_t flops() const { return g_flops; }
};

// C = A[m×k] · B[k×n]. ikj ordering, fixed accumulation order per element.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c({m, n});
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* pc = c.data.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        double* crow = pc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    if (g_count_flops) g_flops += 2ull * m * n * k;
    return c;
}

// C = A[m×k] · Bᵀ where B is [n×k]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b.data.data() + j * k;
            // eight independent accumulators break the dependency chain of a
            // plain dot product; the combine order below is fixed, so results
            // stay run-to-run deterministic
            double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
            std::size_t p = 0;
            for (; p + 8 <= k; p += 8)
                for (std::size_t u = 0; u < 8; ++u) acc[u] += arow[p + u] * brow[p + u];
            double tail = 0.0;
            for (; p < k; ++p) tail += arow[p] * brow[p];
            c.data[i * n + j] =
                ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
        }
    }
    if (g_count_flops) g_flops += 2ull * m * n * k;
    return c;
}

// C = Aᵀ · B where A is [k×m], B is [k×n]
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
    }
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    Tensor c({m, n});
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a.data.data() + p * m;
        const double* brow = b.data.data() + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = c.data.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    if (g_count_flops) g_flops += 2ull * m * n * k;
    return c;
}

inline double sigmoid_scalar(double x) {
    // Split on sign so exp never overflows.
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.data) v = sigmoid_scalar(v);
    return y;
}

inline Tensor silu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.data) v = v * sigmoid_scalar(v);
    return y;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] *= b.data[i];
    return c;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor c = a;
    for (double& v : c.data) v *= s;
    return c;
}

// Softmax over the last dimension, max-subtracted.
inline Tensor softmax_rows(const Tensor& x) {
    if (x.ndim() == 0 || x.shape.back() < 1) throw ShapeError("softmax_rows: empty last dimension");
    const std::size_t n = x.shape.back();
    const std::size_t r = x.numel() / n;
    Tensor y = x;
    for (std::size_t i = 0; i < r; ++i) {
        double* row = y.data.data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
    }
    return y;
}

// Per row v of x: v / sqrt(mean(v²)+eps) ⊙ gain
inline Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
    const std::size_t d = x.shape.back();
    if (gain.numel() != d) {
        throw ShapeError("rmsnorm: gain length " + std::to_string(gain.numel()) +
                         " vs last dimension " + std::to_string(d));
    }
    const std::size_t r = x.numel() / d;
    Tensor y = x;
    for (std::size_t i = 0; i < r; ++i) {
        double* row = y.data.data() + i * d;
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += row[j] * row[j];
        ms /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(ms + eps);
        for (std::size_t j = 0; j < d; ++j) row[j] *= inv * gain.data[j];
    }
    return y;
}

}  // namespace ops
}  // namespace finedeep
