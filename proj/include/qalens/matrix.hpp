#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "qalens/errors.hpp"

namespace qalens {

// Dense row-major matrix of doubles. All model arithmetic is 64-bit and the
// summation order inside every kernel is fixed, so results are bitwise
// reproducible for a given input regardless of thread count.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    double* row_ptr(std::size_t r) { return data.data() + r * cols; }
    const double* row_ptr(std::size_t r) const { return data.data() + r * cols; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (double v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    static std::string shape_str(std::size_t r, std::size_t c) {
        return std::to_string(r) + "x" + std::to_string(c);
    }
};

inline bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

// Per-row boolean support mask, same shape as the matrix it qualifies.
struct Mask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> keep;

    Mask() = default;
    Mask(std::size_t r, std::size_t c, bool fill = true)
        : rows(r), cols(c), keep(r * c, fill ? 1 : 0) {}

    std::uint8_t& at(std::size_t r, std::size_t c) { return keep[r * cols + c]; }
    std::uint8_t at(std::size_t r, std::size_t c) const { return keep[r * cols + c]; }
};

// C = A * B. ikj loop order; per-cell accumulation is left-to-right over k.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw DimensionError("matmul: incompatible shapes " + Matrix::shape_str(a.rows, a.cols) +
                             " and " + Matrix::shape_str(b.rows, b.cols));
    }
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row_ptr(i);
        double* crow = c.row_ptr(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double av = arow[k];
            const double* brow = b.row_ptr(k);
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// C = A * B^T.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) {
        throw DimensionError("matmul_nt: incompatible shapes " + Matrix::shape_str(a.rows, a.cols) +
                             " and " + Matrix::shape_str(b.rows, b.cols) + "^T");
    }
    Matrix c(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row_ptr(i);
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* brow = b.row_ptr(j);
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
            c(i, j) = acc;
        }
    }
    return c;
}

// C = A^T * B.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) {
        throw DimensionError("matmul_tn: incompatible shapes " + Matrix::shape_str(a.rows, a.cols) +
                             "^T and " + Matrix::shape_str(b.rows, b.cols));
    }
    Matrix c(a.cols, b.cols);
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double* arow = a.row_ptr(k);
        const double* brow = b.row_ptr(k);
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double av = arow[i];
            double* crow = c.row_ptr(i);
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// Row-wise softmax restricted to the supported positions of each row.
// Unsupported positions come out exactly 0; max-subtraction keeps large
// logits from overflowing.
inline Matrix softmax_rows(const Matrix& m, const Mask& support) {
    if (support.rows != m.rows || support.cols != m.cols) {
        throw DimensionError("softmax_rows: support shape " +
                             Matrix::shape_str(support.rows, support.cols) +
                             " does not match matrix " + Matrix::shape_str(m.rows, m.cols));
    }
    Matrix out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.rows; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < m.cols; ++j) {
            if (support.at(i, j) && m(i, j) > mx) mx = m(i, j);
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw UsageError("softmax_rows: row " + std::to_string(i) + " has empty support");
        }
        double z = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) {
            if (support.at(i, j)) {
                const double e = std::exp(m(i, j) - mx);
                out(i, j) = e;
                z += e;
            }
        }
        const double inv = 1.0 / z;
        for (std::size_t j = 0; j < m.cols; ++j) out(i, j) *= inv;
    }
    return out;
}

inline Matrix softmax_rows(const Matrix& m) { return softmax_rows(m, Mask(m.rows, m.cols, true)); }

constexpr double kProbFloor = 1e-12;

// -log(predicted[target]) with a 1e-12 floor. `floored`, when supplied, is
// set if the floor fired so healthy runs can assert it never does.
inline double cross_entropy(const std::vector<double>& predicted, std::size_t target,
                            bool* floored = nullptr) {
    if (target >= predicted.size()) {
        throw UsageError("cross_entropy: target index " + std::to_string(target) +
                         " out of range for " + std::to_string(predicted.size()) + " classes");
    }
    double sum = 0.0;
    for (double p : predicted) sum += p;
    if (std::abs(sum - 1.0) > 1e-6) {
        throw UsageError("cross_entropy: predicted vector sums to " + std::to_string(sum));
    }
    double p = predicted[target];
    if (p < kProbFloor) {
        p = kProbFloor;
        if (floored) *floored = true;
    }
    return -std::log(p);
}

}  // namespace qalens
