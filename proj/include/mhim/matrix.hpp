// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mhim/errors.hpp"

namespace mhim {

/**
 * Dense row-major matrix of doubles.
 *
 * Vectors are represented as 1xD (row) or Nx1 (column) matrices. A matrix
 * with zero rows is valid and is used for empty instance sets.
 */
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                                 " does not match shape " + std::to_string(rows_) + "x" +
                                 std::to_string(cols_));
        }
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("ragged initializer for Matrix");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Matrix(r, c, std::move(data));
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix row_vector(std::span<const double> values) {
        return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
    }

    static Matrix column_vector(std::span<const double> values) {
        return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline bool all_finite(const Matrix& m) {
    return std::all_of(m.values().begin(), m.values().end(),
                       [](double v) { return std::isfinite(v); });
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("max_abs_diff on " + shape_str(a) + " and " + shape_str(b));
    }
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

/// Raw kernels on values. The tape-recorded ops in tape.hpp are built on these.
namespace kernel {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

inline ConstMap as_eigen(const Matrix& m) {
    return ConstMap(m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}
inline MutMap as_eigen(Matrix& m) {
    return MutMap(m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

/// c = a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul shape mismatch: " + shape_str(a) + " * " + shape_str(b));
    }
    Matrix c(a.rows(), b.cols());
    if (c.size() != 0 && a.cols() != 0) as_eigen(c).noalias() = as_eigen(a) * as_eigen(b);
    return c;
}

/// c = a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt shape mismatch: " + shape_str(a) + " * " + shape_str(b) +
                             "^T");
    }
    Matrix c(a.rows(), b.rows());
    if (c.size() != 0 && a.cols() != 0) as_eigen(c).noalias() = as_eigen(a) * as_eigen(b).transpose();
    return c;
}

/// c = a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw DimensionError("matmul_tn shape mismatch: " + shape_str(a) + "^T * " +
                             shape_str(b));
    }
    Matrix c(a.cols(), b.cols());
    if (c.size() != 0 && a.rows() != 0) as_eigen(c).noalias() = as_eigen(a).transpose() * as_eigen(b);
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

/// Row-wise softmax of x / temperature with max subtraction.
inline Matrix softmax_rows(const Matrix& x, double temperature = 1.0) {
    if (!(temperature > 0.0)) throw ParameterError("softmax temperature must be positive");
    Matrix y(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto out = y.row(r);
        if (in.empty()) continue;
        const double mx = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            out[j] = std::exp((in[j] - mx) / temperature);
            z += out[j];
        }
        for (double& v : out) v /= z;
    }
    return y;
}

/// Row-wise log-softmax with max subtraction.
inline Matrix log_softmax_rows(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto out = y.row(r);
        if (in.empty()) continue;
        const double mx = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (double v : in) z += std::exp(v - mx);
        const double lz = mx + std::log(z);
        for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] - lz;
    }
    return y;
}

inline Matrix gather_rows(const Matrix& x, std::span<const std::size_t> idx) {
    Matrix out(idx.size(), x.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= x.rows()) {
            throw ContractError("gather_rows index " + std::to_string(idx[r]) +
                                " out of range for " + shape_str(x));
        }
        std::copy_n(x.data() + idx[r] * x.cols(), x.cols(), out.data() + r * x.cols());
    }
    return out;
}

inline Matrix concat_rows(const Matrix& top, const Matrix& bottom) {
    if (top.cols() != bottom.cols() && top.rows() != 0 && bottom.rows() != 0) {
        throw DimensionError("concat_rows shape mismatch: " + shape_str(top) + " and " +
                             shape_str(bottom));
    }
    const std::size_t cols = top.rows() != 0 ? top.cols() : bottom.cols();
    std::vector<double> data;
    data.reserve((top.rows() + bottom.rows()) * cols);
    data.insert(data.end(), top.values().begin(), top.values().end());
    data.insert(data.end(), bottom.values().begin(), bottom.values().end());
    return Matrix(top.rows() + bottom.rows(), cols, std::move(data));
}

}  // namespace kernel
}  // namespace mhim
