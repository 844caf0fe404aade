// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

#include "lpn/tensor.hpp"

// Plain (non-differentiable) rank-2 kernels. The autodiff graph wraps these
// for its forward values, so they are also the reference path for tests.
namespace lpn::kernels {

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_string(t.shape()));
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
    const std::size_t n = a.rows(), m = a.cols(), p = b.cols();
    Tensor out({n, p});
    // i-k-j order; for each output entry the k-sum runs in increasing k.
    for (std::size_t i = 0; i < n; ++i) {
        double* orow = &out.data()[i * p];
        for (std::size_t k = 0; k < m; ++k) {
            const double aik = a(i, k);
            const double* brow = &b.data()[k * p];
            for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    return a.transposed();
}

/// Softmax along `axis` (1 = within each row, 0 = within each column).
inline Tensor softmax(const Tensor& x, int axis) {
    require_rank2(x, "softmax");
    if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
    const std::size_t rows = x.rows(), cols = x.cols();
    const std::size_t lanes = axis == 1 ? rows : cols;
    const std::size_t width = axis == 1 ? cols : rows;
    if (width == 0 || lanes == 0) throw ShapeError("softmax: degenerate shape " + shape_string(x.shape()));
    Tensor out(x.shape());
    auto at = [&](std::size_t lane, std::size_t k) -> std::size_t {
        return axis == 1 ? lane * cols + k : k * cols + lane;
    };
    for (std::size_t lane = 0; lane < lanes; ++lane) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < width; ++k) mx = std::max(mx, x[at(lane, k)]);
        double total = 0.0;
        for (std::size_t k = 0; k < width; ++k) {
            const double e = std::exp(x[at(lane, k)] - mx);
            out[at(lane, k)] = e;
            total += e;
        }
        for (std::size_t k = 0; k < width; ++k) out[at(lane, k)] /= total;
    }
    return out;
}

inline Tensor softmax_rows(const Tensor& x) { return softmax(x, 1); }

/// Pairwise squared Euclidean distances between the rows of a and b.
inline Tensor sqdist(const Tensor& a, const Tensor& b) {
    require_rank2(a, "sqdist");
    require_rank2(b, "sqdist");
    if (a.cols() != b.cols()) throw ShapeError("sqdist: row widths disagree");
    Tensor out({a.rows(), b.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) {
                const double diff = a(i, k) - b(j, k);
                s += diff * diff;
            }
            out(i, j) = s;
        }
    return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

} // namespace lpn::kernels
