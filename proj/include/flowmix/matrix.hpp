#ifndef FLOWMIX_MATRIX_HPP
#define FLOWMIX_MATRIX_HPP

#include <cstddef>
#include <span>
#include <vector>

#include "flowmix/errors.hpp"

namespace flowmix {

/// Dense row-major matrix of doubles. The plain value type used outside the
/// autodiff graph (datasets, samples, responsibilities, reports).
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> values)
        : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != rows * cols)
            throw ShapeError("Matrix: value count does not match extents");
    }

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const double> row(std::size_t i) const {
        return {data.data() + i * cols, cols};
    }

    bool empty() const { return rows == 0 || cols == 0; }
};

} // namespace flowmix

#endif
