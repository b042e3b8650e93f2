#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mcra/errors.hpp"

namespace mcra {

/// Dense row-major matrix. The workhorse container for D x M power grids
/// and D x D gain blocks; nothing fancy, just contiguous storage.
template <typename T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::size_t size() const { return data.size(); }

    T* row_ptr(std::size_t i) { return data.data() + i * cols; }
    const T* row_ptr(std::size_t i) const { return data.data() + i * cols; }

    bool same_shape(const Matrix& other) const {
        return rows == other.rows && cols == other.cols;
    }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
    }
};

using Mat = Matrix<double>;
using MatU8 = Matrix<std::uint8_t>;

inline void require_shape(const Mat& m, std::size_t rows, std::size_t cols, const char* what) {
    if (m.rows != rows || m.cols != cols) {
        throw contract_error(std::string(what) + ": shape mismatch");
    }
}

}  // namespace mcra
