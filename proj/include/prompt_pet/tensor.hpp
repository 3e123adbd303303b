#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace prompt_pet {

// Dense row-major matrix of doubles. Vectors are 1×n matrices.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix row_vector(std::span<const double> values);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    const std::vector<double>& storage() const { return data_; }

    void fill(double v);
    bool all_finite() const;

    // Elementwise equality of shape and bits (distinguishes -0.0 and NaN payloads).
    bool bitwise_equal(const Matrix& other) const;
    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// out = a · b
Matrix matmul(const Matrix& a, const Matrix& b);
// out = a · bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// out = aᵀ · b
Matrix matmul_tn(const Matrix& a, const Matrix& b);

// Accumulating variants: out += ...
void matmul_acc(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out);

void add_inplace(Matrix& dst, const Matrix& src, double scale = 1.0);

}  // namespace prompt_pet
