#include "prompt_pet/tensor.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace prompt_pet {

namespace {

void require(bool cond, const char* what) {
    if (!cond) {
        throw std::invalid_argument(std::string("shape mismatch in ") + what);
    }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows * cols, "Matrix(rows, cols, data)");
}

Matrix Matrix::row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

void Matrix::fill(double v) {
    for (double& x : data_) {
        x = v;
    }
}

bool Matrix::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

bool Matrix::bitwise_equal(const Matrix& other) const {
    if (!same_shape(other)) {
        return false;
    }
    return data_.empty() ||
           std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

void matmul_acc(const Matrix& a, const Matrix& b, Matrix& out) {
    require(a.cols() == b.rows() && out.rows() == a.rows() && out.cols() == b.cols(), "matmul");
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        double* orow = po + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            const double* brow = pb + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& out) {
    require(a.cols() == b.cols() && out.rows() == a.rows() && out.cols() == b.rows(), "matmul_nt");
    const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = pa + i * k;
        for (std::size_t j = 0; j < m; ++j) {
            const double* brow = pb + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            po[i * m + j] += acc;
        }
    }
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
    require(a.rows() == b.rows() && out.rows() == a.cols() && out.cols() == b.cols(), "matmul_tn");
    const std::size_t r = a.rows(), n = a.cols(), m = b.cols();
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::size_t t = 0; t < r; ++t) {
        const double* brow = pb + t * m;
        for (std::size_t i = 0; i < n; ++i) {
            const double av = pa[t * n + i];
            double* orow = po + i * m;
            for (std::size_t j = 0; j < m; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    matmul_acc(a, b, out);
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.rows());
    matmul_nt_acc(a, b, out);
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    Matrix out(a.cols(), b.cols());
    matmul_tn_acc(a, b, out);
    return out;
}

void add_inplace(Matrix& dst, const Matrix& src, double scale) {
    require(dst.same_shape(src), "add_inplace");
    auto d = dst.values();
    auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += scale * s[i];
    }
}

}  // namespace prompt_pet
