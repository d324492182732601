#include "cortisphere/matrix.hpp"

#include <algorithm>
#include <cmath>

#include "cortisphere/error.hpp"

#include <Eigen/Core>

namespace cortisphere {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t n = rows.size();
    const std::size_t m = n == 0 ? 0 : rows.begin()->size();
    Matrix out(n, m);
    std::size_t r = 0;
    for (const auto& row : rows) {
        if (row.size() != m) throw ShapeError("ragged initializer for Matrix::from_rows");
        std::copy(row.begin(), row.end(), out.row(r).begin());
        ++r;
    }
    return out;
}

Matrix Matrix::identity(std::size_t n) {
    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
    return out;
}

std::string Matrix::shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Matrix Matrix::transposed() const {
    Matrix out(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
    return out;
}

namespace kernels {

namespace {

// Below this many multiply-adds the plain loops beat Eigen's blocking overhead.
constexpr std::size_t kGemmThreshold = 4096;

bool use_gemm(std::size_t m, std::size_t n, std::size_t k) { return m * n * k >= kGemmThreshold; }

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMajor>;
using View = Eigen::Map<RowMajor>;

ConstView view(const Matrix& m) {
    return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
View view(Matrix& m) { return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())}; }

} // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + a.shape_string() + " * " + b.shape_string());
    Matrix out(a.rows(), b.cols());
    const std::size_t m = a.rows(), n = b.cols(), k = a.cols();
    if (m == 0 || n == 0 || k == 0) return out;
    if (use_gemm(m, n, k)) {
        view(out).noalias() = view(a) * view(b);
        return out;
    }
    for (std::size_t i = 0; i < m; ++i) {
        double* dst = out.data() + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const double ait = a(i, t);
            const double* src = b.data() + t * n;
            for (std::size_t j = 0; j < n; ++j) dst[j] += ait * src[j];
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: " + a.shape_string() + " * (" + b.shape_string() + ")^T");
    Matrix out(a.rows(), b.rows());
    const std::size_t m = a.rows(), n = b.rows(), k = a.cols();
    if (m == 0 || n == 0 || k == 0) return out;
    if (use_gemm(m, n, k)) {
        view(out).noalias() = view(a) * view(b).transpose();
        return out;
    }
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b.data() + j * k;
            double sum = 0.0;
            for (std::size_t t = 0; t < k; ++t) sum += ai[t] * bj[t];
            out(i, j) = sum;
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        throw ShapeError("matmul_tn: (" + a.shape_string() + ")^T * " + b.shape_string());
    Matrix out(a.cols(), b.cols());
    const std::size_t m = a.cols(), n = b.cols(), k = a.rows();
    if (m == 0 || n == 0 || k == 0) return out;
    if (use_gemm(m, n, k)) {
        view(out).noalias() = view(a).transpose() * view(b);
        return out;
    }
    for (std::size_t r = 0; r < k; ++r) {
        const double* br = b.data() + r * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double ari = a(r, i);
            double* dst = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) dst[j] += ari * br[j];
        }
    }
    return out;
}

void add_inplace(Matrix& target, const Matrix& other, double scale) {
    if (!target.same_shape(other))
        throw ShapeError("add_inplace: " + target.shape_string() + " vs " + other.shape_string());
    for (std::size_t i = 0; i < target.size(); ++i) target[i] += scale * other[i];
}

double max_abs(const Matrix& m) {
    double best = 0.0;
    for (double v : m.values()) best = std::max(best, std::abs(v));
    return best;
}

double frobenius_norm(const Matrix& m) {
    double sum = 0.0;
    for (double v : m.values()) sum += v * v;
    return std::sqrt(sum);
}

} // namespace kernels

} // namespace cortisphere
