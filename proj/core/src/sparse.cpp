#include "cortisphere/sparse.hpp"

#include <map>

#include "cortisphere/error.hpp"

namespace cortisphere {

void SparseRows::add_row(const std::vector<std::uint32_t>& rows, const std::vector<double>& weights,
                         double divide_by) {
    if (rows.size() != weights.size()) throw ShapeError("SparseRows::add_row: index/weight length mismatch");
    if (!(divide_by != 0.0)) throw ParameterError("SparseRows::add_row: zero divisor");
    for (std::size_t k = 0; k < rows.size(); ++k) {
        if (rows[k] >= input_rows) throw BoundsError("SparseRows::add_row: row index out of range");
        index.push_back(rows[k]);
        weight.push_back(weights[k]);
    }
    offsets.push_back(index.size());
    divisor.push_back(divide_by);
}

Matrix SparseRows::apply(const Matrix& input) const {
    if (input.rows() != input_rows)
        throw ShapeError("sparse row combine expects " + std::to_string(input_rows) + " rows, got " +
                         input.shape_string());
    const std::size_t cols = input.cols();
    Matrix out(output_rows(), cols);
    for (std::size_t i = 0; i < output_rows(); ++i) {
        double* dst = out.data() + i * cols;
        for (std::size_t k = offsets[i]; k < offsets[i + 1]; ++k) {
            const double w = weight[k];
            const double* src = input.data() + static_cast<std::size_t>(index[k]) * cols;
            for (std::size_t c = 0; c < cols; ++c) dst[c] += w * src[c];
        }
        if (const double d = divisor[i]; d != 1.0)
            for (std::size_t c = 0; c < cols; ++c) dst[c] /= d;
    }
    return out;
}

Matrix SparseRows::apply_transpose(const Matrix& output_gradient) const {
    if (output_gradient.rows() != output_rows())
        throw ShapeError("sparse row adjoint expects " + std::to_string(output_rows()) + " rows, got " +
                         output_gradient.shape_string());
    const std::size_t cols = output_gradient.cols();
    Matrix out(input_rows, cols);
    for (std::size_t i = 0; i < output_rows(); ++i) {
        const double* src = output_gradient.data() + i * cols;
        for (std::size_t k = offsets[i]; k < offsets[i + 1]; ++k) {
            const double w = effective_weight(i, k);
            double* dst = out.data() + static_cast<std::size_t>(index[k]) * cols;
            for (std::size_t c = 0; c < cols; ++c) dst[c] += w * src[c];
        }
    }
    return out;
}

SparseRows SparseRows::compose(const SparseRows& first, const SparseRows& second) {
    if (second.input_rows != first.output_rows())
        throw ShapeError("SparseRows::compose: inner dimensions differ");
    SparseRows out;
    out.input_rows = first.input_rows;
    for (std::size_t i = 0; i < second.output_rows(); ++i) {
        std::map<std::uint32_t, double> acc;
        for (std::size_t k = second.offsets[i]; k < second.offsets[i + 1]; ++k) {
            const std::size_t mid = second.index[k];
            for (std::size_t t = first.offsets[mid]; t < first.offsets[mid + 1]; ++t)
                acc[first.index[t]] += second.effective_weight(i, k) * first.effective_weight(mid, t);
        }
        std::vector<std::uint32_t> rows;
        std::vector<double> weights;
        for (const auto& [r, w] : acc) {
            rows.push_back(r);
            weights.push_back(w);
        }
        out.add_row(rows, weights);
    }
    return out;
}

SparseRows SparseRows::identity(std::size_t n) {
    SparseRows out;
    out.input_rows = n;
    out.index.reserve(n);
    out.weight.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.add_row({static_cast<std::uint32_t>(i)}, {1.0});
    return out;
}

SparseRows SparseRows::select(std::size_t input_rows, const std::vector<std::uint32_t>& rows) {
    SparseRows out;
    out.input_rows = input_rows;
    for (auto r : rows) out.add_row({r}, {1.0});
    return out;
}

} // namespace cortisphere
