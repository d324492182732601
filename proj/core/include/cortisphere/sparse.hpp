#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cortisphere/matrix.hpp"

namespace cortisphere {

// Row-combination operator: output row i = (sum_k weight[k] * input row index[k]) / divisor[i]
// for k in [offsets[i], offsets[i+1]). Pooling, interpolation and row selection
// are all instances. Means use unit weights and a divisor so constants survive exactly.
struct SparseRows {
    std::size_t input_rows = 0;
    std::vector<std::size_t> offsets{0};
    std::vector<std::uint32_t> index;
    std::vector<double> weight;
    std::vector<double> divisor;

    std::size_t output_rows() const noexcept { return offsets.size() - 1; }

    void add_row(const std::vector<std::uint32_t>& rows, const std::vector<double>& weights, double divide_by = 1.0);
    // weight[k] / divisor of its row.
    double effective_weight(std::size_t row, std::size_t k) const { return weight[k] / divisor[row]; }

    Matrix apply(const Matrix& input) const;
    // Adjoint: scatter-add of an output-shaped gradient back onto input rows.
    Matrix apply_transpose(const Matrix& output_gradient) const;

    // (this after first): rows of the result combine rows of first's input.
    static SparseRows compose(const SparseRows& first, const SparseRows& second);
    static SparseRows identity(std::size_t n);
    static SparseRows select(std::size_t input_rows, const std::vector<std::uint32_t>& rows);
};

} // namespace cortisphere
