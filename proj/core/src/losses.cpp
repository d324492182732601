#include "cortisphere/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cortisphere/error.hpp"

namespace cortisphere::losses {

Matrix positive_mask(std::span<const std::int64_t> image_index) {
    const std::size_t n = image_index.size();
    Matrix theta(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) theta(i, j) = image_index[i] == image_index[j] ? 1.0 : 0.0;
    return theta;
}

Matrix semantic_row_weights(std::size_t rows, std::optional<std::size_t> semantic_length) {
    if (semantic_length && (*semantic_length < 1 || *semantic_length > rows))
        throw MaskError("semantic_length " + std::to_string(*semantic_length) + " outside [1, " +
                        std::to_string(rows) + "]");
    const std::size_t keep = semantic_length.value_or(rows);
    Matrix w(rows, 1);
    for (std::size_t r = 0; r < keep; ++r) w(r, 0) = 1.0;
    return w;
}

Matrix clamp_targets(const Matrix& target) {
    Matrix out = target;
    for (double& v : out.values()) v = std::clamp(v, kTargetClampLow, kTargetClampHigh);
    return out;
}

num::Var multi_positive_infonce(num::Var query, num::Var key, std::span<const std::int64_t> image_index,
                                double temperature) {
    const std::size_t n = query.rows();
    if (n < 2) throw BatchSizeError("multi-positive InfoNCE needs at least 2 rows, got " + std::to_string(n));
    if (key.rows() != n || image_index.size() != n)
        throw ShapeError("InfoNCE: query has " + std::to_string(n) + " rows, key " + std::to_string(key.rows()) +
                         ", image_index " + std::to_string(image_index.size()));
    if (!(temperature > 0.0)) throw ParameterError("InfoNCE temperature must be positive");

    const num::Var q = num::l2_normalize_row(query);
    const num::Var k = num::l2_normalize_row(key);
    const num::Var logits = num::scale(num::matmul(q, num::transpose(k)), 1.0 / temperature);
    const num::Var all = num::log_sum_exp_row(logits);
    const num::Var pos = num::log_sum_exp_row(logits, positive_mask(image_index));
    return num::mean_all(num::subtract(all, pos));
}

num::Var bidirectional_infonce(num::Var prediction, num::Var target, std::span<const std::int64_t> image_index,
                               double temperature) {
    return num::add(multi_positive_infonce(prediction, target, image_index, temperature),
                    multi_positive_infonce(target, prediction, image_index, temperature));
}

num::Var cosine_loss(num::Var prediction, num::Var target) {
    if (prediction.rows() != target.rows() || prediction.cols() != target.cols())
        throw ShapeError("cosine loss: " + prediction.value().shape_string() + " vs " + target.value().shape_string());
    const num::Var cos = num::row_sum(num::multiply(num::l2_normalize_row(prediction), num::l2_normalize_row(target)));
    return num::offset(num::scale(num::mean_all(cos), -1.0), 1.0);
}

num::Var tokenwise_masked_mse(num::Var prediction, num::Var target, const Matrix& weights) {
    return num::mse(prediction, num::clamp(target, kTargetClampLow, kTargetClampHigh), weights);
}

double multi_positive_infonce(const EmbeddingBatch& batch) {
    num::Tape tape;
    const auto q = tape.constant(batch.query);
    const auto k = tape.constant(batch.key);
    return multi_positive_infonce(q, k, batch.image_index, batch.temperature).value()(0, 0);
}

double bidirectional_infonce(const Matrix& prediction, const Matrix& target,
                             std::span<const std::int64_t> image_index, double temperature) {
    num::Tape tape;
    const auto p = tape.constant(prediction);
    const auto t = tape.constant(target);
    return bidirectional_infonce(p, t, image_index, temperature).value()(0, 0);
}

double cosine_loss(std::span<const double> prediction, std::span<const double> target) {
    if (prediction.size() != target.size() || prediction.empty())
        throw ShapeError("cosine loss needs two non-empty vectors of equal length");
    num::Tape tape;
    const auto p = tape.constant(Matrix(1, prediction.size(), {prediction.begin(), prediction.end()}));
    const auto t = tape.constant(Matrix(1, target.size(), {target.begin(), target.end()}));
    return cosine_loss(p, t).value()(0, 0);
}

double tokenwise_masked_mse(const TokenEmbeddingPair& pair) {
    if (!pair.predicted.same_shape(pair.target))
        throw ShapeError("token-wise MSE: " + pair.predicted.shape_string() + " vs " + pair.target.shape_string());
    const Matrix weights = semantic_row_weights(pair.predicted.rows(), pair.semantic_length);
    num::Tape tape;
    const auto p = tape.constant(pair.predicted);
    const auto t = tape.constant(pair.target);
    return tokenwise_masked_mse(p, t, weights).value()(0, 0);
}

double total_alignment_loss(const LossComponents& c) {
    if (!std::isfinite(c.bi_info)) throw NumericError("bi_info loss component is not finite");
    if (!std::isfinite(c.cosine)) throw NumericError("cosine loss component is not finite");
    if (!std::isfinite(c.token_mse)) throw NumericError("token_mse loss component is not finite");
    return c.bi_info + c.cosine + c.token_mse;
}

} // namespace cortisphere::losses
