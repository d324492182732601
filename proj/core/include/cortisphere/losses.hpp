#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cortisphere/matrix.hpp"
#include "cortisphere/numerics.hpp"

// Alignment objectives between predicted and target embeddings.
//
// Every loss exists twice: a taped form used in training and gradient
// checks, and a value form over plain matrices that records a throwaway tape.
namespace cortisphere::losses {

inline constexpr double kDefaultTemperature = 0.1;
inline constexpr double kTargetClampLow = -1.5;
inline constexpr double kTargetClampHigh = 1.5;

struct EmbeddingBatch {
    Matrix query;                        // n x d, predictions
    Matrix key;                          // n x d, targets
    std::vector<std::int64_t> image_index; // rows sharing an index are positives
    double temperature = kDefaultTemperature;
};

struct TokenEmbeddingPair {
    Matrix predicted; // T x d
    Matrix target;    // T x d
    // Rows 0..semantic_length-1 carry meaning (end marker inclusive).
    // nullopt means every row counts, as for image tokens.
    std::optional<std::size_t> semantic_length;
};

struct LossComponents {
    double bi_info = 0.0;
    double cosine = 0.0;
    double token_mse = 0.0;
};

// theta_ij = 1 when rows i and j share an image index.
Matrix positive_mask(std::span<const std::int64_t> image_index);
// T x 1 row weights: 1 for rows below semantic_length, 0 after.
Matrix semantic_row_weights(std::size_t rows, std::optional<std::size_t> semantic_length);
Matrix clamp_targets(const Matrix& target);

// ---- taped -----------------------------------------------------------------

// mean_i [ logsumexp_j W_ij - logsumexp_{j: I_j = I_i} W_ij ],
// W = normalize(query) normalize(key)^T / temperature.
num::Var multi_positive_infonce(num::Var query, num::Var key, std::span<const std::int64_t> image_index,
                                double temperature = kDefaultTemperature);
num::Var bidirectional_infonce(num::Var prediction, num::Var target, std::span<const std::int64_t> image_index,
                               double temperature = kDefaultTemperature);
// Mean over rows of 1 - cos(prediction_i, target_i).
num::Var cosine_loss(num::Var prediction, num::Var target);
// Squared error averaged over entries with nonzero weight. The target is
// clamped first; `weights` is empty, rows x 1 or full-shape.
num::Var tokenwise_masked_mse(num::Var prediction, num::Var target, const Matrix& weights = {});

// ---- values ----------------------------------------------------------------

double multi_positive_infonce(const EmbeddingBatch& batch);
double bidirectional_infonce(const Matrix& prediction, const Matrix& target,
                             std::span<const std::int64_t> image_index, double temperature = kDefaultTemperature);
double cosine_loss(std::span<const double> prediction, std::span<const double> target);
double tokenwise_masked_mse(const TokenEmbeddingPair& pair);
// Unweighted sum; a non-finite component raises NumericError naming it.
double total_alignment_loss(const LossComponents& components);

} // namespace cortisphere::losses
