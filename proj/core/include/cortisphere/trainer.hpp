#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cortisphere/augment.hpp"
#include "cortisphere/losses.hpp"
#include "cortisphere/numerics.hpp"
#include "cortisphere/pipeline.hpp"
#include "cortisphere/tokenizer.hpp"

namespace cortisphere::trainer {

using icosphere::Hemisphere;

enum class Stage { tokenizer, aligner };
std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view name);

struct TrainConfig {
    Stage stage = Stage::tokenizer;
    int epochs = 80;
    double learning_rate = 4.0e-5;
    double weight_decay = 0.05;
    double max_grad_norm = 0.1;
    // Tokenizer: samples per step. Aligner: the base batch B of the balancing rule.
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    unsigned threads = 1;

    // tokenizer stage
    double rotation_degrees = 5.0;
    pipeline::TrainMixupConfig train_mixup;
    // Scans of each train image visited per epoch (1..3).
    int scans_per_epoch = 3;

    // aligner stage
    augment::MixupConfig mixup;
    double dropout = 0.5;
    std::size_t hidden = 256;
    double temperature = 0.1;
    bool share_hemisphere_mixup = true;

    static TrainConfig defaults(Stage stage);
    // Sizes that finish on one CPU core in minutes.
    static TrainConfig desk(Stage stage);

    void validate() const;
    std::map<std::string, std::string> to_map() const;
    // Overlays `values` on `base`; unknown keys raise ConfigError.
    static TrainConfig from_map(const std::map<std::string, std::string>& values, TrainConfig base);
};

// base * 0.5 * (1 + cos(pi * step / total)).
double cosine_lr(std::size_t step, std::size_t total_steps, double base);

// Rescales every gradient by max_norm / g when the global L2 norm g exceeds
// max_norm. Returns g. Non-finite entries raise NumericError naming the tensor.
double clip_gradients(num::Gradients& grads, double max_norm);

struct AdamState {
    num::ParameterSet m;
    num::ParameterSet v;
    std::uint64_t step = 0;

    static AdamState zeros_like(const num::ParameterSet& params);
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// Adam moments with decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
void optimizer_step(num::ParameterSet& params, const num::Gradients& grads, double lr, double weight_decay,
                    AdamState& state);

// ---- metric log -----------------------------------------------------------------

class MetricLog {
public:
    MetricLog() = default;
    explicit MetricLog(std::vector<std::string> columns) : columns_(std::move(columns)) {}

    // Rewrites the file with the header and, when resuming, the rows it already
    // holds up to `keep_through_epoch`; those rows are loaded into the log.
    // Every later append also goes to the file.
    void attach(const std::string& path, int keep_through_epoch = 0);
    void append(const std::vector<double>& row);

    const std::vector<std::string>& columns() const { return columns_; }
    const std::vector<std::vector<double>>& rows() const { return rows_; }
    bool empty() const { return rows_.empty(); }
    double value(std::size_t row, std::string_view column) const;
    std::string to_csv() const;

private:
    std::vector<std::string> columns_;
    std::vector<std::vector<double>> rows_;
    std::string path_;
};

std::string format_csv_row(const std::vector<double>& row);

// ---- tokenizer stage --------------------------------------------------------------

struct TrainOptions {
    // Checkpoints and the metric CSV land here when non-empty.
    std::string output_dir;
    // Checkpoint to continue from (a "last" checkpoint written by a previous run).
    std::string resume_from;
    // Progress lines.
    std::function<void(const std::string&)> progress;
    // Stop after this many completed epochs (as if interrupted); 0 runs to the end.
    int stop_after_epoch = 0;
};

struct TokenizerTrainResult {
    tokenizer::TokenizerModel model;
    MetricLog log;
    double initial_train_mse = 0.0;
    double final_train_mse = 0.0;
    double best_val_loss = 0.0;
    int best_epoch = -1;
};

// Masked MSE of decode(encode(x)) against x over the ROI, averaged over samples.
double masked_reconstruction_mse(const tokenizer::TokenizerModel& model, const pipeline::Dataset& data, Hemisphere h,
                                 const std::vector<std::int64_t>& samples, unsigned threads = 1);

// `data` must already be z-scored.
TokenizerTrainResult train_tokenizer(const TrainConfig& config, const tokenizer::TokenizerConfig& model_config,
                                     const pipeline::Dataset& data, Hemisphere hemisphere,
                                     const TrainOptions& options = {});

// ---- aligner stage ----------------------------------------------------------------

struct PredictorConfig {
    std::size_t input_features = 0;
    std::size_t hidden = 256;
    std::size_t image_tokens = 1;
    std::size_t text_tokens = 2;
    std::size_t dim = 1;
    double dropout = 0.5;

    std::size_t output_width() const { return (image_tokens + text_tokens) * dim; }
    void validate() const;
    std::map<std::string, std::string> to_map() const;
    static PredictorConfig from_map(const std::map<std::string, std::string>& values);
};

// Flattened vision tokens -> relu hidden layer -> dropout -> projection to
// (image tokens, text tokens), laid out token-major in one output row.
struct EmbeddingPredictor {
    PredictorConfig config;
    num::ParameterSet parameters;

    static EmbeddingPredictor build(const PredictorConfig& config, std::uint64_t seed);
    // n x input_features -> n x output_width. `keep_mask` (n x hidden, already
    // scaled by 1/(1-p)) is applied before the projection; empty means eval mode.
    num::Var forward(const num::BoundParameters& params, num::Var inputs, const Matrix& keep_mask = {}) const;
    Matrix predict(const Matrix& inputs) const;
};

void save_predictor(const std::string& path, const EmbeddingPredictor& predictor,
                    const std::map<std::string, std::string>& extra = {});
EmbeddingPredictor load_predictor(const std::string& path);

// Targets of one batch, rows aligned with predictions.
struct BatchTargets {
    Matrix image_tokens;  // n x (T_img * d), clamped
    Matrix text_tokens;   // n x (T_txt * d), clamped
    Matrix text_weights;  // n x (T_txt * d), 1 inside the semantic prefix
    Matrix eos_mask;      // n x (T_txt * d), 1 on each row's end-marker token
    std::vector<std::int64_t> image_index;
};

BatchTargets gather_targets(const pipeline::EmbeddingTable& table, const std::vector<std::int64_t>& image_ids);

struct AlignmentLossVars {
    num::Var total;
    num::Var bi_info;
    num::Var cosine;
    num::Var token_mse;
    num::Var image_vector; // n x d contrastive image embedding
};

// L = L_biInfo(image) + L_biInfo(text) + L_cos(image) + L_cos(text) + L_MSE(image) + L_MSE(text).
AlignmentLossVars alignment_loss(num::Tape& tape, num::Var prediction, const BatchTargets& targets,
                                 const PredictorConfig& layout, double temperature);

// Fraction of rows whose most cosine-similar key row belongs to the same image.
double retrieval_accuracy(const Matrix& query, const Matrix& key, const std::vector<std::int64_t>& image_index);

// Flattened vision tokens for one pair of hemisphere signals.
Matrix vision_features(const tokenizer::TokenizerModel& left, const tokenizer::TokenizerModel& right,
                       const pipeline::Dataset& data, int subject, const Matrix& left_signal,
                       const Matrix& right_signal, const tokenizer::VertexMask& left_mask,
                       const tokenizer::VertexMask& right_mask);

struct AlignerTrainResult {
    EmbeddingPredictor predictor;
    MetricLog log;
    std::size_t images_per_batch = 0;
    double final_train_retrieval = 0.0;
    double final_val_retrieval = 0.0;
    double val_chance = 0.0;
};

struct EvaluationResult {
    double retrieval = 0.0;
    double chance = 0.0;
    losses::LossComponents components;
    std::size_t images = 0;
};

// Scan-mean inference over a split, scored in groups of `group` images.
EvaluationResult evaluate_aligner(const EmbeddingPredictor& predictor, const tokenizer::TokenizerModel& left,
                                  const tokenizer::TokenizerModel& right, const pipeline::Dataset& data,
                                  pipeline::Split split, std::size_t group, double temperature, unsigned threads = 1);

AlignerTrainResult train_aligner(const TrainConfig& config, const pipeline::Dataset& data,
                                 const tokenizer::TokenizerModel& left, const tokenizer::TokenizerModel& right,
                                 const TrainOptions& options = {});

} // namespace cortisphere::trainer
