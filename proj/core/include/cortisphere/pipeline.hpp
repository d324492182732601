#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cortisphere/augment.hpp"
#include "cortisphere/icosphere.hpp"
#include "cortisphere/matrix.hpp"
#include "cortisphere/rng.hpp"
#include "cortisphere/tokenizer.hpp"

namespace cortisphere::pipeline {

using icosphere::Hemisphere;

// ---- signal files ------------------------------------------------------------

// Samples of one hemisphere at one level. On disk ("SPH1"):
//
//   offset  size  field
//   0       4     magic "SPH1"
//   4       4     u32 level
//   8       1     hemisphere 'L' / 'R'
//   9       1     element type, 1 = little-endian f32
//   10      2     reserved, zero
//   12      4     u32 channel count
//   16      4     u32 sample count
//   20      ...   payload, sample x vertex x channel, row-major f32
//   end-4   4     u32 CRC-32 of every preceding byte
struct SignalSet {
    int level = 0;
    Hemisphere hemisphere = Hemisphere::left;
    std::size_t channels = 1;
    std::vector<Matrix> samples; // each V x channels

    std::size_t vertices() const { return icosphere::vertex_count(level); }
    void validate() const;
};

std::vector<unsigned char> serialize_signals(const SignalSet& set);
SignalSet deserialize_signals(const std::vector<unsigned char>& bytes, const std::string& source = "signal file");
void write_signal_file(const std::string& path, const SignalSet& set);
SignalSet read_signal_file(const std::string& path);

// ---- manifest ----------------------------------------------------------------

enum class Split { train, val, test };
std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct ManifestRecord {
    std::int64_t sample_id = 0;
    std::int64_t image_id = 0;
    int scan_index = 1; // 1..3
    int subject_id = 0;
    Split split = Split::train;
    std::string left;   // "file#row"
    std::string right;
    std::string target;
    std::size_t semantic_length = 1;
};

// One record per line of space-separated key=value pairs; lines starting
// with "#" carry dataset-level metadata as "# key=value".
struct Manifest {
    std::map<std::string, std::string> meta;
    std::vector<ManifestRecord> records;

    // Train images have exactly three scans; no image spans two splits.
    void validate() const;
    std::vector<std::int64_t> images(Split split) const;
    std::array<std::int64_t, 3> scans_of(std::int64_t image_id) const;
    const ManifestRecord& first_record_of(std::int64_t image_id) const;
};

std::string format_manifest(const Manifest& manifest);
Manifest parse_manifest(const std::string& text, const std::string& source = "manifest");
void write_manifest(const std::string& path, const Manifest& manifest);
Manifest read_manifest(const std::string& path);

struct Locator {
    std::string file;
    std::size_t row = 0;
};
Locator parse_locator(const std::string& text);

// ---- z-scoring ----------------------------------------------------------------

inline constexpr double kStdFloor = 1e-8;

struct ZScoreStats {
    int level = 0;
    Hemisphere hemisphere = Hemisphere::left;
    std::string source_split = "train";
    Matrix mean; // V x C
    Matrix std;  // V x C, population convention, floored at kStdFloor
};

ZScoreStats zscore_fit(const SignalSet& train);
SignalSet zscore_apply(const SignalSet& signals, const ZScoreStats& stats);
void write_zscore_stats(const std::string& path, const ZScoreStats& stats);
ZScoreStats read_zscore_stats(const std::string& path);

// ---- batching ------------------------------------------------------------------

// b = 3B / (3 + (K - 3) lambda), so that lambda K b + 3 (1 - lambda) b = 3B.
// Throws ConfigError listing nearby valid settings when b is not a positive integer.
std::size_t balanced_image_count(double lambda, int k, std::size_t base_batch);

struct BatchSample {
    std::int64_t image_id = 0;
    augment::SimplexWeights weights; // applied to the image's scans 1..3
    bool mixed = false;
    int scan = -1; // 0..2 for an original scan passed through untouched
};

struct AlignmentBatch {
    std::vector<std::int64_t> images;
    std::vector<BatchSample> samples;
    std::vector<std::int64_t> image_index() const;
};

// Draws b = balanced_image_count(...) distinct images from `available` and
// plans each one's mixup. Raises DataError when too few images remain.
AlignmentBatch assemble_batch(std::span<const std::int64_t> available, const augment::MixupConfig& config,
                              std::size_t base_batch, Rng& rng);

struct TrainMixupConfig {
    double ratio = 0.3;
    double beta = 0.3;
};

struct Blend {
    std::size_t sample = 0;
    std::size_t partner = 0;
    double weight = 1.0; // weight on the sample itself
};

struct TrainMixupResult {
    std::vector<Blend> blends;
    bool skipped = false; // batch too small to pick partners
};

// With probability `ratio` per sample, replace it by w * x + (1 - w) * partner,
// w ~ Beta(beta, beta), partner drawn from the rest of the batch. Targets (if
// given) receive the identical blend. Partners are read from the unmixed batch.
TrainMixupResult tokenizer_train_mixup(std::vector<Matrix>& inputs, std::vector<Matrix>* targets,
                                       const TrainMixupConfig& config, Rng& rng,
                                       std::optional<double> forced_weight = std::nullopt);

// ---- targets -----------------------------------------------------------------

// Per-image target embeddings: image tokens (T_img x d) and text tokens
// (T_txt x d) with the text's semantic length. On disk ("EMB1"): u32 count,
// u32 image_tokens, u32 text_tokens, u32 dim, then per image a u32 semantic
// length, the image tokens and the text tokens as f64, and a trailing CRC-32.
struct EmbeddingTable {
    std::size_t image_tokens = 0;
    std::size_t text_tokens = 0;
    std::size_t dim = 0;
    std::vector<Matrix> image;
    std::vector<Matrix> text;
    std::vector<std::size_t> semantic_length;
};

void write_embedding_file(const std::string& path, const EmbeddingTable& table);
EmbeddingTable read_embedding_file(const std::string& path);

// ---- datasets ------------------------------------------------------------------

struct Dataset {
    int level = 0;
    Manifest manifest;
    SignalSet left;
    SignalSet right;
    SignalSet structure_left;  // one sample per subject, 4 channels
    SignalSet structure_right;
    tokenizer::VertexMask roi_left;
    tokenizer::VertexMask roi_right;
    EmbeddingTable targets; // indexed by image id

    const SignalSet& signals(Hemisphere h) const { return h == Hemisphere::left ? left : right; }
    SignalSet& signals(Hemisphere h) { return h == Hemisphere::left ? left : right; }
    const tokenizer::VertexMask& roi(Hemisphere h) const { return h == Hemisphere::left ? roi_left : roi_right; }
    const Matrix& structure(Hemisphere h, int subject) const;
    // Sample rows of every scan in a split.
    std::vector<std::int64_t> samples(Split split) const;
};

struct SyntheticSpec {
    int level = 4;
    std::size_t train_images = 64;
    std::size_t val_images = 16;
    std::size_t test_images = 16;
    std::size_t subjects = 2;
    std::size_t caps_per_hemisphere = 4;
    double scan_noise = 0.05;
    // Mean offset added to val/test signals.
    double shift = 0.0;
    std::size_t embedding_dim = 16;
    std::size_t image_tokens = 4;
    std::size_t text_tokens = 8;
    std::uint64_t seed = 0;
};

Dataset generate_synthetic_dataset(const SyntheticSpec& spec);
// Writes manifest.txt plus the signal, structure, ROI and target files.
void save_dataset(const std::string& directory, const Dataset& dataset);
Dataset load_dataset(const std::string& manifest_path);

// Z-scores both hemispheres with train-split statistics.
struct NormalizedDataset {
    Dataset data;
    ZScoreStats left_stats;
    ZScoreStats right_stats;
};
NormalizedDataset normalize_dataset(const Dataset& raw);

} // namespace cortisphere::pipeline
