#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cortisphere/icosphere.hpp"
#include "cortisphere/matrix.hpp"
#include "cortisphere/numerics.hpp"

// Sphere tokenizer: a conditional ResNet encoder that pools a one-channel
// cortical signal down the icosphere hierarchy into coarse feature tokens,
// and a light decoder that interpolates tokens back to the input level.
//
// Encoder stage s runs at level input_level - s:
//   sphere_conv(in -> c_s), blocks conditioned on (structure, position), pool.
// Decoder stage d runs at level token_level + d:
//   sphere_conv(in -> width), plain blocks, upsample; then a 1-channel head.
// Block: x + conv2(relu(conv1(x) + condition)).
namespace cortisphere::tokenizer {

using icosphere::Hemisphere;
using icosphere::SphericalSignal;

inline constexpr std::size_t kStructureChannels = 4; // thickness, area, sulcal depth, curvature
inline constexpr std::size_t kPositionChannels = 3;

struct TokenizerConfig {
    int input_level = 6;
    int num_downsamples = 3;
    std::vector<std::size_t> encoder_channels{64, 128, 256};
    std::vector<std::size_t> decoder_channels{32, 64, 128};
    std::size_t hidden_channels = 32;
    int encoder_blocks_per_layer = 4;
    int decoder_blocks_per_layer = 2;

    // Level 4 input, narrow channels: trains on one CPU core in minutes.
    static TokenizerConfig desk();

    void validate() const;
    int token_level() const { return input_level - num_downsamples; }
    std::size_t token_channels() const { return encoder_channels.back(); }
    // Mesh level after each encoder stage's pooling.
    std::vector<int> stage_output_levels() const;

    std::map<std::string, std::string> to_map() const;
    static TokenizerConfig from_map(const std::map<std::string, std::string>& values);

    friend bool operator==(const TokenizerConfig&, const TokenizerConfig&) = default;
};

struct ConditionSet {
    Matrix structure; // V x 4, z-scored per hemisphere
    Matrix position;  // V x 3 unit coordinates (possibly rotated)
};

struct FmriToken {
    Hemisphere hemisphere = Hemisphere::left;
    int level = 0;
    Matrix features; // V' x C
};

struct TokenizerModel {
    TokenizerConfig config;
    num::ParameterSet parameters;

    std::size_t parameter_count() const { return parameters.scalar_count(); }
};

// Uniform fan-in initialisation from per-parameter streams of `seed`;
// every block's second convolution starts at zero.
TokenizerModel build(const TokenizerConfig& config, std::uint64_t seed);

// Mesh coordinates at `level` with zero structure: a neutral condition set.
ConditionSet default_conditions(int level);

// ---- taped building blocks -------------------------------------------------

// 7-tap neighbourhood gather followed by a channel mix: (V x C) -> (V x C_out).
num::Var sphere_conv(num::Var x, num::Var weight, num::Var bias, const std::vector<icosphere::NeighborRow>& ring);

num::Var resnet_block(num::Var x, num::Var conv1_w, num::Var conv1_b, num::Var conv2_w, num::Var conv2_b,
                      const std::vector<icosphere::NeighborRow>& ring, std::optional<num::Var> condition);

num::Var encode(num::Tape& tape, const num::BoundParameters& params, const TokenizerConfig& config,
                const Matrix& signal, const ConditionSet& conditions);
num::Var decode(const num::BoundParameters& params, const TokenizerConfig& config, num::Var token);

// Mean-over-mask MSE plus mean-over-mask L1; weights are V x 1 (0/1).
num::Var reconstruction_loss(num::Var reconstruction, num::Var target, const Matrix& mask_weights);

// ---- value-level API -------------------------------------------------------

FmriToken encode(const TokenizerModel& model, const SphericalSignal& signal, const ConditionSet& conditions);
std::vector<FmriToken> encode_batch(const TokenizerModel& model, const std::vector<SphericalSignal>& signals,
                                    const std::vector<ConditionSet>& conditions);
SphericalSignal decode(const TokenizerModel& model, const FmriToken& token);

struct VertexMask {
    int level = 0;
    std::vector<bool> values;
    std::size_t count() const;
    Matrix as_weights() const; // V x 1 of 0/1
};

double reconstruction_loss(const SphericalSignal& reconstruction, const SphericalSignal& target,
                           const VertexMask& mask);

// Coarse vertex is set iff any vertex in its composed pooling receptive field is.
VertexMask coarsen_roi_mask(const VertexMask& mask, int target_level);

struct VisionTokens {
    Matrix features;                    // selected left rows, then selected right rows
    std::vector<std::uint32_t> left_rows;
    std::vector<std::uint32_t> right_rows;
};

VisionTokens select_vision_tokens(const FmriToken& left, const FmriToken& right, const VertexMask& left_mask,
                                  const VertexMask& right_mask);

void save_model(const std::string& path, const TokenizerModel& model, Hemisphere hemisphere);
TokenizerModel load_model(const std::string& path, Hemisphere* hemisphere = nullptr);

} // namespace cortisphere::tokenizer
