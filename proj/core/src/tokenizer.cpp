#include "cortisphere/tokenizer.hpp"

#include <cmath>
#include <sstream>

#include "cortisphere/checkpoint.hpp"
#include "cortisphere/error.hpp"
#include "cortisphere/rng.hpp"

namespace cortisphere::tokenizer {
namespace {

std::string stage_prefix(const char* side, std::size_t stage) {
    return std::string(side) + ".s" + std::to_string(stage);
}

std::string block_prefix(const char* side, std::size_t stage, int block) {
    return stage_prefix(side, stage) + ".b" + std::to_string(block);
}

std::string join(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::vector<std::size_t> split_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(static_cast<std::size_t>(std::stoull(item)));
    return out;
}

Matrix uniform_init(Rng rng, std::size_t fan_in, std::size_t fan_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Matrix m(fan_in, fan_out);
    for (double& v : m.values()) v = rng.uniform(-bound, bound);
    return m;
}

const std::vector<icosphere::NeighborRow>& ring_at(int level) { return icosphere::mesh_at(level)->neighbors; }

} // namespace

TokenizerConfig TokenizerConfig::desk() {
    TokenizerConfig c;
    c.input_level = 4;
    c.encoder_channels = {8, 16, 32};
    c.decoder_channels = {8, 16, 32};
    c.hidden_channels = 16;
    return c;
}

void TokenizerConfig::validate() const {
    if (num_downsamples < 1) throw ConfigError("num_downsamples must be at least 1");
    if (encoder_channels.size() != static_cast<std::size_t>(num_downsamples) ||
        decoder_channels.size() != static_cast<std::size_t>(num_downsamples))
        throw ConfigError("encoder/decoder channel lists must have num_downsamples (" +
                          std::to_string(num_downsamples) + ") entries, got " +
                          std::to_string(encoder_channels.size()) + " and " + std::to_string(decoder_channels.size()));
    for (auto c : encoder_channels)
        if (c < 1) throw ConfigError("encoder channels must be >= 1");
    for (auto c : decoder_channels)
        if (c < 1) throw ConfigError("decoder channels must be >= 1");
    if (hidden_channels < 1) throw ConfigError("hidden_channels must be >= 1");
    if (encoder_blocks_per_layer < 0 || decoder_blocks_per_layer < 0)
        throw ConfigError("blocks per layer must be non-negative");
    if (input_level > icosphere::kMaxLevel || token_level() < 0)
        throw ConfigError("input_level " + std::to_string(input_level) + " with " + std::to_string(num_downsamples) +
                          " downsamples leaves the supported level range");
}

std::vector<int> TokenizerConfig::stage_output_levels() const {
    std::vector<int> out;
    for (int s = 1; s <= num_downsamples; ++s) out.push_back(input_level - s);
    return out;
}

std::map<std::string, std::string> TokenizerConfig::to_map() const {
    return {
        {"input_level", std::to_string(input_level)},
        {"num_downsamples", std::to_string(num_downsamples)},
        {"encoder_channels", join(encoder_channels)},
        {"decoder_channels", join(decoder_channels)},
        {"hidden_channels", std::to_string(hidden_channels)},
        {"encoder_blocks_per_layer", std::to_string(encoder_blocks_per_layer)},
        {"decoder_blocks_per_layer", std::to_string(decoder_blocks_per_layer)},
    };
}

TokenizerConfig TokenizerConfig::from_map(const std::map<std::string, std::string>& values) {
    auto get = [&](const char* key) -> const std::string& {
        auto it = values.find(key);
        if (it == values.end()) throw ConfigError(std::string("tokenizer config missing '") + key + "'");
        return it->second;
    };
    TokenizerConfig c;
    try {
        c.input_level = std::stoi(get("input_level"));
        c.num_downsamples = std::stoi(get("num_downsamples"));
        c.encoder_channels = split_sizes(get("encoder_channels"));
        c.decoder_channels = split_sizes(get("decoder_channels"));
        c.hidden_channels = static_cast<std::size_t>(std::stoull(get("hidden_channels")));
        c.encoder_blocks_per_layer = std::stoi(get("encoder_blocks_per_layer"));
        c.decoder_blocks_per_layer = std::stoi(get("decoder_blocks_per_layer"));
    } catch (const std::logic_error& e) {
        throw ConfigError(std::string("malformed tokenizer config: ") + e.what());
    }
    c.validate();
    return c;
}

TokenizerModel build(const TokenizerConfig& config, std::uint64_t seed) {
    config.validate();
    TokenizerModel model;
    model.config = config;
    const Rng root = Rng(seed).split("tokenizer");
    auto& p = model.parameters;
    auto weight = [&](const std::string& name, std::size_t fan_in, std::size_t fan_out) {
        p.add(name, uniform_init(root.split(name), fan_in, fan_out));
    };
    auto zeros = [&](const std::string& name, std::size_t rows, std::size_t cols) { p.add(name, Matrix(rows, cols)); };
    auto block = [&](const std::string& prefix, std::size_t width) {
        weight(prefix + ".conv1.w", icosphere::kRingWidth * width, width);
        zeros(prefix + ".conv1.b", 1, width);
        zeros(prefix + ".conv2.w", icosphere::kRingWidth * width, width);
        zeros(prefix + ".conv2.b", 1, width);
    };

    const auto n = static_cast<std::size_t>(config.num_downsamples);
    std::size_t in = 1;
    for (std::size_t s = 0; s < n; ++s) {
        const std::size_t c = config.encoder_channels[s];
        const std::string sp = stage_prefix("enc", s);
        weight(sp + ".in.w", icosphere::kRingWidth * in, c);
        zeros(sp + ".in.b", 1, c);
        weight(sp + ".struct.w", kStructureChannels, c);
        weight(sp + ".pos1.w", kPositionChannels, config.hidden_channels);
        zeros(sp + ".pos1.b", 1, config.hidden_channels);
        weight(sp + ".pos2.w", config.hidden_channels, c);
        zeros(sp + ".pos2.b", 1, c);
        for (int b = 0; b < config.encoder_blocks_per_layer; ++b) block(block_prefix("enc", s, b), c);
        in = c;
    }
    for (std::size_t d = 0; d < n; ++d) {
        const std::size_t c = config.decoder_channels[n - 1 - d];
        const std::string sp = stage_prefix("dec", d);
        weight(sp + ".in.w", icosphere::kRingWidth * in, c);
        zeros(sp + ".in.b", 1, c);
        for (int b = 0; b < config.decoder_blocks_per_layer; ++b) block(block_prefix("dec", d, b), c);
        in = c;
    }
    weight("dec.head.w", icosphere::kRingWidth * in, 1);
    zeros("dec.head.b", 1, 1);
    return model;
}

ConditionSet default_conditions(int level) {
    const auto mesh = icosphere::mesh_at(level);
    return {Matrix(mesh->num_vertices(), kStructureChannels), mesh->coordinate_matrix()};
}

num::Var sphere_conv(num::Var x, num::Var weight, num::Var bias, const std::vector<icosphere::NeighborRow>& ring) {
    return num::add_row_bias(num::matmul(num::ring_gather(x, ring), weight), bias);
}

num::Var resnet_block(num::Var x, num::Var conv1_w, num::Var conv1_b, num::Var conv2_w, num::Var conv2_b,
                      const std::vector<icosphere::NeighborRow>& ring, std::optional<num::Var> condition) {
    num::Var h = sphere_conv(x, conv1_w, conv1_b, ring);
    if (condition) h = num::add(h, *condition);
    h = num::relu(h);
    return num::add(x, sphere_conv(h, conv2_w, conv2_b, ring));
}

num::Var encode(num::Tape& tape, const num::BoundParameters& params, const TokenizerConfig& config,
                const Matrix& signal, const ConditionSet& conditions) {
    const std::size_t nv = icosphere::vertex_count(config.input_level);
    if (signal.rows() != nv || signal.cols() != 1)
        throw ShapeError("encode expects a " + std::to_string(nv) + "x1 signal at level " +
                         std::to_string(config.input_level) + ", got " + signal.shape_string());
    if (conditions.structure.rows() != nv || conditions.structure.cols() != kStructureChannels)
        throw ShapeError("structure condition must be " + std::to_string(nv) + "x4, got " +
                         conditions.structure.shape_string());
    if (conditions.position.rows() != nv || conditions.position.cols() != kPositionChannels)
        throw ShapeError("position condition must be " + std::to_string(nv) + "x3, got " +
                         conditions.position.shape_string());

    Matrix structure = conditions.structure;
    Matrix position = conditions.position;
    num::Var x = tape.constant(signal);
    for (std::size_t s = 0; s < static_cast<std::size_t>(config.num_downsamples); ++s) {
        const int level = config.input_level - static_cast<int>(s);
        const auto& ring = ring_at(level);
        const std::string sp = stage_prefix("enc", s);
        if (s > 0) {
            const auto& down = icosphere::downsample_operator(level + 1);
            structure = down.apply(structure);
            position = down.apply(position);
        }
        const num::Var pos_hidden = num::relu(num::add_row_bias(
            num::matmul(tape.constant(position), params[sp + ".pos1.w"]), params[sp + ".pos1.b"]));
        const num::Var condition = num::add(
            num::matmul(tape.constant(structure), params[sp + ".struct.w"]),
            num::add_row_bias(num::matmul(pos_hidden, params[sp + ".pos2.w"]), params[sp + ".pos2.b"]));

        x = sphere_conv(x, params[sp + ".in.w"], params[sp + ".in.b"], ring);
        for (int b = 0; b < config.encoder_blocks_per_layer; ++b) {
            const std::string bp = block_prefix("enc", s, b);
            x = resnet_block(x, params[bp + ".conv1.w"], params[bp + ".conv1.b"], params[bp + ".conv2.w"],
                             params[bp + ".conv2.b"], ring, condition);
        }
        x = num::sparse_combine(x, icosphere::downsample_operator(level));
    }
    return x;
}

num::Var decode(const num::BoundParameters& params, const TokenizerConfig& config, num::Var token) {
    const std::size_t expected_rows = icosphere::vertex_count(config.token_level());
    if (token.rows() != expected_rows || token.cols() != config.token_channels())
        throw ShapeError("decode expects a " + std::to_string(expected_rows) + "x" +
                         std::to_string(config.token_channels()) + " token at level " +
                         std::to_string(config.token_level()) + ", got " + token.value().shape_string());
    num::Var x = token;
    for (std::size_t d = 0; d < static_cast<std::size_t>(config.num_downsamples); ++d) {
        const int level = config.token_level() + static_cast<int>(d);
        const auto& ring = ring_at(level);
        const std::string sp = stage_prefix("dec", d);
        x = sphere_conv(x, params[sp + ".in.w"], params[sp + ".in.b"], ring);
        for (int b = 0; b < config.decoder_blocks_per_layer; ++b) {
            const std::string bp = block_prefix("dec", d, b);
            x = resnet_block(x, params[bp + ".conv1.w"], params[bp + ".conv1.b"], params[bp + ".conv2.w"],
                             params[bp + ".conv2.b"], ring, std::nullopt);
        }
        x = num::sparse_combine(x, icosphere::upsample_operator(level));
    }
    return sphere_conv(x, params["dec.head.w"], params["dec.head.b"], ring_at(config.input_level));
}

num::Var reconstruction_loss(num::Var reconstruction, num::Var target, const Matrix& mask_weights) {
    return num::add(num::mse(reconstruction, target, mask_weights), num::l1(reconstruction, target, mask_weights));
}

FmriToken encode(const TokenizerModel& model, const SphericalSignal& signal, const ConditionSet& conditions) {
    if (signal.level != model.config.input_level)
        throw ShapeError("signal at level " + std::to_string(signal.level) + " but tokenizer expects level " +
                         std::to_string(model.config.input_level));
    num::Tape tape;
    const auto params = tape.bind(model.parameters);
    const num::Var token = encode(tape, params, model.config, signal.values, conditions);
    return {signal.hemisphere, model.config.token_level(), token.value()};
}

std::vector<FmriToken> encode_batch(const TokenizerModel& model, const std::vector<SphericalSignal>& signals,
                                    const std::vector<ConditionSet>& conditions) {
    if (signals.size() != conditions.size())
        throw ShapeError("encode_batch: " + std::to_string(signals.size()) + " signals but " +
                         std::to_string(conditions.size()) + " condition sets");
    std::vector<FmriToken> out;
    out.reserve(signals.size());
    for (std::size_t i = 0; i < signals.size(); ++i) out.push_back(encode(model, signals[i], conditions[i]));
    return out;
}

SphericalSignal decode(const TokenizerModel& model, const FmriToken& token) {
    if (token.level != model.config.token_level())
        throw ShapeError("token at level " + std::to_string(token.level) + " but tokenizer decodes level " +
                         std::to_string(model.config.token_level()));
    num::Tape tape;
    const auto params = tape.bind(model.parameters);
    const num::Var out = decode(params, model.config, tape.constant(token.features));
    return {model.config.input_level, token.hemisphere, out.value()};
}

std::size_t VertexMask::count() const {
    std::size_t n = 0;
    for (bool b : values) n += b;
    return n;
}

Matrix VertexMask::as_weights() const {
    Matrix w(values.size(), 1);
    for (std::size_t i = 0; i < values.size(); ++i) w(i, 0) = values[i] ? 1.0 : 0.0;
    return w;
}

double reconstruction_loss(const SphericalSignal& reconstruction, const SphericalSignal& target,
                           const VertexMask& mask) {
    if (reconstruction.level != target.level || !reconstruction.values.same_shape(target.values))
        throw ShapeError("reconstruction and target differ in level or shape");
    if (mask.level != target.level || mask.values.size() != target.values.rows())
        throw ShapeError("mask does not match the reconstruction level");
    if (mask.count() == 0) throw DegenerateMaskError("reconstruction mask selects no vertices");
    num::Tape tape;
    return reconstruction_loss(tape.constant(reconstruction.values), tape.constant(target.values), mask.as_weights())
        .value()(0, 0);
}

VertexMask coarsen_roi_mask(const VertexMask& mask, int target_level) {
    if (target_level >= mask.level || target_level < 0)
        throw LevelMismatchError("cannot coarsen a level-" + std::to_string(mask.level) + " mask to level " +
                                 std::to_string(target_level));
    if (mask.values.size() != icosphere::vertex_count(mask.level))
        throw ShapeError("mask length does not match level " + std::to_string(mask.level));
    VertexMask current = mask;
    while (current.level > target_level) {
        const auto fine = icosphere::mesh_at(current.level);
        VertexMask next{current.level - 1, std::vector<bool>(icosphere::vertex_count(current.level - 1), false)};
        for (std::size_t i = 0; i < next.values.size(); ++i)
            for (auto j : fine->neighbors[i])
                if (current.values[j]) {
                    next.values[i] = true;
                    break;
                }
        current = std::move(next);
    }
    return current;
}

VisionTokens select_vision_tokens(const FmriToken& left, const FmriToken& right, const VertexMask& left_mask,
                                  const VertexMask& right_mask) {
    if (left_mask.level != left.level || left_mask.values.size() != left.features.rows())
        throw ShapeError("left mask level " + std::to_string(left_mask.level) + " does not match token level " +
                         std::to_string(left.level));
    if (right_mask.level != right.level || right_mask.values.size() != right.features.rows())
        throw ShapeError("right mask level " + std::to_string(right_mask.level) + " does not match token level " +
                         std::to_string(right.level));
    if (left.features.cols() != right.features.cols())
        throw ShapeError("hemisphere tokens differ in channel count");
    VisionTokens out;
    for (std::uint32_t i = 0; i < left_mask.values.size(); ++i)
        if (left_mask.values[i]) out.left_rows.push_back(i);
    for (std::uint32_t i = 0; i < right_mask.values.size(); ++i)
        if (right_mask.values[i]) out.right_rows.push_back(i);
    const std::size_t c = left.features.cols();
    out.features = Matrix(out.left_rows.size() + out.right_rows.size(), c);
    std::size_t r = 0;
    for (auto i : out.left_rows) std::copy_n(left.features.row(i).begin(), c, out.features.row(r++).begin());
    for (auto i : out.right_rows) std::copy_n(right.features.row(i).begin(), c, out.features.row(r++).begin());
    return out;
}

void save_model(const std::string& path, const TokenizerModel& model, Hemisphere hemisphere) {
    Checkpoint ck;
    ck.kind = "tokenizer";
    ck.config = model.config.to_map();
    ck.config["hemisphere"] = std::string(1, icosphere::hemisphere_tag(hemisphere));
    ck.arrays = model.parameters;
    save_checkpoint(path, ck);
}

TokenizerModel load_model(const std::string& path, Hemisphere* hemisphere) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.kind != "tokenizer") throw ConfigError(path + ": checkpoint holds a '" + ck.kind + "', not a tokenizer");
    TokenizerModel model;
    model.config = TokenizerConfig::from_map(ck.config);
    if (hemisphere != nullptr) {
        auto it = ck.config.find("hemisphere");
        *hemisphere = icosphere::parse_hemisphere(it == ck.config.end() || it->second.empty() ? 'L' : it->second[0]);
    }
    // Keep only the model arrays; trainer state may share the file.
    const TokenizerModel reference = build(model.config, 0);
    for (const auto& [name, value] : reference.parameters) {
        if (!ck.arrays.contains(name)) throw ConfigError(path + ": missing parameter '" + name + "'");
        const Matrix& stored = ck.arrays.at(name);
        if (!stored.same_shape(value)) throw ShapeError(path + ": parameter '" + name + "' has wrong shape");
        model.parameters.add(name, stored);
    }
    return model;
}

} // namespace cortisphere::tokenizer
