#include "cortisphere/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "cortisphere/binary_io.hpp"
#include "cortisphere/error.hpp"

namespace cortisphere::pipeline {

namespace fs = std::filesystem;

namespace {

constexpr char kSignalMagic[4] = {'S', 'P', 'H', '1'};
constexpr char kStatsMagic[4] = {'Z', 'S', 'T', '1'};
constexpr char kEmbeddingMagic[4] = {'E', 'M', 'B', '1'};
constexpr std::uint8_t kElementF32 = 1;

void expect_magic(io::ByteReader& in, const char (&magic)[4]) {
    if (in.remaining() < 4) throw TruncationError(in.source() + ": file shorter than its magic");
    const unsigned char* p = in.take(4);
    if (std::memcmp(p, magic, 4) != 0)
        throw BadMagicError(in.source() + ": expected magic '" + std::string(magic, 4) + "'");
}

// Verifies and strips the trailing CRC-32 over all preceding bytes.
void verify_trailing_crc(const std::vector<unsigned char>& bytes, std::size_t header_min, const std::string& source) {
    if (bytes.size() < header_min + 4) throw TruncationError(source + ": truncated (" + std::to_string(bytes.size()) + " bytes)");
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (io::crc32(bytes.data(), bytes.size() - 4) != stored) throw ChecksumError(source + ": checksum mismatch");
}

void append_crc(io::ByteWriter& out) { out.put(io::crc32(out.bytes().data(), out.size())); }

void check_magic_prefix(const std::vector<unsigned char>& bytes, const char (&magic)[4], const std::string& source) {
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), magic, 4) != 0)
        throw BadMagicError(source + ": expected magic '" + std::string(magic, 4) + "'");
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

long long parse_int(const std::string& text, const std::string& what) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw DataError(what + ": '" + text + "' is not an integer");
    }
}

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Matrix scale_add(const Matrix& a, double wa, const Matrix& b, double wb) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = wa * a[i] + wb * b[i];
    return out;
}

} // namespace

// ---- signal files ------------------------------------------------------------

void SignalSet::validate() const {
    if (level < 0 || level > icosphere::kMaxLevel)
        throw BoundsError("signal level " + std::to_string(level) + " outside 0.." + std::to_string(icosphere::kMaxLevel));
    if (channels == 0) throw ShapeError("signal set has zero channels");
    const std::size_t v = vertices();
    for (std::size_t s = 0; s < samples.size(); ++s)
        if (samples[s].rows() != v || samples[s].cols() != channels)
            throw ShapeError("signal sample " + std::to_string(s) + " is " + samples[s].shape_string() + ", expected " +
                             std::to_string(v) + "x" + std::to_string(channels));
}

std::vector<unsigned char> serialize_signals(const SignalSet& set) {
    set.validate();
    io::ByteWriter out;
    out.put_bytes(kSignalMagic, 4);
    out.put(static_cast<std::uint32_t>(set.level));
    out.put(static_cast<std::uint8_t>(icosphere::hemisphere_tag(set.hemisphere)));
    out.put(kElementF32);
    out.put(std::uint16_t{0});
    out.put(static_cast<std::uint32_t>(set.channels));
    out.put(static_cast<std::uint32_t>(set.samples.size()));
    for (const Matrix& m : set.samples)
        for (double v : m.values()) out.put(static_cast<float>(v));
    append_crc(out);
    return out.bytes();
}

SignalSet deserialize_signals(const std::vector<unsigned char>& bytes, const std::string& source) {
    constexpr std::size_t kHeader = 20;
    check_magic_prefix(bytes, kSignalMagic, source);
    io::ByteReader in(bytes, source);
    expect_magic(in, kSignalMagic);
    SignalSet set;
    const auto level = in.get<std::uint32_t>();
    const auto tag = in.get<std::uint8_t>();
    const auto element = in.get<std::uint8_t>();
    in.get<std::uint16_t>();
    const auto channels = in.get<std::uint32_t>();
    const auto count = in.get<std::uint32_t>();
    if (level > static_cast<std::uint32_t>(icosphere::kMaxLevel))
        throw DataError(source + ": level " + std::to_string(level) + " out of range");
    if (element != kElementF32) throw DataError(source + ": unsupported element type " + std::to_string(element));
    const std::size_t v = icosphere::vertex_count(static_cast<int>(level));
    const std::size_t expected = kHeader + std::size_t{count} * v * channels * 4 + 4;
    if (bytes.size() < expected)
        throw TruncationError(source + ": " + std::to_string(bytes.size()) + " bytes, header implies " +
                              std::to_string(expected));
    if (bytes.size() > expected) throw DataError(source + ": trailing bytes after payload");
    verify_trailing_crc(bytes, kHeader, source);

    set.level = static_cast<int>(level);
    set.hemisphere = icosphere::parse_hemisphere(static_cast<char>(tag));
    set.channels = channels;
    set.samples.reserve(count);
    for (std::uint32_t s = 0; s < count; ++s) {
        Matrix m(v, channels);
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = in.get<float>();
        set.samples.push_back(std::move(m));
    }
    return set;
}

void write_signal_file(const std::string& path, const SignalSet& set) { io::write_file(path, serialize_signals(set)); }

SignalSet read_signal_file(const std::string& path) { return deserialize_signals(io::read_file(path), path); }

// ---- manifest ----------------------------------------------------------------

std::string_view split_name(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "?";
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw DataError("unknown split '" + std::string(name) + "'");
}

void Manifest::validate() const {
    std::map<std::int64_t, Split> split_of;
    std::map<std::int64_t, std::set<int>> scans;
    std::set<std::int64_t> sample_ids;
    for (const auto& r : records) {
        if (!sample_ids.insert(r.sample_id).second)
            throw DataError("manifest: duplicate sample_id " + std::to_string(r.sample_id));
        if (r.scan_index < 1 || r.scan_index > 3)
            throw DataError("manifest: sample " + std::to_string(r.sample_id) + " has scan index " +
                            std::to_string(r.scan_index));
        auto [it, fresh] = split_of.emplace(r.image_id, r.split);
        if (!fresh && it->second != r.split)
            throw DataError("manifest: image " + std::to_string(r.image_id) + " appears in both " +
                            std::string(split_name(it->second)) + " and " + std::string(split_name(r.split)));
        if (!scans[r.image_id].insert(r.scan_index).second)
            throw DataError("manifest: image " + std::to_string(r.image_id) + " repeats scan " +
                            std::to_string(r.scan_index));
    }
    for (const auto& [image, split] : split_of)
        if (split == Split::train && scans[image].size() != 3)
            throw DataError("manifest: train image " + std::to_string(image) + " has " +
                            std::to_string(scans[image].size()) + " scans, expected 3");
}

std::vector<std::int64_t> Manifest::images(Split split) const {
    std::vector<std::int64_t> out;
    std::set<std::int64_t> seen;
    for (const auto& r : records)
        if (r.split == split && seen.insert(r.image_id).second) out.push_back(r.image_id);
    return out;
}

std::array<std::int64_t, 3> Manifest::scans_of(std::int64_t image_id) const {
    std::array<std::int64_t, 3> out{-1, -1, -1};
    for (const auto& r : records)
        if (r.image_id == image_id) out[static_cast<std::size_t>(r.scan_index - 1)] = r.sample_id;
    for (auto s : out)
        if (s < 0) throw DataError("image " + std::to_string(image_id) + " does not have three scans");
    return out;
}

const ManifestRecord& Manifest::first_record_of(std::int64_t image_id) const {
    for (const auto& r : records)
        if (r.image_id == image_id) return r;
    throw DataError("image " + std::to_string(image_id) + " not in manifest");
}

std::string format_manifest(const Manifest& manifest) {
    std::ostringstream out;
    for (const auto& [k, v] : manifest.meta) out << "# " << k << '=' << v << '\n';
    for (const auto& r : manifest.records)
        out << "sample_id=" << r.sample_id << " image_id=" << r.image_id << " scan=" << r.scan_index
            << " subject=" << r.subject_id << " split=" << split_name(r.split) << " left=" << r.left
            << " right=" << r.right << " target=" << r.target << " semantic_length=" << r.semantic_length << '\n';
    return out.str();
}

Manifest parse_manifest(const std::string& text, const std::string& source) {
    Manifest m;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = source + ":" + std::to_string(line_no);
        std::string body = trim(line);
        if (body.empty()) continue;
        if (body[0] == '#') {
            body = trim(std::string_view(body).substr(1));
            const auto eq = body.find('=');
            if (eq != std::string::npos) m.meta[trim(body.substr(0, eq))] = trim(body.substr(eq + 1));
            continue;
        }
        std::map<std::string, std::string> kv;
        std::istringstream fields(body);
        std::string field;
        while (fields >> field) {
            const auto eq = field.find('=');
            if (eq == std::string::npos || eq == 0) throw DataError(where + ": malformed field '" + field + "'");
            kv[field.substr(0, eq)] = field.substr(eq + 1);
        }
        auto take = [&](const char* key) {
            auto it = kv.find(key);
            if (it == kv.end()) throw DataError(where + ": missing '" + key + "'");
            std::string v = it->second;
            kv.erase(it);
            return v;
        };
        ManifestRecord r;
        r.sample_id = parse_int(take("sample_id"), where + " sample_id");
        r.image_id = parse_int(take("image_id"), where + " image_id");
        r.scan_index = static_cast<int>(parse_int(take("scan"), where + " scan"));
        r.subject_id = static_cast<int>(parse_int(take("subject"), where + " subject"));
        r.split = parse_split(take("split"));
        r.left = take("left");
        r.right = take("right");
        r.target = take("target");
        const long long len = parse_int(take("semantic_length"), where + " semantic_length");
        if (len < 1) throw DataError(where + ": semantic_length must be positive");
        r.semantic_length = static_cast<std::size_t>(len);
        if (!kv.empty()) throw DataError(where + ": unknown field '" + kv.begin()->first + "'");
        m.records.push_back(std::move(r));
    }
    m.validate();
    return m;
}

void write_manifest(const std::string& path, const Manifest& manifest) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << format_manifest(manifest);
    if (!out) throw IoError("write to '" + path + "' failed");
}

Manifest read_manifest(const std::string& path) { return parse_manifest(read_text(path), path); }

Locator parse_locator(const std::string& text) {
    const auto hash = text.rfind('#');
    if (hash == std::string::npos || hash == 0 || hash + 1 == text.size())
        throw DataError("locator '" + text + "' is not of the form file#row");
    const long long row = parse_int(text.substr(hash + 1), "locator '" + text + "'");
    if (row < 0) throw DataError("locator '" + text + "' has a negative row");
    return {text.substr(0, hash), static_cast<std::size_t>(row)};
}

// ---- z-scoring ----------------------------------------------------------------

ZScoreStats zscore_fit(const SignalSet& train) {
    train.validate();
    if (train.samples.size() < 2)
        throw InsufficientDataError("z-score fit needs at least 2 samples, got " + std::to_string(train.samples.size()));
    ZScoreStats stats;
    stats.level = train.level;
    stats.hemisphere = train.hemisphere;
    const std::size_t v = train.vertices();
    const double n = static_cast<double>(train.samples.size());
    stats.mean = Matrix(v, train.channels);
    stats.std = Matrix(v, train.channels);
    for (const Matrix& s : train.samples)
        for (std::size_t i = 0; i < s.size(); ++i) stats.mean[i] += s[i];
    for (std::size_t i = 0; i < stats.mean.size(); ++i) stats.mean[i] /= n;
    // Two-pass variance.
    for (const Matrix& s : train.samples)
        for (std::size_t i = 0; i < s.size(); ++i) {
            const double d = s[i] - stats.mean[i];
            stats.std[i] += d * d;
        }
    for (std::size_t i = 0; i < stats.std.size(); ++i) stats.std[i] = std::max(std::sqrt(stats.std[i] / n), kStdFloor);
    return stats;
}

SignalSet zscore_apply(const SignalSet& signals, const ZScoreStats& stats) {
    if (signals.level != stats.level)
        throw ShapeError("z-score stats are for level " + std::to_string(stats.level) + ", signals are level " +
                         std::to_string(signals.level));
    if (signals.channels != stats.mean.cols())
        throw ShapeError("z-score stats have " + std::to_string(stats.mean.cols()) + " channels, signals have " +
                         std::to_string(signals.channels));
    signals.validate();
    SignalSet out = signals;
    for (Matrix& s : out.samples)
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = (s[i] - stats.mean[i]) / stats.std[i];
    return out;
}

void write_zscore_stats(const std::string& path, const ZScoreStats& stats) {
    io::ByteWriter out;
    out.put_bytes(kStatsMagic, 4);
    out.put(static_cast<std::uint32_t>(stats.level));
    out.put(static_cast<std::uint8_t>(icosphere::hemisphere_tag(stats.hemisphere)));
    out.put_string(stats.source_split);
    out.put(static_cast<std::uint32_t>(stats.mean.rows()));
    out.put(static_cast<std::uint32_t>(stats.mean.cols()));
    out.put_bytes(stats.mean.data(), stats.mean.size() * sizeof(double));
    out.put_bytes(stats.std.data(), stats.std.size() * sizeof(double));
    append_crc(out);
    io::write_file(path, out.bytes());
}

ZScoreStats read_zscore_stats(const std::string& path) {
    const auto bytes = io::read_file(path);
    check_magic_prefix(bytes, kStatsMagic, path);
    verify_trailing_crc(bytes, 4, path);
    const std::vector<unsigned char> body(bytes.begin(), bytes.end() - 4);
    io::ByteReader in(body, path);
    expect_magic(in, kStatsMagic);
    ZScoreStats stats;
    stats.level = static_cast<int>(in.get<std::uint32_t>());
    stats.hemisphere = icosphere::parse_hemisphere(static_cast<char>(in.get<std::uint8_t>()));
    stats.source_split = in.get_string();
    const auto rows = in.get<std::uint32_t>();
    const auto cols = in.get<std::uint32_t>();
    stats.mean = Matrix(rows, cols);
    stats.std = Matrix(rows, cols);
    std::memcpy(stats.mean.data(), in.take(stats.mean.size() * sizeof(double)), stats.mean.size() * sizeof(double));
    std::memcpy(stats.std.data(), in.take(stats.std.size() * sizeof(double)), stats.std.size() * sizeof(double));
    if (in.remaining() != 0) throw DataError(path + ": trailing bytes");
    return stats;
}

// ---- batching ------------------------------------------------------------------

namespace {

std::optional<std::size_t> exact_image_count(double lambda, int k, std::size_t base_batch) {
    const double b = 3.0 * static_cast<double>(base_batch) / (3.0 + (k - 3) * lambda);
    const double rounded = std::round(b);
    if (rounded < 1.0 || std::abs(b - rounded) > 1e-9 * std::max(1.0, b)) return std::nullopt;
    return static_cast<std::size_t>(rounded);
}

std::string describe(double lambda, int k, std::size_t base, std::size_t b) {
    std::ostringstream s;
    s << "(lambda=" << lambda << ", K=" << k << ", B=" << base << " -> b=" << b << ")";
    return s.str();
}

} // namespace

std::size_t balanced_image_count(double lambda, int k, std::size_t base_batch) {
    augment::MixupConfig{lambda, k}.validate();
    if (base_batch == 0) throw ConfigError("base batch must be positive");
    if (auto b = exact_image_count(lambda, k, base_batch)) return *b;

    std::vector<std::string> nearby;
    auto consider = [&](double l, int kk, std::size_t base) {
        if (nearby.size() >= 8 || base == 0 || kk < 1) return;
        if (auto b = exact_image_count(l, kk, base)) nearby.push_back(describe(l, kk, base, *b));
    };
    for (std::size_t d = 1; d <= 12; ++d) {
        consider(lambda, k, base_batch + d);
        if (base_batch > d) consider(lambda, k, base_batch - d);
    }
    for (int kk = 1; kk <= 12; ++kk)
        if (kk != k) consider(lambda, kk, base_batch);
    for (int step = 0; step <= 20; ++step)
        if (std::abs(step * 0.05 - lambda) > 1e-12) consider(step * 0.05, k, base_batch);

    std::ostringstream msg;
    msg << "b = 3B/(3+(K-3)lambda) = " << 3.0 * static_cast<double>(base_batch) / (3.0 + (k - 3) * lambda)
        << " is not a positive integer for lambda=" << lambda << ", K=" << k << ", B=" << base_batch
        << "; valid nearby settings:";
    for (const auto& s : nearby) msg << ' ' << s;
    throw ConfigError(msg.str());
}

std::vector<std::int64_t> AlignmentBatch::image_index() const {
    std::vector<std::int64_t> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.image_id);
    return out;
}

AlignmentBatch assemble_batch(std::span<const std::int64_t> available, const augment::MixupConfig& config,
                              std::size_t base_batch, Rng& rng) {
    const std::size_t b = balanced_image_count(config.lambda, config.k, base_batch);
    if (available.size() < b)
        throw DataError("batch needs " + std::to_string(b) + " images, only " + std::to_string(available.size()) +
                        " available");
    std::vector<std::int64_t> pool(available.begin(), available.end());
    AlignmentBatch batch;
    for (std::size_t i = 0; i < b; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
        std::swap(pool[i], pool[j]);
        batch.images.push_back(pool[i]);
    }
    for (std::int64_t image : batch.images) {
        const augment::MixupPlan plan = augment::plan_mixup(config, rng);
        if (plan.mixed) {
            for (const auto& w : plan.weights) batch.samples.push_back({image, w, true, -1});
        } else {
            for (int s = 0; s < 3; ++s) {
                augment::SimplexWeights w{s == 0 ? 1.0 : 0.0, s == 1 ? 1.0 : 0.0, s == 2 ? 1.0 : 0.0};
                batch.samples.push_back({image, w, false, s});
            }
        }
    }
    return batch;
}

TrainMixupResult tokenizer_train_mixup(std::vector<Matrix>& inputs, std::vector<Matrix>* targets,
                                       const TrainMixupConfig& config, Rng& rng, std::optional<double> forced_weight) {
    if (config.ratio < 0.0 || config.ratio > 1.0) throw ParameterError("mixup ratio must lie in [0, 1]");
    if (config.beta <= 0.0) throw ParameterError("mixup beta must be positive");
    if (targets && targets->size() != inputs.size())
        throw ShapeError("mixup: " + std::to_string(inputs.size()) + " inputs but " + std::to_string(targets->size()) +
                         " targets");
    TrainMixupResult result;
    const std::size_t n = inputs.size();
    if (n < 2) {
        result.skipped = true;
        return result;
    }
    const std::vector<Matrix> original_inputs = inputs;
    std::vector<Matrix> original_targets;
    if (targets) original_targets = *targets;
    for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform() >= config.ratio) continue;
        std::size_t partner = static_cast<std::size_t>(rng.below(n - 1));
        if (partner >= i) ++partner;
        const double w = forced_weight ? *forced_weight : rng.beta(config.beta, config.beta);
        inputs[i] = scale_add(original_inputs[i], w, original_inputs[partner], 1.0 - w);
        if (targets) (*targets)[i] = scale_add(original_targets[i], w, original_targets[partner], 1.0 - w);
        result.blends.push_back({i, partner, w});
    }
    return result;
}

// ---- targets -----------------------------------------------------------------

void write_embedding_file(const std::string& path, const EmbeddingTable& table) {
    const std::size_t n = table.image.size();
    if (table.text.size() != n || table.semantic_length.size() != n)
        throw ShapeError("embedding table has mismatched image/text/length counts");
    io::ByteWriter out;
    out.put_bytes(kEmbeddingMagic, 4);
    out.put(static_cast<std::uint32_t>(n));
    out.put(static_cast<std::uint32_t>(table.image_tokens));
    out.put(static_cast<std::uint32_t>(table.text_tokens));
    out.put(static_cast<std::uint32_t>(table.dim));
    for (std::size_t i = 0; i < n; ++i) {
        if (table.image[i].rows() != table.image_tokens || table.image[i].cols() != table.dim ||
            table.text[i].rows() != table.text_tokens || table.text[i].cols() != table.dim)
            throw ShapeError("embedding entry " + std::to_string(i) + " does not match the table layout");
        out.put(static_cast<std::uint32_t>(table.semantic_length[i]));
        out.put_bytes(table.image[i].data(), table.image[i].size() * sizeof(double));
        out.put_bytes(table.text[i].data(), table.text[i].size() * sizeof(double));
    }
    append_crc(out);
    io::write_file(path, out.bytes());
}

EmbeddingTable read_embedding_file(const std::string& path) {
    const auto bytes = io::read_file(path);
    check_magic_prefix(bytes, kEmbeddingMagic, path);
    verify_trailing_crc(bytes, 4, path);
    const std::vector<unsigned char> body(bytes.begin(), bytes.end() - 4);
    io::ByteReader in(body, path);
    expect_magic(in, kEmbeddingMagic);
    EmbeddingTable t;
    const auto n = in.get<std::uint32_t>();
    t.image_tokens = in.get<std::uint32_t>();
    t.text_tokens = in.get<std::uint32_t>();
    t.dim = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
        t.semantic_length.push_back(in.get<std::uint32_t>());
        Matrix img(t.image_tokens, t.dim), txt(t.text_tokens, t.dim);
        std::memcpy(img.data(), in.take(img.size() * sizeof(double)), img.size() * sizeof(double));
        std::memcpy(txt.data(), in.take(txt.size() * sizeof(double)), txt.size() * sizeof(double));
        t.image.push_back(std::move(img));
        t.text.push_back(std::move(txt));
    }
    if (in.remaining() != 0) throw DataError(path + ": trailing bytes");
    return t;
}

// ---- datasets ------------------------------------------------------------------

const Matrix& Dataset::structure(Hemisphere h, int subject) const {
    const SignalSet& s = h == Hemisphere::left ? structure_left : structure_right;
    if (subject < 0 || static_cast<std::size_t>(subject) >= s.samples.size())
        throw DataError("no structure condition for subject " + std::to_string(subject));
    return s.samples[static_cast<std::size_t>(subject)];
}

std::vector<std::int64_t> Dataset::samples(Split split) const {
    std::vector<std::int64_t> out;
    for (const auto& r : manifest.records)
        if (r.split == split) out.push_back(r.sample_id);
    return out;
}

namespace {

using icosphere::Vec3;

Vec3 random_direction(Rng& rng) {
    for (;;) {
        Vec3 v{rng.normal(), rng.normal(), rng.normal()};
        const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if (n > 1e-12) return {v[0] / n, v[1] / n, v[2] / n};
    }
}

Vec3 unit(Vec3 v) {
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return {v[0] / n, v[1] / n, v[2] / n};
}

// Sum of bumps a * exp(kappa (x.c - 1)) around random centres.
Matrix cap_pattern(const icosphere::Mesh& mesh, std::size_t caps, double kappa_lo, double kappa_hi, Rng& rng) {
    Matrix out(mesh.num_vertices(), 1);
    for (std::size_t m = 0; m < caps; ++m) {
        const Vec3 c = random_direction(rng);
        const double kappa = rng.uniform(kappa_lo, kappa_hi);
        const double amp = rng.uniform(-1.0, 1.0);
        for (std::size_t v = 0; v < mesh.num_vertices(); ++v) {
            const auto& x = mesh.coords[v];
            out(v, 0) += amp * std::exp(kappa * (x[0] * c[0] + x[1] * c[1] + x[2] * c[2] - 1.0));
        }
    }
    return out;
}

// Per-channel z-score over vertices.
void standardize_columns(Matrix& m) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
        double mean = 0.0, var = 0.0;
        for (std::size_t r = 0; r < m.rows(); ++r) mean += m(r, c);
        mean /= static_cast<double>(m.rows());
        for (std::size_t r = 0; r < m.rows(); ++r) var += (m(r, c) - mean) * (m(r, c) - mean);
        const double sd = std::max(std::sqrt(var / static_cast<double>(m.rows())), kStdFloor);
        for (std::size_t r = 0; r < m.rows(); ++r) m(r, c) = (m(r, c) - mean) / sd;
    }
}

tokenizer::VertexMask cap_mask(const icosphere::Mesh& mesh, const Vec3& centre, double threshold) {
    tokenizer::VertexMask mask{mesh.level, std::vector<bool>(mesh.num_vertices(), false)};
    for (std::size_t v = 0; v < mesh.num_vertices(); ++v) {
        const auto& x = mesh.coords[v];
        mask.values[v] = x[0] * centre[0] + x[1] * centre[1] + x[2] * centre[2] > threshold;
    }
    return mask;
}

Matrix gaussian(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = scale * rng.normal();
    return m;
}

constexpr double kSubjectGain = 0.25;
constexpr double kRoiThreshold = 0.2;
constexpr const char* kFiles[][2] = {{"left", "left.sph"},
                                      {"right", "right.sph"},
                                      {"structure_left", "structure_L.sph"},
                                      {"structure_right", "structure_R.sph"},
                                      {"roi_left", "roi_L.sph"},
                                      {"roi_right", "roi_R.sph"},
                                      {"targets", "targets.emb"}};

SignalSet mask_to_signals(const tokenizer::VertexMask& mask, Hemisphere h) {
    SignalSet s{mask.level, h, 1, {mask.as_weights()}};
    return s;
}

tokenizer::VertexMask signals_to_mask(const SignalSet& s, const std::string& source) {
    if (s.samples.size() != 1 || s.channels != 1) throw DataError(source + ": ROI file must hold one 1-channel sample");
    tokenizer::VertexMask mask{s.level, std::vector<bool>(s.vertices(), false)};
    for (std::size_t v = 0; v < s.vertices(); ++v) mask.values[v] = s.samples[0](v, 0) > 0.5;
    return mask;
}

} // namespace

Dataset generate_synthetic_dataset(const SyntheticSpec& spec) {
    const std::size_t images = spec.train_images + spec.val_images + spec.test_images;
    if (images == 0) throw ConfigError("synthetic dataset needs at least one image");
    if (spec.subjects == 0) throw ConfigError("synthetic dataset needs at least one subject");
    if (spec.level < 0 || spec.level > icosphere::kMaxLevel) throw ConfigError("synthetic level out of range");
    if (spec.scan_noise < 0.0) throw ConfigError("scan noise must be non-negative");
    if (spec.embedding_dim == 0 || spec.image_tokens == 0 || spec.text_tokens < 2)
        throw ConfigError("embedding layout needs dim >= 1, image tokens >= 1, text tokens >= 2");

    const auto mesh = icosphere::mesh_at(spec.level);
    const std::size_t v = mesh->num_vertices();
    const Rng root(spec.seed);

    Dataset d;
    d.level = spec.level;
    d.roi_left = cap_mask(*mesh, unit({-1.0, -1.0, 0.2}), kRoiThreshold);
    d.roi_right = cap_mask(*mesh, unit({1.0, -1.0, 0.2}), kRoiThreshold);

    for (Hemisphere h : {Hemisphere::left, Hemisphere::right}) {
        SignalSet& st = h == Hemisphere::left ? d.structure_left : d.structure_right;
        st = SignalSet{spec.level, h, tokenizer::kStructureChannels, {}};
        for (std::size_t s = 0; s < spec.subjects; ++s) {
            Rng rng = root.split("structure").split(icosphere::hemisphere_tag(h)).split(s);
            Matrix m(v, tokenizer::kStructureChannels);
            for (std::size_t c = 0; c < tokenizer::kStructureChannels; ++c) {
                const Matrix ch = cap_pattern(*mesh, 3, 1.0, 4.0, rng);
                for (std::size_t r = 0; r < v; ++r) m(r, c) = ch(r, 0);
            }
            standardize_columns(m);
            st.samples.push_back(std::move(m));
        }
    }

    // Latent patterns per image and hemisphere.
    std::vector<Matrix> latent_left, latent_right;
    for (std::size_t i = 0; i < images; ++i) {
        Rng rng = root.split("pattern").split(i);
        latent_left.push_back(cap_pattern(*mesh, spec.caps_per_hemisphere, 2.0, 6.0, rng));
        latent_right.push_back(cap_pattern(*mesh, spec.caps_per_hemisphere, 2.0, 6.0, rng));
    }

    // Targets: fixed random linear sketches of the ROI part of the pattern.
    std::vector<std::uint32_t> roi_rows_left, roi_rows_right;
    for (std::uint32_t r = 0; r < v; ++r) {
        if (d.roi_left.values[r]) roi_rows_left.push_back(r);
        if (d.roi_right.values[r]) roi_rows_right.push_back(r);
    }
    const std::size_t features = roi_rows_left.size() + roi_rows_right.size();
    Rng sketch_rng = root.split("sketch");
    const double sketch_scale = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(features, 1)));
    const Matrix image_sketch = gaussian(spec.image_tokens * spec.embedding_dim, features, sketch_scale, sketch_rng);
    const Matrix text_sketch = gaussian(spec.text_tokens * spec.embedding_dim, features, sketch_scale, sketch_rng);
    const Matrix pad_row = gaussian(1, spec.embedding_dim, 0.3, sketch_rng);

    d.targets.image_tokens = spec.image_tokens;
    d.targets.text_tokens = spec.text_tokens;
    d.targets.dim = spec.embedding_dim;
    for (std::size_t i = 0; i < images; ++i) {
        Matrix feature(features, 1);
        std::size_t f = 0;
        for (auto r : roi_rows_left) feature(f++, 0) = latent_left[i](r, 0);
        for (auto r : roi_rows_right) feature(f++, 0) = latent_right[i](r, 0);
        const Matrix img = kernels::matmul(image_sketch, feature);
        const Matrix txt = kernels::matmul(text_sketch, feature);
        Rng len_rng = root.split("semantic_length").split(i);
        const std::size_t len = 2 + static_cast<std::size_t>(len_rng.below(spec.text_tokens - 1));
        d.targets.image.emplace_back(spec.image_tokens, spec.embedding_dim,
                                     std::vector<double>(img.values().begin(), img.values().end()));
        Matrix text(spec.text_tokens, spec.embedding_dim, std::vector<double>(txt.values().begin(), txt.values().end()));
        for (std::size_t t = len; t < spec.text_tokens; ++t)
            for (std::size_t c = 0; c < spec.embedding_dim; ++c) text(t, c) = pad_row(0, c);
        d.targets.text.push_back(std::move(text));
        d.targets.semantic_length.push_back(len);
    }

    // Scans.
    d.left = SignalSet{spec.level, Hemisphere::left, 1, {}};
    d.right = SignalSet{spec.level, Hemisphere::right, 1, {}};
    for (std::size_t i = 0; i < images; ++i) {
        const Split split = i < spec.train_images                     ? Split::train
                            : i < spec.train_images + spec.val_images ? Split::val
                                                                      : Split::test;
        const int subject = static_cast<int>(i % spec.subjects);
        const double shift = split == Split::train ? 0.0 : spec.shift;
        for (int scan = 1; scan <= 3; ++scan) {
            const auto sample = static_cast<std::int64_t>(3 * i + static_cast<std::size_t>(scan - 1));
            Rng noise = root.split("noise").split(static_cast<std::uint64_t>(sample));
            for (Hemisphere h : {Hemisphere::left, Hemisphere::right}) {
                const Matrix& latent = h == Hemisphere::left ? latent_left[i] : latent_right[i];
                const Matrix& structure = d.structure(h, subject);
                Matrix x(v, 1);
                for (std::size_t r = 0; r < v; ++r)
                    x(r, 0) = latent(r, 0) + kSubjectGain * structure(r, 0) + shift + spec.scan_noise * noise.normal();
                d.signals(h).samples.push_back(std::move(x));
            }
            ManifestRecord rec;
            rec.sample_id = sample;
            rec.image_id = static_cast<std::int64_t>(i);
            rec.scan_index = scan;
            rec.subject_id = subject;
            rec.split = split;
            rec.left = std::string("left.sph#") + std::to_string(sample);
            rec.right = std::string("right.sph#") + std::to_string(sample);
            rec.target = std::string("targets.emb#") + std::to_string(i);
            rec.semantic_length = d.targets.semantic_length[i];
            d.manifest.records.push_back(std::move(rec));
        }
    }

    auto& meta = d.manifest.meta;
    meta["level"] = std::to_string(spec.level);
    meta["seed"] = std::to_string(spec.seed);
    for (const auto& f : kFiles) meta[f[0]] = f[1];
    d.manifest.validate();
    return d;
}

void save_dataset(const std::string& directory, const Dataset& dataset) {
    std::error_code ec;
    fs::create_directories(directory, ec);
    if (ec) throw IoError("cannot create directory '" + directory + "': " + ec.message());
    const fs::path dir(directory);
    auto file = [&](const char* key) {
        auto it = dataset.manifest.meta.find(key);
        return (dir / (it == dataset.manifest.meta.end() ? std::string(key) : it->second)).string();
    };
    write_signal_file(file("left"), dataset.left);
    write_signal_file(file("right"), dataset.right);
    write_signal_file(file("structure_left"), dataset.structure_left);
    write_signal_file(file("structure_right"), dataset.structure_right);
    write_signal_file(file("roi_left"), mask_to_signals(dataset.roi_left, Hemisphere::left));
    write_signal_file(file("roi_right"), mask_to_signals(dataset.roi_right, Hemisphere::right));
    write_embedding_file(file("targets"), dataset.targets);
    write_manifest((dir / "manifest.txt").string(), dataset.manifest);
}

Dataset load_dataset(const std::string& manifest_path) {
    Dataset d;
    d.manifest = read_manifest(manifest_path);
    const fs::path dir = fs::path(manifest_path).parent_path();
    auto meta = [&](const char* key) {
        auto it = d.manifest.meta.find(key);
        if (it == d.manifest.meta.end()) throw DataError(manifest_path + ": missing '# " + std::string(key) + "=' line");
        return (dir / it->second).string();
    };
    d.level = static_cast<int>(parse_int(d.manifest.meta.count("level") ? d.manifest.meta.at("level") : "",
                                         manifest_path + " level"));
    d.structure_left = read_signal_file(meta("structure_left"));
    d.structure_right = read_signal_file(meta("structure_right"));
    d.roi_left = signals_to_mask(read_signal_file(meta("roi_left")), meta("roi_left"));
    d.roi_right = signals_to_mask(read_signal_file(meta("roi_right")), meta("roi_right"));

    // Resolve per-record locators; signal rows are placed at their sample_id.
    std::map<std::string, SignalSet> files;
    auto fetch = [&](const std::string& locator, Hemisphere h) -> const Matrix& {
        const Locator loc = parse_locator(locator);
        const std::string path = (dir / loc.file).string();
        auto it = files.find(path);
        if (it == files.end()) it = files.emplace(path, read_signal_file(path)).first;
        const SignalSet& s = it->second;
        if (s.hemisphere != h || s.level != d.level)
            throw DataError(locator + ": file hemisphere/level does not match the manifest");
        if (loc.row >= s.samples.size()) throw DataError(locator + ": row out of range");
        return s.samples[loc.row];
    };
    std::map<std::string, EmbeddingTable> tables;
    const std::size_t n = d.manifest.records.size();
    d.left = SignalSet{d.level, Hemisphere::left, 1, std::vector<Matrix>(n)};
    d.right = SignalSet{d.level, Hemisphere::right, 1, std::vector<Matrix>(n)};
    std::int64_t max_image = -1;
    for (const auto& r : d.manifest.records) max_image = std::max(max_image, r.image_id);
    d.targets.image.resize(static_cast<std::size_t>(max_image + 1));
    d.targets.text.resize(static_cast<std::size_t>(max_image + 1));
    d.targets.semantic_length.resize(static_cast<std::size_t>(max_image + 1), 0);
    for (const auto& r : d.manifest.records) {
        if (r.sample_id < 0 || static_cast<std::size_t>(r.sample_id) >= n)
            throw DataError(manifest_path + ": sample ids must be 0.." + std::to_string(n - 1));
        const auto s = static_cast<std::size_t>(r.sample_id);
        d.left.samples[s] = fetch(r.left, Hemisphere::left);
        d.right.samples[s] = fetch(r.right, Hemisphere::right);

        const Locator loc = parse_locator(r.target);
        const std::string path = (dir / loc.file).string();
        auto it = tables.find(path);
        if (it == tables.end()) it = tables.emplace(path, read_embedding_file(path)).first;
        const EmbeddingTable& t = it->second;
        if (loc.row >= t.image.size()) throw DataError(r.target + ": row out of range");
        if (t.semantic_length[loc.row] != r.semantic_length)
            throw DataError(r.target + ": semantic_length disagrees with the manifest");
        d.targets.image_tokens = t.image_tokens;
        d.targets.text_tokens = t.text_tokens;
        d.targets.dim = t.dim;
        const auto img = static_cast<std::size_t>(r.image_id);
        d.targets.image[img] = t.image[loc.row];
        d.targets.text[img] = t.text[loc.row];
        d.targets.semantic_length[img] = r.semantic_length;
    }
    d.left.validate();
    d.right.validate();
    return d;
}

NormalizedDataset normalize_dataset(const Dataset& raw) {
    NormalizedDataset out{raw, {}, {}};
    const auto train = raw.samples(Split::train);
    for (Hemisphere h : {Hemisphere::left, Hemisphere::right}) {
        const SignalSet& all = raw.signals(h);
        SignalSet subset{all.level, h, all.channels, {}};
        for (auto s : train) subset.samples.push_back(all.samples[static_cast<std::size_t>(s)]);
        ZScoreStats stats = zscore_fit(subset);
        out.data.signals(h) = zscore_apply(all, stats);
        (h == Hemisphere::left ? out.left_stats : out.right_stats) = std::move(stats);
    }
    return out;
}

} // namespace cortisphere::pipeline
