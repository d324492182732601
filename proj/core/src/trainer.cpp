#include "cortisphere/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <thread>

#include "cortisphere/checkpoint.hpp"
#include "cortisphere/error.hpp"

namespace cortisphere::trainer {

namespace fs = std::filesystem;
using pipeline::Split;

namespace {

std::string fmt(double v) {
    char buf[40];
    return {buf, std::to_chars(buf, buf + sizeof buf, v).ptr};
}

double parse_double(const std::string& key, const std::string& text) {
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("'" + key + "' expects a number, got '" + text + "'");
    }
}

long long parse_integer(const std::string& key, const std::string& text) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("'" + key + "' expects an integer, got '" + text + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "1" || text == "true" || text == "yes" || text == "on") return true;
    if (text == "0" || text == "false" || text == "no" || text == "off") return false;
    throw ConfigError("'" + key + "' expects a boolean, got '" + text + "'");
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
// written by index; the lowest-index exception is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(threads, n);
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::map<std::int64_t, const pipeline::ManifestRecord*> index_records(const pipeline::Dataset& data) {
    std::map<std::int64_t, const pipeline::ManifestRecord*> out;
    for (const auto& r : data.manifest.records) out[r.sample_id] = &r;
    return out;
}

const Matrix& sample_signal(const pipeline::Dataset& data, Hemisphere h, std::int64_t sample) {
    const auto& set = data.signals(h);
    if (sample < 0 || static_cast<std::size_t>(sample) >= set.samples.size())
        throw DataError("sample " + std::to_string(sample) + " has no " +
                        std::string(1, icosphere::hemisphere_tag(h)) + " signal");
    return set.samples[static_cast<std::size_t>(sample)];
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(rng.below(i))]);
}

bool all_finite(const Matrix& m) {
    return std::all_of(m.values().begin(), m.values().end(), [](double x) { return std::isfinite(x); });
}

void add_scaled(num::ParameterSet& into, const num::Gradients& g, double scale) {
    for (auto& [name, value] : into) kernels::add_inplace(value, g.at(name), scale);
}

// ---- training-state checkpoints ----

constexpr const char* kMomentPrefix = "opt.m.";
constexpr const char* kVariancePrefix = "opt.v.";

struct RunState {
    int epochs_done = 0;
    std::size_t step = 0;
    double best = 0.0;
    int best_epoch = -1;
    double initial = 0.0;
};

void save_state(const std::string& path, const std::string& kind, std::map<std::string, std::string> config,
                const TrainConfig& train, const num::ParameterSet& params, const AdamState& adam,
                const RunState& state) {
    Checkpoint ck;
    ck.kind = kind;
    for (const auto& [k, v] : train.to_map()) config["train." + k] = v;
    config["state.epochs_done"] = std::to_string(state.epochs_done);
    config["state.step"] = std::to_string(state.step);
    config["state.best"] = fmt(state.best);
    config["state.best_epoch"] = std::to_string(state.best_epoch);
    config["state.initial"] = fmt(state.initial);
    config["state.adam_step"] = std::to_string(adam.step);
    ck.config = std::move(config);
    ck.arrays = params;
    for (const auto& [name, value] : adam.m) ck.arrays.add(kMomentPrefix + name, value);
    for (const auto& [name, value] : adam.v) ck.arrays.add(kVariancePrefix + name, value);
    save_checkpoint(path, ck);
}

// Restores parameters, optimizer moments and loop counters from a "last"
// checkpoint after checking it was written by the same training setup.
RunState load_state(const std::string& path, const std::string& kind, const TrainConfig& train,
                    num::ParameterSet& params, AdamState& adam) {
    const Checkpoint ck = load_checkpoint(path);
    if (ck.kind != kind) throw ConfigError(path + ": expected a '" + kind + "' checkpoint, found '" + ck.kind + "'");
    for (const auto& [k, v] : train.to_map()) {
        if (k == "threads") continue;
        auto it = ck.config.find("train." + k);
        if (it == ck.config.end() || it->second != v)
            throw ConfigError(path + ": cannot resume, training setting '" + k + "' was '" +
                              (it == ck.config.end() ? std::string("<unset>") : it->second) + "', now '" + v + "'");
    }
    auto get = [&](const char* key) -> const std::string& {
        auto it = ck.config.find(key);
        if (it == ck.config.end()) throw ConfigError(path + ": not a resumable checkpoint (no " + key + ")");
        return it->second;
    };
    RunState state;
    state.epochs_done = static_cast<int>(parse_integer("epochs_done", get("state.epochs_done")));
    state.step = static_cast<std::size_t>(parse_integer("step", get("state.step")));
    state.best = parse_double("best", get("state.best"));
    state.best_epoch = static_cast<int>(parse_integer("best_epoch", get("state.best_epoch")));
    state.initial = parse_double("initial", get("state.initial"));
    adam = AdamState::zeros_like(params);
    adam.step = static_cast<std::uint64_t>(parse_integer("adam_step", get("state.adam_step")));
    for (auto& [name, value] : params) {
        auto restore = [&](const std::string& key, Matrix& into) {
            if (!ck.arrays.contains(key)) throw ConfigError(path + ": missing array '" + key + "'");
            const Matrix& stored = ck.arrays.at(key);
            if (!stored.same_shape(into)) throw ShapeError(path + ": array '" + key + "' has the wrong shape");
            into = stored;
        };
        restore(name, value);
        restore(kMomentPrefix + name, adam.m.at(name));
        restore(kVariancePrefix + name, adam.v.at(name));
    }
    return state;
}

std::string join_path(const std::string& dir, const std::string& file) { return (fs::path(dir) / file).string(); }

void ensure_dir(const std::string& dir) {
    if (dir.empty()) return;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
}

} // namespace

// ---- configuration --------------------------------------------------------------

std::string_view stage_name(Stage s) { return s == Stage::tokenizer ? "tokenizer" : "aligner"; }

Stage parse_stage(std::string_view name) {
    if (name == "tokenizer") return Stage::tokenizer;
    if (name == "aligner" || name == "align") return Stage::aligner;
    throw ConfigError("unknown stage '" + std::string(name) + "' (expected tokenizer or aligner)");
}

TrainConfig TrainConfig::defaults(Stage stage) {
    TrainConfig c;
    c.stage = stage;
    if (stage == Stage::tokenizer) {
        c.epochs = 80;
        c.learning_rate = 4.0e-5;
        c.max_grad_norm = 0.1;
        c.batch_size = 32;
    } else {
        c.epochs = 30;
        c.learning_rate = 5.0e-4;
        c.max_grad_norm = 0.5;
        c.batch_size = 64;
    }
    return c;
}

TrainConfig TrainConfig::desk(Stage stage) {
    TrainConfig c = defaults(stage);
    if (stage == Stage::tokenizer) {
        c.epochs = 10;
        c.learning_rate = 2.0e-3;
        c.batch_size = 4;
        c.scans_per_epoch = 1;
    } else {
        c.epochs = 20;
        c.learning_rate = 1.0e-3;
        c.batch_size = 8;
        c.hidden = 128;
    }
    return c;
}

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(max_grad_norm > 0.0)) throw ConfigError("max_grad_norm must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (threads < 1) throw ConfigError("threads must be at least 1");
    if (!(rotation_degrees >= 0.0)) throw ConfigError("rotation_degrees must be non-negative");
    if (train_mixup.ratio < 0.0 || train_mixup.ratio > 1.0) throw ConfigError("mixup_ratio must lie in [0, 1]");
    if (!(train_mixup.beta > 0.0)) throw ConfigError("mixup_beta must be positive");
    if (scans_per_epoch < 1 || scans_per_epoch > 3) throw ConfigError("scans_per_epoch must be 1, 2 or 3");
    mixup.validate();
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (hidden < 1) throw ConfigError("hidden must be at least 1");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
}

std::map<std::string, std::string> TrainConfig::to_map() const {
    return {
        {"stage", std::string(stage_name(stage))},
        {"epochs", std::to_string(epochs)},
        {"learning_rate", fmt(learning_rate)},
        {"weight_decay", fmt(weight_decay)},
        {"max_grad_norm", fmt(max_grad_norm)},
        {"batch_size", std::to_string(batch_size)},
        {"seed", std::to_string(seed)},
        {"threads", std::to_string(threads)},
        {"rotation_degrees", fmt(rotation_degrees)},
        {"mixup_ratio", fmt(train_mixup.ratio)},
        {"mixup_beta", fmt(train_mixup.beta)},
        {"scans_per_epoch", std::to_string(scans_per_epoch)},
        {"lambda", fmt(mixup.lambda)},
        {"k", std::to_string(mixup.k)},
        {"dropout", fmt(dropout)},
        {"hidden", std::to_string(hidden)},
        {"temperature", fmt(temperature)},
        {"share_hemisphere_mixup", share_hemisphere_mixup ? "true" : "false"},
    };
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& values, TrainConfig c) {
    for (const auto& [key, text] : values) {
        if (key == "stage") c.stage = parse_stage(text);
        else if (key == "epochs") c.epochs = static_cast<int>(parse_integer(key, text));
        else if (key == "learning_rate") c.learning_rate = parse_double(key, text);
        else if (key == "weight_decay") c.weight_decay = parse_double(key, text);
        else if (key == "max_grad_norm") c.max_grad_norm = parse_double(key, text);
        else if (key == "batch_size") {
            const long long v = parse_integer(key, text);
            if (v < 1) throw ConfigError("batch_size must be at least 1");
            c.batch_size = static_cast<std::size_t>(v);
        } else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_integer(key, text));
        else if (key == "threads") {
            const long long v = parse_integer(key, text);
            if (v < 1) throw ConfigError("threads must be at least 1");
            c.threads = static_cast<unsigned>(v);
        } else if (key == "rotation_degrees") c.rotation_degrees = parse_double(key, text);
        else if (key == "mixup_ratio") c.train_mixup.ratio = parse_double(key, text);
        else if (key == "mixup_beta") c.train_mixup.beta = parse_double(key, text);
        else if (key == "scans_per_epoch") c.scans_per_epoch = static_cast<int>(parse_integer(key, text));
        else if (key == "lambda") c.mixup.lambda = parse_double(key, text);
        else if (key == "k") c.mixup.k = static_cast<int>(parse_integer(key, text));
        else if (key == "dropout") c.dropout = parse_double(key, text);
        else if (key == "hidden") {
            const long long v = parse_integer(key, text);
            if (v < 1) throw ConfigError("hidden must be at least 1");
            c.hidden = static_cast<std::size_t>(v);
        } else if (key == "temperature") c.temperature = parse_double(key, text);
        else if (key == "share_hemisphere_mixup") c.share_hemisphere_mixup = parse_bool(key, text);
        else throw ConfigError("unknown training setting '" + key + "'");
    }
    c.validate();
    return c;
}

// ---- schedule, clipping, optimizer --------------------------------------------------

double cosine_lr(std::size_t step, std::size_t total_steps, double base) {
    if (step > total_steps)
        throw BoundsError("cosine_lr: step " + std::to_string(step) + " beyond total " + std::to_string(total_steps));
    if (total_steps == 0) return base;
    return base * 0.5 *
           (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

double clip_gradients(num::Gradients& grads, double max_norm) {
    if (!(max_norm > 0.0)) throw ParameterError("max_norm must be positive");
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        if (!all_finite(g)) throw NumericError("non-finite gradient in parameter '" + name + "'");
        for (double v : g.values()) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double factor = max_norm / norm;
        for (auto& [name, g] : grads)
            for (double& v : g.values()) v *= factor;
    }
    return norm;
}

AdamState AdamState::zeros_like(const num::ParameterSet& params) { return {params.zeros_like(), params.zeros_like(), 0}; }

void optimizer_step(num::ParameterSet& params, const num::Gradients& grads, double lr, double weight_decay,
                    AdamState& state) {
    for (const auto& [name, p] : params) {
        if (!grads.contains(name)) throw ShapeError("optimizer_step: no gradient for '" + name + "'");
        if (!grads.at(name).same_shape(p))
            throw ShapeError("optimizer_step: gradient for '" + name + "' is " + grads.at(name).shape_string() +
                             ", parameter is " + p.shape_string());
    }
    if (state.m.empty() && state.v.empty()) state = AdamState::zeros_like(params);
    ++state.step;
    const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
    for (auto& [name, p] : params) {
        const Matrix& g = grads.at(name);
        Matrix& m = state.m.at(name);
        Matrix& v = state.v.at(name);
        if (!m.same_shape(p) || !v.same_shape(p)) throw ShapeError("optimizer state for '" + name + "' has the wrong shape");
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g[i];
            v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
            const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEps);
            p[i] -= lr * (update + weight_decay * p[i]);
        }
    }
}

// ---- metric log -----------------------------------------------------------------

std::string format_csv_row(const std::vector<double>& row) {
    std::string out;
    for (std::size_t i = 0; i < row.size(); ++i) {
        if (i) out += ',';
        out += std::isnan(row[i]) ? std::string("nan") : fmt(row[i]);
    }
    return out;
}

void MetricLog::attach(const std::string& path, int keep_through_epoch) {
    path_ = path;
    rows_.clear();
    if (keep_through_epoch > 0) {
        std::ifstream in(path);
        std::string line;
        if (in && std::getline(in, line)) {
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                std::vector<double> row;
                std::istringstream cells(line);
                for (std::string cell; std::getline(cells, cell, ',');)
                    row.push_back(cell == "nan" ? std::numeric_limits<double>::quiet_NaN() : parse_double(path, cell));
                if (row.size() != columns_.size())
                    throw DataError("'" + path + "' has a row with " + std::to_string(row.size()) + " fields");
                if (!columns_.empty() && columns_.front() == "epoch" && row.front() > keep_through_epoch) break;
                rows_.push_back(std::move(row));
            }
        }
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << to_csv();
}

void MetricLog::append(const std::vector<double>& row) {
    if (row.size() != columns_.size())
        throw ShapeError("metric row has " + std::to_string(row.size()) + " values for " +
                         std::to_string(columns_.size()) + " columns");
    rows_.push_back(row);
    if (!path_.empty()) {
        std::ofstream out(path_, std::ios::app);
        if (!out) throw IoError("cannot append to '" + path_ + "'");
        out << format_csv_row(row) << '\n';
    }
}

double MetricLog::value(std::size_t row, std::string_view column) const {
    const auto it = std::find(columns_.begin(), columns_.end(), column);
    if (it == columns_.end()) throw BoundsError("no metric column '" + std::string(column) + "'");
    if (row >= rows_.size()) throw BoundsError("metric row " + std::to_string(row) + " out of range");
    return rows_[row][static_cast<std::size_t>(it - columns_.begin())];
}

std::string MetricLog::to_csv() const {
    std::string out;
    for (std::size_t i = 0; i < columns_.size(); ++i) out += (i ? "," : "") + columns_[i];
    out += '\n';
    for (const auto& r : rows_) out += format_csv_row(r) + '\n';
    return out;
}

// ---- tokenizer stage --------------------------------------------------------------

namespace {

struct ReconstructionScore {
    double loss = 0.0; // masked MSE + masked L1
    double mse = 0.0;
};

tokenizer::ConditionSet conditions_for(const pipeline::Dataset& data, Hemisphere h, int subject, Matrix position) {
    return {data.structure(h, subject), std::move(position)};
}

ReconstructionScore score_reconstruction(const tokenizer::TokenizerModel& model, const pipeline::Dataset& data,
                                         Hemisphere h, const std::vector<std::int64_t>& samples, unsigned threads) {
    if (samples.empty()) return {std::nan(""), std::nan("")};
    const auto records = index_records(data);
    const Matrix weights = data.roi(h).as_weights();
    const Matrix coords = icosphere::mesh_at(model.config.input_level)->coordinate_matrix();
    std::vector<ReconstructionScore> per(samples.size());
    parallel_for(samples.size(), threads, [&](std::size_t i) {
        const auto it = records.find(samples[i]);
        if (it == records.end()) throw DataError("sample " + std::to_string(samples[i]) + " not in manifest");
        const Matrix& x = sample_signal(data, h, samples[i]);
        num::Tape tape;
        const auto params = tape.bind(model.parameters);
        const num::Var token =
            tokenizer::encode(tape, params, model.config, x, conditions_for(data, h, it->second->subject_id, coords));
        const num::Var rec = tokenizer::decode(params, model.config, token);
        const num::Var target = tape.constant(x);
        per[i].mse = num::mse(rec, target, weights).value()(0, 0);
        per[i].loss = per[i].mse + num::l1(rec, target, weights).value()(0, 0);
    });
    ReconstructionScore total;
    for (const auto& s : per) {
        total.loss += s.loss;
        total.mse += s.mse;
    }
    total.loss /= static_cast<double>(samples.size());
    total.mse /= static_cast<double>(samples.size());
    return total;
}

std::uint64_t tokenizer_seed(std::uint64_t seed, Hemisphere h) {
    return Rng(seed).split("tokenizer-init").split(static_cast<std::uint64_t>(icosphere::hemisphere_tag(h))).key();
}

} // namespace

double masked_reconstruction_mse(const tokenizer::TokenizerModel& model, const pipeline::Dataset& data, Hemisphere h,
                                 const std::vector<std::int64_t>& samples, unsigned threads) {
    if (samples.empty()) throw InsufficientDataError("no samples to score");
    return score_reconstruction(model, data, h, samples, threads).mse;
}

TokenizerTrainResult train_tokenizer(const TrainConfig& config, const tokenizer::TokenizerConfig& model_config,
                                     const pipeline::Dataset& data, Hemisphere hemisphere,
                                     const TrainOptions& options) {
    config.validate();
    model_config.validate();
    if (model_config.input_level != data.level)
        throw LevelMismatchError("tokenizer input level " + std::to_string(model_config.input_level) +
                                 " but dataset level " + std::to_string(data.level));
    const tokenizer::VertexMask& mask = data.roi(hemisphere);
    if (mask.level != data.level || mask.count() == 0)
        throw DegenerateMaskError("tokenizer training needs a non-empty vision mask at the dataset level");
    const Matrix weights = mask.as_weights();
    const char tag = icosphere::hemisphere_tag(hemisphere);
    auto say = [&](const std::string& line) {
        if (options.progress) options.progress(line);
    };

    const auto records = index_records(data);
    const std::vector<std::int64_t> train_samples = data.samples(Split::train);
    const std::vector<std::int64_t> val_samples = data.samples(Split::val);
    const std::vector<std::int64_t> images = data.manifest.images(Split::train);
    if (train_samples.empty()) throw InsufficientDataError("no training samples");

    TokenizerTrainResult result;
    result.model = tokenizer::build(model_config, tokenizer_seed(config.seed, hemisphere));
    auto& params = result.model.parameters;
    AdamState adam = AdamState::zeros_like(params);
    result.log = MetricLog({"epoch", "step", "lr", "train_loss", "train_mse", "val_loss", "val_mse"});

    const std::string base = std::string("tokenizer_") + tag;
    ensure_dir(options.output_dir);

    std::map<std::string, std::string> ck_config = model_config.to_map();
    ck_config["hemisphere"] = std::string(1, tag);

    RunState state;
    if (!options.resume_from.empty()) {
        state = load_state(options.resume_from, "tokenizer", config, params, adam);
        say("resumed from " + options.resume_from + " after epoch " + std::to_string(state.epochs_done));
    } else {
        state.initial = score_reconstruction(result.model, data, hemisphere, train_samples, config.threads).mse;
        state.best = std::numeric_limits<double>::infinity();
    }
    if (!options.output_dir.empty())
        result.log.attach(join_path(options.output_dir, base + "_metrics.csv"), state.epochs_done);
    result.initial_train_mse = state.initial;

    const std::size_t per_epoch = images.size() * static_cast<std::size_t>(config.scans_per_epoch);
    const std::size_t steps_per_epoch = (per_epoch + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(config.epochs);
    const double theta_max = config.rotation_degrees * std::numbers::pi / 180.0;
    const Matrix coords = icosphere::mesh_at(data.level)->coordinate_matrix();
    const Rng root = Rng(config.seed).split("tokenizer-train").split(static_cast<std::uint64_t>(tag));

    auto save_last_good = [&](const char* suffix) {
        if (options.output_dir.empty()) return;
        save_state(join_path(options.output_dir, base + suffix), "tokenizer", ck_config, config, params, adam, state);
    };

    for (int epoch = state.epochs_done; epoch < config.epochs; ++epoch) {
        if (options.stop_after_epoch > 0 && epoch >= options.stop_after_epoch) break;
        Rng epoch_rng = root.split(static_cast<std::uint64_t>(epoch));

        std::vector<std::int64_t> order;
        Rng scan_rng = epoch_rng.split("scans");
        for (std::int64_t image : images) {
            auto scans = data.manifest.scans_of(image);
            std::vector<std::int64_t> pick(scans.begin(), scans.end());
            shuffle(pick, scan_rng);
            order.insert(order.end(), pick.begin(), pick.begin() + config.scans_per_epoch);
        }
        Rng order_rng = epoch_rng.split("order");
        shuffle(order, order_rng);

        double loss_sum = 0.0, mse_sum = 0.0, lr = 0.0;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const std::size_t lo = s * config.batch_size;
            const std::size_t hi = std::min(order.size(), lo + config.batch_size);
            const std::size_t n = hi - lo;
            Rng step_rng = epoch_rng.split("step").split(s);

            std::vector<Matrix> inputs;
            for (std::size_t i = lo; i < hi; ++i) inputs.push_back(sample_signal(data, hemisphere, order[i]));
            Rng mix_rng = step_rng.split("mixup");
            if (pipeline::tokenizer_train_mixup(inputs, nullptr, config.train_mixup, mix_rng).skipped)
                say("warning: batch of one sample, mixup skipped");

            std::vector<tokenizer::ConditionSet> conds;
            for (std::size_t i = 0; i < n; ++i) {
                Rng rot = step_rng.split("rotation").split(i);
                conds.push_back(conditions_for(data, hemisphere, records.at(order[lo + i])->subject_id,
                                               augment::random_rotation(coords, theta_max, rot)));
            }

            std::vector<num::Gradients> grads(n);
            std::vector<double> losses(n), mses(n);
            parallel_for(n, config.threads, [&](std::size_t i) {
                num::Tape tape;
                const auto bound = tape.bind(params);
                const num::Var token = tokenizer::encode(tape, bound, model_config, inputs[i], conds[i]);
                const num::Var rec = tokenizer::decode(bound, model_config, token);
                const num::Var target = tape.constant(inputs[i]);
                const num::Var mse = num::mse(rec, target, weights);
                const num::Var loss = num::add(mse, num::l1(rec, target, weights));
                losses[i] = loss.value()(0, 0);
                mses[i] = mse.value()(0, 0);
                grads[i] = tape.backpropagate(loss);
            });

            num::Gradients total = params.zeros_like();
            double batch_loss = 0.0, batch_mse = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                add_scaled(total, grads[i], 1.0 / static_cast<double>(n));
                batch_loss += losses[i];
                batch_mse += mses[i];
            }
            if (!std::isfinite(batch_loss)) {
                save_last_good("_last_good.ckpt");
                throw NumericError("non-finite tokenizer loss at epoch " + std::to_string(epoch + 1) + ", step " +
                                   std::to_string(state.step + 1));
            }
            clip_gradients(total, config.max_grad_norm);
            lr = cosine_lr(state.step, total_steps, config.learning_rate);
            optimizer_step(params, total, lr, config.weight_decay, adam);
            ++state.step;
            loss_sum += batch_loss;
            mse_sum += batch_mse;
        }

        const double train_loss = loss_sum / static_cast<double>(order.size());
        const double train_mse = mse_sum / static_cast<double>(order.size());
        const ReconstructionScore val = score_reconstruction(result.model, data, hemisphere, val_samples, config.threads);
        result.log.append({static_cast<double>(epoch + 1), static_cast<double>(state.step), lr, train_loss, train_mse,
                           val.loss, val.mse});
        state.epochs_done = epoch + 1;

        const double criterion = val_samples.empty() ? train_loss : val.loss;
        if (criterion < state.best) {
            state.best = criterion;
            state.best_epoch = epoch + 1;
            if (!options.output_dir.empty())
                tokenizer::save_model(join_path(options.output_dir, base + "_best.ckpt"), result.model, hemisphere);
        }
        save_last_good("_last.ckpt");
        say("tokenizer " + std::string(1, tag) + " epoch " + std::to_string(epoch + 1) + "/" +
            std::to_string(config.epochs) + " train_loss=" + fmt(train_loss) + " val_loss=" + fmt(val.loss));
    }

    result.best_val_loss = state.best;
    result.best_epoch = state.best_epoch;
    result.final_train_mse = score_reconstruction(result.model, data, hemisphere, train_samples, config.threads).mse;
    if (!options.output_dir.empty())
        tokenizer::save_model(join_path(options.output_dir, base + "_final.ckpt"), result.model, hemisphere);
    return result;
}

// ---- aligner stage ----------------------------------------------------------------

void PredictorConfig::validate() const {
    if (input_features < 1) throw ConfigError("predictor needs at least one input feature");
    if (hidden < 1) throw ConfigError("predictor hidden width must be at least 1");
    if (image_tokens < 1 || text_tokens < 1 || dim < 1) throw ConfigError("predictor output layout is empty");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
}

std::map<std::string, std::string> PredictorConfig::to_map() const {
    return {{"input_features", std::to_string(input_features)},
            {"hidden", std::to_string(hidden)},
            {"image_tokens", std::to_string(image_tokens)},
            {"text_tokens", std::to_string(text_tokens)},
            {"dim", std::to_string(dim)},
            {"dropout", fmt(dropout)}};
}

PredictorConfig PredictorConfig::from_map(const std::map<std::string, std::string>& values) {
    auto get = [&](const char* key) -> const std::string& {
        auto it = values.find(key);
        if (it == values.end()) throw ConfigError(std::string("predictor config missing '") + key + "'");
        return it->second;
    };
    PredictorConfig c;
    c.input_features = static_cast<std::size_t>(parse_integer("input_features", get("input_features")));
    c.hidden = static_cast<std::size_t>(parse_integer("hidden", get("hidden")));
    c.image_tokens = static_cast<std::size_t>(parse_integer("image_tokens", get("image_tokens")));
    c.text_tokens = static_cast<std::size_t>(parse_integer("text_tokens", get("text_tokens")));
    c.dim = static_cast<std::size_t>(parse_integer("dim", get("dim")));
    c.dropout = parse_double("dropout", get("dropout"));
    c.validate();
    return c;
}

EmbeddingPredictor EmbeddingPredictor::build(const PredictorConfig& config, std::uint64_t seed) {
    config.validate();
    EmbeddingPredictor p;
    p.config = config;
    const Rng root = Rng(seed).split("predictor");
    // Biases share the fan-in bound so an all-off hidden layer cannot yield a zero row.
    auto uniform = [&](const std::string& name, std::size_t fan_in, std::size_t rows, std::size_t fan_out) {
        Rng rng = root.split(name);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Matrix m(rows, fan_out);
        for (double& v : m.values()) v = rng.uniform(-bound, bound);
        p.parameters.add(name, std::move(m));
    };
    uniform("pred.fc1.w", config.input_features, config.input_features, config.hidden);
    uniform("pred.fc1.b", config.input_features, 1, config.hidden);
    uniform("pred.proj.w", config.hidden, config.hidden, config.output_width());
    uniform("pred.proj.b", config.hidden, 1, config.output_width());
    return p;
}

num::Var EmbeddingPredictor::forward(const num::BoundParameters& params, num::Var inputs,
                                     const Matrix& keep_mask) const {
    if (inputs.cols() != config.input_features)
        throw ShapeError("predictor expects " + std::to_string(config.input_features) + " features, got " +
                         std::to_string(inputs.cols()));
    num::Var h = num::relu(num::add_row_bias(num::matmul(inputs, params["pred.fc1.w"]), params["pred.fc1.b"]));
    if (!keep_mask.empty()) h = num::multiply(h, inputs.tape->constant(keep_mask));
    return num::add_row_bias(num::matmul(h, params["pred.proj.w"]), params["pred.proj.b"]);
}

Matrix EmbeddingPredictor::predict(const Matrix& inputs) const {
    num::Tape tape;
    const auto params = tape.bind(parameters);
    return forward(params, tape.constant(inputs)).value();
}

void save_predictor(const std::string& path, const EmbeddingPredictor& predictor,
                    const std::map<std::string, std::string>& extra) {
    Checkpoint ck;
    ck.kind = "aligner";
    ck.config = extra;
    for (const auto& [k, v] : predictor.config.to_map()) ck.config[k] = v;
    ck.arrays = predictor.parameters;
    save_checkpoint(path, ck);
}

EmbeddingPredictor load_predictor(const std::string& path) {
    const Checkpoint ck = load_checkpoint(path);
    if (ck.kind != "aligner") throw ConfigError(path + ": checkpoint holds a '" + ck.kind + "', not an aligner");
    const PredictorConfig config = PredictorConfig::from_map(ck.config);
    const EmbeddingPredictor reference = EmbeddingPredictor::build(config, 0);
    EmbeddingPredictor out;
    out.config = config;
    for (const auto& [name, value] : reference.parameters) {
        if (!ck.arrays.contains(name)) throw ConfigError(path + ": missing parameter '" + name + "'");
        if (!ck.arrays.at(name).same_shape(value)) throw ShapeError(path + ": parameter '" + name + "' has wrong shape");
        out.parameters.add(name, ck.arrays.at(name));
    }
    return out;
}

BatchTargets gather_targets(const pipeline::EmbeddingTable& table, const std::vector<std::int64_t>& image_ids) {
    const std::size_t n = image_ids.size();
    const std::size_t wi = table.image_tokens * table.dim;
    const std::size_t wt = table.text_tokens * table.dim;
    BatchTargets t{Matrix(n, wi), Matrix(n, wt), Matrix(n, wt), Matrix(n, wt), image_ids};
    for (std::size_t r = 0; r < n; ++r) {
        const auto id = image_ids[r];
        if (id < 0 || static_cast<std::size_t>(id) >= table.image.size() || table.image[static_cast<std::size_t>(id)].empty())
            throw DataError("no target embedding for image " + std::to_string(id));
        const auto img = static_cast<std::size_t>(id);
        const Matrix image = losses::clamp_targets(table.image[img]);
        const Matrix text = losses::clamp_targets(table.text[img]);
        const std::size_t len = table.semantic_length[img];
        if (len < 1 || len > table.text_tokens)
            throw MaskError("semantic length " + std::to_string(len) + " outside 1.." +
                            std::to_string(table.text_tokens) + " for image " + std::to_string(id));
        std::copy(image.values().begin(), image.values().end(), t.image_tokens.row(r).begin());
        std::copy(text.values().begin(), text.values().end(), t.text_tokens.row(r).begin());
        for (std::size_t tok = 0; tok < table.text_tokens; ++tok)
            for (std::size_t c = 0; c < table.dim; ++c) {
                t.text_weights(r, tok * table.dim + c) = tok < len ? 1.0 : 0.0;
                t.eos_mask(r, tok * table.dim + c) = tok + 1 == len ? 1.0 : 0.0;
            }
    }
    return t;
}

namespace {

// Selects columns [offset, offset + width) of a `total`-wide row.
Matrix column_selector(std::size_t total, std::size_t offset, std::size_t width) {
    Matrix s(total, width);
    for (std::size_t j = 0; j < width; ++j) s(offset + j, j) = 1.0;
    return s;
}

// Sums `tokens` consecutive d-wide blocks into one d-wide block.
Matrix block_sum(std::size_t tokens, std::size_t dim) {
    Matrix s(tokens * dim, dim);
    for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t c = 0; c < dim; ++c) s(t * dim + c, c) = 1.0;
    return s;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

} // namespace

AlignmentLossVars alignment_loss(num::Tape& tape, num::Var prediction, const BatchTargets& targets,
                                 const PredictorConfig& layout, double temperature) {
    const std::size_t d = layout.dim;
    const std::size_t wi = layout.image_tokens * d;
    const std::size_t wt = layout.text_tokens * d;
    const std::size_t w = layout.output_width();
    if (prediction.cols() != w || prediction.rows() != targets.image_index.size())
        throw ShapeError("alignment_loss: prediction is " + prediction.value().shape_string() + ", expected " +
                         std::to_string(targets.image_index.size()) + "x" + std::to_string(w));
    const Matrix stack = block_sum(layout.text_tokens, d);

    const num::Var image_all = num::matmul(prediction, tape.constant(column_selector(w, 0, wi)));
    const num::Var text_all = num::matmul(prediction, tape.constant(column_selector(w, wi, wt)));
    const num::Var image_vec = num::matmul(prediction, tape.constant(column_selector(w, 0, d)));
    const num::Var text_eos = num::matmul(num::multiply(text_all, tape.constant(targets.eos_mask)), tape.constant(stack));

    const num::Var target_image_vec = tape.constant(kernels::matmul(targets.image_tokens, column_selector(wi, 0, d)));
    const num::Var target_text_eos = tape.constant(kernels::matmul(hadamard(targets.text_tokens, targets.eos_mask), stack));

    AlignmentLossVars out;
    out.image_vector = image_vec;
    out.bi_info = num::add(losses::bidirectional_infonce(image_vec, target_image_vec, targets.image_index, temperature),
                           losses::bidirectional_infonce(text_eos, target_text_eos, targets.image_index, temperature));
    out.cosine = num::add(losses::cosine_loss(image_vec, target_image_vec), losses::cosine_loss(text_eos, target_text_eos));
    out.token_mse = num::add(losses::tokenwise_masked_mse(image_all, tape.constant(targets.image_tokens)),
                             losses::tokenwise_masked_mse(text_all, tape.constant(targets.text_tokens), targets.text_weights));
    out.total = num::add(num::add(out.bi_info, out.cosine), out.token_mse);
    return out;
}

double retrieval_accuracy(const Matrix& query, const Matrix& key, const std::vector<std::int64_t>& image_index) {
    if (query.rows() != key.rows() || query.cols() != key.cols() || query.rows() != image_index.size())
        throw ShapeError("retrieval_accuracy: query " + query.shape_string() + ", key " + key.shape_string() + ", " +
                         std::to_string(image_index.size()) + " indices");
    if (query.rows() == 0) return 0.0;
    auto norms = [](const Matrix& m) {
        std::vector<double> n(m.rows());
        for (std::size_t r = 0; r < m.rows(); ++r) {
            double s = 0.0;
            for (double v : m.row(r)) s += v * v;
            n[r] = std::max(std::sqrt(s), 1e-12);
        }
        return n;
    };
    const auto qn = norms(query), kn = norms(key);
    const Matrix sim = kernels::matmul_nt(query, key);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < sim.rows(); ++i) {
        std::size_t best = 0;
        double best_v = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < sim.cols(); ++j) {
            const double v = sim(i, j) / (qn[i] * kn[j]);
            if (v > best_v) {
                best_v = v;
                best = j;
            }
        }
        hits += image_index[best] == image_index[i];
    }
    return static_cast<double>(hits) / static_cast<double>(query.rows());
}

Matrix vision_features(const tokenizer::TokenizerModel& left, const tokenizer::TokenizerModel& right,
                       const pipeline::Dataset& data, int subject, const Matrix& left_signal,
                       const Matrix& right_signal, const tokenizer::VertexMask& left_mask,
                       const tokenizer::VertexMask& right_mask) {
    const Matrix coords = icosphere::mesh_at(data.level)->coordinate_matrix();
    const auto lt = tokenizer::encode(left, {data.level, Hemisphere::left, left_signal},
                                      {data.structure(Hemisphere::left, subject), coords});
    const auto rt = tokenizer::encode(right, {data.level, Hemisphere::right, right_signal},
                                      {data.structure(Hemisphere::right, subject), coords});
    const auto vt = tokenizer::select_vision_tokens(lt, rt, left_mask, right_mask);
    return Matrix(1, vt.features.size(), std::vector<double>(vt.features.values().begin(), vt.features.values().end()));
}

namespace {

struct AlignContext {
    const pipeline::Dataset& data;
    const tokenizer::TokenizerModel& left;
    const tokenizer::TokenizerModel& right;
    tokenizer::VertexMask left_mask;
    tokenizer::VertexMask right_mask;
    std::map<std::int64_t, const pipeline::ManifestRecord*> records;

    AlignContext(const pipeline::Dataset& d, const tokenizer::TokenizerModel& l, const tokenizer::TokenizerModel& r)
        : data(d), left(l), right(r), records(index_records(d)) {
        for (const auto* m : {&l, &r})
            if (m->config.input_level != d.level)
                throw LevelMismatchError("tokenizer input level " + std::to_string(m->config.input_level) +
                                         " but dataset level " + std::to_string(d.level));
        if (l.config.token_level() != r.config.token_level() || l.config.token_channels() != r.config.token_channels())
            throw ShapeError("left and right tokenizers produce differently shaped tokens");
        const int tl = l.config.token_level();
        left_mask = tl == d.level ? d.roi_left : tokenizer::coarsen_roi_mask(d.roi_left, tl);
        right_mask = tl == d.level ? d.roi_right : tokenizer::coarsen_roi_mask(d.roi_right, tl);
        if (left_mask.count() + right_mask.count() == 0)
            throw DegenerateMaskError("vision masks select no token rows");
    }

    std::size_t features() const { return (left_mask.count() + right_mask.count()) * left.config.token_channels(); }
    int subject_of_image(std::int64_t image) const { return data.manifest.first_record_of(image).subject_id; }

    Matrix features_of(int subject, const Matrix& l, const Matrix& r) const {
        return vision_features(left, right, data, subject, l, r, left_mask, right_mask);
    }

    std::array<Matrix, 3> scans(Hemisphere h, std::int64_t image) const {
        const auto ids = data.manifest.scans_of(image);
        return {sample_signal(data, h, ids[0]), sample_signal(data, h, ids[1]), sample_signal(data, h, ids[2])};
    }

    // Scan-mean features of each image, stacked as rows.
    Matrix mean_features(const std::vector<std::int64_t>& images, unsigned threads) const {
        Matrix out(images.size(), features());
        parallel_for(images.size(), threads, [&](std::size_t i) {
            const auto l = scans(Hemisphere::left, images[i]);
            const auto r = scans(Hemisphere::right, images[i]);
            const Matrix f = features_of(subject_of_image(images[i]), augment::scan_mean(l),
                                         augment::scan_mean(r));
            std::copy(f.values().begin(), f.values().end(), out.row(i).begin());
        });
        return out;
    }
};

Matrix image_vector_of(const Matrix& prediction, std::size_t dim) {
    Matrix out(prediction.rows(), dim);
    for (std::size_t r = 0; r < prediction.rows(); ++r)
        for (std::size_t c = 0; c < dim; ++c) out(r, c) = prediction(r, c);
    return out;
}

Matrix rows_of(const Matrix& m, std::size_t lo, std::size_t hi) {
    Matrix out(hi - lo, m.cols());
    for (std::size_t r = lo; r < hi; ++r) std::copy(m.row(r).begin(), m.row(r).end(), out.row(r - lo).begin());
    return out;
}

struct GroupScore {
    double retrieval = 0.0;
    double chance = 0.0;
};

// Retrieval scored within consecutive groups of `group` images.
GroupScore grouped_retrieval(const Matrix& predictions, const BatchTargets& targets, std::size_t dim,
                             std::size_t group) {
    const std::size_t n = predictions.rows();
    GroupScore out;
    if (n == 0) return out;
    group = std::max<std::size_t>(1, std::min(group, n));
    const Matrix key_all = kernels::matmul(targets.image_tokens, column_selector(targets.image_tokens.cols(), 0, dim));
    const Matrix query_all = image_vector_of(predictions, dim);
    for (std::size_t lo = 0; lo < n; lo += group) {
        const std::size_t hi = std::min(n, lo + group);
        std::vector<std::int64_t> idx(targets.image_index.begin() + static_cast<std::ptrdiff_t>(lo),
                                      targets.image_index.begin() + static_cast<std::ptrdiff_t>(hi));
        out.retrieval += retrieval_accuracy(rows_of(query_all, lo, hi), rows_of(key_all, lo, hi), idx) *
                         static_cast<double>(hi - lo);
        out.chance += 1.0;
    }
    out.retrieval /= static_cast<double>(n);
    out.chance /= static_cast<double>(n);
    return out;
}

std::uint64_t predictor_seed(std::uint64_t seed) { return Rng(seed).split("predictor-init").key(); }

} // namespace

EvaluationResult evaluate_aligner(const EmbeddingPredictor& predictor, const tokenizer::TokenizerModel& left,
                                  const tokenizer::TokenizerModel& right, const pipeline::Dataset& data,
                                  pipeline::Split split, std::size_t group, double temperature, unsigned threads) {
    const AlignContext ctx(data, left, right);
    const auto images = data.manifest.images(split);
    EvaluationResult out;
    out.images = images.size();
    if (images.empty()) throw InsufficientDataError("split '" + std::string(pipeline::split_name(split)) + "' has no images");
    const Matrix features = ctx.mean_features(images, threads);
    const Matrix prediction = predictor.predict(features);
    const BatchTargets targets = gather_targets(data.targets, images);
    const GroupScore g = grouped_retrieval(prediction, targets, predictor.config.dim, group);
    out.retrieval = g.retrieval;
    out.chance = g.chance;
    if (images.size() >= 2) {
        num::Tape tape;
        const auto vars = alignment_loss(tape, tape.constant(prediction), targets, predictor.config, temperature);
        out.components = {vars.bi_info.value()(0, 0), vars.cosine.value()(0, 0), vars.token_mse.value()(0, 0)};
    }
    return out;
}

AlignerTrainResult train_aligner(const TrainConfig& config, const pipeline::Dataset& data,
                                 const tokenizer::TokenizerModel& left, const tokenizer::TokenizerModel& right,
                                 const TrainOptions& options) {
    config.validate();
    const AlignContext ctx(data, left, right);
    auto say = [&](const std::string& line) {
        if (options.progress) options.progress(line);
    };

    AlignerTrainResult result;
    const std::size_t b = pipeline::balanced_image_count(config.mixup.lambda, config.mixup.k, config.batch_size);
    result.images_per_batch = b;
    const auto train_images = data.manifest.images(Split::train);
    const auto val_images = data.manifest.images(Split::val);
    if (train_images.size() < b)
        throw DataError("aligner batch needs " + std::to_string(b) + " images, train split has " +
                        std::to_string(train_images.size()));
    say("aligner: B=" + std::to_string(config.batch_size) + " lambda=" + fmt(config.mixup.lambda) +
        " K=" + std::to_string(config.mixup.k) + " -> b=" + std::to_string(b) + " images per batch");

    PredictorConfig pc;
    pc.input_features = ctx.features();
    pc.hidden = config.hidden;
    pc.image_tokens = data.targets.image_tokens;
    pc.text_tokens = data.targets.text_tokens;
    pc.dim = data.targets.dim;
    pc.dropout = config.dropout;
    result.predictor = EmbeddingPredictor::build(pc, predictor_seed(config.seed));
    auto& params = result.predictor.parameters;
    AdamState adam = AdamState::zeros_like(params);

    // Features of the original scans, reused whenever a sample is not mixed.
    const auto train_samples = data.samples(Split::train);
    std::vector<Matrix> bank(train_samples.size());
    std::map<std::int64_t, std::size_t> bank_row;
    for (std::size_t i = 0; i < train_samples.size(); ++i) bank_row[train_samples[i]] = i;
    parallel_for(train_samples.size(), config.threads, [&](std::size_t i) {
        const auto s = train_samples[i];
        bank[i] = ctx.features_of(ctx.records.at(s)->subject_id, sample_signal(data, Hemisphere::left, s),
                                  sample_signal(data, Hemisphere::right, s));
    });
    const Matrix train_mean = ctx.mean_features(train_images, config.threads);
    const BatchTargets train_targets = gather_targets(data.targets, train_images);
    Matrix val_mean;
    BatchTargets val_targets;
    if (!val_images.empty()) {
        val_mean = ctx.mean_features(val_images, config.threads);
        val_targets = gather_targets(data.targets, val_images);
    }

    result.log = MetricLog({"epoch", "step", "lr", "loss", "bi_info", "cosine", "token_mse", "batch_retrieval",
                            "train_retrieval", "val_retrieval", "val_chance"});
    ensure_dir(options.output_dir);
    std::map<std::string, std::string> ck_config = pc.to_map();
    ck_config["images_per_batch"] = std::to_string(b);

    RunState state;
    if (!options.resume_from.empty()) {
        state = load_state(options.resume_from, "aligner", config, params, adam);
        say("resumed from " + options.resume_from + " after epoch " + std::to_string(state.epochs_done));
    } else {
        state.best = -1.0;
    }
    if (!options.output_dir.empty())
        result.log.attach(join_path(options.output_dir, "aligner_metrics.csv"), state.epochs_done);

    const std::size_t steps_per_epoch = train_images.size() / b;
    const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(config.epochs);
    const Rng root = Rng(config.seed).split("aligner-train");
    auto save = [&](const char* suffix) {
        if (options.output_dir.empty()) return;
        save_state(join_path(options.output_dir, std::string("aligner") + suffix), "aligner", ck_config, config,
                   params, adam, state);
    };

    GroupScore train_score, val_score;
    for (int epoch = state.epochs_done; epoch < config.epochs; ++epoch) {
        if (options.stop_after_epoch > 0 && epoch >= options.stop_after_epoch) break;
        Rng epoch_rng = root.split(static_cast<std::uint64_t>(epoch));
        std::vector<std::int64_t> order = train_images;
        Rng order_rng = epoch_rng.split("order");
        shuffle(order, order_rng);

        double loss_sum = 0.0, bi_sum = 0.0, cos_sum = 0.0, mse_sum = 0.0, hit_sum = 0.0, lr = 0.0;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const std::span<const std::int64_t> chunk(order.data() + s * b, b);
            Rng batch_rng = epoch_rng.split("batch").split(s);
            Rng mix_rng = batch_rng.split("mixup");
            const pipeline::AlignmentBatch batch = pipeline::assemble_batch(chunk, config.mixup, config.batch_size, mix_rng);
            const std::size_t n = batch.samples.size();

            Matrix inputs(n, pc.input_features);
            parallel_for(n, config.threads, [&](std::size_t i) {
                const auto& smp = batch.samples[i];
                Matrix f;
                if (!smp.mixed) {
                    const auto id = data.manifest.scans_of(smp.image_id)[static_cast<std::size_t>(smp.scan)];
                    f = bank[bank_row.at(id)];
                } else {
                    augment::SimplexWeights right_w = smp.weights;
                    if (!config.share_hemisphere_mixup) {
                        Rng r = batch_rng.split("right-weights").split(i);
                        right_w = augment::sample_simplex_weights(r);
                    }
                    f = ctx.features_of(ctx.subject_of_image(smp.image_id),
                                        augment::mix_scans(ctx.scans(Hemisphere::left, smp.image_id), smp.weights),
                                        augment::mix_scans(ctx.scans(Hemisphere::right, smp.image_id), right_w));
                }
                std::copy(f.values().begin(), f.values().end(), inputs.row(i).begin());
            });

            Matrix keep;
            if (config.dropout > 0.0) {
                Rng drop = batch_rng.split("dropout");
                keep = Matrix(n, pc.hidden);
                const double scale = 1.0 / (1.0 - config.dropout);
                for (double& v : keep.values()) v = drop.uniform() < config.dropout ? 0.0 : scale;
            }

            const BatchTargets targets = gather_targets(data.targets, batch.image_index());
            num::Tape tape;
            const auto bound = tape.bind(params);
            const num::Var prediction = result.predictor.forward(bound, tape.constant(inputs), keep);
            const AlignmentLossVars lv = alignment_loss(tape, prediction, targets, pc, config.temperature);
            const double loss = lv.total.value()(0, 0);
            if (!std::isfinite(loss)) {
                save("_last_good.ckpt");
                throw NumericError("non-finite aligner loss at epoch " + std::to_string(epoch + 1) + ", step " +
                                   std::to_string(state.step + 1));
            }
            num::Gradients grads = tape.backpropagate(lv.total);
            clip_gradients(grads, config.max_grad_norm);
            lr = cosine_lr(state.step, total_steps, config.learning_rate);
            optimizer_step(params, grads, lr, config.weight_decay, adam);
            ++state.step;

            loss_sum += loss;
            bi_sum += lv.bi_info.value()(0, 0);
            cos_sum += lv.cosine.value()(0, 0);
            mse_sum += lv.token_mse.value()(0, 0);
            const Matrix key = kernels::matmul(targets.image_tokens, column_selector(targets.image_tokens.cols(), 0, pc.dim));
            hit_sum += retrieval_accuracy(lv.image_vector.value(), key, targets.image_index);
        }

        const double steps = static_cast<double>(std::max<std::size_t>(steps_per_epoch, 1));
        train_score = grouped_retrieval(result.predictor.predict(train_mean), train_targets, pc.dim, b);
        if (!val_images.empty())
            val_score = grouped_retrieval(result.predictor.predict(val_mean), val_targets, pc.dim, b);
        else
            val_score = {std::nan(""), std::nan("")};
        result.log.append({static_cast<double>(epoch + 1), static_cast<double>(state.step), lr, loss_sum / steps,
                           bi_sum / steps, cos_sum / steps, mse_sum / steps, hit_sum / steps, train_score.retrieval,
                           val_score.retrieval, val_score.chance});
        state.epochs_done = epoch + 1;
        const double criterion = val_images.empty() ? train_score.retrieval : val_score.retrieval;
        if (criterion > state.best) {
            state.best = criterion;
            state.best_epoch = epoch + 1;
            if (!options.output_dir.empty())
                save_predictor(join_path(options.output_dir, "aligner_best.ckpt"), result.predictor, ck_config);
        }
        save("_last.ckpt");
        say("aligner epoch " + std::to_string(epoch + 1) + "/" + std::to_string(config.epochs) +
            " loss=" + fmt(loss_sum / steps) + " train_retrieval=" + fmt(train_score.retrieval) +
            " val_retrieval=" + fmt(val_score.retrieval));
    }

    if (result.log.empty()) {
        train_score = grouped_retrieval(result.predictor.predict(train_mean), train_targets, pc.dim, b);
        if (!val_images.empty()) val_score = grouped_retrieval(result.predictor.predict(val_mean), val_targets, pc.dim, b);
    }
    result.final_train_retrieval = train_score.retrieval;
    result.final_val_retrieval = val_score.retrieval;
    result.val_chance = val_score.chance;
    if (!options.output_dir.empty())
        save_predictor(join_path(options.output_dir, "aligner_final.ckpt"), result.predictor, ck_config);
    return result;
}

} // namespace cortisphere::trainer
