// cortisphere: batch entry point over the mesh, data, tokenizer and aligner stages.
#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cortisphere/augment.hpp"
#include "cortisphere/checkpoint.hpp"
#include "cortisphere/error.hpp"
#include "cortisphere/icosphere.hpp"
#include "cortisphere/losses.hpp"
#include "cortisphere/pipeline.hpp"
#include "cortisphere/tokenizer.hpp"
#include "cortisphere/trainer.hpp"

using namespace cortisphere;
namespace fs = std::filesystem;
using icosphere::Hemisphere;

namespace {

constexpr const char* kEnvPrefix = "CORTISPHERE_";

std::string env_name(std::string key) {
    for (char& c : key) c = c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return kEnvPrefix + key;
}

// Keeps the error line on one line and its message field unambiguous.
std::string escaped(std::string_view text) {
    std::string out;
    for (char c : text) {
        if (c == '"' || c == '\\') out += '\\';
        if (c == '\n') {
            out += "\\n";
            continue;
        }
        out += c;
    }
    return out;
}

std::string dashed(std::string key) {
    std::replace(key.begin(), key.end(), '_', '-');
    return key;
}

// Drops file entries whose environment variable is set, so the environment
// outranks the config file while explicit flags still win over both.
class EnvFirstConfig : public CLI::ConfigINI {
public:
    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        auto items = CLI::ConfigINI::from_config(input);
        std::erase_if(items, [](const CLI::ConfigItem& item) { return std::getenv(env_name(item.name).c_str()); });
        return items;
    }
};

struct Globals {
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::string record;
};

// Fully resolved settings of one run, echoed before work starts and written
// next to the outputs. The file is a valid --config for exact replay.
class RunRecord {
public:
    RunRecord(std::string section, const Globals& g) : section_(std::move(section)), globals_(g) {}

    template <class T>
    void set(const std::string& key, const T& value) {
        if constexpr (std::is_floating_point_v<T>) {
            char buf[40];
            entries_.emplace_back(key, std::string(buf, std::to_chars(buf, buf + sizeof buf, value).ptr));
        } else {
            std::ostringstream s;
            s << value;
            entries_.emplace_back(key, s.str());
        }
    }
    void set_all(const std::map<std::string, std::string>& values, std::initializer_list<const char*> skip = {}) {
        for (const auto& [k, v] : values)
            if (std::none_of(skip.begin(), skip.end(), [&](const char* s) { return k == s; })) entries_.emplace_back(dashed(k), v);
    }

    std::string ini() const {
        std::ostringstream s;
        s << "# cortisphere resolved configuration\n";
        s << "seed=" << globals_.seed << "\nthreads=" << globals_.threads << "\n";
        s << "[" << section_ << "]\n";
        for (const auto& [k, v] : entries_) s << k << "=" << quote(v) << "\n";
        return s.str();
    }

    void echo() const {
        std::istringstream in(ini());
        for (std::string line; std::getline(in, line);) std::cerr << "config: " << line << "\n";
        if (!globals_.record.empty()) write(globals_.record);
    }

    void write(const fs::path& path) const {
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        std::ofstream out(path);
        if (!out) throw IoError("cannot write " + path.string());
        out << ini();
        std::cerr << "config written to " << path.string() << "\n";
    }

private:
    static std::string quote(const std::string& v) {
        const bool plain = !v.empty() && std::all_of(v.begin(), v.end(), [](char c) {
            return std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_' || c == '/' || c == '+';
        });
        return plain ? v : "\"" + v + "\"";
    }

    std::string section_;
    Globals globals_;
    std::vector<std::pair<std::string, std::string>> entries_;
};

// Record for a file output goes beside it; for a directory output, inside it.
fs::path record_path_for_file(const std::string& file) { return fs::path(file + ".config.ini"); }
fs::path record_path_for_dir(const std::string& dir) { return fs::path(dir) / "resolved_config.ini"; }

void progress(const std::string& line) { std::cerr << line << "\n"; }

std::vector<Hemisphere> hemispheres_of(const std::string& name) {
    if (name == "left" || name == "L") return {Hemisphere::left};
    if (name == "right" || name == "R") return {Hemisphere::right};
    if (name == "both") return {Hemisphere::left, Hemisphere::right};
    throw ConfigError("hemisphere must be left, right or both, got '" + name + "'");
}

pipeline::Split split_of(const std::string& name) { return pipeline::parse_split(name); }

// Options mirroring a key=value configuration map; unset entries keep the preset.
struct KeyOptions {
    std::map<std::string, std::optional<std::string>> values;

    void attach(CLI::App* app, const std::map<std::string, std::string>& keys, const std::set<std::string>& skip,
                const std::map<std::string, std::string>& aliases = {}) {
        for (const auto& [key, def] : keys) {
            if (skip.count(key)) continue;
            std::string names = "--" + dashed(key);
            if (auto it = aliases.find(key); it != aliases.end()) names += "," + it->second;
            app->add_option(names, values[key], key + " (preset value " + def + ")")->envname(env_name(key));
        }
    }

    std::map<std::string, std::string> overlay(std::map<std::string, std::string> base) const {
        for (const auto& [k, v] : values)
            if (v) base[k] = *v;
        return base;
    }
};

trainer::TrainConfig preset_train(const std::string& preset, trainer::Stage stage) {
    if (preset == "desk") return trainer::TrainConfig::desk(stage);
    if (preset == "paper") return trainer::TrainConfig::defaults(stage);
    throw ConfigError("preset must be desk or paper, got '" + preset + "'");
}

tokenizer::TokenizerConfig preset_tokenizer(const std::string& preset) {
    if (preset == "desk") return tokenizer::TokenizerConfig::desk();
    if (preset == "paper") return {};
    throw ConfigError("preset must be desk or paper, got '" + preset + "'");
}

// ---- mesh ------------------------------------------------------------------------

void mesh_info(int level) {
    const auto mesh = icosphere::mesh_at(level);
    std::size_t pentagons = 0;
    for (std::size_t v = 0; v < mesh->num_vertices(); ++v) pentagons += mesh->degree(v) == 5;
    std::printf("level=%d V=%zu E=%zu F=%zu pentagons=%zu\n", level, mesh->num_vertices(), mesh->num_edges(),
                mesh->num_faces(), pentagons);
}

void mesh_export(int level, const std::string& path) {
    const auto mesh = icosphere::mesh_at(level);
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    icosphere::write_obj(*mesh, out);
    std::printf("wrote %s (%zu vertices, %zu faces)\n", path.c_str(), mesh->num_vertices(), mesh->num_faces());
}

// ---- preprocessing -----------------------------------------------------------------

std::string stats_file(Hemisphere h) { return std::string("zscore_") + icosphere::hemisphere_tag(h) + ".zst"; }

void preprocess_fit(const std::string& manifest, const std::string& output) {
    const auto data = pipeline::load_dataset(manifest);
    fs::create_directories(output);
    for (Hemisphere h : {Hemisphere::left, Hemisphere::right}) {
        pipeline::SignalSet train{data.level, h, data.signals(h).channels, {}};
        for (auto s : data.samples(pipeline::Split::train)) train.samples.push_back(data.signals(h).samples[s]);
        const auto stats = pipeline::zscore_fit(train);
        const auto path = (fs::path(output) / stats_file(h)).string();
        pipeline::write_zscore_stats(path, stats);
        std::printf("fitted %s on %zu train samples -> %s\n", icosphere::hemisphere_tag(h) == 'L' ? "left" : "right",
                    train.samples.size(), path.c_str());
    }
}

void preprocess_apply(const std::string& manifest, const std::string& stats_dir, const std::string& output) {
    auto data = pipeline::load_dataset(manifest);
    for (Hemisphere h : {Hemisphere::left, Hemisphere::right}) {
        const auto stats = pipeline::read_zscore_stats((fs::path(stats_dir) / stats_file(h)).string());
        if (stats.hemisphere != h) throw DataError(stats_file(h) + " holds the other hemisphere");
        data.signals(h) = pipeline::zscore_apply(data.signals(h), stats);
    }
    pipeline::save_dataset(output, data);
    std::printf("normalised %zu samples -> %s\n", data.left.samples.size(),
                (fs::path(output) / "manifest.txt").string().c_str());
}

// ---- tokenizer ---------------------------------------------------------------------

void write_tokens_or_reconstructions(const std::string& model_path, const std::string& manifest,
                                     const std::string& split_name, const std::string& output, bool reconstruct) {
    Hemisphere h = Hemisphere::left;
    const auto model = tokenizer::load_model(model_path, &h);
    const auto data = pipeline::load_dataset(manifest);
    if (data.level != model.config.input_level)
        throw LevelMismatchError("dataset level " + std::to_string(data.level) + " but model expects level " +
                                 std::to_string(model.config.input_level));
    const auto samples = data.samples(split_of(split_name));
    if (samples.empty()) throw InsufficientDataError("split '" + split_name + "' has no samples");
    std::map<std::int64_t, int> subject;
    for (const auto& r : data.manifest.records) subject[r.sample_id] = r.subject_id;

    const Matrix coords = icosphere::mesh_at(data.level)->coordinate_matrix();
    const Matrix weights = data.roi(h).as_weights();
    pipeline::SignalSet out;
    out.hemisphere = h;
    double mse_sum = 0.0;
    for (auto s : samples) {
        const tokenizer::ConditionSet cond{data.structure(h, subject.at(s)), coords};
        const tokenizer::SphericalSignal signal{data.level, h, data.signals(h).samples[s]};
        const auto token = tokenizer::encode(model, signal, cond);
        if (reconstruct) {
            const auto rec = tokenizer::decode(model, token);
            num::Tape tape;
            mse_sum += num::mse(tape.constant(rec.values), tape.constant(signal.values), weights).value()(0, 0);
            out.samples.push_back(rec.values);
        } else {
            out.samples.push_back(token.features);
        }
    }
    out.level = reconstruct ? data.level : model.config.token_level();
    out.channels = out.samples.front().cols();
    pipeline::write_signal_file(output, out);
    std::printf("wrote %zu %s of shape %zux%zu -> %s\n", out.samples.size(), reconstruct ? "reconstructions" : "tokens",
                out.samples.front().rows(), out.channels, output.c_str());
    if (reconstruct) std::printf("masked_mse=%.9g\n", mse_sum / static_cast<double>(samples.size()));
}

// ---- checks ------------------------------------------------------------------------

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (double& v : m.values()) v = rng.uniform(-1.0, 1.0);
    return m;
}

struct CheckTally {
    int failed = 0;
    void line(bool ok, const std::string& name, const std::string& detail) {
        failed += !ok;
        std::printf("%s %s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    }
    void report(const num::FiniteDifferenceReport& r, const std::string& name) {
        std::ostringstream s;
        s << "max_rel_error=" << r.max_rel_error << " checked=" << r.checked << " kinks=" << r.kink_excluded
          << " tolerance=" << r.tolerance;
        if (!r.passed) s << " worst=" << r.worst_parameter << "[" << r.worst_index << "]";
        line(r.passed, name, s.str());
    }
};

void check_gradients(const std::string& stage, const std::string& preset, double tolerance, double step,
                     std::size_t samples, std::uint64_t seed) {
    if (stage != "tokenizer" && stage != "losses" && stage != "aligner" && stage != "all")
        throw ConfigError("stage must be tokenizer, losses, aligner or all, got '" + stage + "'");
    num::FiniteDifferenceOptions opt;
    opt.tolerance = tolerance;
    opt.step = step;
    opt.seed = seed;
    Rng rng = Rng(seed).split("check-gradients");
    CheckTally tally;

    if (stage == "losses" || stage == "all") {
        num::ParameterSet ps;
        ps.add("pred", random_matrix(6, 4, rng));
        const Matrix target = random_matrix(6, 4, rng);
        const std::vector<std::int64_t> idx{0, 0, 0, 1, 1, 2};
        const std::vector<std::pair<std::string, num::Program>> programs = {
            {"loss.infonce", [&](num::Tape& t, const num::BoundParameters& b) {
                 return losses::multi_positive_infonce(b["pred"], t.constant(target), idx, 0.1);
             }},
            {"loss.bi_infonce", [&](num::Tape& t, const num::BoundParameters& b) {
                 return losses::bidirectional_infonce(b["pred"], t.constant(target), idx, 0.1);
             }},
            {"loss.cosine", [&](num::Tape& t, const num::BoundParameters& b) {
                 return losses::cosine_loss(b["pred"], t.constant(target));
             }},
            {"loss.token_mse", [&](num::Tape& t, const num::BoundParameters& b) {
                 return losses::tokenwise_masked_mse(b["pred"], t.constant(target), losses::semantic_row_weights(6, 4));
             }},
        };
        for (const auto& [name, prog] : programs) tally.report(num::finite_difference_check(prog, ps, opt), name);
    }

    if (stage == "aligner" || stage == "all") {
        pipeline::EmbeddingTable table;
        table.image_tokens = 2;
        table.text_tokens = 4;
        table.dim = 3;
        for (int i = 0; i < 4; ++i) {
            table.image.push_back(random_matrix(2, 3, rng));
            table.text.push_back(random_matrix(4, 3, rng));
            table.semantic_length.push_back(2 + static_cast<std::size_t>(i % 3));
        }
        const auto targets = trainer::gather_targets(table, {0, 1, 2, 3, 1});
        trainer::PredictorConfig layout;
        layout.input_features = 5;
        layout.hidden = 6;
        layout.image_tokens = 2;
        layout.text_tokens = 4;
        layout.dim = 3;
        layout.dropout = 0.0;
        const auto predictor = trainer::EmbeddingPredictor::build(layout, seed);
        const Matrix inputs = random_matrix(5, 5, rng);
        tally.report(num::finite_difference_check(
                         [&](num::Tape& t, const num::BoundParameters& b) {
                             const auto pred = predictor.forward(b, t.constant(inputs));
                             return trainer::alignment_loss(t, pred, targets, layout, 0.1).total;
                         },
                         predictor.parameters, opt),
                     "aligner.predictor+loss");
    }

    if (stage == "tokenizer" || stage == "all") {
        const auto config = preset_tokenizer(preset);
        auto model = tokenizer::build(config, seed);
        // nonzero residual branches so every block is exercised
        Rng prng = rng.split("perturb");
        for (auto& [name, value] : model.parameters)
            if (name.find(".conv2.") != std::string::npos || name.ends_with(".b"))
                for (double& v : value.values()) v = prng.uniform(-0.2, 0.2);
        const std::size_t v = icosphere::vertex_count(config.input_level);
        const Matrix signal = random_matrix(v, 1, rng);
        auto cond = tokenizer::default_conditions(config.input_level);
        cond.structure = random_matrix(v, tokenizer::kStructureChannels, rng);
        Matrix mask(v, 1);
        for (std::size_t i = 0; i < v; i += 2) mask(i, 0) = 1.0;
        num::FiniteDifferenceOptions sampled = opt;
        sampled.max_entries_per_parameter = samples;
        tally.report(num::finite_difference_check(
                         [&](num::Tape& t, const num::BoundParameters& b) {
                             const auto token = tokenizer::encode(t, b, config, signal, cond);
                             return tokenizer::reconstruction_loss(tokenizer::decode(b, config, token),
                                                                   t.constant(signal), mask);
                         },
                         model.parameters, sampled),
                     "tokenizer." + preset);
    }
    if (tally.failed) throw NumericError(std::to_string(tally.failed) + " gradient check(s) above tolerance");
}

void check_invariants(int level, std::uint64_t seed) {
    CheckTally tally;
    for (int l = 0; l <= level; ++l) {
        const auto mesh = icosphere::mesh_at(l);
        std::size_t pentagons = 0;
        bool symmetric = true;
        const auto& ring = icosphere::neighbor_table(*mesh);
        for (std::size_t v = 0; v < mesh->num_vertices(); ++v) {
            pentagons += mesh->degree(v) == 5;
            for (std::size_t k = 1; k < ring[v].size(); ++k) {
                const auto& other = ring[ring[v][k]];
                symmetric = symmetric && std::find(other.begin() + 1, other.end(), v) != other.end();
            }
        }
        const std::size_t p = std::size_t{1} << (2 * l);
        const bool counts = mesh->num_vertices() == 10 * p + 2 && mesh->num_edges() == 30 * p &&
                            mesh->num_faces() == 20 * p && pentagons == 12;
        tally.line(counts, "mesh.counts.level" + std::to_string(l),
                   "V=" + std::to_string(mesh->num_vertices()) + " E=" + std::to_string(mesh->num_edges()) +
                       " F=" + std::to_string(mesh->num_faces()) + " pentagons=" + std::to_string(pentagons));
        tally.line(symmetric, "mesh.ring_symmetry.level" + std::to_string(l), "");
        if (l > 0) {
            const Matrix ones(mesh->num_vertices(), 1, 1.0);
            const Matrix down = icosphere::downsample_operator(l).apply(ones);
            const Matrix up = icosphere::upsample_operator(l - 1).apply(Matrix(icosphere::vertex_count(l - 1), 1, 1.0));
            bool constant = true;
            for (double x : down.values()) constant = constant && x == 1.0;
            for (double x : up.values()) constant = constant && x == 1.0;
            tally.line(constant, "resample.constants.level" + std::to_string(l), "");
        }
    }
    Rng rng = Rng(seed).split("check-invariants");
    double orth = 0;
    for (int t = 0; t < 1000; ++t) {
        const auto r = augment::draw_rotation(std::numbers::pi, rng).matrix;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += r[k][i] * r[k][j];
                orth = std::max(orth, std::abs(s - (i == j ? 1.0 : 0.0)));
            }
    }
    tally.line(orth < 1e-12, "rotation.orthogonal", "max_error=" + std::to_string(orth));
    double sum_err = 0;
    for (int t = 0; t < 10000; ++t) {
        const auto w = augment::sample_simplex_weights(rng);
        sum_err = std::max(sum_err, std::abs(w.alpha + w.beta + w.gamma - 1.0));
    }
    tally.line(sum_err <= 1e-15, "simplex.sum", "max_error=" + std::to_string(sum_err));
    tally.line(pipeline::balanced_image_count(0.5, 5, 64) == 48, "batch.balance", "lambda=0.5 K=5 B=64 -> 48");
    if (tally.failed) throw ContractError(std::to_string(tally.failed) + " invariant(s) violated");
}

// ---- report ------------------------------------------------------------------------

struct MetricTable {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
};

std::vector<std::string> split_commas(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

MetricTable read_metric_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    MetricTable t;
    std::string line;
    if (!std::getline(in, line) || line.empty()) throw DataError(path + ": missing header");
    t.columns = split_commas(line);
    std::size_t number = 1;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        const auto cells = split_commas(line);
        if (cells.size() != t.columns.size())
            throw DataError(path + ":" + std::to_string(number) + ": expected " + std::to_string(t.columns.size()) +
                            " fields, got " + std::to_string(cells.size()));
        std::vector<double> row;
        for (const auto& c : cells) {
            char* end = nullptr;
            const double v = std::strtod(c.c_str(), &end);
            if (c.empty() || end != c.c_str() + c.size())
                throw DataError(path + ":" + std::to_string(number) + ": '" + c + "' is not a number");
            row.push_back(v);
        }
        t.rows.push_back(std::move(row));
    }
    return t;
}

std::string csv_number(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    return {buf, std::to_chars(buf, buf + sizeof buf, v).ptr};
}

void report_metrics(const std::vector<std::string>& inputs, const std::string& output) {
    std::ostringstream csv;
    csv << "source,metric,rows,first,final,min,max,best_epoch\n";
    for (const auto& path : inputs) {
        const MetricTable t = read_metric_csv(path);
        const auto epoch_col = std::find(t.columns.begin(), t.columns.end(), "epoch") - t.columns.begin();
        const std::string source = fs::path(path).filename().string();
        for (std::size_t c = 0; c < t.columns.size(); ++c) {
            const std::string& name = t.columns[c];
            if (name == "epoch" || name == "step") continue;
            double lo = std::numeric_limits<double>::quiet_NaN(), hi = lo, best_epoch = lo;
            // higher is better for retrieval-style columns
            const bool maximise = name.find("retrieval") != std::string::npos;
            for (const auto& row : t.rows) {
                const double v = row[c];
                if (std::isnan(v)) continue;
                if (std::isnan(lo) || v < lo) {
                    lo = v;
                    if (!maximise && epoch_col < static_cast<long>(t.columns.size())) best_epoch = row[epoch_col];
                }
                if (std::isnan(hi) || v > hi) {
                    hi = v;
                    if (maximise && epoch_col < static_cast<long>(t.columns.size())) best_epoch = row[epoch_col];
                }
            }
            const double first = t.rows.empty() ? std::nan("") : t.rows.front()[c];
            const double last = t.rows.empty() ? std::nan("") : t.rows.back()[c];
            if (name == "lr") best_epoch = std::nan("");
            csv << source << "," << name << "," << t.rows.size() << "," << csv_number(first) << ","
                << csv_number(last) << "," << csv_number(lo) << "," << csv_number(hi) << ","
                << csv_number(best_epoch) << "\n";
        }
    }
    if (output.empty() || output == "-") {
        std::cout << csv.str();
    } else {
        if (fs::path(output).has_parent_path()) fs::create_directories(fs::path(output).parent_path());
        std::ofstream out(output);
        if (!out) throw IoError("cannot write " + output);
        out << csv.str();
        std::cerr << "wrote " << output << "\n";
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cortisphere: spherical fMRI tokenizer and embedding aligner"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "INI/TOML file; sections name subcommands, e.g. [tokenizer.train]");
    app.get_config_ptr()->envname(env_name("config"));
    app.config_formatter(std::make_shared<EnvFirstConfig>());

    Globals g;
    app.add_option("--seed", g.seed, "master seed")->envname(env_name("seed"))->capture_default_str();
    app.add_option("--threads", g.threads, "worker threads for batch evaluation")
        ->envname(env_name("threads"))
        ->check(CLI::Range(1u, 256u))
        ->capture_default_str();
    app.add_option("--record", g.record, "also write the resolved configuration to this file")
        ->envname(env_name("record"));

    std::function<void()> action;
    auto leaf = [&](CLI::App* parent, const std::string& name, const std::string& help) {
        CLI::App* sub = parent->add_subcommand(name, help);
        sub->configurable();
        sub->fallthrough();
        return sub;
    };
    auto group = [&](const std::string& name, const std::string& help) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->require_subcommand(1);
        sub->configurable();
        sub->fallthrough();
        return sub;
    };

    // mesh
    CLI::App* mesh = group("mesh", "icosphere meshes");
    int mesh_level = 6;
    std::string mesh_output;
    {
        CLI::App* info = leaf(mesh, "info", "vertex, edge and face counts");
        info->add_option("--level", mesh_level, "subdivision level")
            ->envname(env_name("level"))
            ->check(CLI::Range(0, icosphere::kMaxLevel))
            ->capture_default_str();
        info->callback([&] {
            action = [&] {
                RunRecord rec("mesh.info", g);
                rec.set("level", mesh_level);
                rec.echo();
                mesh_info(mesh_level);
            };
        });
        CLI::App* exp = leaf(mesh, "export", "write the mesh as OBJ");
        exp->add_option("--level", mesh_level, "subdivision level")
            ->envname(env_name("level"))
            ->check(CLI::Range(0, icosphere::kMaxLevel))
            ->capture_default_str();
        exp->add_option("--output,-o", mesh_output, "OBJ path")->envname(env_name("output"))->required();
        exp->callback([&] {
            action = [&] {
                RunRecord rec("mesh.export", g);
                rec.set("level", mesh_level);
                rec.set("output", mesh_output);
                rec.echo();
                mesh_export(mesh_level, mesh_output);
                rec.write(record_path_for_file(mesh_output));
            };
        });
    }

    // synth
    CLI::App* synth = group("synth", "synthetic datasets");
    pipeline::SyntheticSpec spec;
    std::string synth_output;
    {
        CLI::App* gen = leaf(synth, "generate", "write a synthetic dataset directory");
        gen->add_option("--output,-o", synth_output, "dataset directory")->envname(env_name("output"))->required();
        gen->add_option("--level", spec.level, "mesh level")->envname(env_name("level"))->capture_default_str();
        gen->add_option("--train-images", spec.train_images)->envname(env_name("train_images"))->capture_default_str();
        gen->add_option("--val-images", spec.val_images)->envname(env_name("val_images"))->capture_default_str();
        gen->add_option("--test-images", spec.test_images)->envname(env_name("test_images"))->capture_default_str();
        gen->add_option("--subjects", spec.subjects)->envname(env_name("subjects"))->capture_default_str();
        gen->add_option("--caps", spec.caps_per_hemisphere, "activation caps per hemisphere")
            ->envname(env_name("caps"))
            ->capture_default_str();
        gen->add_option("--noise", spec.scan_noise, "per-scan noise std")->envname(env_name("noise"))->capture_default_str();
        gen->add_option("--shift", spec.shift, "mean offset on val/test")->envname(env_name("shift"))->capture_default_str();
        gen->add_option("--embedding-dim", spec.embedding_dim)->envname(env_name("embedding_dim"))->capture_default_str();
        gen->add_option("--image-tokens", spec.image_tokens)->envname(env_name("image_tokens"))->capture_default_str();
        gen->add_option("--text-tokens", spec.text_tokens)->envname(env_name("text_tokens"))->capture_default_str();
        gen->callback([&] {
            action = [&] {
                spec.seed = g.seed;
                RunRecord rec("synth.generate", g);
                rec.set("output", synth_output);
                rec.set("level", spec.level);
                rec.set("train-images", spec.train_images);
                rec.set("val-images", spec.val_images);
                rec.set("test-images", spec.test_images);
                rec.set("subjects", spec.subjects);
                rec.set("caps", spec.caps_per_hemisphere);
                rec.set("noise", spec.scan_noise);
                rec.set("shift", spec.shift);
                rec.set("embedding-dim", spec.embedding_dim);
                rec.set("image-tokens", spec.image_tokens);
                rec.set("text-tokens", spec.text_tokens);
                rec.echo();
                const auto data = pipeline::generate_synthetic_dataset(spec);
                pipeline::save_dataset(synth_output, data);
                rec.write(record_path_for_dir(synth_output));
                std::printf("wrote %zu samples of %zu images -> %s\n", data.manifest.records.size(),
                            data.targets.image.size(), (fs::path(synth_output) / "manifest.txt").string().c_str());
            };
        });
    }

    // preprocess
    CLI::App* pre = group("preprocess", "z-scoring with train statistics");
    std::string pre_manifest, pre_output, pre_stats;
    {
        CLI::App* fit = leaf(pre, "fit", "fit per-voxel statistics on the train split");
        fit->add_option("--manifest,-m", pre_manifest)->envname(env_name("manifest"))->required();
        fit->add_option("--output,-o", pre_output, "statistics directory")->envname(env_name("output"))->required();
        fit->callback([&] {
            action = [&] {
                RunRecord rec("preprocess.fit", g);
                rec.set("manifest", pre_manifest);
                rec.set("output", pre_output);
                rec.echo();
                preprocess_fit(pre_manifest, pre_output);
                rec.write(record_path_for_dir(pre_output));
            };
        });
        CLI::App* apply = leaf(pre, "apply", "normalise every split with fitted statistics");
        apply->add_option("--manifest,-m", pre_manifest)->envname(env_name("manifest"))->required();
        apply->add_option("--stats", pre_stats, "directory written by preprocess fit")
            ->envname(env_name("stats"))
            ->required();
        apply->add_option("--output,-o", pre_output, "normalised dataset directory")
            ->envname(env_name("output"))
            ->required();
        apply->callback([&] {
            action = [&] {
                RunRecord rec("preprocess.apply", g);
                rec.set("manifest", pre_manifest);
                rec.set("stats", pre_stats);
                rec.set("output", pre_output);
                rec.echo();
                preprocess_apply(pre_manifest, pre_stats, pre_output);
                rec.write(record_path_for_dir(pre_output));
            };
        });
    }

    // tokenizer
    CLI::App* tok = group("tokenizer", "sphere tokenizer");
    std::string tok_manifest, tok_output, tok_hemisphere = "both", tok_resume, tok_preset = "desk", tok_model,
                                                   tok_split = "test";
    int tok_stop_after = 0;
    KeyOptions tok_train_keys, tok_model_keys;
    {
        CLI::App* train = leaf(tok, "train", "train one or both hemisphere tokenizers on a normalised dataset");
        train->add_option("--manifest,-m", tok_manifest)->envname(env_name("manifest"))->required();
        train->add_option("--output,-o", tok_output, "run directory")->envname(env_name("output"))->required();
        train->add_option("--hemisphere", tok_hemisphere, "left, right or both")
            ->envname(env_name("hemisphere"))
            ->capture_default_str();
        train->add_option("--preset", tok_preset, "desk or paper")->envname(env_name("preset"))->capture_default_str();
        train->add_option("--resume", tok_resume, "a *_last.ckpt to continue from")->envname(env_name("resume"));
        train->add_option("--stop-after-epoch", tok_stop_after, "stop early as if interrupted")
            ->envname(env_name("stop_after_epoch"));
        tok_train_keys.attach(train, trainer::TrainConfig::defaults(trainer::Stage::tokenizer).to_map(),
                              {"stage", "seed", "threads", "lambda", "k", "dropout", "hidden", "temperature",
                               "share_hemisphere_mixup"},
                              {{"learning_rate", "--lr"}});
        tok_model_keys.attach(train, tokenizer::TokenizerConfig{}.to_map(), {"input_level"});
        train->callback([&] {
            action = [&] {
                auto tc = trainer::TrainConfig::from_map(tok_train_keys.overlay({}),
                                                         preset_train(tok_preset, trainer::Stage::tokenizer));
                tc.seed = g.seed;
                tc.threads = g.threads;
                tc.validate();
                const auto data = pipeline::load_dataset(tok_manifest);
                auto model_map = tok_model_keys.overlay(preset_tokenizer(tok_preset).to_map());
                model_map["input_level"] = std::to_string(data.level);
                const auto mc = tokenizer::TokenizerConfig::from_map(model_map);
                mc.validate();
                const auto hemis = hemispheres_of(tok_hemisphere);
                if (!tok_resume.empty() && hemis.size() != 1)
                    throw ConfigError("--resume needs a single --hemisphere");

                RunRecord rec("tokenizer.train", g);
                rec.set("manifest", tok_manifest);
                rec.set("output", tok_output);
                rec.set("hemisphere", tok_hemisphere);
                rec.set("preset", tok_preset);
                if (!tok_resume.empty()) rec.set("resume", tok_resume);
                if (tok_stop_after) rec.set("stop-after-epoch", tok_stop_after);
                rec.set_all(tc.to_map(), {"stage", "seed", "threads", "lambda", "k", "dropout", "hidden",
                                          "temperature", "share_hemisphere_mixup"});
                rec.set_all(mc.to_map(), {"input_level"});
                rec.echo();
                fs::create_directories(tok_output);
                rec.write(record_path_for_dir(tok_output));

                trainer::TrainOptions opt;
                opt.output_dir = tok_output;
                opt.resume_from = tok_resume;
                opt.progress = progress;
                opt.stop_after_epoch = tok_stop_after;
                for (Hemisphere h : hemis) {
                    const auto t0 = std::chrono::steady_clock::now();
                    const auto r = trainer::train_tokenizer(tc, mc, data, h, opt);
                    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                    std::printf("tokenizer %c initial_mse=%.6g final_mse=%.6g ratio=%.4f best_epoch=%d seconds=%.1f\n",
                                icosphere::hemisphere_tag(h), r.initial_train_mse, r.final_train_mse,
                                r.final_train_mse / r.initial_train_mse, r.best_epoch, s);
                }
            };
        });

        for (const bool reconstruct : {false, true}) {
            CLI::App* sub = leaf(tok, reconstruct ? "reconstruct" : "encode",
                                 reconstruct ? "decode(encode(x)) for a split, with masked MSE"
                                             : "encode a split to tokens (SPH1 at the token level)");
            sub->add_option("--model", tok_model, "tokenizer checkpoint")->envname(env_name("model"))->required();
            sub->add_option("--manifest,-m", tok_manifest)->envname(env_name("manifest"))->required();
            sub->add_option("--split", tok_split, "train, val or test")->envname(env_name("split"))->capture_default_str();
            sub->add_option("--output,-o", tok_output, "signal file")->envname(env_name("output"))->required();
            sub->callback([&, reconstruct] {
                action = [&, reconstruct] {
                    RunRecord rec(reconstruct ? "tokenizer.reconstruct" : "tokenizer.encode", g);
                    rec.set("model", tok_model);
                    rec.set("manifest", tok_manifest);
                    rec.set("split", tok_split);
                    rec.set("output", tok_output);
                    rec.echo();
                    write_tokens_or_reconstructions(tok_model, tok_manifest, tok_split, tok_output, reconstruct);
                    rec.write(record_path_for_file(tok_output));
                };
            });
        }
    }

    // align
    CLI::App* align = group("align", "embedding aligner");
    std::string al_manifest, al_output, al_left, al_right, al_resume, al_preset = "desk", al_predictor,
                                                                       al_split = "test";
    int al_stop_after = 0;
    bool al_dry_run = false;
    std::size_t al_group = 0;
    double al_temperature = losses::kDefaultTemperature;
    KeyOptions al_keys;
    {
        CLI::App* train = leaf(align, "train", "train the predictor on frozen tokenizers");
        train->add_option("--manifest,-m", al_manifest)->envname(env_name("manifest"));
        train->add_option("--left", al_left, "left tokenizer checkpoint")->envname(env_name("left"));
        train->add_option("--right", al_right, "right tokenizer checkpoint")->envname(env_name("right"));
        train->add_option("--output,-o", al_output, "run directory")->envname(env_name("output"));
        train->add_option("--preset", al_preset, "desk or paper")->envname(env_name("preset"))->capture_default_str();
        train->add_option("--resume", al_resume, "aligner_last.ckpt to continue from")->envname(env_name("resume"));
        train->add_option("--stop-after-epoch", al_stop_after)->envname(env_name("stop_after_epoch"));
        train->add_flag("--dry-run", al_dry_run, "resolve the configuration and batch size, then stop");
        al_keys.attach(train, trainer::TrainConfig::defaults(trainer::Stage::aligner).to_map(),
                       {"stage", "seed", "threads", "rotation_degrees", "mixup_ratio", "mixup_beta", "scans_per_epoch"},
                       {{"learning_rate", "--lr"}, {"batch_size", "--base-batch"}});
        train->callback([&] {
            action = [&] {
                auto ac = trainer::TrainConfig::from_map(al_keys.overlay({}),
                                                         preset_train(al_preset, trainer::Stage::aligner));
                ac.seed = g.seed;
                ac.threads = g.threads;
                ac.validate();
                const std::size_t b = pipeline::balanced_image_count(ac.mixup.lambda, ac.mixup.k, ac.batch_size);
                RunRecord rec("align.train", g);
                rec.set("manifest", al_manifest);
                rec.set("left", al_left);
                rec.set("right", al_right);
                rec.set("output", al_output);
                rec.set("preset", al_preset);
                if (!al_resume.empty()) rec.set("resume", al_resume);
                if (al_stop_after) rec.set("stop-after-epoch", al_stop_after);
                rec.set_all(ac.to_map(), {"stage", "seed", "threads", "rotation_degrees", "mixup_ratio",
                                          "mixup_beta", "scans_per_epoch"});
                rec.echo();
                std::printf("align: B=%zu lambda=%g K=%d -> b=%zu images per batch\n", ac.batch_size, ac.mixup.lambda,
                            ac.mixup.k, b);
                if (al_dry_run) return;
                for (const auto& [name, value] : {std::pair{"--manifest", &al_manifest}, std::pair{"--left", &al_left},
                                                  std::pair{"--right", &al_right}, std::pair{"--output", &al_output}})
                    if (value->empty()) throw ConfigError(std::string(name) + " is required unless --dry-run is given");
                fs::create_directories(al_output);
                rec.write(record_path_for_dir(al_output));
                const auto data = pipeline::load_dataset(al_manifest);
                const auto left = tokenizer::load_model(al_left);
                const auto right = tokenizer::load_model(al_right);
                trainer::TrainOptions opt;
                opt.output_dir = al_output;
                opt.resume_from = al_resume;
                opt.progress = progress;
                opt.stop_after_epoch = al_stop_after;
                const auto r = trainer::train_aligner(ac, data, left, right, opt);
                std::printf("aligner b=%zu train_retrieval=%.4f val_retrieval=%.4f val_chance=%.4f\n",
                            r.images_per_batch, r.final_train_retrieval, r.final_val_retrieval, r.val_chance);
            };
        });

        CLI::App* eval = leaf(align, "eval", "scan-mean retrieval and losses on a split");
        eval->add_option("--manifest,-m", al_manifest)->envname(env_name("manifest"))->required();
        eval->add_option("--left", al_left)->envname(env_name("left"))->required();
        eval->add_option("--right", al_right)->envname(env_name("right"))->required();
        eval->add_option("--predictor", al_predictor, "aligner checkpoint")->envname(env_name("predictor"))->required();
        eval->add_option("--split", al_split)->envname(env_name("split"))->capture_default_str();
        eval->add_option("--group", al_group, "images per retrieval group (default: the training b)")
            ->envname(env_name("group"));
        eval->add_option("--temperature", al_temperature)->envname(env_name("temperature"))->capture_default_str();
        eval->add_option("--output,-o", al_output, "optional CSV with the scores")->envname(env_name("output"));
        eval->callback([&] {
            action = [&] {
                const auto predictor = trainer::load_predictor(al_predictor);
                std::size_t group_size = al_group;
                if (group_size == 0) {
                    const auto ck = load_checkpoint(al_predictor);
                    const auto it = ck.config.find("images_per_batch");
                    group_size = it == ck.config.end() ? 0 : std::stoul(it->second);
                    if (group_size == 0) throw ConfigError("checkpoint lacks images_per_batch; pass --group");
                }
                RunRecord rec("align.eval", g);
                rec.set("manifest", al_manifest);
                rec.set("left", al_left);
                rec.set("right", al_right);
                rec.set("predictor", al_predictor);
                rec.set("split", al_split);
                rec.set("group", group_size);
                rec.set("temperature", al_temperature);
                if (!al_output.empty()) rec.set("output", al_output);
                rec.echo();
                const auto data = pipeline::load_dataset(al_manifest);
                const auto r = trainer::evaluate_aligner(predictor, tokenizer::load_model(al_left),
                                                         tokenizer::load_model(al_right), data, split_of(al_split),
                                                         group_size, al_temperature, g.threads);
                std::ostringstream csv;
                csv << "split,images,group,retrieval,chance,bi_info,cosine,token_mse\n"
                    << al_split << "," << r.images << "," << group_size << "," << csv_number(r.retrieval) << ","
                    << csv_number(r.chance) << "," << csv_number(r.components.bi_info) << ","
                    << csv_number(r.components.cosine) << "," << csv_number(r.components.token_mse) << "\n";
                std::cout << csv.str();
                if (!al_output.empty()) {
                    std::ofstream out(al_output);
                    if (!out) throw IoError("cannot write " + al_output);
                    out << csv.str();
                    rec.write(record_path_for_file(al_output));
                }
            };
        });
    }

    // check
    CLI::App* check = group("check", "verification suites");
    std::string ck_stage = "all", ck_preset = "desk";
    double ck_tolerance = 1e-4, ck_step = 1e-5;
    std::size_t ck_samples = 4;
    int ck_level = 6;
    {
        CLI::App* grads = leaf(check, "gradients", "central finite differences against the tape");
        grads->add_option("--stage", ck_stage, "tokenizer, losses, aligner or all")
            ->envname(env_name("stage"))
            ->capture_default_str();
        grads->add_option("--preset", ck_preset, "tokenizer size: desk or paper")
            ->envname(env_name("preset"))
            ->capture_default_str();
        grads->add_option("--tolerance", ck_tolerance)->envname(env_name("tolerance"))->capture_default_str();
        grads->add_option("--step", ck_step)->envname(env_name("step"))->capture_default_str();
        grads->add_option("--samples-per-tensor", ck_samples, "tokenizer entries per tensor (0: all)")
            ->envname(env_name("samples_per_tensor"))
            ->capture_default_str();
        grads->callback([&] {
            action = [&] {
                RunRecord rec("check.gradients", g);
                rec.set("stage", ck_stage);
                rec.set("preset", ck_preset);
                rec.set("tolerance", ck_tolerance);
                rec.set("step", ck_step);
                rec.set("samples-per-tensor", ck_samples);
                rec.echo();
                check_gradients(ck_stage, ck_preset, ck_tolerance, ck_step, ck_samples, g.seed);
            };
        });
        CLI::App* inv = leaf(check, "invariants", "mesh, resampling, rotation and simplex invariants");
        inv->add_option("--level", ck_level, "highest mesh level to check")
            ->envname(env_name("level"))
            ->check(CLI::Range(0, icosphere::kMaxLevel))
            ->capture_default_str();
        inv->callback([&] {
            action = [&] {
                RunRecord rec("check.invariants", g);
                rec.set("level", ck_level);
                rec.echo();
                check_invariants(ck_level, g.seed);
            };
        });
    }

    // report
    CLI::App* report = group("report", "summaries of metric logs");
    std::vector<std::string> rep_inputs;
    std::string rep_output;
    {
        CLI::App* metrics = leaf(report, "metrics", "per-column summary CSV of one or more metric logs");
        metrics->add_option("--input,-i", rep_inputs, "metric CSV files")->envname(env_name("input"))->required();
        metrics->add_option("--output,-o", rep_output, "summary CSV (default stdout)")->envname(env_name("output"));
        metrics->callback([&] {
            action = [&] {
                RunRecord rec("report.metrics", g);
                std::string joined;
                for (const auto& p : rep_inputs) joined += (joined.empty() ? "" : " ") + p;
                rec.set("input", joined);
                if (!rep_output.empty()) rec.set("output", rep_output);
                rec.echo();
                report_metrics(rep_inputs, rep_output);
                if (!rep_output.empty() && rep_output != "-") rec.write(record_path_for_file(rep_output));
            };
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error kind=usage message=\"" << escaped(e.what()) << "\"\n";
        std::cerr << "run with --help for usage\n";
        return 2;
    }

    try {
        if (!action) throw ContractError("no subcommand selected");
        action();
    } catch (const cortisphere::Error& e) {
        std::cerr << "error kind=" << e.kind() << " message=\"" << escaped(e.what()) << "\"\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error kind=internal message=\"" << escaped(e.what()) << "\"\n";
        return 1;
    }
    return 0;
}
