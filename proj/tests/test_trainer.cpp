#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "doctest.h"

#include "cortisphere/error.hpp"
#include "cortisphere/trainer.hpp"

using namespace cortisphere;
using namespace cortisphere::trainer;
namespace fs = std::filesystem;

namespace {

pipeline::SyntheticSpec tiny_spec() {
    pipeline::SyntheticSpec spec;
    spec.level = 2;
    spec.train_images = 6;
    spec.val_images = 2;
    spec.test_images = 2;
    spec.embedding_dim = 3;
    spec.image_tokens = 2;
    spec.text_tokens = 3;
    spec.seed = 11;
    return spec;
}

tokenizer::TokenizerConfig tiny_tokenizer() {
    tokenizer::TokenizerConfig c;
    c.input_level = 2;
    c.num_downsamples = 1;
    c.encoder_channels = {3};
    c.decoder_channels = {2};
    c.hidden_channels = 2;
    c.encoder_blocks_per_layer = 1;
    c.decoder_blocks_per_layer = 1;
    return c;
}

const pipeline::Dataset& tiny_data() {
    static const pipeline::Dataset d = pipeline::normalize_dataset(pipeline::generate_synthetic_dataset(tiny_spec())).data;
    return d;
}

TrainConfig tiny_tokenizer_train(int epochs) {
    TrainConfig c = TrainConfig::desk(Stage::tokenizer);
    c.epochs = epochs;
    c.batch_size = 3;
    c.seed = 4;
    return c;
}

TrainConfig tiny_aligner_train(int epochs) {
    TrainConfig c = TrainConfig::desk(Stage::aligner);
    c.epochs = epochs;
    c.batch_size = 2;
    c.hidden = 8;
    c.mixup = {0.5, 3};
    c.seed = 4;
    return c;
}

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("cortisphere_test_" + name);
    fs::remove_all(dir);
    return dir;
}

} // namespace

TEST_CASE("cosine learning-rate schedule") {
    CHECK(cosine_lr(0, 100, 1e-3) == doctest::Approx(1e-3).epsilon(1e-15));
    CHECK(cosine_lr(50, 100, 1e-3) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(std::abs(cosine_lr(100, 100, 1e-3)) < 1e-18);
    CHECK(cosine_lr(25, 100, 2.0) == doctest::Approx(1.0 + std::cos(std::numbers::pi / 4.0)).epsilon(1e-14));
    CHECK_THROWS_AS(cosine_lr(101, 100, 1e-3), BoundsError);
}

TEST_CASE("gradient clipping") {
    num::Gradients g;
    g.add("a", Matrix(1, 4, 1.0)); // norm 2
    CHECK(clip_gradients(g, 0.1) == doctest::Approx(2.0));
    for (double v : g.at("a").values()) CHECK(v == doctest::Approx(0.05).epsilon(1e-14));

    num::Gradients small;
    small.add("a", Matrix(1, 1, 0.05));
    clip_gradients(small, 0.1);
    CHECK(small.at("a")(0, 0) == 0.05);

    num::Gradients bad;
    bad.add("ok", Matrix(1, 1, 1.0));
    bad.add("broken", Matrix(1, 1, std::numeric_limits<double>::quiet_NaN()));
    try {
        clip_gradients(bad, 0.1);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("broken") != std::string::npos);
    }
}

TEST_CASE("optimizer step") {
    num::ParameterSet p;
    p.add("w", Matrix::from_rows({{1.0, -2.0}}));
    const num::ParameterSet start = p;

    AdamState s = AdamState::zeros_like(p);
    optimizer_step(p, p.zeros_like(), 0.1, 0.0, s);
    CHECK(p == start);

    s = AdamState::zeros_like(p);
    optimizer_step(p, p.zeros_like(), 0.1, 0.05, s);
    CHECK(p.at("w")(0, 0) == doctest::Approx(1.0 * (1 - 0.1 * 0.05)).epsilon(1e-15));
    CHECK(p.at("w")(0, 1) == doctest::Approx(-2.0 * (1 - 0.1 * 0.05)).epsilon(1e-15));

    // minimise p^2 from p = 3
    num::ParameterSet q;
    q.add("x", Matrix(1, 1, 3.0));
    AdamState qs = AdamState::zeros_like(q);
    double previous = 9.0;
    for (int t = 0; t < 200; ++t) {
        num::Gradients g;
        g.add("x", Matrix(1, 1, 2.0 * q.at("x")(0, 0)));
        optimizer_step(q, g, 0.01, 0.0, qs);
        const double loss = q.at("x")(0, 0) * q.at("x")(0, 0);
        CHECK(loss < previous);
        previous = loss;
    }
    CHECK(qs.step == 200);
}

TEST_CASE("metric log CSV") {
    MetricLog log({"epoch", "loss"});
    log.append({1, 0.5});
    log.append({2, 0.25});
    CHECK(log.value(1, "loss") == 0.25);
    CHECK_THROWS_AS(log.value(0, "nope"), BoundsError);
    CHECK_THROWS_AS(log.append({1}), ShapeError);
    const std::string csv = log.to_csv();
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,loss");
    std::getline(in, line);
    CHECK(line == format_csv_row({1, 0.5}));

    const auto dir = fresh_dir("metrics");
    fs::create_directories(dir);
    MetricLog filed({"a"});
    filed.attach((dir / "m.csv").string());
    filed.append({3});
    std::ifstream f(dir / "m.csv");
    std::stringstream content;
    content << f.rdbuf();
    CHECK(content.str() == filed.to_csv());
    fs::remove_all(dir);
}

TEST_CASE("config maps round-trip and reject unknown keys") {
    const TrainConfig c = TrainConfig::desk(Stage::aligner);
    const TrainConfig back = TrainConfig::from_map(c.to_map(), TrainConfig::defaults(Stage::aligner));
    CHECK(back.to_map() == c.to_map());
    CHECK_THROWS_AS(TrainConfig::from_map({{"bogus", "1"}}, c), ConfigError);
    auto bad = c;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("zero epochs returns the initial model and an empty log") {
    const auto r = train_tokenizer(tiny_tokenizer_train(0), tiny_tokenizer(), tiny_data(), Hemisphere::left);
    CHECK(r.log.empty());
    // conv2 weights start at zero and any update would move them
    for (const auto& [name, value] : r.model.parameters)
        if (name.find("conv2.w") != std::string::npos)
            for (double v : value.values()) CHECK(v == 0.0);
    CHECK(r.initial_train_mse == r.final_train_mse);
}

TEST_CASE("tokenizer training is deterministic, learns, and resumes exactly") {
    const auto& data = tiny_data();
    const auto a = train_tokenizer(tiny_tokenizer_train(3), tiny_tokenizer(), data, Hemisphere::right);
    const auto b = train_tokenizer(tiny_tokenizer_train(3), tiny_tokenizer(), data, Hemisphere::right);
    CHECK(a.model.parameters == b.model.parameters);
    CHECK(a.log.rows() == b.log.rows());
    CHECK(a.log.rows().size() == 3);
    CHECK(a.final_train_mse < a.initial_train_mse);

    const auto dir = fresh_dir("resume_tok");
    TrainOptions first;
    first.output_dir = dir.string();
    first.stop_after_epoch = 1;
    train_tokenizer(tiny_tokenizer_train(3), tiny_tokenizer(), data, Hemisphere::right, first);
    CHECK(fs::exists(dir / "tokenizer_R_last.ckpt"));
    CHECK(fs::exists(dir / "tokenizer_R_metrics.csv"));
    TrainOptions second;
    second.output_dir = dir.string();
    second.resume_from = (dir / "tokenizer_R_last.ckpt").string();
    const auto resumed = train_tokenizer(tiny_tokenizer_train(3), tiny_tokenizer(), data, Hemisphere::right, second);
    CHECK(resumed.model.parameters == a.model.parameters);
    CHECK(resumed.log.rows() == a.log.rows());
    const auto csv = [&] {
        std::ifstream f(dir / "tokenizer_R_metrics.csv");
        std::stringstream content;
        content << f.rdbuf();
        return content.str();
    };
    CHECK(csv() == a.log.to_csv());
    // a fresh run into the same directory starts a new log
    TrainOptions again;
    again.output_dir = dir.string();
    train_tokenizer(tiny_tokenizer_train(3), tiny_tokenizer(), data, Hemisphere::right, again);
    CHECK(csv() == a.log.to_csv());
    fs::remove_all(dir);
}

TEST_CASE("alignment loss gradients match finite differences") {
    Rng rng(3);
    pipeline::EmbeddingTable table;
    table.image_tokens = 2;
    table.text_tokens = 3;
    table.dim = 2;
    for (int i = 0; i < 4; ++i) {
        Matrix im(2, 2), tx(3, 2);
        for (double& v : im.values()) v = rng.normal();
        for (double& v : tx.values()) v = rng.normal();
        table.image.push_back(im);
        table.text.push_back(tx);
        table.semantic_length.push_back(2 + static_cast<std::size_t>(i % 2));
    }
    const BatchTargets targets = gather_targets(table, {0, 1, 2, 3, 1});
    PredictorConfig layout;
    layout.input_features = 1;
    layout.image_tokens = 2;
    layout.text_tokens = 3;
    layout.dim = 2;
    num::ParameterSet ps;
    Matrix pred(5, layout.output_width());
    for (double& v : pred.values()) v = 0.5 * rng.normal();
    ps.add("pred", pred);
    const num::Program prog = [&](num::Tape& tape, const num::BoundParameters& p) {
        return alignment_loss(tape, p["pred"], targets, layout, 0.1).total;
    };
    const auto report = num::finite_difference_check(prog, ps, {1e-5, 1e-6});
    CHECK(report.passed);
    CHECK(report.checked > 0);
}

TEST_CASE("retrieval accuracy") {
    const Matrix q = Matrix::from_rows({{1, 0}, {0, 1}, {1, 1}});
    const Matrix k = Matrix::from_rows({{2, 0}, {0, 3}, {1, 1.1}});
    CHECK(retrieval_accuracy(q, k, {0, 1, 2}) == doctest::Approx(1.0));
    const Matrix swapped = Matrix::from_rows({{0, 3}, {2, 0}, {1, 1.1}});
    CHECK(retrieval_accuracy(q, swapped, {0, 1, 2}) == doctest::Approx(1.0 / 3.0));
    // Rows sharing an image count as a hit.
    CHECK(retrieval_accuracy(q, swapped, {0, 0, 2}) == doctest::Approx(1.0));
    CHECK_THROWS_AS(retrieval_accuracy(q, k, {0, 1}), ShapeError);
}

TEST_CASE("predictor save and load") {
    PredictorConfig pc;
    pc.input_features = 5;
    pc.hidden = 4;
    pc.image_tokens = 2;
    pc.text_tokens = 3;
    pc.dim = 2;
    const auto p = EmbeddingPredictor::build(pc, 9);
    const auto dir = fresh_dir("predictor");
    fs::create_directories(dir);
    const auto path = (dir / "p.ckpt").string();
    save_predictor(path, p, {{"images_per_batch", "8"}});
    const auto back = load_predictor(path);
    CHECK(back.parameters == p.parameters);
    CHECK(back.config.to_map() == pc.to_map());
    Rng rng(1);
    Matrix x(3, 5);
    for (double& v : x.values()) v = rng.normal();
    CHECK(back.predict(x) == p.predict(x));
    fs::remove_all(dir);
}

TEST_CASE("aligner training is deterministic and resumes exactly") {
    const auto& data = tiny_data();
    const auto left = tokenizer::build(tiny_tokenizer(), 1);
    const auto right = tokenizer::build(tiny_tokenizer(), 2);
    const auto a = train_aligner(tiny_aligner_train(3), data, left, right);
    const auto b = train_aligner(tiny_aligner_train(3), data, left, right);
    CHECK(a.images_per_batch == 2);
    CHECK(a.predictor.parameters == b.predictor.parameters);
    CHECK(a.log.rows() == b.log.rows());
    CHECK(a.val_chance == doctest::Approx(0.5));

    const auto dir = fresh_dir("resume_align");
    TrainOptions first;
    first.output_dir = dir.string();
    first.stop_after_epoch = 2;
    train_aligner(tiny_aligner_train(3), data, left, right, first);
    TrainOptions second;
    second.resume_from = (dir / "aligner_last.ckpt").string();
    const auto resumed = train_aligner(tiny_aligner_train(3), data, left, right, second);
    CHECK(resumed.predictor.parameters == a.predictor.parameters);

    const auto eval = evaluate_aligner(a.predictor, left, right, data, pipeline::Split::test, 2, 0.1);
    CHECK(eval.images == 2);
    CHECK(eval.chance == doctest::Approx(0.5));
    CHECK(std::isfinite(eval.components.bi_info));
    fs::remove_all(dir);
}
