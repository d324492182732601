#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"

#include "cortisphere/error.hpp"
#include "cortisphere/rng.hpp"
#include "cortisphere/tokenizer.hpp"

using namespace cortisphere;
using namespace cortisphere::tokenizer;

namespace {

TokenizerConfig tiny_config() {
    TokenizerConfig c;
    c.input_level = 2;
    c.num_downsamples = 2;
    c.encoder_channels = {2, 3};
    c.decoder_channels = {2, 2};
    c.hidden_channels = 2;
    c.encoder_blocks_per_layer = 1;
    c.decoder_blocks_per_layer = 1;
    return c;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (double& v : m.values()) v = rng.uniform(-1.0, 1.0);
    return m;
}

ConditionSet random_conditions(int level, Rng& rng) {
    ConditionSet cs = default_conditions(level);
    cs.structure = random_matrix(cs.structure.rows(), kStructureChannels, rng);
    return cs;
}

// Nonzero second convolutions so every block contributes.
TokenizerModel perturbed(const TokenizerConfig& config, std::uint64_t seed) {
    TokenizerModel m = build(config, seed);
    Rng rng(seed + 1000);
    for (auto& [name, value] : m.parameters)
        if (name.find(".conv2.") != std::string::npos || name.ends_with(".b"))
            for (double& v : value.values()) v = rng.uniform(-0.3, 0.3);
    return m;
}

} // namespace

TEST_CASE("default configuration pools to levels 5, 4, 3 with a 642 x 256 token") {
    const TokenizerConfig c;
    CHECK(c.stage_output_levels() == std::vector<int>{5, 4, 3});
    CHECK(c.token_level() == 3);
    CHECK(icosphere::vertex_count(c.token_level()) == 642);
    CHECK(c.token_channels() == 256);
}

TEST_CASE("desk configuration yields a 42 x 32 token at level 1") {
    const auto c = TokenizerConfig::desk();
    const auto model = build(c, 1);
    Rng rng(1);
    const auto cond = random_conditions(4, rng);
    const SphericalSignal s{4, Hemisphere::left, random_matrix(icosphere::vertex_count(4), 1, rng)};
    const FmriToken t = encode(model, s, cond);
    CHECK(t.level == 1);
    CHECK(t.features.rows() == 42);
    CHECK(t.features.cols() == 32);
    const auto back = decode(model, t);
    CHECK(back.level == 4);
    CHECK(back.values.rows() == icosphere::vertex_count(4));
    CHECK(back.values.cols() == 1);
}

TEST_CASE("building is deterministic and seed-dependent") {
    const auto c = TokenizerConfig::desk();
    CHECK(build(c, 5).parameters == build(c, 5).parameters);
    CHECK_FALSE(build(c, 5).parameters == build(c, 6).parameters);
    CHECK(build(c, 5).parameter_count() > 0);
}

TEST_CASE("invalid configurations are rejected") {
    auto c = TokenizerConfig::desk();
    c.encoder_channels = {8, 16};
    CHECK_THROWS_AS(build(c, 0), ConfigError);
    c = TokenizerConfig::desk();
    c.decoder_channels = {8, 0, 32};
    CHECK_THROWS_AS(build(c, 0), ConfigError);
    c = TokenizerConfig::desk();
    c.input_level = 2;
    CHECK_THROWS_AS(build(c, 0), ConfigError);
}

TEST_CASE("config map round-trips") {
    const auto c = tiny_config();
    CHECK(TokenizerConfig::from_map(c.to_map()) == c);
}

TEST_CASE("all-zero parameters give a zero token and zero reconstruction") {
    auto model = build(tiny_config(), 2);
    for (auto& [name, value] : model.parameters) value.fill(0.0);
    Rng rng(2);
    const SphericalSignal s{2, Hemisphere::left, random_matrix(icosphere::vertex_count(2), 1, rng)};
    const auto t = encode(model, s, random_conditions(2, rng));
    for (double v : t.features.values()) CHECK(v == 0.0);
    const auto recon = decode(model, t);
    for (double v : recon.values.values()) CHECK(v == 0.0);
}

TEST_CASE("zero signal with zero final scales leaves only the condition pathway") {
    // Second convolutions start at zero, so each block returns its input and
    // the token is the pooled input convolution, blind to the conditions.
    const auto model = build(tiny_config(), 3);
    Rng rng(3);
    const SphericalSignal zero{2, Hemisphere::left, Matrix(icosphere::vertex_count(2), 1)};
    const auto a = encode(model, zero, random_conditions(2, rng));
    const auto b = encode(model, zero, random_conditions(2, rng));
    CHECK(a.features == b.features);
    for (double v : a.features.values()) CHECK(v == 0.0);
}

TEST_CASE("delta kernel block doubles a non-negative input") {
    const auto& ring = icosphere::mesh_at(1)->neighbors;
    Rng rng(4);
    Matrix x(42, 3);
    for (double& v : x.values()) v = rng.uniform(0.0, 2.0);
    Matrix delta(7 * 3, 3);
    for (std::size_t c = 0; c < 3; ++c) delta(c, c) = 1.0;
    num::Tape tape;
    const auto out = resnet_block(tape.constant(x), tape.constant(delta), tape.constant(Matrix(1, 3)),
                                  tape.constant(delta), tape.constant(Matrix(1, 3)), ring, std::nullopt);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(out.value()[i] == x[i] + x[i]);
}

TEST_CASE("encode is batch-equivariant") {
    const auto model = perturbed(tiny_config(), 5);
    Rng rng(5);
    std::vector<SphericalSignal> signals;
    std::vector<ConditionSet> conds;
    for (int i = 0; i < 3; ++i) {
        signals.push_back({2, Hemisphere::right, random_matrix(icosphere::vertex_count(2), 1, rng)});
        conds.push_back(random_conditions(2, rng));
    }
    const auto batch = encode_batch(model, signals, conds);
    REQUIRE(batch.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(batch[i].features == encode(model, signals[i], conds[i]).features);
}

TEST_CASE("zeroed condition projections isolate the output from the condition set") {
    auto model = perturbed(tiny_config(), 6);
    for (auto& [name, value] : model.parameters)
        if (name.ends_with(".struct.w") || name.ends_with(".pos2.w") || name.ends_with(".pos2.b")) value.fill(0.0);
    Rng rng(6);
    const SphericalSignal s{2, Hemisphere::left, random_matrix(icosphere::vertex_count(2), 1, rng)};
    ConditionSet zero = default_conditions(2);
    zero.position.fill(0.0);
    const auto a = encode(model, s, zero);
    const auto b = encode(model, s, random_conditions(2, rng));
    CHECK(a.features == b.features);
    // and with projections live the conditions matter
    const auto live = perturbed(tiny_config(), 6);
    CHECK_FALSE(encode(live, s, zero).features == encode(live, s, random_conditions(2, rng)).features);
}

TEST_CASE("shape and level errors") {
    const auto model = build(tiny_config(), 7);
    Rng rng(7);
    const SphericalSignal wrong_level{3, Hemisphere::left, Matrix(icosphere::vertex_count(3), 1)};
    CHECK_THROWS_AS(encode(model, wrong_level, default_conditions(3)), ShapeError);
    const SphericalSignal ok{2, Hemisphere::left, Matrix(icosphere::vertex_count(2), 1)};
    CHECK_THROWS_AS(encode(model, ok, default_conditions(1)), ShapeError);
    CHECK_THROWS_AS(decode(model, FmriToken{Hemisphere::left, 1, Matrix(42, 3)}), ShapeError);
}

TEST_CASE("reconstruction loss closed forms and masked oracle") {
    const std::size_t n = icosphere::vertex_count(2);
    Rng rng(8);
    const SphericalSignal target{2, Hemisphere::left, random_matrix(n, 1, rng)};
    VertexMask all{2, std::vector<bool>(n, true)};
    CHECK(reconstruction_loss(target, target, all) == 0.0);

    SphericalSignal shifted = target;
    for (double& v : shifted.values.values()) v += 2.0;
    CHECK(reconstruction_loss(shifted, target, all) == doctest::Approx(6.0).epsilon(1e-14));

    const SphericalSignal recon{2, Hemisphere::left, random_matrix(n, 1, rng)};
    VertexMask half{2, std::vector<bool>(n, false)};
    for (std::size_t i = 0; i < n; i += 2) half.values[i] = true;
    double sq = 0, ab = 0;
    for (std::size_t i = 0; i < n; i += 2) {
        const double d = recon.values(i, 0) - target.values(i, 0);
        sq += d * d;
        ab += std::abs(d);
    }
    const double count = static_cast<double>(half.count());
    CHECK(reconstruction_loss(recon, target, half) == doctest::Approx(sq / count + ab / count).epsilon(1e-13));

    const VertexMask none{2, std::vector<bool>(n, false)};
    CHECK_THROWS_AS(reconstruction_loss(recon, target, none), DegenerateMaskError);
}

TEST_CASE("ROI coarsening: constant masks and a receptive-field oracle") {
    const std::size_t n2 = icosphere::vertex_count(2);
    const auto all = coarsen_roi_mask({2, std::vector<bool>(n2, true)}, 0);
    CHECK(all.level == 0);
    CHECK(all.count() == 12);
    CHECK(coarsen_roi_mask({2, std::vector<bool>(n2, false)}, 1).count() == 0);

    const auto ring1 = icosphere::mesh_at(1)->neighbors;
    const auto ring2 = icosphere::mesh_at(2)->neighbors;
    // receptive field of each level-0 vertex, expanded through the levels
    std::vector<std::set<std::uint32_t>> field(12);
    for (std::uint32_t c = 0; c < 12; ++c) {
        std::set<std::uint32_t> mid(ring1[c].begin(), ring1[c].end());
        for (auto u : mid) field[c].insert(ring2[u].begin(), ring2[u].end());
    }
    for (std::uint32_t v : {0u, 13u, 77u, 161u}) {
        VertexMask m{2, std::vector<bool>(n2, false)};
        m.values[v] = true;
        const auto coarse = coarsen_roi_mask(m, 0);
        for (std::uint32_t c = 0; c < 12; ++c) CHECK(coarse.values[c] == (field[c].count(v) == 1));
    }
    CHECK_THROWS_AS(coarsen_roi_mask({2, std::vector<bool>(n2, true)}, 2), LevelMismatchError);
}

TEST_CASE("vision token selection") {
    Rng rng(9);
    const FmriToken left{Hemisphere::left, 1, random_matrix(42, 4, rng)};
    const FmriToken right{Hemisphere::right, 1, random_matrix(42, 4, rng)};
    const VertexMask on{1, std::vector<bool>(42, true)};
    const VertexMask off{1, std::vector<bool>(42, false)};

    const auto both = select_vision_tokens(left, right, on, on);
    CHECK(both.features.rows() == 84);
    for (std::size_t r = 0; r < 42; ++r)
        for (std::size_t c = 0; c < 4; ++c) {
            CHECK(both.features(r, c) == left.features(r, c));
            CHECK(both.features(42 + r, c) == right.features(r, c));
        }
    const auto only_left = select_vision_tokens(left, right, on, off);
    CHECK(only_left.features == left.features);

    VertexMask ml{1, std::vector<bool>(42, false)}, mr{1, std::vector<bool>(42, false)};
    std::vector<std::size_t> li, ri;
    for (std::size_t i = 0; i < 42; ++i) {
        if (rng.uniform() < 0.4) ml.values[i] = true, li.push_back(i);
        if (rng.uniform() < 0.4) mr.values[i] = true, ri.push_back(i);
    }
    const auto sel = select_vision_tokens(left, right, ml, mr);
    REQUIRE(sel.features.rows() == li.size() + ri.size());
    std::size_t r = 0;
    for (auto i : li) {
        for (std::size_t c = 0; c < 4; ++c) CHECK(sel.features(r, c) == left.features(i, c));
        ++r;
    }
    for (auto i : ri) {
        for (std::size_t c = 0; c < 4; ++c) CHECK(sel.features(r, c) == right.features(i, c));
        ++r;
    }
    CHECK_THROWS_AS(select_vision_tokens(left, right, VertexMask{2, std::vector<bool>(162, true)}, on), ShapeError);
}

TEST_CASE("full autoencoder loss passes a finite-difference check") {
    const auto config = tiny_config();
    const auto model = perturbed(config, 10);
    Rng rng(10);
    const std::size_t n = icosphere::vertex_count(2);
    const Matrix signal = random_matrix(n, 1, rng);
    const ConditionSet cond = random_conditions(2, rng);
    VertexMask mask{2, std::vector<bool>(n, false)};
    for (std::size_t i = 0; i < n; i += 3) mask.values[i] = true;
    const Matrix w = mask.as_weights();
    const num::Program prog = [&](num::Tape& tape, const num::BoundParameters& p) {
        const auto token = encode(tape, p, config, signal, cond);
        // MSE only: L1 kinks are measure-zero but the check excludes them anyway
        return num::mse(decode(p, config, token), tape.constant(signal), w);
    };
    num::FiniteDifferenceOptions opt;
    opt.tolerance = 1e-4;
    const auto report = num::finite_difference_check(prog, model.parameters, opt);
    CHECK(report.passed);
    CHECK(report.checked > model.parameter_count() / 2);
    MESSAGE("max rel error " << report.max_rel_error << " over " << report.checked << " entries, "
                             << report.kink_excluded << " at kinks");

    const num::Program with_l1 = [&](num::Tape& tape, const num::BoundParameters& p) {
        const auto token = encode(tape, p, config, signal, cond);
        return reconstruction_loss(decode(p, config, token), tape.constant(signal), w);
    };
    CHECK(num::finite_difference_check(with_l1, model.parameters, opt).passed);
}

TEST_CASE("model files round-trip bit-identically") {
    const auto model = perturbed(tiny_config(), 11);
    const auto path = (std::filesystem::temp_directory_path() / "cortisphere_tok_roundtrip.ckpt").string();
    save_model(path, model, Hemisphere::right);
    Hemisphere h = Hemisphere::left;
    const auto loaded = load_model(path, &h);
    CHECK(h == Hemisphere::right);
    CHECK(loaded.config == model.config);
    CHECK(loaded.parameters == model.parameters);
    std::filesystem::remove(path);
}
