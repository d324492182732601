#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"

#include "cortisphere/error.hpp"
#include "cortisphere/pipeline.hpp"

using namespace cortisphere;
using namespace cortisphere::pipeline;

namespace {

SignalSet constant_rows(std::initializer_list<double> values, int level = 0) {
    SignalSet s{level, Hemisphere::left, 1, {}};
    for (double v : values) s.samples.emplace_back(icosphere::vertex_count(level), 1, v);
    return s;
}

SyntheticSpec tiny_spec(std::uint64_t seed = 5) {
    SyntheticSpec spec;
    spec.level = 2;
    spec.train_images = 6;
    spec.val_images = 2;
    spec.test_images = 2;
    spec.embedding_dim = 4;
    spec.image_tokens = 2;
    spec.text_tokens = 4;
    spec.seed = seed;
    return spec;
}

double mean_of(const Matrix& m) {
    double s = 0;
    for (double v : m.values()) s += v;
    return s / static_cast<double>(m.size());
}

double correlation(const Matrix& a, const Matrix& b) {
    const std::size_t n = a.size();
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) ma += a[i], mb += b[i];
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

} // namespace

TEST_CASE("z-score fit: population statistics and the floor") {
    const auto stats = zscore_fit(constant_rows({1.0, 2.0, 3.0}));
    for (std::size_t v = 0; v < 12; ++v) {
        CHECK(stats.mean(v, 0) == doctest::Approx(2.0).epsilon(1e-15));
        CHECK(stats.std(v, 0) == doctest::Approx(std::sqrt(2.0 / 3.0)).epsilon(1e-14));
    }
    const auto flat = zscore_fit(constant_rows({4.0, 4.0, 4.0}));
    CHECK(flat.std(0, 0) == kStdFloor);
    CHECK_THROWS_AS(zscore_fit(constant_rows({1.0})), InsufficientDataError);
}

TEST_CASE("z-score apply") {
    ZScoreStats stats;
    stats.level = 0;
    stats.mean = Matrix(12, 1, 2.0);
    stats.std = Matrix(12, 1, 2.0);
    const auto out = zscore_apply(constant_rows({6.0}), stats);
    CHECK(out.samples[0](3, 0) == 2.0);

    Rng rng(1);
    SignalSet train{1, Hemisphere::left, 2, {}};
    for (int i = 0; i < 20; ++i) {
        Matrix m(42, 2);
        for (double& v : m.values()) v = 3.0 + 5.0 * rng.normal();
        train.samples.push_back(m);
    }
    const auto fit = zscore_fit(train);
    const auto z = zscore_apply(train, fit);
    for (std::size_t v = 0; v < 42; ++v)
        for (std::size_t c = 0; c < 2; ++c) {
            double m = 0, sq = 0;
            for (const auto& s : z.samples) m += s(v, c), sq += s(v, c) * s(v, c);
            m /= 20.0;
            CHECK(std::abs(m) < 1e-9);
            CHECK(std::abs(std::sqrt(sq / 20.0 - m * m) - 1.0) < 1e-6);
        }
    CHECK_THROWS_AS(zscore_apply(constant_rows({1.0}, 2), fit), ShapeError);
}

TEST_CASE("validation data uses train statistics, so a shift survives normalisation") {
    auto spec = tiny_spec();
    spec.shift = 2.0;
    const auto norm = normalize_dataset(generate_synthetic_dataset(spec));
    double train_mean = 0, val_mean = 0;
    const auto train = norm.data.samples(Split::train);
    const auto val = norm.data.samples(Split::val);
    for (auto s : train) train_mean += mean_of(norm.data.left.samples[s]);
    for (auto s : val) val_mean += mean_of(norm.data.left.samples[s]);
    train_mean /= train.size();
    val_mean /= val.size();
    CHECK(std::abs(train_mean) < 1e-9);
    CHECK(val_mean > 0.5);
}

TEST_CASE("balanced image count") {
    CHECK(balanced_image_count(0.5, 1, 64) == 96);
    CHECK(balanced_image_count(0.5, 3, 64) == 64);
    CHECK(balanced_image_count(0.5, 5, 64) == 48);
    CHECK(balanced_image_count(0.5, 9, 64) == 32);
    CHECK(balanced_image_count(0.0, 9, 64) == 64);
    try {
        balanced_image_count(0.5, 4, 64);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("valid nearby settings") != std::string::npos);
        CHECK(msg.find("-> b=") != std::string::npos);
    }
    CHECK_THROWS_AS(balanced_image_count(0.5, 3, 0), ConfigError);
}

TEST_CASE("assembled batches: distinct images, no cross-image mixing, 3B samples on average") {
    std::vector<std::int64_t> pool(200);
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<std::int64_t>(i) * 3 + 1;
    const augment::MixupConfig config{0.5, 5};
    Rng rng(2);
    double total = 0;
    const int trials = 400;
    for (int t = 0; t < trials; ++t) {
        const auto batch = assemble_batch(pool, config, 16, rng);
        REQUIRE(batch.images.size() == 12);
        CHECK(std::set<std::int64_t>(batch.images.begin(), batch.images.end()).size() == 12);
        std::set<std::int64_t> images(batch.images.begin(), batch.images.end());
        for (const auto& s : batch.samples) {
            CHECK(images.count(s.image_id) == 1);
            if (!s.mixed) CHECK(s.scan >= 0);
        }
        total += static_cast<double>(batch.samples.size());
    }
    CHECK(std::abs(total / trials / 48.0 - 1.0) < 0.02);

    Rng rng2(3);
    const auto plain = assemble_batch(pool, {0.0, 5}, 4, rng2);
    CHECK(plain.samples.size() == 12);
    for (const auto& s : plain.samples) CHECK_FALSE(s.mixed);
    CHECK_THROWS_AS(assemble_batch(std::span(pool).first(2), config, 4, rng2), DataError);
}

TEST_CASE("tokenizer-training mixup") {
    Rng rng(4);
    auto random = [&] {
        Matrix m(5, 2);
        for (double& v : m.values()) v = rng.normal();
        return m;
    };
    const std::vector<Matrix> inputs{random(), random(), random()};
    const std::vector<Matrix> targets{random(), random(), random()};

    auto x = inputs;
    auto y = targets;
    auto r = tokenizer_train_mixup(x, &y, {0.0, 0.3}, rng);
    CHECK(r.blends.empty());
    CHECK(x == inputs);

    x = inputs;
    r = tokenizer_train_mixup(x, &y, {1.0, 0.3}, rng, 1.0);
    CHECK(r.blends.size() == 3);
    CHECK(x == inputs);
    CHECK(y == targets);

    x = inputs;
    y = targets;
    r = tokenizer_train_mixup(x, &y, {1.0, 0.3}, rng, 0.5);
    for (const auto& b : r.blends) {
        CHECK(b.partner != b.sample);
        for (std::size_t i = 0; i < x[b.sample].size(); ++i) {
            CHECK(x[b.sample][i] ==
                  doctest::Approx((inputs[b.sample][i] + inputs[b.partner][i]) / 2.0).epsilon(1e-15));
            CHECK(y[b.sample][i] ==
                  doctest::Approx((targets[b.sample][i] + targets[b.partner][i]) / 2.0).epsilon(1e-15));
        }
    }

    std::vector<Matrix> one{inputs[0]};
    CHECK(tokenizer_train_mixup(one, nullptr, {1.0, 0.3}, rng).skipped);
    CHECK(one[0] == inputs[0]);
    CHECK_THROWS_AS(tokenizer_train_mixup(x, nullptr, {1.5, 0.3}, rng), ParameterError);
}

TEST_CASE("synthetic datasets are reproducible") {
    const auto a = generate_synthetic_dataset(tiny_spec(9));
    const auto b = generate_synthetic_dataset(tiny_spec(9));
    CHECK(serialize_signals(a.left) == serialize_signals(b.left));
    CHECK(serialize_signals(a.right) == serialize_signals(b.right));
    CHECK(format_manifest(a.manifest) == format_manifest(b.manifest));
    CHECK(a.targets.image == b.targets.image);
    const auto c = generate_synthetic_dataset(tiny_spec(10));
    CHECK(serialize_signals(a.left) != serialize_signals(c.left));
    CHECK(a.left.samples.size() == 30);
    CHECK(a.samples(Split::val).size() == 6);
}

TEST_CASE("scans of one image differ only by noise") {
    auto spec = tiny_spec();
    spec.scan_noise = 0.0;
    const auto quiet = generate_synthetic_dataset(spec);
    for (std::int64_t image = 0; image < 10; ++image) {
        const auto scans = quiet.manifest.scans_of(image);
        CHECK(quiet.left.samples[scans[0]] == quiet.left.samples[scans[1]]);
        CHECK(quiet.right.samples[scans[0]] == quiet.right.samples[scans[2]]);
    }

    spec.scan_noise = 0.3;
    const auto noisy = generate_synthetic_dataset(spec);
    double within = 0, across = 0;
    int nw = 0, na = 0;
    for (std::int64_t i = 0; i < 10; ++i) {
        const auto si = noisy.manifest.scans_of(i);
        within += correlation(noisy.left.samples[si[0]], noisy.left.samples[si[1]]);
        ++nw;
        for (std::int64_t j = i + 1; j < 10; ++j) {
            across += correlation(noisy.left.samples[si[0]], noisy.left.samples[noisy.manifest.scans_of(j)[0]]);
            ++na;
        }
    }
    CHECK(within / nw > across / na + 0.2);
}

TEST_CASE("datasets round-trip through disk") {
    const auto dir = std::filesystem::temp_directory_path() / "cortisphere_test_dataset";
    std::filesystem::remove_all(dir);
    const auto d = generate_synthetic_dataset(tiny_spec());
    save_dataset(dir.string(), d);
    const auto back = load_dataset((dir / "manifest.txt").string());
    CHECK(back.level == d.level);
    CHECK(format_manifest(back.manifest) == format_manifest(d.manifest));
    REQUIRE(back.left.samples.size() == d.left.samples.size());
    for (std::size_t s = 0; s < d.left.samples.size(); ++s)
        for (std::size_t i = 0; i < d.left.samples[s].size(); ++i)
            CHECK(back.left.samples[s][i] == static_cast<float>(d.left.samples[s][i]));
    CHECK(back.roi_left.values == d.roi_left.values);
    CHECK(back.roi_right.values == d.roi_right.values);
    CHECK(back.targets.image == d.targets.image);
    CHECK(back.targets.semantic_length == d.targets.semantic_length);
    CHECK(back.structure_left.samples.size() == d.structure_left.samples.size());
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(load_dataset((dir / "manifest.txt").string()), IoError);
}
