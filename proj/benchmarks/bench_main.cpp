#include <benchmark/benchmark.h>

#include "cortisphere/icosphere.hpp"
#include "cortisphere/losses.hpp"
#include "cortisphere/matrix.hpp"
#include "cortisphere/numerics.hpp"
#include "cortisphere/rng.hpp"
#include "cortisphere/tokenizer.hpp"

using namespace cortisphere;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(r, c);
    for (double& v : m.values()) v = rng.normal();
    return m;
}

void BM_MeshGenerate(benchmark::State& state) {
    const int level = static_cast<int>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(icosphere::generate(level));
    state.counters["vertices"] = static_cast<double>(icosphere::vertex_count(level));
}
BENCHMARK(BM_MeshGenerate)->DenseRange(3, 6)->Unit(benchmark::kMillisecond);

void BM_RingGather(benchmark::State& state) {
    const int level = static_cast<int>(state.range(0));
    const std::size_t channels = static_cast<std::size_t>(state.range(1));
    const auto mesh = icosphere::mesh_at(level);
    const auto& table = icosphere::neighbor_table(*mesh);
    const Matrix x = random_matrix(mesh->num_vertices(), channels, 1);
    for (auto _ : state) {
        num::Tape tape;
        benchmark::DoNotOptimize(num::ring_gather(tape.constant(x), table));
    }
    state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * x.size() * 7 * sizeof(double)));
}
BENCHMARK(BM_RingGather)->Args({4, 8})->Args({4, 32})->Args({6, 1})->Args({6, 16})->Unit(benchmark::kMicrosecond);

void BM_RingGatherBackward(benchmark::State& state) {
    const auto mesh = icosphere::mesh_at(static_cast<int>(state.range(0)));
    const auto& table = icosphere::neighbor_table(*mesh);
    num::ParameterSet ps;
    ps.add("x", random_matrix(mesh->num_vertices(), static_cast<std::size_t>(state.range(1)), 2));
    for (auto _ : state) {
        num::Tape tape;
        const auto b = tape.bind(ps);
        benchmark::DoNotOptimize(tape.backpropagate(num::mean_all(num::ring_gather(b["x"], table))));
    }
}
BENCHMARK(BM_RingGatherBackward)->Args({4, 32})->Args({6, 16})->Unit(benchmark::kMicrosecond);

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, 7 * 32, 3);
    const Matrix b = random_matrix(7 * 32, 32, 4);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::matmul(a, b));
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * 224 * 32));
}
BENCHMARK(BM_Matmul)->Arg(162)->Arg(642)->Arg(2562)->Unit(benchmark::kMicrosecond);

void BM_TokenizerEncode(benchmark::State& state) {
    const auto config = tokenizer::TokenizerConfig::desk();
    const auto model = tokenizer::build(config, 5);
    const auto cond = tokenizer::default_conditions(config.input_level);
    const tokenizer::SphericalSignal signal{config.input_level, icosphere::Hemisphere::left,
                                            random_matrix(icosphere::vertex_count(config.input_level), 1, 6)};
    for (auto _ : state) benchmark::DoNotOptimize(tokenizer::encode(model, signal, cond));
}
BENCHMARK(BM_TokenizerEncode)->Unit(benchmark::kMillisecond);

void BM_TokenizerStep(benchmark::State& state) {
    const auto config = tokenizer::TokenizerConfig::desk();
    const auto model = tokenizer::build(config, 5);
    const auto cond = tokenizer::default_conditions(config.input_level);
    const Matrix signal = random_matrix(icosphere::vertex_count(config.input_level), 1, 7);
    const Matrix mask(signal.rows(), 1, 1.0);
    for (auto _ : state) {
        num::Tape tape;
        const auto b = tape.bind(model.parameters);
        const auto token = tokenizer::encode(tape, b, config, signal, cond);
        const auto loss =
            tokenizer::reconstruction_loss(tokenizer::decode(b, config, token), tape.constant(signal), mask);
        benchmark::DoNotOptimize(tape.backpropagate(loss));
    }
}
BENCHMARK(BM_TokenizerStep)->Unit(benchmark::kMillisecond);

void BM_BidirectionalInfoNce(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    num::ParameterSet ps;
    ps.add("q", random_matrix(n, 64, 8));
    const Matrix keys = random_matrix(n, 64, 9);
    std::vector<std::int64_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::int64_t>(i / 2);
    for (auto _ : state) {
        num::Tape tape;
        const auto b = tape.bind(ps);
        benchmark::DoNotOptimize(
            tape.backpropagate(losses::bidirectional_infonce(b["q"], tape.constant(keys), idx, 0.1)));
    }
}
BENCHMARK(BM_BidirectionalInfoNce)->Arg(24)->Arg(192)->Unit(benchmark::kMicrosecond);

} // namespace
BENCHMARK_MAIN();
