#include "cortisphere/rng.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "cortisphere/error.hpp"

namespace cortisphere {

Rng Rng::split(std::string_view name) const {
    // FNV-1a over the name, then mixed like a numeric stream id.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : name) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return split(h);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw ParameterError("Rng::below requires a positive bound");
    // Rejection keeps the draw unbiased.
    const std::uint64_t limit = max() - max() % n;
    for (;;) {
        const std::uint64_t x = (*this)();
        if (x < limit) return x % n;
    }
}

double Rng::exponential() {
    // 1 - u lies in (0, 1], so the log is finite.
    return -std::log1p(-uniform());
}

double Rng::normal() {
    // Box-Muller, one output per call so the stream position is predictable.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::beta(double a, double b) {
    if (!(a > 0.0) || !(b > 0.0)) throw ParameterError("beta distribution needs positive shapes");
    std::gamma_distribution<double> ga(a, 1.0);
    std::gamma_distribution<double> gb(b, 1.0);
    const double x = ga(*this);
    const double y = gb(*this);
    const double s = x + y;
    // Both gammas can underflow to zero for tiny shapes; fall back to a fair coin.
    if (s == 0.0) return uniform() < a / (a + b) ? 1.0 : 0.0;
    return x / s;
}

} // namespace cortisphere
