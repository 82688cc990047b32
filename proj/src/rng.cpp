#include "sagekeep/rng.hpp"

#include <cmath>

#include "sagekeep/errors.hpp"

namespace sagekeep {

namespace {

std::uint64_t splitmix64(std::uint64_t& s) {
    s += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::uint64_t h, std::string_view s) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace

std::uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::uniform_int(std::uint64_t n) {
    if (n == 0) throw DataError("uniform_int: n must be positive");
    const std::uint64_t limit = ~0ull - (~0ull % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
}

double Rng::normal(double mean, double stddev) {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586477 * u2);
}

double Rng::beta(double a, double b) {
    if (a <= 0.0 || b <= 0.0) throw DataError("beta: shape parameters must be positive");
    for (int tries = 0; tries < 10000; ++tries) {
        const double x = std::pow(uniform(), 1.0 / a);
        const double y = std::pow(uniform(), 1.0 / b);
        if (x + y > 0.0 && x + y <= 1.0) return x / (x + y);
    }
    return 0.5;  // unreachable for sane shapes
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
    std::uint64_t h = fnv1a(0xcbf29ce484222325ull ^ base, label);
    return splitmix64(h);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view label, std::uint64_t index) {
    std::uint64_t h = fnv1a(0xcbf29ce484222325ull ^ base, label);
    h ^= 0x9e3779b97f4a7c15ull + index;
    return splitmix64(h);
}

}  // namespace sagekeep
