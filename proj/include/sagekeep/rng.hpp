#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace sagekeep {

// Seeded generator with hand-rolled distributions so that streams are
// bit-stable across platforms and standard-library versions. splitmix64
// core; uniform doubles take the top 53 bits.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();

    // [0, 1)
    double uniform();
    double uniform(double lo, double hi);

    // [0, n); n must be > 0. Unbiased via rejection.
    std::uint64_t uniform_int(std::uint64_t n);

    // Box-Muller, no cached spare (two uniforms per draw).
    double normal(double mean = 0.0, double stddev = 1.0);

    // Johnk's algorithm; fine for the small shape parameters used here.
    double beta(double a, double b);

    template <class T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i + 1));
            std::swap(v[i], v[j]);
        }
    }

  private:
    std::uint64_t state_;
};

// Stable per-item seeds: hash a label (and optional index) into a base seed
// so parallel work is reproducible independent of scheduling order.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);
std::uint64_t derive_seed(std::uint64_t base, std::string_view label, std::uint64_t index);

}  // namespace sagekeep
