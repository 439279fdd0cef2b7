#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace lightnas {

// Deterministic RNG used everywhere seeds matter. Wraps mt19937_64 but
// implements its own bounded-int and floating draws so results do not
// depend on libstdc++ distribution internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed), seed_(seed) {}

    std::uint64_t raw() { return gen_(); }

    // Unbiased integer in [0, n) via rejection sampling.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return v % n;
    }

    // Uniform double in [0, 1) with 53 bits of entropy.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (no cached spare, two draws per call).
    double normal() {
        const double u1 = static_cast<double>((gen_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    // Child generator with a seed derived from (seed, name). Named streams keep
    // independent uses (weight init, sampling, noise) decoupled.
    Rng fork(std::string_view name) const {
        std::uint64_t h = 1469598103934665603ull ^ seed_;
        for (char c : name) {
            h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
            h *= 1099511628211ull;
        }
        // splitmix64 finalizer to spread the bits
        h += 0x9e3779b97f4a7c15ull;
        h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
        h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
        return Rng(h ^ (h >> 31));
    }

    Rng fork(std::string_view name, std::uint64_t index) const {
        Rng child = fork(name);
        child.seed_ ^= index * 0x9e3779b97f4a7c15ull;
        child.gen_.seed(child.seed_);
        return child;
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::mt19937_64 gen_;
    std::uint64_t seed_;
};

}  // namespace lightnas
