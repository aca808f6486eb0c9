#pragma once

// Counter-based pseudo random numbers.
//
// Every draw is a pure function of (key, counter), so a stream can be
// reproduced from its seed alone and independent streams can be derived
// per trajectory without any shared state. Distributions are implemented
// here rather than with <random> so that the numbers are identical across
// standard library implementations.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace nlaplace {

constexpr std::uint64_t mix64(std::uint64_t z)
{
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class CounterRng
{
public:
    static constexpr std::string_view algorithm = "splitmix64-counter/v1";

    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(mix64(seed + 0x9e3779b97f4a7c15ULL) ^ mix64(~stream * 0xd1b54a32d192ed03ULL))
    {}

    /// Independent sub-seed for item `index` of a run seeded with `seed`.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t index)
    {
        return mix64(mix64(seed) + 0x632be59bd9b4e019ULL * (index + 1));
    }

    std::uint64_t next_u64()
    {
        return mix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (one pair consumed per two draws).
    double normal()
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        spare_ = radius * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return radius * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Uniform integer in [0, n) without modulo bias.
    std::uint64_t below(std::uint64_t n)
    {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x = next_u64();
        while (x >= limit)
            x = next_u64();
        return x % n;
    }

    template <class T>
    void shuffle(std::vector<T>& v)
    {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[below(i)]);
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace nlaplace
