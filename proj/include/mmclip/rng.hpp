#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace mmclip::rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives an independent stream key from a base seed and a list of tags
/// (operation id, sample index, ...). Streams keyed this way are
/// schedule-independent: the value drawn for sample i does not depend on
/// how many values other samples consumed.
inline std::uint64_t stream_key(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t h = splitmix64(seed);
    for (std::uint64_t t : tags) h = splitmix64(h ^ t);
    return h;
}

/// Seeded random stream. Uniform/normal variates are generated from raw
/// mt19937_64 bits (not std::*_distribution) so sequences are fixed for a
/// given build regardless of standard-library internals.
class Stream {
public:
    explicit Stream(std::uint64_t key) : gen_(key) {}

    static Stream make(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
        return Stream(stream_key(seed, tags));
    }

    std::uint64_t next_u64() { return gen_(); }

    double uniform01() {
        // 53 random bits -> [0,1)
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01(), u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    /// Unbiased integer in [0, n).
    std::size_t index(std::size_t n) {
        if (n <= 1) return 0;
        std::uint64_t mask = ~0ULL >> __builtin_clzll(n - 1 | 1);
        std::uint64_t v;
        do {
            v = gen_() & mask;
        } while (v >= n);
        return static_cast<std::size_t>(v);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace mmclip::rng
