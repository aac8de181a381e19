#pragma once

#include <cmath>
#include <cstdint>

namespace swm {

// splitmix64 step. Used both as a stream generator and as a stateless hash,
// so every random quantity in the toolkit is reproducible across platforms
// (no reliance on libstdc++ distribution internals).
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Stateless hash of a key tuple; basis for counter-mode draws keyed by
// (seed, sample, tick, channel).
inline std::uint64_t hash_u64(std::uint64_t a, std::uint64_t b = 0x1234567887654321ull,
                              std::uint64_t c = 0xdeadbeefcafef00dull, std::uint64_t d = 0) {
    std::uint64_t s = a;
    std::uint64_t h = splitmix64(s);
    s ^= b * 0x9e3779b97f4a7c15ull;
    h ^= splitmix64(s);
    s ^= c + 0xc2b2ae3d27d4eb4full;
    h ^= splitmix64(s);
    s ^= d + 0x165667b19e3779f9ull;
    h ^= splitmix64(s);
    return h;
}

inline double u64_to_unit(std::uint64_t x) {
    return static_cast<double>(x >> 11) * 0x1.0p-53;  // [0, 1)
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed ^ 0x5851f42d4c957f2dull) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() { return u64_to_unit(next_u64()); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // standard normal via Box-Muller (explicit so results are portable)
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // independent child stream, e.g. one per episode or per grid cell
    Rng split(std::uint64_t salt) { return Rng(hash_u64(state_, salt, 0x73706c6974ull)); }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// One counter-mode uniform draw keyed by a tuple; pure function of its inputs.
inline double counter_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                              std::uint64_t c = 0) {
    return u64_to_unit(hash_u64(seed, a, b, c));
}

}  // namespace swm
