#pragma once
#include <cstdint>
#include <cmath>

namespace splitgan {

// splitmix64 step; used both as a generator and to derive independent
// sub-seeds so that stream layout does not depend on call order elsewhere.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t s = a;
    uint64_t x = splitmix64(s) ^ (b + 0x9e3779b97f4a7c15ULL);
    uint64_t t = x;
    return splitmix64(t);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
    return mix_seed(mix_seed(a, b), c);
}

// Deterministic PRNG with explicit distributions.  std:: distributions are
// implementation-defined, so everything here is hand-rolled on xoshiro-style
// splitmix output to keep runs reproducible across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed = 1) : state_(seed ? seed : 0x5eed5eed5eedULL) {}

    uint64_t next_u64() { return splitmix64(state_); }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [lo, hi] inclusive
    int uniform_int(int lo, int hi) {
        uint64_t span = uint64_t(hi - lo) + 1;
        return lo + int(next_u64() % span);
    }

    bool coin(double p = 0.5) { return uniform() < p; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    Rng fork(uint64_t tag) const { return Rng(mix_seed(state_, tag)); }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace splitgan
