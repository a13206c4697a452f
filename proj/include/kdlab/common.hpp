#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace kdlab {

#ifdef KDLAB_USE_FLOAT32
using real_t = float;
#else
using real_t = double;
#endif

using TokenId = int32_t;
using TokenSeq = std::vector<TokenId>;

inline void kd_check(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

inline void kd_arg_check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// splitmix64 finalizer, used to derive independent RNG streams from (seed, salt)
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    // independent child stream; deterministic in (parent seed, salt) only
    Rng split(uint64_t salt) const { return Rng(mix_seed(seed_, salt)); }

    uint64_t seed() const { return seed_; }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return std::uniform_int_distribution<int64_t>(lo, hi)(engine_);
    }
    bool bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }

    std::mt19937_64& engine() { return engine_; }

private:
    uint64_t seed_;
    std::mt19937_64 engine_;
};

} // namespace kdlab
