#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace steerlab {

// splitmix64: the seed mixer behind every RNG stream in the project.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// One master seed fans out into named sub-streams through a counter scheme:
// derive_seed(master, stream, index) is a pure function, so any pipeline stage
// can be re-run in isolation and still sees the exact stream it saw before.
inline uint64_t derive_seed(uint64_t master, uint64_t stream, uint64_t index = 0) {
    uint64_t s = master;
    uint64_t a = splitmix64(s);
    s ^= stream * 0x9e3779b97f4a7c15ull;
    uint64_t b = splitmix64(s);
    s ^= index * 0xd1342543de82ef95ull;
    uint64_t c = splitmix64(s);
    return a ^ (b << 1) ^ c;
}

// Stream ids for derive_seed. Values are stable; appending only.
namespace seed_stream {
inline constexpr uint64_t kModelInit = 1;
inline constexpr uint64_t kCorpus = 2;
inline constexpr uint64_t kPretrainBatch = 3;
inline constexpr uint64_t kRollout = 4;
inline constexpr uint64_t kEval = 5;
inline constexpr uint64_t kTask = 6;
inline constexpr uint64_t kSaeInit = 7;
inline constexpr uint64_t kSaeBatch = 8;
inline constexpr uint64_t kRolloutSample = 9;
inline constexpr uint64_t kSteerInit = 10;
} // namespace seed_stream

// Deterministic RNG, self-contained so results do not depend on the C++
// standard library's distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() { return splitmix64(state_); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // unbiased integer in [0, n)
    uint64_t below(uint64_t n) {
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // standard normal via Box-Muller
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // index sampled from unnormalized nonnegative weights, CDF walk in index order
    int categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double u = uniform() * total;
        double acc = 0.0;
        for (size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (u < acc) return static_cast<int>(i);
        }
        return static_cast<int>(weights.size()) - 1;
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace steerlab
