#pragma once

// Deterministic random streams.
//
// Every stochastic routine takes an explicit RngStream. Streams are derived
// from a base seed with a splitmix64 finalizer, so a (seed, purpose, index)
// triple always lands on the same stream no matter what ran before it.
// Uniform and normal draws are produced by hand from raw 64-bit outputs:
// std::uniform_real_distribution and friends are not pinned across library
// versions, and run-to-run byte-identical output is part of the contract.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oanet {

// Stable purpose tags for stream derivation. Values are part of the
// persisted-artifact contract; append only.
enum class StreamTag : uint64_t {
    corpus_assign = 1,
    corpus_sample = 2,
    split = 3,
    tabular = 4,
    encoder_init = 5,
    encoder_shuffle = 6,
    mask_learning = 7,
    perturb_missing = 8,
    perturb_grid = 9,
    external_init = 10,
    external_shuffle = 11,
    head = 12,
    fixture = 13,
};

inline uint64_t splitmix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t purpose, uint64_t index = 0) {
    uint64_t h = splitmix64(base ^ 0x7f4a7c1500000001ull);
    h = splitmix64(h ^ purpose);
    h = splitmix64(h ^ index);
    return h;
}

inline uint64_t derive_seed(uint64_t base, StreamTag tag, uint64_t index = 0) {
    return derive_seed(base, static_cast<uint64_t>(tag), index);
}

class RngStream {
public:
    explicit RngStream(uint64_t seed) : eng_(seed) {}

    static RngStream derived(uint64_t base, StreamTag tag, uint64_t index = 0) {
        return RngStream(derive_seed(base, tag, index));
    }

    uint64_t next_u64() { return eng_(); }

    // [0, 1) with 53 bits of precision.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Inclusive range. Modulo bias is below 2^-32 for the small ranges used
    // here and keeps the draw count per call fixed at one.
    int uniform_int(int lo, int hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    // Box-Muller; second value cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stdev) { return mean + stdev * normal(); }

    // Fisher-Yates. Identical element order in means identical order out.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = next_u64() % i;
            std::swap(v[i - 1], v[j]);
        }
    }

    // First n slots of a shuffled 0..k-1 index vector.
    std::vector<int> choose(int k, int n) {
        std::vector<int> idx(k);
        for (int i = 0; i < k; ++i) idx[i] = i;
        shuffle(idx);
        idx.resize(n);
        return idx;
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace oanet
