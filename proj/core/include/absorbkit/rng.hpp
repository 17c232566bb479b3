#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <random>

namespace absorb {

// Deterministic random source. mt19937_64 gives bit-identical streams across
// platforms; the distributions are hand-rolled because the std ones are
// implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed);

    // Independent substream derived from (seed, tag). Streams with distinct
    // tags never collide in practice, which keeps e.g. data order identical
    // between arms that share a seed but draw different masks.
    static Rng stream(uint64_t seed, std::string_view tag);

    uint64_t next_u64();
    double uniform();          // [0, 1), 53-bit
    double gaussian();         // N(0, 1), Box-Muller
    int uniform_int(int n);    // [0, n), unbiased

    template <typename It>
    void shuffle(It first, It last) {
        auto n = last - first;
        for (decltype(n) i = n - 1; i > 0; --i) {
            auto j = uniform_int(static_cast<int>(i + 1));
            std::swap(first[i], first[j]);
        }
    }

    // k distinct values from [0, n), uniformly, ascending order.
    std::vector<int> sample_without_replacement(int n, int k);

    std::string state() const;
    void set_state(const std::string& s);

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

uint64_t splitmix64(uint64_t x);
uint64_t fnv1a64(std::string_view s);

}  // namespace absorb
