#ifndef FLOWMIX_RNG_HPP
#define FLOWMIX_RNG_HPP

#include <cstdint>
#include <random>
#include <vector>

namespace flowmix {

/// Mixes a 64-bit value into a well-distributed seed (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t x);

/// Derives an independent stream seed from a base seed and a stream index.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

/// Seeded random source with pinned output streams.
///
/// The engine is std::mt19937_64 (bit-exact by the standard); every
/// distribution transform is implemented here rather than via <random>
/// distribution classes, so draw sequences are reproducible independent of
/// the standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(mix_seed(seed)) {}

    /// Uniform double in [0, 1).
    double uniform();

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi);

    /// Standard normal draw (Box-Muller, one spare cached).
    double gaussian();

    /// Uniform integer in [0, n), n >= 1. Rejection sampling, no modulo bias.
    std::uint64_t bounded(std::uint64_t n);

    /// Index drawn from unnormalized non-negative weights.
    std::size_t categorical(const std::vector<double>& weights);

    /// In-place Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(bounded(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::uint64_t next_raw() { return engine_(); }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace flowmix

#endif
