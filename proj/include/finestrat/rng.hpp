#ifndef FINESTRAT_RNG_HPP
#define FINESTRAT_RNG_HPP

#include <cstdint>
#include <random>

namespace finestrat {

/**
 * Identifies one independent random stream.
 *
 * Every replicate or draw sequence owns its own (seed, stream) pair; the same
 * pair always reproduces the same sequence bit-for-bit on a given toolchain.
 */
struct RngSpec {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;

    /** Derive a sub-stream, e.g. one per design inside a replicate. */
    RngSpec child(std::uint64_t sub) const {
        return RngSpec{seed, stream * 1000003ULL + sub + 1};
    }
};

/** A seeded 64-bit Mersenne Twister owned by a single consumer. */
class Rng {
public:
    explicit Rng(RngSpec spec) : spec_(spec) {
        std::seed_seq seq{static_cast<std::uint32_t>(spec.seed),
                          static_cast<std::uint32_t>(spec.seed >> 32),
                          static_cast<std::uint32_t>(spec.stream),
                          static_cast<std::uint32_t>(spec.stream >> 32),
                          0x5eedU};
        engine_.seed(seq);
    }

    Rng(std::uint64_t seed, std::uint64_t stream) : Rng(RngSpec{seed, stream}) {}

    const RngSpec& spec() const noexcept { return spec_; }

    /** Uniform integer in [0, n). */
    std::size_t index(std::size_t n) {
        std::uniform_int_distribution<std::size_t> dist(0, n - 1);
        return dist(engine_);
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    double normal() { return normal_(engine_); }

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    RngSpec spec_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace finestrat

#endif  // FINESTRAT_RNG_HPP
