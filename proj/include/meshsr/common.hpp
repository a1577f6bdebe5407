#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace meshsr {

// Error taxonomy shared across modules. The CLI maps these onto exit codes:
// config/validation -> 2, divergence/solver -> 3, io/parse -> 4.
struct dimension_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct index_error : std::out_of_range {
    using std::out_of_range::out_of_range;
};
struct contract_error : std::logic_error {
    using std::logic_error::logic_error;
};
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct parse_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct divergence_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct solver_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic splitmix64 stream. std::uniform_real_distribution is
// implementation-defined, which would break cross-build reproducibility of
// datasets and training trajectories, so all randomness goes through this.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be positive.
    int uniform_int(int n) {
        if (n <= 0) throw contract_error("Rng::uniform_int: n must be positive");
        return static_cast<int>((static_cast<unsigned __int128>(next_u64()) *
                                 static_cast<unsigned __int128>(n)) >> 64);
    }

    // Independent stream for item `index` of a run seeded with `seed`.
    static Rng derive(std::uint64_t seed, std::uint64_t index) {
        Rng mixer(seed ^ (0x9e3779b97f4a7c15ULL * (index + 1)));
        return Rng(mixer.next_u64());
    }

private:
    std::uint64_t state_;
};

// FNV-1a 64-bit, used for dataset fingerprints.
inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace meshsr
