#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace cff {

// One splitmix64 round; used only for deriving stream seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Deterministic, platform-independent random stream.
///
/// The engine is std::mt19937_64, whose output sequence is bit-exact across
/// platforms by the standard. All distributions are implemented here rather
/// than via <random> distribution classes, whose output is
/// implementation-defined. A run seed is expanded into independent streams
/// (init / shuffle / augment / ...) through splitmix64, so adding draws to
/// one stream never perturbs another.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    static std::uint64_t derive_stream_seed(std::uint64_t seed, std::uint64_t stream_id) {
        std::uint64_t s = seed + 0x9e3779b97f4a7c15ULL * (stream_id + 1);
        return splitmix64(s);
    }

    static Rng stream(std::uint64_t seed, std::uint64_t stream_id) {
        return Rng(derive_stream_seed(seed, stream_id));
    }

    std::uint64_t next_u64() { return eng_(); }

    // Uniform on [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform on (0, 1]; safe as a log() argument.
    double uniform_pos() { return static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53; }

    // Box-Muller without caching; two engine draws per call.
    double normal() {
        const double u1 = uniform_pos();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double stdev) { return mean + stdev * normal(); }

    // Truncated normal: resample until |z| <= 2 (standard ViT init recipe).
    double truncated_normal(double stdev) {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= 2.0) return z * stdev;
        }
    }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
        const int v = static_cast<int>(uniform() * static_cast<double>(n));
        return v < n ? v : n - 1;
    }

    // Fisher-Yates; one uniform_int per swap.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            const int j = uniform_int(i + 1);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

private:
    std::mt19937_64 eng_;
};

// Stream ids used by the training pipeline; fixed so that runs are
// reproducible across machines and code revisions.
enum class RngStream : std::uint64_t {
    init = 0,     // weight initialization
    shuffle = 1,  // data-loader ordering and validation split
    augment = 2,  // stochastic augmentation draws
};

inline Rng make_stream(std::uint64_t seed, RngStream which) {
    return Rng::stream(seed, static_cast<std::uint64_t>(which));
}

}  // namespace cff
