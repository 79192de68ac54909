#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace outlierlab {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// One master seed fans out into per-stage seeds keyed by a label, so each
// stage can be re-run in isolation with the same stream of randomness.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view label) {
    return splitmix64(master ^ fnv1a64(label));
}

// mt19937_64 with hand-rolled distributions. The standard distributions are
// implementation-defined, which would break byte-identical artifacts across
// toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n). Modulo bias is negligible for n << 2^64.
    std::uint64_t uniform_int(std::uint64_t n) {
        return eng_() % n;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // N(0, std) clipped by rejection at +-clip_sigmas standard deviations.
    double truncated_normal(double stddev, double clip_sigmas) {
        double z;
        do {
            z = normal();
        } while (z < -clip_sigmas || z > clip_sigmas);
        return z * stddev;
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Inverse-CDF sampler for a fixed discrete distribution.
class DiscreteSampler {
public:
    DiscreteSampler() = default;
    explicit DiscreteSampler(const std::vector<double>& probs) {
        cdf_.reserve(probs.size());
        double acc = 0.0;
        for (double p : probs) {
            acc += p;
            cdf_.push_back(acc);
        }
        if (!cdf_.empty()) cdf_.back() = 1.0;
    }

    std::size_t sample(Rng& rng) const {
        const double u = rng.uniform();
        std::size_t lo = 0, hi = cdf_.size();
        while (lo < hi) {
            const std::size_t mid = (lo + hi) / 2;
            if (cdf_[mid] <= u)
                lo = mid + 1;
            else
                hi = mid;
        }
        return lo < cdf_.size() ? lo : cdf_.size() - 1;
    }

    std::size_t size() const { return cdf_.size(); }

private:
    std::vector<double> cdf_;
};

}  // namespace outlierlab
