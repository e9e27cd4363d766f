#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gp {

// Error taxonomy. Every failure mode surfaces as one of these so callers
// (and the CLI exit-code mapping) can distinguish bad config from bad data.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct config_error : error {
    using error::error;
};
struct contract_error : error {
    using error::error;
};
struct format_error : error {
    using error::error;
};
struct not_found_error : error {
    using error::error;
};
struct io_error : error {
    using error::error;
};
struct training_error : error {
    using error::error;
};
struct sampling_error : error {
    using error::error;
};
struct migration_error : error {
    using error::error;
};

inline void check_config(bool ok, const std::string& msg) {
    if (!ok) throw config_error(msg);
}
inline void check_contract(bool ok, const std::string& msg) {
    if (!ok) throw contract_error(msg);
}

// Deterministic RNG. Box-Muller on top of mt19937_64 so normal draws do not
// depend on the standard library's unspecified normal_distribution algorithm.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed) {}

    // uniform in [0, 1)
    double uniform() {
        return (gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // inclusive range
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(gen_() % span);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2     = uniform();
        double radius = std::sqrt(-2.0 * std::log(u1));
        double theta  = 2.0 * M_PI * u2;
        spare_        = radius * std::sin(theta);
        have_spare_   = true;
        return radius * std::cos(theta);
    }

    uint64_t next_u64() { return gen_(); }

    // stable per-purpose substream derivation
    Rng fork(uint64_t salt) const {
        uint64_t s = seed_mix_ ^ (salt * 0x9e3779b97f4a7c15ull);
        Rng r;
        r.gen_.seed(s);
        return r;
    }

    static Rng seeded(uint64_t seed) {
        Rng r(seed);
        r.seed_mix_ = seed * 0x2545f4914f6cdd1dull + 0x123456789abcdefull;
        return r;
    }

private:
    std::mt19937_64 gen_;
    uint64_t seed_mix_ = 0;
    bool have_spare_   = false;
    double spare_      = 0.0;
};

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    return a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
}

}  // namespace gp
