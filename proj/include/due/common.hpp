#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace due {

// Error categories used across the pipeline. Every thrown error carries one
// so the CLI can map failures to exit codes.
enum class ErrorKind {
    validation,
    configuration,
    annotation,
    split,
    corrupt_file,
    training,
    interpolation,
    metric_undefined,
    dependency,
    reporting,
    io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

inline const char* error_kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::validation: return "validation";
        case ErrorKind::configuration: return "configuration";
        case ErrorKind::annotation: return "annotation";
        case ErrorKind::split: return "split";
        case ErrorKind::corrupt_file: return "corrupt_file";
        case ErrorKind::training: return "training";
        case ErrorKind::interpolation: return "interpolation";
        case ErrorKind::metric_undefined: return "metric_undefined";
        case ErrorKind::dependency: return "dependency";
        case ErrorKind::reporting: return "reporting";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) fail(kind, msg);
}

// splitmix64, used both as a seed mixer and inside Rng.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// FNV-1a over bytes; stable across platforms, used for seed derivation and
// manifest content hashes.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

// Root seed fully determines every derived seed: hash of
// (root, stage/purpose string, item index). Keep this the single derivation
// point so reruns reproduce all streams.
inline uint64_t derive_seed(uint64_t root, const std::string& purpose, uint64_t item = 0) {
    uint64_t h = fnv1a64(&root, sizeof(root));
    h = fnv1a64(purpose, h);
    h = fnv1a64(&item, sizeof(item), h);
    uint64_t s = h;
    return splitmix64(s);
}

// Deterministic RNG. Hand-rolled uniform/normal so streams are identical
// across standard libraries and platforms.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed ^ 0x6a09e667f3bcc909ULL) {
        // warm up so nearby seeds decorrelate
        splitmix64(state_);
        splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [lo, hi] inclusive
    int64_t randint(int64_t lo, int64_t hi) {
        uint64_t span = uint64_t(hi - lo) + 1;
        return lo + int64_t(next_u64() % span);
    }

    // standard normal via Box-Muller; one cached value
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Fisher-Yates
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(randint(0, int64_t(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace due
