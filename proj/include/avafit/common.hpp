#pragma once

#include <cmath>
#include <cstdint>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace avafit {

using real = double;

/// Planar RGB image, values in [0,1]. Layout: data[c*h*w + y*w + x].
struct Image {
    int h = 0;
    int w = 0;
    std::vector<real> data;

    Image() = default;
    Image(int h_, int w_, real fill = 0.0) : h(h_), w(w_), data(3u * h_ * w_, fill) {}

    real& at(int c, int y, int x) { return data[static_cast<size_t>(c) * h * w + static_cast<size_t>(y) * w + x]; }
    real at(int c, int y, int x) const { return data[static_cast<size_t>(c) * h * w + static_cast<size_t>(y) * w + x]; }
    size_t pixels() const { return static_cast<size_t>(h) * w; }
    bool same_shape(const Image& o) const { return h == o.h && w == o.w; }
};

/// Semantic segmentation labels, one per pixel.
enum class SegClass : uint8_t {
    background = 0,
    skin = 1,
    hair = 2,
    eyes = 3,
    brows = 4,
    mouth = 5,
    glasses = 6,
    beard = 7,
};
inline constexpr int kNumSegClasses = 8;

struct SegMap {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> labels;

    SegMap() = default;
    SegMap(int h_, int w_, uint8_t fill = 0) : h(h_), w(w_), labels(static_cast<size_t>(h_) * w_, fill) {}

    uint8_t& at(int y, int x) { return labels[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return labels[static_cast<size_t>(y) * w + x]; }
    size_t pixels() const { return labels.size(); }
};

/// Deterministic RNG stream. All randomness in the project flows through
/// seeded instances of this; std::random_device is never used.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed), seed_(seed) {}

    real uniform(real lo = 0.0, real hi = 1.0) {
        // uniform_real_distribution is implementation-defined; roll our own
        // so streams are identical across standard libraries.
        const uint64_t r = gen_();
        const real u = static_cast<real>(r >> 11) * (1.0 / 9007199254740992.0);  // 53-bit
        return lo + (hi - lo) * u;
    }

    real gaussian(real mean = 0.0, real stddev = 1.0) {
        // Box-Muller, cached second value.
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        real u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const real mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(6.283185307179586 * u2);
        has_spare_ = true;
        return mean + stddev * mag * std::cos(6.283185307179586 * u2);
    }

    /// Uniform integer in [0, n).
    uint64_t index(uint64_t n) {
        // rejection sampling, unbiased
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t r;
        do { r = gen_(); } while (r >= limit);
        return r % n;
    }

    uint64_t raw() { return gen_(); }

    /// Derive an independent child stream (stable split, independent of
    /// how much the parent has been consumed).
    Rng split(uint64_t tag) const {
        uint64_t s = seed_ ^ (0x9e3779b97f4a7c15ull * (tag + 1));
        s ^= s >> 30;
        s *= 0xbf58476d1ce4e5b9ull;
        s ^= s >> 27;
        return Rng(s);
    }

private:
    std::mt19937_64 gen_;
    uint64_t seed_ = 0;
    bool has_spare_ = false;
    real spare_ = 0.0;
};

/// FNV-1a 64-bit hash, used for schema/content fingerprints.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const uint8_t*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}
inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(s.data(), s.size(), h);
}

struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ArgumentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace avafit
