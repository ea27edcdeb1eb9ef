#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace lorafuse {

// Error taxonomy. CLI maps these onto stable exit codes.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct LookupError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CompatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Rng = std::mt19937;

// Truncated normal, resampling outside two standard deviations.
inline float trunc_normal(Rng& rng, float mean, float stddev) {
    std::normal_distribution<float> dist(mean, stddev);
    for (;;) {
        float v = dist(rng);
        if (std::abs(v - mean) <= 2.0f * stddev) return v;
    }
}

// FNV-1a over raw bytes; used to fingerprint frozen weights.
inline uint64_t fnv1a(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::vector<float>& v, uint64_t h = 0xcbf29ce484222325ull) {
    return v.empty() ? h : fnv1a(v.data(), v.size() * sizeof(float), h);
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace lorafuse
