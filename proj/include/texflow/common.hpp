// ============================================================================
// common.hpp - error types, seeded RNG, little-endian binary I/O helpers
// ============================================================================

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

namespace texflow {

// ----------------------------------------------------------------------------
// Errors
// ----------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParameterError : Error {
    using Error::Error;
};

// Malformed file contents; carries the byte offset where parsing failed.
struct FormatError : Error {
    std::size_t offset = 0;
    FormatError(const std::string& msg, std::size_t at)
        : Error(msg + " (byte offset " + std::to_string(at) + ")"), offset(at) {}
};

struct NumericError : Error {
    using Error::Error;
};

struct TrainingDivergedError : Error {
    int epoch = -1;
    TrainingDivergedError(const std::string& msg, int at_epoch)
        : Error(msg + " (epoch " + std::to_string(at_epoch) + ")"), epoch(at_epoch) {}
};

struct ConfigError : Error {
    using Error::Error;
};

struct DependencyError : Error {
    using Error::Error;
};

struct CheckFailedError : Error {
    using Error::Error;
};

// ----------------------------------------------------------------------------
// Seeded RNG
//
// splitmix64 core with hand-rolled uniform/normal draws so that every stream
// is a pure function of its seed, independent of the standard library's
// distribution implementations.
// ----------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi], inclusive. Rejection sampling keeps the
    // draw unbiased for any range.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = std::uint64_t(hi - lo) + 1;
        if (span == 0) return std::int64_t(next_u64());  // full 64-bit range
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t draw;
        do {
            draw = next_u64();
        } while (draw >= limit);
        return lo + std::int64_t(draw % span);
    }

    // Standard normal via Box-Muller; consumes two uniforms per call.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = std::size_t(uniform_int(0, std::int64_t(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::vector<std::uint32_t> permutation(std::size_t n) {
        std::vector<std::uint32_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = std::uint32_t(i);
        shuffle(p);
        return p;
    }

private:
    std::uint64_t state_;
};

// FNV-1a, used to derive per-stage seeds from the master seed so stages can
// be re-run in isolation with reproducible streams.
inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::uint64_t stage_seed(std::uint64_t master, const std::string& stage) {
    std::uint64_t h = fnv1a64(stage);
    h ^= master + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    return h;
}

// ----------------------------------------------------------------------------
// Little-endian binary I/O
// ----------------------------------------------------------------------------

namespace detail {

inline bool host_is_little_endian() {
    const std::uint16_t probe = 1;
    return *reinterpret_cast<const unsigned char*>(&probe) == 1;
}

}  // namespace detail

template <typename T>
void write_le(std::ostream& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    if (!detail::host_is_little_endian()) {
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i)
            std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    }
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, std::size_t& offset, const std::string& what) {
    unsigned char buf[sizeof(T)];
    in.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (std::size_t(in.gcount()) != sizeof(T))
        throw FormatError("truncated file while reading " + what, offset);
    if (!detail::host_is_little_endian()) {
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i)
            std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    }
    T value;
    std::memcpy(&value, buf, sizeof(T));
    offset += sizeof(T);
    return value;
}

inline void expect_magic(std::istream& in, std::size_t& offset, const char magic[4],
                         const std::string& what) {
    char buf[4];
    in.read(buf, 4);
    if (in.gcount() != 4 || std::memcmp(buf, magic, 4) != 0)
        throw FormatError("bad magic for " + what + " (expected \"" +
                              std::string(magic, 4) + "\")",
                          offset);
    offset += 4;
}

// Full-precision float formatting for CSV artifacts; shortest round-trip
// representation keeps reports byte-stable across runs.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    // Trim to the shortest representation that still round-trips.
    for (int prec = 1; prec < 17; ++prec) {
        char probe[40];
        std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
        if (std::strtod(probe, nullptr) == v) return probe;
    }
    return buf;
}

// ----------------------------------------------------------------------------
// parallel_for: index-sliced worker loop. Each index writes only its own
// output slot, so results are identical for any worker count.
// ----------------------------------------------------------------------------

inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(std::size_t(threads), n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace texflow
