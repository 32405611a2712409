#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace psm {

/// Base of every error raised by the library. The CLI maps ValidationError to
/// exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class OutOfRangeError : public Error {
public:
    OutOfRangeError(const std::string& what, int row, int col)
        : Error(what), row_(row), col_(col) {}
    int row() const { return row_; }
    int col() const { return col_; }

private:
    int row_;
    int col_;
};

class NoOccupancy : public Error {
public:
    using Error::Error;
};

class EmptyOverlap : public Error {
public:
    using Error::Error;
};

/// Deterministic random source. The generator and the transforms on top of it
/// are fixed here rather than taken from <random> distributions, whose output
/// is implementation-defined, so that seeded runs are byte-identical across
/// standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        // splitmix64
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ValidationError("Rng::below: empty range");
        // Lemire's multiply-shift with rejection.
        while (true) {
            const unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
            const auto low = static_cast<std::uint64_t>(m);
            if (low >= n || low >= (-n) % n) return static_cast<std::uint64_t>(m >> 64);
        }
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Independent child stream, e.g. one per patient or per tree.
    Rng fork(std::uint64_t stream) {
        Rng r(next_u64() ^ (stream * 0xD1B54A32D192ED03ULL));
        r.next_u64();
        return r;
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Seed derivation that does not consume state: mix(seed, k) for the k-th
/// independent job under a master seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t k) {
    Rng r(seed ^ (0x632BE59BD9B4E019ULL * (k + 1)));
    return r.next_u64();
}

/// Round to the nearest millisecond; every timestamp the library emits is
/// representable this way so that 3-decimal files round-trip exactly.
inline double round_ms(double t) { return std::round(t * 1000.0) / 1000.0; }

}  // namespace psm
