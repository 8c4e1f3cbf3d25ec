#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace atd {

inline constexpr const char* kVersion = "0.1.0";

using NodeId = std::int32_t;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Sentinel action id for the STOP action (never a valid graph node).
inline constexpr NodeId kStopAction = -1;

inline constexpr double kPi = 3.14159265358979323846;

// ---------------------------------------------------------------------------
// errors

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

template <class... Args>
[[noreturn]] inline void fail(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    throw std::runtime_error(os.str());
}

template <class... Args>
inline void require(bool cond, Args&&... args) {
    if (!cond) fail(std::forward<Args>(args)...);
}

// ---------------------------------------------------------------------------
// seeding / rng
//
// All randomness flows through Rng, which layers hand-rolled uniform/gaussian
// transforms over std::mt19937_64 so sampled values are identical regardless
// of the standard library's distribution implementations.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives an independent stream seed from a master seed and a tag string.
inline std::uint64_t derive_seed(std::uint64_t master, const std::string& tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(master ^ h);
}

inline std::uint64_t derive_seed(std::uint64_t master, const std::string& tag, std::uint64_t index) {
    return splitmix64(derive_seed(master, tag) ^ splitmix64(index));
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] inclusive, unbiased.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        require(lo <= hi, "uniform_int: empty range");
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<std::int64_t>(eng_());  // full 64-bit range
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % span;
        std::uint64_t v = eng_();
        while (v >= limit) v = eng_();
        return lo + static_cast<std::int64_t>(v % span);
    }

    /// Standard normal via Box-Muller (no cached spare, call-sequence stable).
    double gaussian() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

  private:
    std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// misc numeric helpers

/// Wraps an angle into [-pi, pi).
inline double wrap_angle(double a) {
    a = std::fmod(a + kPi, 2.0 * kPi);
    if (a < 0.0) a += 2.0 * kPi;
    return a - kPi;
}

// one-shot warnings (e.g. degenerate cosine rows), deduplicated per process
inline void warn_once(const std::string& key, const std::string& msg) {
    static std::mutex mu;
    static std::set<std::string> seen;
    std::lock_guard<std::mutex> lock(mu);
    if (seen.insert(key).second) {
        std::fprintf(stderr, "[atd] warning: %s\n", msg.c_str());
    }
}

}  // namespace atd
