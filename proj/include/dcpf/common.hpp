#pragma once

#include <charconv>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>

namespace dcpf {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct schema_error : error { using error::error; };
struct parse_error : error { using error::error; };
struct range_error : error { using error::error; };
struct split_error : error { using error::error; };
struct domain_error : error { using error::error; };
struct support_error : error { using error::error; };
struct inconsistency_error : error { using error::error; };
struct init_error : error { using error::error; };
struct budget_error : error { using error::error; };
struct io_error : error { using error::error; };
struct metric_error : error { using error::error; };

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives an independent stream seed from a master seed and up to three
/// stream indices. Derivation is positional, not sequence-dependent, so
/// streams may be created in any order (or in parallel).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t h = splitmix64(master ^ 0x8c95d0a1682f451dULL);
    h = splitmix64(h ^ splitmix64(a));
    h = splitmix64(h ^ splitmix64(b ^ 0x5851f42d4c957f2dULL));
    h = splitmix64(h ^ splitmix64(c ^ 0x14057b7ef767814fULL));
    return h;
}

inline Rng make_rng(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0,
                    std::uint64_t c = 0) {
    return Rng(derive_seed(master, a, b, c));
}

/// Shortest decimal form that round-trips a double exactly.
inline std::string format_double(double v) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

enum class LogLevel { quiet = 0, info = 1, debug = 2 };

/// Verbosity from the DCPF_LOG environment variable {quiet, info, debug}.
inline LogLevel log_level() {
    static const LogLevel level = [] {
        const char* env = std::getenv("DCPF_LOG");
        if (env == nullptr) return LogLevel::info;
        std::string s(env);
        if (s == "quiet") return LogLevel::quiet;
        if (s == "debug") return LogLevel::debug;
        return LogLevel::info;
    }();
    return level;
}

inline void log_info(const char* fmt, ...) __attribute__((format(printf, 1, 2)));
inline void log_info(const char* fmt, ...) {
    if (log_level() < LogLevel::info) return;
    std::fputs("[dcpf] ", stderr);
    va_list args;
    va_start(args, fmt);
    std::vfprintf(stderr, fmt, args);
    va_end(args);
    std::fputc('\n', stderr);
}

inline void log_debug(const char* fmt, ...) __attribute__((format(printf, 1, 2)));
inline void log_debug(const char* fmt, ...) {
    if (log_level() < LogLevel::debug) return;
    std::fputs("[dcpf:debug] ", stderr);
    va_list args;
    va_start(args, fmt);
    std::vfprintf(stderr, fmt, args);
    va_end(args);
    std::fputc('\n', stderr);
}

}  // namespace dcpf
