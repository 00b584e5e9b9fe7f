// Shared plumbing: error types, logging, small string/hash helpers.
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace rgm {

// Bad user input, malformed files, shape mismatches. CLI maps this to exit 1.
struct input_error : std::runtime_error {
    explicit input_error(const std::string& what) : std::runtime_error(what) {}
};

// Unrecoverable runtime condition (e.g. training divergence). CLI maps this to exit 2.
struct runtime_abort : std::runtime_error {
    explicit runtime_abort(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

template <typename... Args>
std::string str(Args&&... args) {
    std::ostringstream oss;
    (oss << ... << args);
    return oss.str();
}

}  // namespace detail

template <typename... Args>
[[noreturn]] void fail_input(Args&&... args) {
    throw input_error(detail::str(std::forward<Args>(args)...));
}

#define RGM_REQUIRE(cond, ...)                \
    do {                                      \
        if (!(cond)) ::rgm::fail_input(__VA_ARGS__); \
    } while (0)

// FNV-1a, used for config checksums.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

namespace log {

enum class Level { quiet = 0, info = 1, debug = 2 };

inline Level level() {
    static Level lvl = [] {
        const char* env = std::getenv("RGM_LOG");
        if (!env) return Level::info;
        std::string_view v(env);
        if (v == "quiet") return Level::quiet;
        if (v == "debug") return Level::debug;
        return Level::info;
    }();
    return lvl;
}

template <typename... Args>
void info(Args&&... args) {
    if (level() >= Level::info)
        std::fprintf(stderr, "%s\n", detail::str(std::forward<Args>(args)...).c_str());
}

template <typename... Args>
void debug(Args&&... args) {
    if (level() >= Level::debug)
        std::fprintf(stderr, "[debug] %s\n", detail::str(std::forward<Args>(args)...).c_str());
}

}  // namespace log
}  // namespace rgm
