#pragma once

// Shared error types, number formatting and hashing used across the library.

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace clsim {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input file (scenario, config, checkpoint, CSV).
struct ParseError : Error {
    using Error::Error;
};

// Structurally valid input violating a domain invariant.
struct ValidationError : Error {
    using Error::Error;
};

// API misuse: a precondition between modules was broken.
struct ContractError : Error {
    using Error::Error;
};

// Bad CLI argument or config key/value.
struct ConfigError : Error {
    using Error::Error;
};

// Filesystem failure.
struct IoError : Error {
    using Error::Error;
};

// Non-finite state produced by the simulator.
struct SimulationError : Error {
    using Error::Error;
};

// Divergent (non-finite) loss during optimization.
struct TrainingError : Error {
    using Error::Error;
};

// Canonical number formatting: 9 significant digits, shortest form.
// Used by every on-disk text format so identical values always
// serialize to identical bytes.
inline std::string fmt_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
}

// FNV-1a 64-bit, used for config digests and run ids.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(s.data(), s.size());
}

inline std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace clsim
