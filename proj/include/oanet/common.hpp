#pragma once

// Shared primitives: error taxonomy, geometry, numeric formatting, hashing.

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

namespace oanet {

inline constexpr std::string_view kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Errors. Everything thrown by the library derives from Error so the CLI can
// map failures to a stable exit code.

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid configuration or schema (caught before any work starts).
class ValidationError : public Error {
public:
    using Error::Error;
};

// Structurally invalid runtime input: dimension mismatch, bad file payload.
class InputError : public Error {
public:
    using Error::Error;
};

// Corpus rendering cannot honour the requested geometry.
class LayoutError : public Error {
public:
    using Error::Error;
};

// A split or fold would leave some class empty.
class StratificationError : public Error {
public:
    using Error::Error;
};

// Degenerate training input (single-class labels, too few samples).
class TrainingError : public Error {
public:
    using Error::Error;
};

// Optimisation produced a non-finite loss; the message names the epoch.
class DivergenceError : public Error {
public:
    using Error::Error;
};

// Persisted artifact is unreadable, has a foreign format version, or fails
// its integrity digest.
class LoadError : public Error {
public:
    using Error::Error;
};

inline std::string strfmt(const char* fmt, ...) {
    va_list args;
    va_start(args, fmt);
    char buf[512];
    std::vsnprintf(buf, sizeof(buf), fmt, args);
    va_end(args);
    return std::string(buf);
}

// ---------------------------------------------------------------------------
// Geometry.

struct Rect {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;

    bool contains(int px, int py) const {
        return px >= x && px < x + w && py >= y && py < y + h;
    }
    bool fits_in(int width, int height) const {
        return x >= 0 && y >= 0 && w > 0 && h > 0 && x + w <= width && y + h <= height;
    }
    long area() const { return static_cast<long>(w) * h; }
};

// ---------------------------------------------------------------------------
// Numeric formatting. All floating point values that land in CSV files go
// through g17() so that a value survives a write/read round trip exactly.

inline std::string g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

inline std::string fixed_decimals(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return std::string(buf);
}

// ---------------------------------------------------------------------------
// FNV-1a 64-bit. Used for config hashes in report file names and for model
// bundle integrity digests.

inline uint64_t fnv1a64(std::string_view data, uint64_t seed = 0xcbf29ce484222325ull) {
    uint64_t h = seed;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace oanet
