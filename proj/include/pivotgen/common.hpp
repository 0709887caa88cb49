#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace pivotgen {

// Library errors carry a short machine-readable prefix in what().
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ParseError : public Error {
public:
    ParseError(int line, const std::string& msg)
        : Error("parse error at line " + std::to_string(line) + ": " + msg), line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

// Half-up rounding for ratio-to-count conversions (floor would give 0 on tiny meshes).
inline int round_half_up(double x) {
    return static_cast<int>(std::floor(x + 0.5));
}

// FNV-1a, used for stable train/test split assignment.
inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace pivotgen
