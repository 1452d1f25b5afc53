#pragma once
#include <stdexcept>
#include <string>

namespace splitgan {

// Bad architecture/fleet/scenario description or shape mismatch.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

// API misuse (missing cache, consumed context, bad call order).
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

// Split-protocol violation (missing/duplicate client message, stale cache).
struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& m) : std::runtime_error(m) {}
};

// A documented invariant does not hold (invalid cut, weights off the simplex).
struct InvariantError : std::runtime_error {
    explicit InvariantError(const std::string& m) : std::runtime_error(m) {}
};

// Dataset problems: parse failures, label shortfalls.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace splitgan
