#pragma once

#include <stdexcept>
#include <string>

namespace sagekeep {

// Malformed inputs: shape mismatches, bad files, out-of-range parameters.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric trouble: non-finite values, failed convergence gates.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sagekeep
