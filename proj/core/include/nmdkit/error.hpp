#pragma once

#include <stdexcept>
#include <string>

namespace nmdkit {

// File/format problems: bad magic, truncation, malformed datasets.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required: diverged training,
// NaN statistics, invalid tensor contents.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace nmdkit
