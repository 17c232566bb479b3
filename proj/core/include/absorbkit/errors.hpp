#pragma once

#include <stdexcept>
#include <string>

namespace absorb {

// Common base so the CLI can map failures to exit codes in one place.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };        // dimension mismatch
struct ConfigError : Error { using Error::Error; };       // bad settings, unknown keys/groups
struct DataError : Error { using Error::Error; };         // empty or too-short corpus
struct IndexError : Error { using Error::Error; };        // token id out of range
struct LifecycleError : Error { using Error::Error; };    // tape reused or stale
struct InvalidRowError : Error { using Error::Error; };   // a mask removed every position in a row
struct IoError : Error { using Error::Error; };           // file read/write failure
struct NumericError : Error { using Error::Error; };      // NaN loss, degenerate denominator

}  // namespace absorb
