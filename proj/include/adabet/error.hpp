#pragma once

#include <stdexcept>
#include <string>

namespace adabet {

/// Malformed or inconsistent input data (bad files, shape mismatches,
/// out-of-range parameters). The CLI maps this to exit code 2.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A structural invariant was violated after inputs were accepted.
/// The CLI maps this to exit code 3.
class InvariantError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

inline void require(bool ok, const std::string& what) {
    if (!ok) throw DataError(what);
}

}  // namespace adabet
