// Shared basics: shapes, error types, mode switches.
#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace emseg {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

enum class Mode { train, eval };

// Error hierarchy. The three category bases map onto CLI exit codes:
// usage/config -> 2, data/format -> 3, numerical -> 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct UsageError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

struct ConfigError : UsageError {
    using UsageError::UsageError;
};

struct ShapeError : DataError {
    using DataError::DataError;
};
struct InvalidShape : ShapeError {
    using ShapeError::ShapeError;
};
struct FormatError : DataError {
    using DataError::DataError;
};
struct ManifestError : DataError {
    using DataError::DataError;
};
struct MaskError : DataError {
    using DataError::DataError;
};
struct StitchError : DataError {
    using DataError::DataError;
};
struct LabelError : DataError {
    using DataError::DataError;
};

struct NumericalError : NumericError {
    using NumericError::NumericError;
};
struct DegenerateBatch : NumericError {
    using NumericError::NumericError;
};
struct DegenerateCluster : NumericError {
    using NumericError::NumericError;
};
struct DegenerateBase : NumericError {
    using NumericError::NumericError;
};
struct MetricError : NumericError {
    using NumericError::NumericError;
};

inline void require_shape(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

}  // namespace emseg
