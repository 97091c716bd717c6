#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ntkuq {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IndexList = std::vector<Index>;

enum class ErrorCode {
    invalid_argument,
    dimension_mismatch,
    non_finite,
    non_psd,
    ill_conditioned,
    divergence,
    format,
    io,
};

inline const char *to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::dimension_mismatch: return "dimension_mismatch";
        case ErrorCode::non_finite: return "non_finite";
        case ErrorCode::non_psd: return "non_psd";
        case ErrorCode::ill_conditioned: return "ill_conditioned";
        case ErrorCode::divergence: return "divergence";
        case ErrorCode::format: return "format";
        case ErrorCode::io: return "io";
    }
    return "unknown";
}

// All library failures are reported through this type; code() is what the CLI
// puts in its machine-readable error record.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string &message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string &message) {
    if (!condition) { throw Error(code, message); }
}

inline bool all_finite(const Matrix &m) { return m.allFinite(); }

inline IndexList iota_ids(Index begin, Index end) {
    IndexList ids;
    ids.reserve(static_cast<std::size_t>(end > begin ? end - begin : 0));
    for (Index i = begin; i < end; ++i) { ids.push_back(i); }
    return ids;
}

// FNV-1a, used for config fingerprints and seed derivation.
inline std::uint64_t fnv1a64(const std::string &bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// splitmix64 finalizer; maps (seed, stream) pairs to well-separated seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace ntkuq
