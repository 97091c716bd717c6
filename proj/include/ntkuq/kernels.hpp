#pragma once

// Depth-L kernel K and neural tangent kernel Theta of an erf MLP, built with
// the layer-to-layer forward recursion and closed-form Gaussian expectations.

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <numbers>
#include <ostream>
#include <string>
#include <utility>

#include "ntkuq/common.hpp"
#include "ntkuq/parallel.hpp"

namespace ntkuq {

/// Rows are examples, columns are the n_0 input features.
class InputSet {
public:
    InputSet() = default;

    explicit InputSet(Matrix points) : points_(std::move(points)) {
        require(points_.cols() >= 1 || points_.rows() == 0, ErrorCode::dimension_mismatch,
                "input set needs at least one feature column");
        require(points_.allFinite(), ErrorCode::non_finite, "input set contains NaN or Inf");
    }

    const Matrix &points() const noexcept { return points_; }
    Index count() const noexcept { return points_.rows(); }
    Index dim() const noexcept { return points_.cols(); }

    InputSet subset(const IndexList &ids) const {
        Matrix out(static_cast<Index>(ids.size()), points_.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            require(ids[i] >= 0 && ids[i] < count(), ErrorCode::invalid_argument, "input id out of range");
            out.row(static_cast<Index>(i)) = points_.row(ids[i]);
        }
        return InputSet(std::move(out));
    }

private:
    Matrix points_;
};

struct ArchitectureConfig {
    int depth = 3;       // number of weight layers L
    int width = 64;      // hidden width n; finite-width networks only
    int n_out = 1;       // n_L
    double lambda_b = 1.0;
    double lambda_W = 1.0;

    void validate() const {
        require(depth >= 1, ErrorCode::invalid_argument, "depth must be >= 1");
        require(n_out >= 1, ErrorCode::invalid_argument, "output dimension must be >= 1");
        require(width >= 1, ErrorCode::invalid_argument, "hidden width must be >= 1");
        require(lambda_b >= 0.0 && std::isfinite(lambda_b), ErrorCode::invalid_argument, "lambda_b must be >= 0");
        require(lambda_W > 0.0 && std::isfinite(lambda_W), ErrorCode::invalid_argument, "lambda_W must be > 0");
    }
};

// Bias learning scale of weight layer `layer` (1-based). Layer 1 enters Theta^(1)
// with lambda_b; the recursion step from layer l to l+1 adds lambda_b / l, so
// layer m >= 2 carries lambda_b / (m - 1). The finite-width trainer uses the
// same scales so its empirical NTK matches the analytic one.
inline double bias_learning_scale(const ArchitectureConfig &arch, int layer) {
    return layer <= 1 ? arch.lambda_b : arch.lambda_b / static_cast<double>(layer - 1);
}

/// Weight learning scale of layer `layer`: lambda_W over that layer's fan-in.
inline double weight_learning_scale(const ArchitectureConfig &arch, Index fan_in) {
    return arch.lambda_W / static_cast<double>(fan_in);
}

inline constexpr double kArcsineTolerance = 1e-9;

/// <erf(u_a) erf(u_b)> for (u_a, u_b) ~ N(0, [[k_aa, k_ab], [k_ab, k_bb]]).
inline double erf_pair_expectation(double k_aa, double k_ab, double k_bb) {
    require(k_aa >= 0.0 && k_bb >= 0.0, ErrorCode::non_psd, "negative variance in erf pair expectation");
    require(std::isfinite(k_aa) && std::isfinite(k_ab) && std::isfinite(k_bb), ErrorCode::non_finite,
            "non-finite covariance in erf pair expectation");
    double arg = 2.0 * k_ab / std::sqrt((1.0 + 2.0 * k_aa) * (1.0 + 2.0 * k_bb));
    if (std::abs(arg) > 1.0) {
        require(std::abs(arg) <= 1.0 + kArcsineTolerance, ErrorCode::non_psd,
                "covariance is not positive semidefinite (arcsine argument " + std::to_string(arg) + ")");
        arg = arg > 0.0 ? 1.0 : -1.0;
    }
    return (2.0 / std::numbers::pi) * std::asin(arg);
}

/// <erf'(u_a) erf'(u_b)> under the same Gaussian.
inline double erf_deriv_pair_expectation(double k_aa, double k_ab, double k_bb) {
    require(k_aa >= 0.0 && k_bb >= 0.0, ErrorCode::non_psd, "negative variance in erf' pair expectation");
    const double disc = (1.0 + 2.0 * k_aa) * (1.0 + 2.0 * k_bb) - 4.0 * k_ab * k_ab;
    require(disc > 0.0 && std::isfinite(disc), ErrorCode::non_psd,
            "covariance is not positive semidefinite (erf' discriminant " + std::to_string(disc) + ")");
    return (4.0 / std::numbers::pi) / std::sqrt(disc);
}

/// Layer-L kernel and NTK over one joined input set. Immutable after
/// construction; both matrices are symmetrized on the way in.
class KernelPair {
public:
    KernelPair(Matrix kernel, Matrix ntk, int layer, IndexList point_ids = {})
        : K_(std::move(kernel)), Theta_(std::move(ntk)), layer_(layer), ids_(std::move(point_ids)) {
        require(K_.rows() == K_.cols() && Theta_.rows() == Theta_.cols() && K_.rows() == Theta_.rows(),
                ErrorCode::dimension_mismatch, "kernel and NTK must be square and of equal size");
        require(K_.allFinite() && Theta_.allFinite(), ErrorCode::non_finite, "kernel pair has non-finite entries");
        if (ids_.empty()) { ids_ = iota_ids(0, K_.rows()); }
        require(static_cast<Index>(ids_.size()) == K_.rows(), ErrorCode::dimension_mismatch,
                "point id list does not match kernel size");
        const Matrix k_sym = 0.5 * (K_ + K_.transpose());
        const Matrix t_sym = 0.5 * (Theta_ + Theta_.transpose());
        K_ = k_sym;
        Theta_ = t_sym;
        for (Index i = 0; i < K_.rows(); ++i) {
            require(K_(i, i) >= 0.0, ErrorCode::non_psd, "kernel diagonal must be nonnegative");
        }
    }

    const Matrix &K() const noexcept { return K_; }
    const Matrix &Theta() const noexcept { return Theta_; }
    int layer() const noexcept { return layer_; }
    const IndexList &point_ids() const noexcept { return ids_; }
    Index size() const noexcept { return K_.rows(); }

    Matrix K_block(const IndexList &rows, const IndexList &cols) const { return slice(K_, rows, cols); }
    Matrix Theta_block(const IndexList &rows, const IndexList &cols) const { return slice(Theta_, rows, cols); }

private:
    Matrix slice(const Matrix &m, const IndexList &rows, const IndexList &cols) const {
        for (Index r : rows) { require(r >= 0 && r < size(), ErrorCode::invalid_argument, "row id out of range"); }
        for (Index c : cols) { require(c >= 0 && c < size(), ErrorCode::invalid_argument, "column id out of range"); }
        return m(rows, cols);
    }

    Matrix K_;
    Matrix Theta_;
    int layer_ = 1;
    IndexList ids_;
};

namespace detail {

inline std::pair<Matrix, Matrix> first_layer(const InputSet &inputs, const ArchitectureConfig &arch) {
    const Matrix &x = inputs.points();
    Matrix K = (x * x.transpose()) / static_cast<double>(inputs.dim());
    Matrix Theta = Matrix::Constant(K.rows(), K.cols(), arch.lambda_b) + arch.lambda_W * K;
    return {std::move(K), std::move(Theta)};
}

// One recursion step l -> l+1, entries of the upper triangle spread over workers.
inline void recursion_step(Matrix &K, Matrix &Theta, int l, const ArchitectureConfig &arch, unsigned workers) {
    const Index n = K.rows();
    Matrix K_next(n, n);
    Matrix T_next(n, n);
    const double bias = arch.lambda_b / static_cast<double>(l);
    parallel_for(
        n,
        [&](Index a) {
            const double kaa = K(a, a);
            for (Index b = a; b < n; ++b) {
                const double kab = K(a, b);
                const double kbb = K(b, b);
                const double ss = erf_pair_expectation(kaa, kab, kbb);
                const double dd = erf_deriv_pair_expectation(kaa, kab, kbb);
                K_next(a, b) = ss;
                T_next(a, b) = bias + arch.lambda_W * ss + dd * Theta(a, b);
            }
        },
        workers);
    for (Index a = 0; a < n; ++a) {
        for (Index b = a + 1; b < n; ++b) {
            K_next(b, a) = K_next(a, b);
            T_next(b, a) = T_next(a, b);
        }
    }
    K = std::move(K_next);
    Theta = std::move(T_next);
}

}  // namespace detail

/// Kernel pairs for every layer 1..L (index 0 holds layer 1).
inline std::vector<KernelPair> build_kernel_layers(const InputSet &inputs, const ArchitectureConfig &arch,
                                                   unsigned workers = 0) {
    arch.validate();
    require(inputs.dim() >= 1, ErrorCode::dimension_mismatch, "inputs need at least one feature");
    auto [K, Theta] = detail::first_layer(inputs, arch);
    std::vector<KernelPair> layers;
    layers.emplace_back(K, Theta, 1);
    for (int l = 1; l < arch.depth; ++l) {
        detail::recursion_step(K, Theta, l, arch, workers);
        layers.emplace_back(K, Theta, l + 1);
    }
    return layers;
}

inline KernelPair build_kernel_pair(const InputSet &inputs, const ArchitectureConfig &arch, unsigned workers = 0) {
    arch.validate();
    require(inputs.dim() >= 1, ErrorCode::dimension_mismatch, "inputs need at least one feature");
    auto [K, Theta] = detail::first_layer(inputs, arch);
    for (int l = 1; l < arch.depth; ++l) { detail::recursion_step(K, Theta, l, arch, workers); }
    return KernelPair(std::move(K), std::move(Theta), arch.depth);
}

// Little-endian encoding, independent of host byte order.
namespace detail {

inline void put_u64(std::ostream &os, std::uint64_t v) {
    std::array<char, 8> buf{};
    for (int i = 0; i < 8; ++i) { buf[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFFu); }
    os.write(buf.data(), 8);
}

inline std::uint64_t get_u64(std::istream &is) {
    std::array<unsigned char, 8> buf{};
    is.read(reinterpret_cast<char *>(buf.data()), 8);
    require(is.gcount() == 8, ErrorCode::format, "truncated binary stream");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) { v |= static_cast<std::uint64_t>(buf[static_cast<std::size_t>(i)]) << (8 * i); }
    return v;
}

inline void put_f64(std::ostream &os, double x) { put_u64(os, std::bit_cast<std::uint64_t>(x)); }
inline double get_f64(std::istream &is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace detail

/// Writes a row-major square matrix block: u64 N, then N*N f64 (both little-endian).
inline void write_square_matrix(std::ostream &os, const Matrix &m, bool with_header = true) {
    require(m.rows() == m.cols(), ErrorCode::dimension_mismatch, "matrix must be square");
    if (with_header) { detail::put_u64(os, static_cast<std::uint64_t>(m.rows())); }
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) { detail::put_f64(os, m(i, j)); }
    }
}

inline Matrix read_square_matrix(std::istream &is, Index n) {
    Matrix m(n, n);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < n; ++j) { m(i, j) = detail::get_f64(is); }
    }
    return m;
}

/// Kernel file: u64 N, N*N doubles of K, N*N doubles of Theta.
inline void write_kernel_binary(std::ostream &os, const KernelPair &kp) {
    write_square_matrix(os, kp.K(), true);
    write_square_matrix(os, kp.Theta(), false);
    require(static_cast<bool>(os), ErrorCode::io, "failed writing kernel file");
}

inline KernelPair read_kernel_binary(std::istream &is, int layer = 0) {
    const std::uint64_t n = detail::get_u64(is);
    require(n < (1ULL << 20), ErrorCode::format, "kernel file declares an implausible size");
    Matrix K = read_square_matrix(is, static_cast<Index>(n));
    Matrix Theta = read_square_matrix(is, static_cast<Index>(n));
    return KernelPair(std::move(K), std::move(Theta), layer);
}

}  // namespace ntkuq
