#pragma once

// Dataset containers and loaders: IDX image/label pairs, flattened event
// vectors with energy labels, and seeded synthetic regression tasks.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "ntkuq/common.hpp"
#include "ntkuq/finite_width.hpp"
#include "ntkuq/kernels.hpp"

namespace ntkuq {

/// Affine label map [source_min, source_max] -> [target_lo, target_hi].
struct LabelNormalization {
    bool affine = false;
    double source_min = 0.0;
    double source_max = 1.0;
    double target_lo = 0.1;
    double target_hi = 1.0;

    double forward(double v) const {
        if (!affine) { return v; }
        return target_lo + (target_hi - target_lo) * (v - source_min) / (source_max - source_min);
    }

    double inverse(double l) const {
        if (!affine) { return l; }
        return source_min + (l - target_lo) / (target_hi - target_lo) * (source_max - source_min);
    }
};

struct Dataset {
    InputSet inputs;
    Matrix labels;
    std::string name;
    LabelNormalization normalization;
    bool one_hot = false;

    Index size() const noexcept { return inputs.count(); }

    void validate() const {
        require(labels.rows() == inputs.count(), ErrorCode::dimension_mismatch, "label rows must match input rows");
        require(labels.allFinite(), ErrorCode::non_finite, "labels must be finite");
        if (one_hot) {
            for (Index i = 0; i < labels.rows(); ++i) {
                double sum = 0.0;
                for (Index j = 0; j < labels.cols(); ++j) {
                    const double v = labels(i, j);
                    require(v == 0.0 || v == 1.0, ErrorCode::format, "one-hot labels must be 0 or 1");
                    sum += v;
                }
                require(sum == 1.0, ErrorCode::format, "one-hot label rows must sum to 1");
            }
        }
    }
};

namespace detail {

inline std::uint32_t read_be32(std::istream &is, const std::string &what) {
    std::array<unsigned char, 4> b{};
    is.read(reinterpret_cast<char *>(b.data()), 4);
    require(is.gcount() == 4, ErrorCode::format, "truncated header in " + what);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

inline void write_be32(std::ostream &os, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>((v >> 24) & 0xFF), static_cast<char>((v >> 16) & 0xFF),
                                static_cast<char>((v >> 8) & 0xFF), static_cast<char>(v & 0xFF)};
    os.write(b.data(), 4);
}

inline std::ifstream open_in(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path);
    return in;
}

inline std::ofstream open_out(const std::string &path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::io, "cannot create " + path);
    return out;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr Index kIdxClasses = 10;

/// Images flattened to rows*cols features scaled to [0, 1]; labels one-hot over 10 classes.
inline Dataset load_idx(const std::string &images_path, const std::string &labels_path) {
    auto img = detail::open_in(images_path);
    auto lab = detail::open_in(labels_path);
    require(detail::read_be32(img, images_path) == kIdxImageMagic, ErrorCode::format,
            "bad IDX image magic in " + images_path);
    const std::uint32_t count = detail::read_be32(img, images_path);
    const std::uint32_t rows = detail::read_be32(img, images_path);
    const std::uint32_t cols = detail::read_be32(img, images_path);
    require(detail::read_be32(lab, labels_path) == kIdxLabelMagic, ErrorCode::format,
            "bad IDX label magic in " + labels_path);
    const std::uint32_t label_count = detail::read_be32(lab, labels_path);
    require(count == label_count, ErrorCode::format, "IDX image and label counts differ");
    require(rows >= 1 && cols >= 1, ErrorCode::format, "IDX images must have nonzero extent");

    const Index dim = static_cast<Index>(rows) * static_cast<Index>(cols);
    Matrix x(static_cast<Index>(count), dim);
    std::vector<unsigned char> buf(static_cast<std::size_t>(dim));
    for (Index i = 0; i < x.rows(); ++i) {
        img.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(dim));
        require(img.gcount() == dim, ErrorCode::format, "truncated IDX image payload");
        for (Index j = 0; j < dim; ++j) { x(i, j) = static_cast<double>(buf[static_cast<std::size_t>(j)]) / 255.0; }
    }
    Matrix y = Matrix::Zero(static_cast<Index>(count), kIdxClasses);
    for (Index i = 0; i < y.rows(); ++i) {
        const int c = lab.get();
        require(c != std::char_traits<char>::eof(), ErrorCode::format, "truncated IDX label payload");
        require(c < kIdxClasses, ErrorCode::format, "IDX label outside 0..9");
        y(i, c) = 1.0;
    }
    Dataset ds;
    ds.inputs = InputSet(std::move(x));
    ds.labels = std::move(y);
    ds.name = "idx";
    ds.one_hot = true;
    return ds;
}

/// Inverse of load_idx for datasets whose pixels are multiples of 1/255.
inline void write_idx(const Dataset &ds, Index rows, Index cols, const std::string &images_path,
                      const std::string &labels_path) {
    require(rows * cols == ds.inputs.dim(), ErrorCode::dimension_mismatch, "image shape does not match input dim");
    require(ds.labels.cols() == kIdxClasses, ErrorCode::dimension_mismatch, "IDX labels need 10 one-hot columns");
    auto img = detail::open_out(images_path);
    detail::write_be32(img, kIdxImageMagic);
    detail::write_be32(img, static_cast<std::uint32_t>(ds.size()));
    detail::write_be32(img, static_cast<std::uint32_t>(rows));
    detail::write_be32(img, static_cast<std::uint32_t>(cols));
    for (Index i = 0; i < ds.size(); ++i) {
        for (Index j = 0; j < ds.inputs.dim(); ++j) {
            img.put(static_cast<char>(static_cast<unsigned char>(std::lround(ds.inputs.points()(i, j) * 255.0))));
        }
    }
    auto lab = detail::open_out(labels_path);
    detail::write_be32(lab, kIdxLabelMagic);
    detail::write_be32(lab, static_cast<std::uint32_t>(ds.size()));
    for (Index i = 0; i < ds.size(); ++i) {
        Index cls = 0;
        ds.labels.row(i).maxCoeff(&cls);
        lab.put(static_cast<char>(cls));
    }
    require(static_cast<bool>(img) && static_cast<bool>(lab), ErrorCode::io, "failed writing IDX files");
}

/// Event file: u64 count, u64 dim, then per event dim f64 inputs and one f64
/// energy (all little-endian). Energies are mapped affinely onto [0.1, 1.0].
inline Dataset load_event_vectors(const std::string &path, double energy_min, double energy_max) {
    require(energy_max > energy_min, ErrorCode::invalid_argument, "energy_max must exceed energy_min");
    auto in = detail::open_in(path);
    const std::uint64_t count = detail::get_u64(in);
    const std::uint64_t dim = detail::get_u64(in);
    require(dim >= 1 && dim < (1ULL << 24) && count < (1ULL << 32), ErrorCode::format, "implausible event header");
    LabelNormalization norm;
    norm.affine = true;
    norm.source_min = energy_min;
    norm.source_max = energy_max;
    Matrix x(static_cast<Index>(count), static_cast<Index>(dim));
    Matrix y(static_cast<Index>(count), 1);
    for (Index i = 0; i < x.rows(); ++i) {
        for (Index j = 0; j < x.cols(); ++j) { x(i, j) = detail::get_f64(in); }
        const double e = detail::get_f64(in);
        require(e >= energy_min && e <= energy_max, ErrorCode::invalid_argument,
                "event energy " + std::to_string(e) + " outside [energy_min, energy_max]");
        y(i, 0) = norm.forward(e);
    }
    Dataset ds;
    ds.inputs = InputSet(std::move(x));
    ds.labels = std::move(y);
    ds.name = "events";
    ds.normalization = norm;
    return ds;
}

inline void write_event_vectors(const std::string &path, const Matrix &inputs, const Vector &energies) {
    require(inputs.rows() == energies.size(), ErrorCode::dimension_mismatch, "one energy per event required");
    auto out = detail::open_out(path);
    detail::put_u64(out, static_cast<std::uint64_t>(inputs.rows()));
    detail::put_u64(out, static_cast<std::uint64_t>(inputs.cols()));
    for (Index i = 0; i < inputs.rows(); ++i) {
        for (Index j = 0; j < inputs.cols(); ++j) { detail::put_f64(out, inputs(i, j)); }
        detail::put_f64(out, energies(i));
    }
    require(static_cast<bool>(out), ErrorCode::io, "failed writing " + path);
}

enum class SyntheticKind { teacher_mlp, noisy_function };

inline SyntheticKind parse_synthetic_kind(const std::string &name) {
    if (name == "teacher_mlp" || name == "teacher") { return SyntheticKind::teacher_mlp; }
    if (name == "noisy_function" || name == "noisy") { return SyntheticKind::noisy_function; }
    throw Error(ErrorCode::invalid_argument, "unknown synthetic generator '" + name + "'");
}

inline const char *to_string(SyntheticKind k) {
    return k == SyntheticKind::teacher_mlp ? "teacher_mlp" : "noisy_function";
}

struct SyntheticSpec {
    SyntheticKind kind = SyntheticKind::teacher_mlp;
    Index n_points = 256;
    Index input_dim = 8;
    int n_out = 1;
    int teacher_depth = 3;
    int teacher_width = 64;
    double weight_scale = 1.0;  // multiplies every teacher weight
    double noise = 0.0;         // label noise standard deviation
};

/// Gaussian inputs; labels from a frozen random MLP (teacher_mlp) or
/// sin(2 w.x) along random directions (noisy_function), plus Gaussian noise.
inline Dataset make_synthetic(const SyntheticSpec &spec, std::uint64_t seed) {
    require(spec.n_points >= 1 && spec.input_dim >= 1 && spec.n_out >= 1, ErrorCode::invalid_argument,
            "synthetic task needs positive sizes");
    require(spec.noise >= 0.0, ErrorCode::invalid_argument, "noise must be >= 0");
    std::mt19937_64 rng(mix_seed(seed, 0));
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix x(spec.n_points, spec.input_dim);
    for (Index i = 0; i < x.rows(); ++i) {
        for (Index j = 0; j < x.cols(); ++j) { x(i, j) = normal(rng); }
    }
    Matrix y;
    if (spec.kind == SyntheticKind::teacher_mlp) {
        ArchitectureConfig teacher;
        teacher.depth = spec.teacher_depth;
        teacher.width = spec.teacher_width;
        teacher.n_out = spec.n_out;
        MlpState net = init_network(teacher, spec.input_dim, mix_seed(seed, 1));
        for (auto &w : net.weights) { w *= spec.weight_scale; }
        y = forward(net, x);
    } else {
        std::mt19937_64 dir_rng(mix_seed(seed, 1));
        std::normal_distribution<double> dir_normal(0.0, 1.0);
        Matrix w(spec.input_dim, spec.n_out);
        for (Index i = 0; i < w.rows(); ++i) {
            for (Index j = 0; j < w.cols(); ++j) { w(i, j) = dir_normal(dir_rng) / std::sqrt(static_cast<double>(spec.input_dim)); }
        }
        y = (2.0 * x * w).unaryExpr([](double v) { return std::sin(v); });
    }
    if (spec.noise > 0.0) {
        std::mt19937_64 noise_rng(mix_seed(seed, 2));
        std::normal_distribution<double> noise_normal(0.0, 1.0);
        for (Index i = 0; i < y.rows(); ++i) {
            for (Index j = 0; j < y.cols(); ++j) { y(i, j) += spec.noise * noise_normal(noise_rng); }
        }
    }
    Dataset ds;
    ds.inputs = InputSet(std::move(x));
    ds.labels = std::move(y);
    ds.name = to_string(spec.kind);
    return ds;
}

}  // namespace ntkuq
