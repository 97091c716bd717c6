#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "ntkuq/data.hpp"

using namespace ntkuq;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string &name) {
    const fs::path dir = fs::temp_directory_path() / "ntkuq_test_data";
    fs::create_directories(dir);
    return dir / name;
}

void write_bytes(const fs::path &p, const std::vector<unsigned char> &bytes) {
    std::ofstream os(p, std::ios::binary);
    os.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> idx_images(std::uint32_t magic, std::uint32_t count, std::uint32_t rows,
                                      std::uint32_t cols, const std::vector<unsigned char> &pixels) {
    std::vector<unsigned char> b;
    for (std::uint32_t v : {magic, count, rows, cols}) {
        for (int s = 24; s >= 0; s -= 8) { b.push_back(static_cast<unsigned char>(v >> s)); }
    }
    b.insert(b.end(), pixels.begin(), pixels.end());
    return b;
}

std::vector<unsigned char> idx_labels(std::uint32_t count, const std::vector<unsigned char> &labels) {
    std::vector<unsigned char> b;
    for (std::uint32_t v : {0x00000801u, count}) {
        for (int s = 24; s >= 0; s -= 8) { b.push_back(static_cast<unsigned char>(v >> s)); }
    }
    b.insert(b.end(), labels.begin(), labels.end());
    return b;
}

}  // namespace

TEST(Idx, CraftedSingleImage) {
    write_bytes(scratch("one.img"), idx_images(0x803, 1, 2, 2, {0, 255, 0, 255}));
    write_bytes(scratch("one.lab"), idx_labels(1, {3}));
    const auto ds = load_idx(scratch("one.img").string(), scratch("one.lab").string());
    ASSERT_EQ(ds.size(), 1);
    ASSERT_EQ(ds.inputs.dim(), 4);
    EXPECT_EQ(ds.inputs.points().row(0), (Eigen::RowVector4d(0, 1, 0, 1)));
    ASSERT_EQ(ds.labels.cols(), 10);
    for (Index j = 0; j < 10; ++j) { EXPECT_EQ(ds.labels(0, j), j == 3 ? 1.0 : 0.0); }
    EXPECT_NO_THROW(ds.validate());
}

TEST(Idx, RoundTripIsBitwise) {
    std::mt19937_64 rng(3);
    std::vector<unsigned char> px(5 * 3 * 4);
    for (auto &p : px) { p = static_cast<unsigned char>(rng() % 256); }
    std::vector<unsigned char> lab(5);
    for (auto &l : lab) { l = static_cast<unsigned char>(rng() % 10); }
    write_bytes(scratch("rt.img"), idx_images(0x803, 5, 3, 4, px));
    write_bytes(scratch("rt.lab"), idx_labels(5, lab));
    const auto a = load_idx(scratch("rt.img").string(), scratch("rt.lab").string());
    write_idx(a, 3, 4, scratch("rt2.img").string(), scratch("rt2.lab").string());
    const auto b = load_idx(scratch("rt2.img").string(), scratch("rt2.lab").string());
    EXPECT_EQ(a.inputs.points(), b.inputs.points());
    EXPECT_EQ(a.labels, b.labels);
}

TEST(Idx, Errors) {
    write_bytes(scratch("bad.img"), idx_images(0x804, 1, 2, 2, {0, 0, 0, 0}));
    write_bytes(scratch("ok.lab"), idx_labels(1, {1}));
    try {
        load_idx(scratch("bad.img").string(), scratch("ok.lab").string());
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::format);
    }
    write_bytes(scratch("short.img"), idx_images(0x803, 1, 2, 2, {0, 0, 0}));
    EXPECT_THROW(load_idx(scratch("short.img").string(), scratch("ok.lab").string()), Error);
    write_bytes(scratch("two.img"), idx_images(0x803, 2, 2, 2, {0, 0, 0, 0, 0, 0, 0, 0}));
    EXPECT_THROW(load_idx(scratch("two.img").string(), scratch("ok.lab").string()), Error);
    write_bytes(scratch("ok.img"), idx_images(0x803, 1, 2, 2, {0, 0, 0, 0}));
    write_bytes(scratch("trunc.lab"), idx_labels(1, {}));
    EXPECT_THROW(load_idx(scratch("ok.img").string(), scratch("trunc.lab").string()), Error);
    try {
        load_idx(scratch("missing.img").string(), scratch("ok.lab").string());
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::io);
    }
}

TEST(Events, EndpointsAndInverse) {
    Matrix x(3, 2);
    x << 1, 2, 3, 4, 5, 6;
    Vector e(3);
    e << 100.0, 10.0, 37.3;
    write_event_vectors(scratch("ev.bin").string(), x, e);
    const auto ds = load_event_vectors(scratch("ev.bin").string(), 10.0, 100.0);
    EXPECT_EQ(ds.inputs.points(), x);
    EXPECT_DOUBLE_EQ(ds.labels(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(ds.labels(1, 0), 0.1);
    for (Index i = 0; i < 3; ++i) { EXPECT_NEAR(ds.normalization.inverse(ds.labels(i, 0)), e(i), 1e-12 * e(i)); }
}

TEST(Events, Errors) {
    Matrix x(1, 2);
    x << 1, 2;
    Vector e(1);
    e << 150.0;
    write_event_vectors(scratch("out.bin").string(), x, e);
    EXPECT_THROW(load_event_vectors(scratch("out.bin").string(), 10.0, 100.0), Error);
    e << 50.0;
    write_event_vectors(scratch("tr.bin").string(), x, e);
    fs::resize_file(scratch("tr.bin"), fs::file_size(scratch("tr.bin")) - 3);
    try {
        load_event_vectors(scratch("tr.bin").string(), 10.0, 100.0);
        FAIL();
    } catch (const Error &err) {
        EXPECT_EQ(err.code(), ErrorCode::format);
    }
}

TEST(Synthetic, ZeroTeacherGivesZeroLabels) {
    SyntheticSpec spec;
    spec.weight_scale = 0.0;
    spec.n_points = 20;
    const auto ds = make_synthetic(spec, 1);
    EXPECT_EQ(ds.labels, Matrix::Zero(20, 1));
}

TEST(Synthetic, SameSeedSameDataset) {
    for (auto kind : {SyntheticKind::teacher_mlp, SyntheticKind::noisy_function}) {
        SyntheticSpec spec;
        spec.kind = kind;
        spec.noise = 0.1;
        spec.n_points = 30;
        const auto a = make_synthetic(spec, 7);
        const auto b = make_synthetic(spec, 7);
        const auto c = make_synthetic(spec, 8);
        EXPECT_EQ(a.inputs.points(), b.inputs.points());
        EXPECT_EQ(a.labels, b.labels);
        EXPECT_NE(a.labels, c.labels);
    }
}

TEST(Synthetic, TeacherUsesInitNetwork) {
    SyntheticSpec spec;
    spec.n_points = 10;
    spec.input_dim = 3;
    const auto ds = make_synthetic(spec, 4);
    ArchitectureConfig t;
    t.depth = spec.teacher_depth;
    t.width = spec.teacher_width;
    const auto net = init_network(t, 3, mix_seed(4, 1));
    EXPECT_EQ(ds.labels, forward(net, ds.inputs.points()));
}

TEST(Synthetic, UnknownGenerator) {
    try {
        parse_synthetic_kind("spiral");
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::invalid_argument);
    }
}

TEST(Dataset, Validation) {
    Dataset ds;
    ds.inputs = InputSet(Matrix::Zero(2, 3));
    ds.labels = Matrix::Zero(3, 1);
    EXPECT_THROW(ds.validate(), Error);
    ds.labels = Matrix::Zero(2, 2);
    ds.one_hot = true;
    EXPECT_THROW(ds.validate(), Error);
    ds.labels << 1, 0, 0, 1;
    EXPECT_NO_THROW(ds.validate());
}
