#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "ttgan/data.hpp"
#include "ttgan/errors.hpp"
#include "ttgan/volume_io.hpp"

using namespace ttgan;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("ttgan_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Mean over the octant that contains the centre of class k.
double octant_mean(const DenseTensor& v, std::size_t k) {
    const VolumeShape shape{v.dim(0), v.dim(1), v.dim(2)};
    const auto c = class_center(k, shape);
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t x = 0; x < shape[0]; ++x)
        for (std::size_t y = 0; y < shape[1]; ++y)
            for (std::size_t z = 0; z < shape[2]; ++z) {
                const bool hx = (double(x) < double(shape[0]) / 2) == (c[0] < double(shape[0]) / 2);
                const bool hy = (double(y) < double(shape[1]) / 2) == (c[1] < double(shape[1]) / 2);
                const bool hz = (double(z) < double(shape[2]) / 2) == (c[2] < double(shape[2]) / 2);
                if (hx && hy && hz) {
                    s += v.at({x, y, z, 0});
                    ++n;
                }
            }
    return s / double(n);
}

}  // namespace

TEST(MakeSynthetic, RangeShapeAndDeterminism) {
    auto a = make_synthetic(3, 10, {8, 9, 10}, 4);
    auto b = make_synthetic(3, 10, {8, 9, 10}, 4);
    ASSERT_EQ(a.size(), 30u);
    std::set<std::string> ids;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].volume, b[i].volume);
        EXPECT_EQ(a[i].volume.shape(), (Shape{8, 9, 10, 1}));
        ASSERT_TRUE(a[i].label.has_value());
        ids.insert(a[i].id);
        for (double v : a[i].volume.data()) {
            EXPECT_GE(v, -1.0);
            EXPECT_LE(v, 1.0);
            EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
        }
    }
    EXPECT_EQ(ids.size(), 30u);
    EXPECT_TRUE(make_synthetic(2, 0, {8, 8, 8}, 1).empty());
    EXPECT_THROW(make_synthetic(1, 3, {8, 8, 8}, 1), ArgumentError);
    EXPECT_THROW(make_synthetic(2, 3, {8, 7, 8}, 1), ArgumentError);
}

TEST(MakeSynthetic, OctantThresholdSeparatesTwoClasses) {
    auto s = make_synthetic(2, 200, {8, 8, 8}, 11);
    std::size_t correct = 0;
    for (const auto& v : s) {
        const double score = octant_mean(v.volume, 1) - octant_mean(v.volume, 0);
        correct += (score > 0.0 ? 1u : 0u) == *v.label;
    }
    EXPECT_EQ(correct, s.size());
}

TEST(Normalize, EndpointsAndConstant) {
    DenseTensor v({2, 2, 2, 1}, std::vector<double>{3, 5, 7, 4, 4, 6, 3, 7});
    normalize_to_unit_range(v);
    EXPECT_EQ(v[0], -1.0);
    EXPECT_EQ(v[2], 1.0);
    EXPECT_EQ(v[1], 0.0);
    DenseTensor c({2, 2, 2, 1}, 3.0);
    normalize_to_unit_range(c);
    for (double x : c.data()) EXPECT_EQ(x, 0.0);
}

TEST(Split, EightyTenTen) {
    auto s = split(make_synthetic(2, 50, {8, 8, 8}, 1), 1.0, 2);
    EXPECT_EQ(s.train.size(), 80u);
    EXPECT_EQ(s.validation.size(), 10u);
    EXPECT_EQ(s.test.size(), 10u);
    EXPECT_EQ(s.labeled_count(), 80u);
}

TEST(Split, StratifiedDisjointDeterministic) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto samples = make_synthetic(3, 17 + seed, {8, 8, 8}, seed);
        const double frac = 0.1 + 0.08 * double(seed);
        auto s = split(samples, frac, seed);
        auto t = split(samples, frac, seed);
        std::set<std::string> ids;
        for (const auto* part : {&s.train, &s.validation, &s.test})
            for (const auto& x : *part) EXPECT_TRUE(ids.insert(x.id).second) << x.id;
        EXPECT_EQ(ids.size(), samples.size());
        for (std::size_t i = 0; i < s.train.size(); ++i) EXPECT_EQ(s.train[i].id, t.train[i].id);

        const double n = double(samples.size());
        for (const auto* part : {&s.validation, &s.test}) {
            for (const auto& x : *part) EXPECT_TRUE(x.label.has_value());
            for (std::size_t k = 0; k < 3; ++k) {
                const double expected = double(part->size()) * double(17 + seed) / n;
                const auto got = std::count_if(part->begin(), part->end(), [&](const auto& x) { return *x.label == k; });
                EXPECT_LE(std::abs(double(got) - expected), 1.0);
            }
        }
        const double want = frac * double(s.train.size());
        EXPECT_LE(std::abs(double(s.labeled_count()) - want), 0.5 + 1e-9);
    }
}

TEST(Split, Errors) {
    auto samples = make_synthetic(2, 2, {8, 8, 8}, 1);
    EXPECT_THROW(split(samples, 0.5, 1), ArgumentError);
    auto ok = make_synthetic(2, 5, {8, 8, 8}, 1);
    EXPECT_THROW(split(ok, 0.0, 1), ArgumentError);
    EXPECT_THROW(split(ok, 1.5, 1), ArgumentError);
}

TEST(Manifest, SamplesRoundTripWithUnlabeled) {
    auto dir = scratch("roundtrip");
    auto s = split(make_synthetic(2, 10, {8, 8, 8}, 3), 0.5, 4);
    save_samples(dir, "train.csv", s.train);
    auto back = load_samples(dir / "train.csv");
    ASSERT_EQ(back.size(), s.train.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].id, s.train[i].id);
        EXPECT_EQ(back[i].label, s.train[i].label);
        EXPECT_EQ(back[i].volume, s.train[i].volume);
    }
    std::ifstream in(dir / "train.csv");
    std::string line;
    std::size_t unlabeled = 0;
    while (std::getline(in, line)) unlabeled += line.ends_with(",-1");
    EXPECT_EQ(unlabeled, s.train.size() - s.labeled_count());
    EXPECT_THROW(save_samples(dir / "missing", "m.csv", s.train), IoError);
}

TEST(Manifest, MalformedLines) {
    auto dir = scratch("bad");
    std::ofstream(dir / "m.csv") << "a,b,0\nbroken line\n";
    try {
        read_manifest(dir / "m.csv");
        FAIL() << "no error";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 6u);
    }
    std::ofstream(dir / "n.csv") << "a,b,x\n";
    EXPECT_THROW(read_manifest(dir / "n.csv"), FormatError);
}

TEST(Manifest, TruncatedVolumeNamesByteCounts) {
    auto dir = scratch("trunc");
    auto s = make_synthetic(2, 1, {8, 8, 8}, 3);
    save_samples(dir, "m.csv", s);
    const auto p = dir / "volumes" / (s[0].id + ".ttv");
    auto bytes = read_file_bytes(p);
    bytes.resize(bytes.size() - 3);
    write_file_bytes(p, bytes);
    try {
        load_samples(dir / "m.csv");
        FAIL() << "no error";
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("expected 2048 bytes"), std::string::npos) << msg;
        EXPECT_NE(msg.find("found 2045"), std::string::npos) << msg;
    }
}
