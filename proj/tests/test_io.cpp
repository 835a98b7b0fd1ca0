#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "kwest/io.hpp"

using namespace kwest;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    TempDir() : path_(fs::temp_directory_path() / ("kwest_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                                                   ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    std::string write(const std::string& name, const std::string& text) const {
        const fs::path p = path_ / name;
        std::ofstream(p, std::ios::binary) << text;
        return p.string();
    }

private:
    fs::path path_;
};

void expect_round_trip(const std::string& text) {
    const BodySpec s = body_spec_from_json(json::parse(text));
    const json j = body_spec_to_json(s);
    const BodySpec t = body_spec_from_json(j);
    EXPECT_EQ(body_spec_to_json(t), j) << text;
    EXPECT_EQ(ConvexBody::from_spec(s).key(), ConvexBody::from_spec(t).key()) << text;
}

} // namespace

TEST(BodyJson, RoundTrips) {
    expect_round_trip(R"({"type": "ellipsoid", "semi_axes": [4, 2, 0.5]})");
    expect_round_trip(R"({"type": "box", "half_widths": [1, 0.25]})");
    expect_round_trip(R"({"type": "pball", "n": 5, "p": 4, "radius": 2})");
    expect_round_trip(R"({"type": "pball", "n": 3, "p": "inf"})");
    expect_round_trip(R"({"type": "norm_image", "A": [[1, 0.5], [0, 2]], "inner": "lp", "p": 3})");
    expect_round_trip(R"({"type": "norm_image", "A": [[1, 0], [0, 1]], "inner": "mixed"})");
    expect_round_trip(R"({"type": "intersection", "base": {"type": "box", "half_widths": [3, 3]}, "radius": 4,
                          "kappa_bound": 2})");
}

TEST(BodyJson, BuildsTheRightBody) {
    const ConvexBody e = ConvexBody::from_spec(body_spec_from_json(json::parse(R"({"type":"ellipsoid","semi_axes":[2,1]})")));
    Eigen::Vector2d x(2.0, 0.0);
    EXPECT_NEAR(e.gauge(x), 1.0, 1e-15);
    x << 0.0, 0.5;
    EXPECT_NEAR(e.gauge(x), 0.5, 1e-15);
    const ConvexBody b = ConvexBody::from_spec(body_spec_from_json(json::parse(R"({"type":"pball","n":2,"p":"inf"})")));
    x << 0.9, -1.0;
    EXPECT_NEAR(b.gauge(x), 1.0, 1e-15);
}

TEST(BodyJson, RejectsMalformed) {
    for (const char* bad : {R"({"semi_axes": [1]})", R"({"type": "cone"})", R"({"type": "ellipsoid"})",
                            R"({"type": "ellipsoid", "semi_axes": [1, -1]})", R"({"type": "ellipsoid", "semi_axes": []})",
                            R"({"type": "pball", "n": 2, "p": 0.5})", R"({"type": "norm_image", "A": [[1, 0], [0]]})",
                            R"({"type": "norm_image", "A": [[1]], "inner": "l7"})", R"([1, 2])"})
        EXPECT_THROW(body_spec_from_json(json::parse(bad)), InvalidInput) << bad;
}

TEST(Config, AppliesKnownKeysAndRejectsOthers) {
    EstimationConfig cfg;
    apply_config(json::parse(R"({"C": 4, "seed": 9, "max_iter_cap": 50, "brute_starts": 3})"), cfg);
    EXPECT_EQ(cfg.C, 4.0);
    EXPECT_EQ(cfg.seed, 9u);
    EXPECT_EQ(cfg.width.max_iter_cap, 50);
    EXPECT_EQ(cfg.oracle.brute_starts, 3);
    EstimationConfig back;
    apply_config(config_to_json(cfg), back);
    EXPECT_EQ(config_to_json(back), config_to_json(cfg));
    EXPECT_THROW(apply_config(json::parse(R"({"Cee": 4})"), cfg), InvalidInput);
    EXPECT_THROW(apply_config(json::parse(R"({"C": 0.5})"), cfg), InvalidInput);
}

TEST(VectorFile, AcceptsColumnRowAndJson) {
    const TempDir dir;
    const Eigen::Vector3d want(0.5, -1.0, 2.0);
    EXPECT_EQ(read_vector_file(dir.write("col.csv", "y\n0.5\n-1\n2\n")), want);
    EXPECT_EQ(read_vector_file(dir.write("row.csv", "0.5,-1,2\r\n")), want);
    EXPECT_EQ(read_vector_file(dir.write("a.json", "[0.5, -1, 2]")), want);
    EXPECT_EQ(read_vector_file(dir.write("o.json", R"({"y": [0.5, -1, 2]})")), want);
    EXPECT_THROW(read_vector_file(dir.write("two.csv", "1,2\n3,4\n")), InvalidInput);
    EXPECT_THROW(read_vector_file(dir.write("text.csv", "1\nx\n")), InvalidInput);
    EXPECT_THROW(read_vector_file(dir.write("empty.csv", "")), InvalidInput);
    EXPECT_THROW(read_vector_file(dir.write("bad.json", "[1, ")), InvalidInput);
    EXPECT_THROW(read_vector_file((fs::temp_directory_path() / "kwest_missing_file").string()), InvalidInput);
}

TEST(RegressionCsv, SplitsResponseAndDesign) {
    const TempDir dir;
    const RegressionData d = read_regression_csv(dir.write("r.csv", "y,z1,z2\n1,2,3\n4,5,6\n"));
    ASSERT_EQ(d.samples(), 2);
    ASSERT_EQ(d.dim(), 2);
    EXPECT_EQ(d.Y, Eigen::Vector2d(1, 4));
    EXPECT_EQ(d.Z(1, 0), 5.0);
    EXPECT_EQ(d.Z(0, 1), 3.0);
    EXPECT_FALSE(d.centered);
    EXPECT_THROW(read_regression_csv(dir.write("one.csv", "1\n2\n")), InvalidInput);
    EXPECT_THROW(read_regression_csv(dir.write("ragged.csv", "1,2,3\n4,5\n")), InvalidInput);
}
