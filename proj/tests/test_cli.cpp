#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lmk/cli.hpp"

using namespace lmk;

namespace {

namespace fs = std::filesystem;

struct Result {
    int code;
    std::string out;
    std::string err;
};

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("lmk_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        unsetenv(kConfigEnv);
    }
    void TearDown() override { unsetenv(kConfigEnv); }

    Result run(std::vector<std::string> args) {
        std::vector<std::string> argv{"lmk", "--manifest", path("manifest.json")};
        argv.insert(argv.end(), args.begin(), args.end());
        std::ostringstream out, err;
        const int code = run_cli(argv, out, err);
        return {code, out.str(), err.str()};
    }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    static std::string slurp(const std::string& p) {
        std::ifstream in(p);
        return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    }

    /// Zero weights: every feature map is spatially constant, so every heatmap decodes to the crop centre.
    void write_fixture() {
        save(zero_weights(ModelConfig::student()), path("zero.lmkw"));
        write_ppm(Tensor(Shape{3, 64, 64}, 0.5f), path("face.ppm"));
    }

    fs::path dir_;
};

} // namespace

TEST_F(CliTest, VerifySuitePasses) {
    const Result r = run({"verify", "patch-ops", "--trials", "5"});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out.rfind("patch-ops: ", 0), 0u) << r.out;
    EXPECT_NE(r.out.find(" PASS"), std::string::npos) << r.out;
    EXPECT_EQ(run({"verify", "no-such-suite"}).code, 2);
}

TEST_F(CliTest, ProfilePrintsTotalsAndJson) {
    const Result r = run({"profile", "--json", path("profile.json")});
    ASSERT_EQ(r.code, 0) << r.err;
    const std::uint64_t params = profile(ModelConfig::student()).total_params();
    EXPECT_NE(r.out.find("total params " + std::to_string(params)), std::string::npos);
    const auto j = nlohmann::json::parse(slurp(path("profile.json")));
    EXPECT_EQ(j["totals"]["params"].get<std::uint64_t>(), params);
    const Result half = run({"profile", "--alpha", "0.25"});
    EXPECT_EQ(half.code, 0);
    EXPECT_NE(half.out, r.out);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
    EXPECT_EQ(run({}).code, 2);
    EXPECT_EQ(run({"frobnicate"}).code, 2);
    EXPECT_EQ(run({"infer", "--image", "x.ppm"}).code, 2);  // missing required options
    EXPECT_EQ(run({"verify", "--trials", "0"}).code, 2);
    write_fixture();
    EXPECT_EQ(run({"infer", "--weights", path("zero.lmkw"), "--image", path("face.ppm"), "--bbox", "1,2,3"}).code, 2);
    EXPECT_EQ(run({"infer", "--weights", path("zero.lmkw"), "--image", path("face.ppm"), "--bbox", "1,2,0,4"}).code, 2);
    EXPECT_EQ(run({"help"}).code, 2);
    EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, IoAndFormatErrorsExitThree) {
    write_fixture();
    EXPECT_EQ(run({"infer", "--weights", path("missing.lmkw"), "--image", path("face.ppm"), "--bbox", "0,0,64,64"}).code, 3);
    EXPECT_EQ(run({"infer", "--weights", path("zero.lmkw"), "--image", path("missing.ppm"), "--bbox", "0,0,64,64"}).code, 3);

    auto bytes = read_file_bytes(path("zero.lmkw"));
    bytes[bytes.size() / 2] ^= 0x04;
    {
        std::ofstream out(path("corrupt.lmkw"), std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    const Result corrupt = run({"infer", "--weights", path("corrupt.lmkw"), "--image", path("face.ppm"), "--bbox", "0,0,64,64"});
    EXPECT_EQ(corrupt.code, 3);
    EXPECT_NE(corrupt.err.find("CRC"), std::string::npos) << corrupt.err;

    save(zero_weights(ModelConfig::miniature()), path("mini.lmkw"));
    const Result mismatch = run({"infer", "--weights", path("mini.lmkw"), "--image", path("face.ppm"), "--bbox", "0,0,64,64"});
    EXPECT_EQ(mismatch.code, 3);
    EXPECT_NE(mismatch.err.find("missing"), std::string::npos);
    EXPECT_EQ(run({"replay", path("nothing.json")}).code, 3);
}

TEST_F(CliTest, InferMapsCropCentreBackToSource) {
    write_fixture();
    const Result src = run({"infer", "--weights", path("zero.lmkw"), "--image", path("face.ppm"), "--bbox", "8,4,32,48"});
    ASSERT_EQ(src.code, 0) << src.err;
    std::istringstream lines(src.out);
    std::size_t i = 0, count = 0;
    double x = 0, y = 0;
    while (lines >> i >> x >> y) {
        EXPECT_EQ(i, count++);
        EXPECT_NEAR(x, 24.0, 1e-3);  // 8 + 32 / 2
        EXPECT_NEAR(y, 28.0, 1e-3);  // 4 + 48 / 2
    }
    EXPECT_EQ(count, 51u);

    const Result crop = run({"infer", "--weights", path("zero.lmkw"), "--image", path("face.ppm"), "--bbox", "8,4,32,48",
                             "--crop-space", "--out", path("lms.txt")});
    ASSERT_EQ(crop.code, 0) << crop.err;
    EXPECT_TRUE(crop.out.empty());
    EXPECT_EQ(slurp(path("lms.txt")).substr(0, 10), "0 128 128\n");
}

TEST_F(CliTest, EvalReportsNmeAndThreshold) {
    write_fixture();
    {
        std::ofstream out(path("ann.jsonl"));
        for (int k = 0; k < 3; ++k) {
            AnnotatedSample s;
            s.image = "face.ppm";
            s.bbox = {0, 0, 64, 64};
            for (int i = 0; i < 51; ++i) s.landmarks.points.push_back({static_cast<float>(i), static_cast<float>(32 + k)});
            out << annotation_line(s) << "\n";
        }
    }
    const Result ok = run({"--threads", "2", "eval", "--weights", path("zero.lmkw"), "--annotations", path("ann.jsonl")});
    ASSERT_EQ(ok.code, 0) << ok.err;
    EXPECT_NE(ok.out.find("mean_nme"), std::string::npos);
    const Result strict = run({"eval", "--weights", path("zero.lmkw"), "--annotations", path("ann.jsonl"), "--max-nme", "0.5"});
    EXPECT_EQ(strict.code, 1);
    EXPECT_EQ(run({"eval", "--weights", path("zero.lmkw"), "--annotations", path("ann.jsonl"), "--norm", "bogus"}).code, 2);
}

TEST_F(CliTest, ManifestReplayReproducesOutputs) {
    const Result first = run({"distill-toy", "--steps", "3", "--seed", "5", "--out", path("traj.jsonl")});
    ASSERT_EQ(first.code, 0) << first.err;
    const auto manifest = nlohmann::json::parse(slurp(path("manifest.json")));
    EXPECT_EQ(manifest["subcommand"], "distill-toy");
    EXPECT_EQ(manifest["seeds"]["distill"], 5);
    EXPECT_EQ(manifest["exit_code"], 0);
    EXPECT_EQ(manifest["version"], kToolkitVersion);
    EXPECT_TRUE(manifest.contains("config"));
    const std::string original = slurp(path("traj.jsonl"));
    EXPECT_EQ(std::count(original.begin(), original.end(), '\n'), 3);
    fs::copy_file(path("manifest.json"), path("first.json"));
    fs::remove(path("traj.jsonl"));

    const Result again = run({"replay", path("first.json")});
    ASSERT_EQ(again.code, 0) << again.err;
    EXPECT_EQ(slurp(path("traj.jsonl")), original);
}

TEST_F(CliTest, ConfigFromEnvironmentAndFlag) {
    nlohmann::json wide = ModelConfig::student();
    wide["alpha"] = 1.0;
    std::ofstream(path("wide.json")) << wide.dump();
    nlohmann::json narrow = ModelConfig::student();
    narrow["alpha"] = 0.25;
    std::ofstream(path("narrow.json")) << narrow.dump();

    const std::string base = run({"profile"}).out;
    setenv(kConfigEnv, path("wide.json").c_str(), 1);
    const Result env = run({"profile"});
    ASSERT_EQ(env.code, 0) << env.err;
    ModelConfig c;
    c.alpha = 1.0f;
    EXPECT_NE(env.out.find("total params " + std::to_string(profile(c).total_params())), std::string::npos);
    const Result flag = run({"--config", path("narrow.json"), "profile"});
    c.alpha = 0.25f;
    EXPECT_NE(flag.out.find("total params " + std::to_string(profile(c).total_params())), std::string::npos);
    EXPECT_EQ(nlohmann::json::parse(slurp(path("manifest.json")))["config"]["alpha"], 0.25);

    setenv(kConfigEnv, path("absent.json").c_str(), 1);
    EXPECT_EQ(run({"profile"}).code, 3);
    unsetenv(kConfigEnv);
    EXPECT_EQ(run({"profile"}).out, base);
}

TEST_F(CliTest, AugmentPreviewWritesImagesAndLandmarks) {
    write_ppm(Tensor(Shape{3, 96, 96}, 0.2f), path("face.ppm"));
    {
        std::ofstream out(path("ann.jsonl"));
        AnnotatedSample s;
        s.image = "face.ppm";
        s.bbox = {16, 16, 64, 64};
        for (int i = 0; i < 51; ++i) s.landmarks.points.push_back({30.0f + i % 10, 40.0f + i / 10});
        out << annotation_line(s) << "\n" << annotation_line(s) << "\n";
    }
    const Result r = run({"augment-preview", "--annotations", path("ann.jsonl"), "--out", path("preview"), "--count", "1"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(path("preview/sample_0000.ppm")));
    EXPECT_TRUE(fs::exists(path("preview/sample_0000.txt")));
    EXPECT_FALSE(fs::exists(path("preview/sample_0001.ppm")));
    EXPECT_EQ(read_pnm(path("preview/sample_0000.ppm")).shape(), (Shape{3, 256, 256}));
}

TEST_F(CliTest, BenchRunsWithRandomWeights) {
    const Result r = run({"bench", "--iterations", "1"});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("bench: 1 iterations"), std::string::npos);
}
