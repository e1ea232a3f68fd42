#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "lmk/model.hpp"
#include "lmk/weights.hpp"
#include "oracles.hpp"

using namespace lmk;

namespace {

std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t off) {
    return b[off] | (b[off + 1] << 8) | (b[off + 2] << 16) | (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

WeightStore random_store(std::mt19937_64& rng, std::size_t max_tensors = 100) {
    std::uniform_int_distribution<std::size_t> count(0, max_tensors), rank(1, 4), extent(1, 5), len(1, 24);
    std::uniform_int_distribution<int> ch('a', 'z');
    std::bernoulli_distribution half(0.5);
    WeightStore w;
    const std::size_t n = count(rng);
    for (std::size_t i = 0; i < n; ++i) {
        std::string name = std::to_string(i) + ".";
        for (std::size_t k = len(rng); k > 0; --k) name.push_back(static_cast<char>(ch(rng)));
        Shape shape(rank(rng));
        for (auto& d : shape) d = extent(rng);
        Tensor t = oracle::random_tensor(shape, rng, -100.0f, 100.0f);
        w.add(name, half(rng) ? t.to_f16() : t);
    }
    return w;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("lmk_test_" + name);
}

} // namespace

TEST(WeightsIo, EmptyStoreIsHeaderPlusCrc) {
    const auto bytes = serialize(WeightStore{});
    ASSERT_EQ(bytes.size(), 20u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "LMKW");
    EXPECT_EQ(le32(bytes, 4), 1u);
    for (std::size_t i = 8; i < 16; ++i) EXPECT_EQ(bytes[i], 0u);
    EXPECT_EQ(le32(bytes, 16), oracle::crc32({bytes.begin(), bytes.begin() + 16}));
    EXPECT_TRUE(deserialize(bytes).empty());
}

TEST(WeightsIo, ScalarLayoutIsExact) {
    WeightStore w;
    w.add("w", Tensor(Shape{1}, std::vector<float>{1.0f}));
    const auto bytes = serialize(w);
    std::vector<std::uint8_t> expected{'L', 'M', 'K', 'W', 1, 0, 0, 0,  // magic, version
                                       1, 0, 0, 0, 0, 0, 0, 0,          // tensor count
                                       1, 0, 0, 0, 'w',                 // name
                                       0, 1,                            // dtype f32, rank 1
                                       1, 0, 0, 0, 0, 0, 0, 0,          // extent
                                       0x00, 0x00, 0x80, 0x3f,          // 1.0f
                                       0, 0, 0, 0, 0};                  // pad to 40
    ASSERT_EQ(expected.size(), 40u);
    const std::uint32_t crc = oracle::crc32(expected);
    for (int i = 0; i < 4; ++i) expected.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
    EXPECT_EQ(bytes, expected);
    EXPECT_TRUE(bit_equal(deserialize(bytes), w));
    EXPECT_EQ(checksum(w), crc);
}

TEST(WeightsIo, HalfPayloadLayout) {
    WeightStore w;
    w.add("h", Tensor(Shape{2}, std::vector<float>{1.0f, -2.0f}).to_f16());
    const auto bytes = serialize(w);
    // header 16, name len 4 + 1, dtype/rank 2, extent 8 -> payload at 31
    EXPECT_EQ(bytes[21], 1u);
    EXPECT_EQ(bytes[31] | (bytes[32] << 8), 0x3c00);
    EXPECT_EQ(bytes[33] | (bytes[34] << 8), 0xc000);
    const WeightStore back = deserialize(bytes);
    EXPECT_EQ(back.get("h").dtype(), DType::f16);
    EXPECT_TRUE(bit_equal(back, w));
}

TEST(WeightsIo, RandomStoresRoundTripBitExact) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const WeightStore w = random_store(rng, 30);
        const auto bytes = serialize(w);
        EXPECT_EQ(bytes.size() % 4, 0u);
        const WeightStore back = deserialize(bytes);
        ASSERT_TRUE(bit_equal(back, w)) << trial;
        EXPECT_EQ(serialize(back), bytes);
    }
}

TEST(WeightsIo, NonFinitePayloadsSurvive) {
    WeightStore w;
    w.add("special", Tensor(Shape{4}, std::vector<float>{std::nanf(""), INFINITY, -0.0f, 1e-45f}));
    EXPECT_TRUE(bit_equal(deserialize(serialize(w)), w));
}

TEST(WeightsIo, DistinctErrors) {
    WeightStore w;
    w.add("a", Tensor(Shape{3}, 2.0f));
    const auto good = serialize(w);

    auto bad_magic = good;
    bad_magic[0] = 'X';
    EXPECT_THROW(deserialize(bad_magic), BadMagicError);

    auto bad_version = good;
    bad_version[4] = 2;
    EXPECT_THROW(deserialize(bad_version), VersionError);

    for (std::size_t cut : {2u, 6u, 12u, 19u}) {
        const std::vector<std::uint8_t> shortened(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
        EXPECT_THROW(deserialize(shortened), TruncatedError) << cut;
    }
    const std::vector<std::uint8_t> chopped(good.begin(), good.end() - 12);
    EXPECT_THROW(deserialize(chopped), FormatError);

    auto bad_crc = good;
    bad_crc.back() ^= 0x01;
    EXPECT_THROW(deserialize(bad_crc), ChecksumError);

    // All four are format errors, but none is mistaken for another.
    try {
        deserialize(bad_magic);
    } catch (const VersionError&) {
        FAIL();
    } catch (const FormatError&) {
    }
}

TEST(WeightsIo, PayloadBitFlipsAreDetected) {
    std::mt19937_64 rng(2);
    WeightStore w;
    w.add("conv.weight", oracle::random_tensor({4, 3, 3, 3}, rng));
    w.add("conv.bias", oracle::random_tensor({4}, rng).to_f16());
    const auto good = serialize(w);
    // Payload of the first tensor: header 16 + name len 4 + 11 name + 2 + 4 extents * 8.
    const std::size_t payload_begin = 16 + 4 + 11 + 2 + 32, payload_end = payload_begin + 108 * 4;
    for (std::size_t byte = payload_begin; byte < payload_end; ++byte)
        for (int bit = 0; bit < 8; ++bit) {
            auto bytes = good;
            bytes[byte] ^= static_cast<std::uint8_t>(1u << bit);
            EXPECT_THROW(deserialize(bytes), ChecksumError) << byte << ":" << bit;
        }
}

TEST(WeightsIo, AnySingleBitFlipIsRejected) {
    std::mt19937_64 rng(3);
    const WeightStore w = random_store(rng, 5);
    const auto good = serialize(w);
    for (std::size_t byte = 0; byte < good.size(); ++byte)
        for (int bit = 0; bit < 8; ++bit) {
            auto bytes = good;
            bytes[byte] ^= static_cast<std::uint8_t>(1u << bit);
            EXPECT_THROW(deserialize(bytes), FormatError) << byte << ":" << bit;
        }
}

TEST(WeightsIo, SaveAndLoadFiles) {
    std::mt19937_64 rng(4);
    const WeightStore w = random_store(rng, 20);
    const auto path = temp_path("roundtrip.lmkw");
    save(w, path);
    EXPECT_TRUE(bit_equal(load(path), w));
    std::filesystem::remove(path);
    EXPECT_THROW(load(path), IoError);
    EXPECT_THROW(save(w, "/nonexistent-dir/x.lmkw"), IoError);
}

TEST(WeightStore, NamesAreUniqueAndOrderPreserved) {
    WeightStore w;
    w.add("b", Tensor(Shape{1}));
    w.add("a", Tensor(Shape{1}));
    EXPECT_THROW(w.add("a", Tensor(Shape{1})), ArgumentError);
    EXPECT_EQ(w.entries()[0].name, "b");
    EXPECT_EQ(w.entries()[1].name, "a");
    EXPECT_THROW(w.get("zzz"), MissingTensorError);
    const WeightStore back = deserialize(serialize(w));
    EXPECT_EQ(back.entries()[0].name, "b");
}

TEST(Validation, RandomInitIsClean) {
    const ModelConfig cfg = ModelConfig::student();
    const ValidationReport r = validate_against_config(random_weights(cfg, 1), cfg);
    EXPECT_TRUE(r.ok()) << r.describe();
}

TEST(Validation, MissingExtraAndTransposed) {
    const ModelConfig cfg = ModelConfig::miniature();
    WeightStore w = random_weights(cfg, 2);
    w.erase("stage3.1.proj.weight");
    w.add("unused", Tensor(Shape{1}));
    const Shape original = w.get("stage2.0.expand.weight").shape();
    ASSERT_NE(original[0], original[1]);
    w.set("stage2.0.expand.weight", permute(w.get("stage2.0.expand.weight"), {1, 0, 2, 3}));
    const ValidationReport r = validate_against_config(w, cfg);
    EXPECT_EQ(r.missing, (std::vector<std::string>{"stage3.1.proj.weight"}));
    EXPECT_EQ(r.extra, (std::vector<std::string>{"unused"}));
    ASSERT_EQ(r.mismatched.size(), 1u);
    EXPECT_EQ(r.mismatched[0].name, "stage2.0.expand.weight");
    EXPECT_EQ(r.mismatched[0].expected, original);
    EXPECT_EQ(r.mismatched[0].actual, (Shape{original[1], original[0], 1, 1}));
    const std::string text = r.describe();
    EXPECT_NE(text.find(to_string(original)), std::string::npos);
    EXPECT_NE(text.find(to_string(r.mismatched[0].actual)), std::string::npos);
}
