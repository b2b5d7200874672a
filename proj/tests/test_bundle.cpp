#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "sbfa/bundle.hpp"
#include "support.hpp"

namespace sbfa {
namespace {

ModelBundle two_by_two(Format f, std::vector<double> values) {
  ModelBundle b(toy_mlp(2, {}, 2));
  TensorMeta m{"layer.0.lm_head", 0, "lm_head", {2, 2}, f, false, {}};
  std::vector<std::uint32_t> raw;
  for (double v : values) raw.push_back(encode(v, f).raw);
  b.add_tensor(m, raw);
  b.add_tensor({"layer.0.lm_head.bias", 0, "lm_head.bias", {2}, f, false, {}},
               {encode(0.25, f).raw, encode(-0.25, f).raw});
  return b;
}

TEST(Quantize, WorkedRow) {
  const ModelBundle q = quantize_int8(two_by_two(Format::FP32, {0.5, -1.0, 0.0, 0.0}));
  const TensorMeta& m = q.meta(0);
  ASSERT_TRUE(m.quantized);
  EXPECT_EQ(m.format, Format::INT8);
  EXPECT_DOUBLE_EQ(m.scales[0], 1.0 / 127.0);
  // Oracle: round(w / scale) evaluated directly.
  EXPECT_EQ(std::lround(0.5 / (1.0 / 127.0)), 64);
  EXPECT_EQ(decode(q.word({0, 0})), 64.0);
  EXPECT_EQ(decode(q.word({0, 1})), -127.0);
  EXPECT_DOUBLE_EQ(q.effective_value({0, 0}), 64.0 / 127.0);
  EXPECT_NEAR(q.effective_value({0, 0}), 0.50394, 1e-5);
  EXPECT_DOUBLE_EQ(q.effective_value({0, 1}), -1.0);
  // The all-zero second row.
  EXPECT_EQ(m.scales[1], 0.0);
  EXPECT_EQ(q.effective_value({0, 2}), 0.0);
  EXPECT_EQ(q.effective_value({0, 3}), 0.0);
  // 1D tensors keep their float storage.
  EXPECT_FALSE(q.meta(1).quantized);
  EXPECT_EQ(q.meta(1).format, Format::FP32);
  EXPECT_EQ(q.effective_value({1, 0}), 0.25);
}

TEST(Quantize, ErrorWithinHalfScale) {
  const ModelBundle f = testing::random_bundle(toy_mlp(8, {16}, 4), Format::FP32, 3);
  const ModelBundle q = quantize_int8(f);
  for (std::size_t t = 0; t < f.size(); ++t) {
    const TensorMeta& m = q.meta(t);
    if (!m.quantized) continue;
    for (std::size_t i = 0; i < m.numel(); ++i) {
      const double scale = m.scales[i / m.row_length()];
      EXPECT_LE(std::fabs(q.effective_value({t, i}) - f.effective_value({t, i})),
                scale / 2 + 1e-15);
    }
  }
  EXPECT_THROW(quantize_int8(q), BundleError);
}

TEST(Bundle, EffectiveValues) {
  ModelBundle b(toy_mlp(2, {}, 2));
  b.add_tensor({"w", 0, "lm_head", {1, 2}, Format::BF16, false, {}}, {0x3F00, 0x0000});
  EXPECT_EQ(b.effective_value({0, 0}), 0.5);
  EXPECT_EQ(b.effective_value({0, 1}), 0.0);
  ModelBundle q(toy_mlp(2, {}, 2));
  q.add_tensor({"w", 0, "lm_head", {1, 2}, Format::INT8, true, {1.0 / 127.0}}, {64, 0});
  EXPECT_DOUBLE_EQ(q.effective_value({0, 0}), 64.0 * (1.0 / 127.0));
  EXPECT_EQ(q.effective_value({0, 1}), 0.0);
  EXPECT_THROW(q.effective_value({0, 2}), std::out_of_range);
}

TEST(Bundle, AddTensorValidates) {
  ModelBundle b(toy_mlp(2, {}, 2));
  EXPECT_THROW(b.add_tensor({"w", 0, "k", {2, 2}, Format::BF16, false, {}}, {0, 0, 0}),
               BundleError);
  EXPECT_THROW(b.add_tensor({"w", 0, "k", {2}, Format::BF16, false, {}}, {0x10000, 0}),
               BundleError);
  EXPECT_THROW(b.add_tensor({"w", 0, "k", {1, 2}, Format::INT8, true, {}}, {0, 0}), BundleError);
  EXPECT_THROW(b.add_tensor({"w", 0, "k", {2}, Format::INT8, true, {1.0}}, {0, 0}), BundleError);
  b.add_tensor({"w", 0, "k", {2}, Format::BF16, false, {}}, {0, 0});
  EXPECT_THROW(b.add_tensor({"w", 0, "k", {2}, Format::BF16, false, {}}, {0, 0}), BundleError);
}

TEST(Bundle, SignFlipOfOneHalf) {
  ModelBundle b = two_by_two(Format::FP16, {0.5, -1.0, 0.25, 1.0});
  b.apply_flip({0, 0}, 15);
  EXPECT_EQ(b.effective_value({0, 0}), -0.5);
}

TEST(Bundle, Int8SignBitFlip) {
  ModelBundle q(toy_mlp(2, {}, 2));
  q.add_tensor({"w", 0, "lm_head", {1, 2}, Format::INT8, true, {0.5}}, {0b01000000, 1});
  q.apply_flip({0, 0}, 7);
  EXPECT_EQ(q.raw(0)[0], 0b11000000u);
  EXPECT_EQ(decode(q.word({0, 0})), -64.0);
  EXPECT_EQ(q.effective_value({0, 0}), -32.0);
}

TEST(Bundle, ApplyUndoRestoresEverything) {
  ModelBundle b = testing::random_bundle(toy_mlp(8, {16}, 4), Format::BF16, 7);
  const ModelBundle original = b;
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t t = rng() % b.size();
    const WeightRef ref{t, rng() % b.meta(t).numel()};
    const int bit = static_cast<int>(rng() % 16);
    const UndoToken token = b.apply_flip(ref, bit);
    EXPECT_EQ(b.raw(t)[ref.index], original.raw(t)[ref.index] ^ (1u << bit));
    b.undo(token);
    ASSERT_EQ(b.content_checksum(), original.content_checksum());
    ASSERT_TRUE(std::equal(b.raw(t).begin(), b.raw(t).end(), original.raw(t).begin()));
    ASSERT_EQ(b.stats(t).w_min, original.stats(t).w_min);
    ASSERT_EQ(b.stats(t).w_max, original.stats(t).w_max);
  }
}

TEST(Bundle, StatsTrackFiniteValuesAfterEveryFlip) {
  ModelBundle b = testing::random_bundle(toy_mlp(8, {16}, 4), Format::FP16, 5);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = rng() % b.size();
    b.apply_flip({t, rng() % b.meta(t).numel()}, static_cast<int>(rng() % 16));
    double lo = INFINITY, hi = -INFINITY;
    for (double v : b.effective(t)) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    ASSERT_EQ(b.stats(t).w_min, lo);
    ASSERT_EQ(b.stats(t).w_max, hi);
  }
}

TEST(Bundle, FrozenStatsIgnoreFlips) {
  ModelBundle b = two_by_two(Format::FP16, {0.5, -1.0, 0.25, 1.0});
  b.set_freeze_stats(true);
  b.apply_flip({0, 0}, 14);  // 0.5 -> 32768
  EXPECT_EQ(b.stats(0).w_max, 1.0);
  b.set_freeze_stats(false);
  EXPECT_EQ(b.stats(0).w_max, 32768.0);
}

TEST(Bundle, TargetsFollowModeAndExclusions) {
  const ModelBundle f = testing::random_bundle(toy_mlp(8, {16}, 4), Format::BF16, 1);
  const ModelBundle q = quantize_int8(f);
  EXPECT_THROW(f.targets(AttackMode::Int8), BundleError);
  EXPECT_THROW(q.targets(AttackMode::Float), BundleError);
  EXPECT_EQ(f.targets(AttackMode::Float).size(), f.size());
  EXPECT_EQ(q.targets(AttackMode::Mixed).size(), q.size());
  for (std::size_t t : q.targets(AttackMode::Int8)) EXPECT_TRUE(q.meta(t).quantized);
  EXPECT_EQ(q.targets(AttackMode::Int8).size(), 2u);

  const std::vector<std::string> ex{"*.bias", "layer.1.*"};
  for (std::size_t t : f.targets(AttackMode::Float, ex)) {
    EXPECT_FALSE(f.meta(t).name.ends_with(".bias"));
    EXPECT_FALSE(f.meta(t).name.starts_with("layer.1."));
  }
  EXPECT_TRUE(name_matches("layer.0.mlp.up_proj", "layer.?.mlp.*"));
  EXPECT_FALSE(name_matches("layer.0.mlp.up_proj", "lm_head"));
}

class BundleFiles : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = testing::scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    bundle_ = quantize_int8(testing::random_bundle(toy_mlp(8, {16}, 4), Format::FP16, 2));
    bundle_.provenance = {{"note", "unit test"}};
    save_bundle(bundle_, dir_ / "m.json");
  }
  nlohmann::json manifest() const {
    std::ifstream in(dir_ / "m.json");
    return nlohmann::json::parse(in);
  }
  void write_manifest(const nlohmann::json& j) const {
    std::ofstream(dir_ / "m.json") << j.dump(2);
  }
  std::filesystem::path dir_;
  ModelBundle bundle_;
};

TEST_F(BundleFiles, RoundTripIsBitIdentical) {
  const ModelBundle back = load_bundle(dir_ / "m.json");
  ASSERT_EQ(back.size(), bundle_.size());
  EXPECT_EQ(back.architecture(), bundle_.architecture());
  EXPECT_EQ(back.provenance, bundle_.provenance);
  EXPECT_EQ(back.content_checksum(), bundle_.content_checksum());
  for (std::size_t t = 0; t < back.size(); ++t) {
    EXPECT_EQ(back.meta(t).name, bundle_.meta(t).name);
    EXPECT_EQ(back.meta(t).scales, bundle_.meta(t).scales);
    EXPECT_TRUE(std::equal(back.raw(t).begin(), back.raw(t).end(), bundle_.raw(t).begin()));
  }
}

TEST_F(BundleFiles, LayoutIsAlignedLittleEndian) {
  const auto j = manifest();
  std::ifstream in(dir_ / "m.bin", std::ios::binary);
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(blob.size(), j["blob_bytes"].get<std::size_t>());
  for (std::size_t t = 0; t < j["tensors"].size(); ++t) {
    const auto& e = j["tensors"][t];
    const auto off = e["offset"].get<std::size_t>();
    EXPECT_EQ(off % 64, 0u);
    if (e["format"] == "fp16") {
      const std::uint32_t word = blob[off] | (blob[off + 1] << 8);
      EXPECT_EQ(word, bundle_.raw(t)[0]);
    }
    if (!e["scale_offset"].is_null()) EXPECT_EQ(e["scale_offset"].get<std::size_t>() % 64, 0u);
  }
}

TEST_F(BundleFiles, RejectsQuantizedTensorWithoutScales) {
  auto j = manifest();
  j["tensors"][0]["scale_offset"] = nullptr;
  write_manifest(j);
  try {
    load_bundle(dir_ / "m.json");
    FAIL() << "expected rejection";
  } catch (const BundleError& e) {
    EXPECT_NE(std::string(e.what()).find("has no scales"), std::string::npos);
  }
}

TEST_F(BundleFiles, TruncatedBlobNamesTensor) {
  const auto size = std::filesystem::file_size(dir_ / "m.bin");
  std::filesystem::resize_file(dir_ / "m.bin", size - 4);
  const auto last = manifest()["tensors"].back()["name"].get<std::string>();
  try {
    load_bundle(dir_ / "m.json");
    FAIL() << "expected rejection";
  } catch (const BundleError& e) {
    EXPECT_NE(std::string(e.what()).find(last), std::string::npos) << e.what();
  }
}

TEST_F(BundleFiles, DetectsCorruptionAndBadTags) {
  {
    std::fstream f(dir_ / "m.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(3);
    f.put(static_cast<char>(0x5A));
  }
  EXPECT_THROW(load_bundle(dir_ / "m.json"), BundleError);
  auto j = manifest();
  j["tensors"][1]["format"] = "fp8";
  write_manifest(j);
  EXPECT_THROW(load_bundle(dir_ / "m.json"), BundleError);
  j["format"] = "something-else";
  write_manifest(j);
  EXPECT_THROW(load_bundle(dir_ / "m.json"), BundleError);
  EXPECT_THROW(load_bundle(dir_ / "absent.json"), BundleError);
}

}  // namespace
}  // namespace sbfa
