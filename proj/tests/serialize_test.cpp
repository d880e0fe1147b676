#include <gtest/gtest.h>

#include <bit>
#include <filesystem>
#include <fstream>
#include <limits>

#include "hici/serialize.hpp"

using namespace hici;
namespace fs = std::filesystem;

namespace {
fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("hici_serialize_" + name);
  fs::remove_all(p);
  return p;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}
}  // namespace

TEST(Archive, RoundTripIsBitExact) {
  Rng rng(21);
  std::uniform_int_distribution<std::size_t> dim(1, 7);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<Tensor> ts;
    for (int k = 0; k < 4; ++k) ts.push_back(randn({dim(rng), dim(rng)}, rng, 1e3));
    ts[0][0] = -0.0;
    ts[0].data().back() = std::numeric_limits<double>::denorm_min();
    io::TensorRefs refs;
    for (std::size_t k = 0; k < ts.size(); ++k) refs.emplace_back("t" + std::to_string(k), &ts[k]);
    const fs::path dir = scratch("roundtrip");
    io::save(dir, refs, {{"step", trial}});
    const io::Archive a = io::load(dir);
    EXPECT_EQ(a.meta.at("step").get<int>(), trial);
    for (std::size_t k = 0; k < ts.size(); ++k) EXPECT_TRUE(bit_identical(a.at("t" + std::to_string(k)), ts[k]));
  }
}

TEST(Archive, ManifestListsOffsetsAndBlobIsLittleEndian) {
  const Tensor a = Tensor::matrix({{1.0, 2.0}});
  const Tensor b = Tensor::vector({-3.5});
  const fs::path dir = scratch("layout");
  io::save(dir, {{"a", &a}, {"b", &b}});
  std::ifstream man(dir / io::kManifestFile);
  const auto m = nlohmann::json::parse(man);
  ASSERT_EQ(m.at("tensors").size(), 2u);
  EXPECT_EQ(m["tensors"][0]["offset"], 0);
  EXPECT_EQ(m["tensors"][0]["nbytes"], 16);
  EXPECT_EQ(m["tensors"][1]["offset"], 16);
  EXPECT_EQ(m["tensors"][1]["dtype"], "f64");
  EXPECT_EQ(fs::file_size(dir / io::kBlobFile), 24u);
  std::ifstream bin(dir / io::kBlobFile, std::ios::binary);
  unsigned char bytes[8];
  bin.read(reinterpret_cast<char*>(bytes), 8);
  // 1.0 == 0x3FF0000000000000, least significant byte first
  EXPECT_EQ(bytes[0], 0x00);
  EXPECT_EQ(bytes[6], 0xF0);
  EXPECT_EQ(bytes[7], 0x3F);
}

TEST(Archive, Float32StorageOption) {
  const Tensor a = Tensor::vector({0.1, 1e10, -2.5});
  const fs::path dir = scratch("f32");
  io::save(dir, {{"a", &a}}, {}, io::DType::f32);
  const Tensor back = io::load(dir).at("a");
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(back[i], static_cast<double>(static_cast<float>(a[i])));
  EXPECT_EQ(fs::file_size(dir / io::kBlobFile), 12u);
}

TEST(Archive, Errors) {
  EXPECT_THROW(io::load(scratch("missing")), io::format_error);
  const Tensor a = Tensor::vector({1, 2, 3});
  const fs::path dir = scratch("truncated");
  io::save(dir, {{"a", &a}});
  fs::resize_file(dir / io::kBlobFile, 10);
  EXPECT_THROW(io::load(dir), io::format_error);
  io::save(dir, {{"a", &a}});
  EXPECT_THROW(io::load(dir).at("nope"), io::format_error);
}
