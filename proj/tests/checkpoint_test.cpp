// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>

#include "support/testing.hpp"
#include "voxformer/checkpoint.hpp"
#include "voxformer/error.hpp"
#include "voxformer/models.hpp"

namespace voxformer {
namespace {

using testing::ScratchDir;

CVVTConfig small_cvvt() {
  CVVTConfig c;
  c.size.embed_dim = 8;
  c.size.num_heads = 2;
  c.size.depth = 2;
  c.embed_stack = {{4}, {6}};
  c.grid = {2, 2, 2};
  c.input = {8, 8, 8};
  return c;
}

std::vector<std::uint8_t> payload_of(const Tensor& t) {
  return dispatch(t.dtype(), [&]<typename T>() {
    const auto d = t.data<T>();
    std::vector<std::uint8_t> out(d.size_bytes());
    std::memcpy(out.data(), d.data(), out.size());
    return out;
  });
}

TEST(Checkpoint, HeaderLayout) {
  Rng rng(1);
  nn::Linear lin(3, 2, true, DType::f32, rng);
  const auto bytes = encode_checkpoint(lin, R"({"k":1})");
  ASSERT_GT(bytes.size(), 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "VXCK");
  std::uint64_t manifest_len = 0;
  for (int i = 0; i < 8; ++i) manifest_len |= std::uint64_t{bytes[8 + i]} << (8 * i);
  EXPECT_EQ(bytes.size(), 16 + manifest_len + (6 + 2) * 4);
  const std::string manifest(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(manifest_len));
  EXPECT_NE(manifest.find("\"weight\""), std::string::npos);
  EXPECT_NE(manifest.find("{\"k\":1}"), std::string::npos);
}

TEST(CheckpointProperty, ModelRoundTripIsByteExact) {
  ScratchDir dir("ckpt");
  for (auto dtype : {DType::f32, DType::f64}) {
    Rng rng(2);
    CVVT model(small_cvvt(), dtype, rng);
    const std::string config = R"({"model":"cvvt","note":"x"})";
    const auto path = dir / ("m-" + std::string(dtype_name(dtype)) + ".vxck");
    save_checkpoint(path, model, config);
    const auto bytes = read_file_bytes(path);
    EXPECT_EQ(bytes, encode_checkpoint(model, config));

    const Checkpoint ck = read_checkpoint(path);
    EXPECT_EQ(ck.config_json, config);
    const auto state = model.named_state();
    ASSERT_EQ(ck.tensors.size(), state.size());
    for (std::size_t i = 0; i < state.size(); ++i) {
      EXPECT_EQ(ck.tensors[i].first, state[i].first);
      EXPECT_EQ(ck.tensors[i].second.shape(), state[i].second.shape());
      EXPECT_EQ(ck.tensors[i].second.dtype(), dtype);
      EXPECT_EQ(payload_of(ck.tensors[i].second), payload_of(state[i].second)) << state[i].first;
    }

    Rng other(99);
    CVVT fresh(small_cvvt(), dtype, other);
    load_state(fresh, ck);
    EXPECT_EQ(encode_checkpoint(fresh, config), bytes);
    fresh.eval();
    model.eval();
    const Tensor x = testing::random_tensor(Shape{1, 1, 8, 8, 8}, rng, -1.0, 1.0, dtype);
    EXPECT_EQ(fresh.forward(x, other).to_vector(), model.forward(x, rng).to_vector());
  }
}

TEST(Checkpoint, BuffersTravelWithParameters) {
  Rng rng(3);
  ConvNet3D4Config c;
  c.channels = {1, 2, 2, 2, 2};
  c.embed_dim = 4;
  c.norm = NormKind::batch3d;
  c.input = {81, 81, 81};
  ConvNet3D4 model(c, DType::f32, rng);
  model.train();
  (void)model.forward(testing::random_tensor(Shape{1, 1, 81, 81, 81}, rng, -1.0, 1.0, DType::f32), rng);
  const auto ck = decode_checkpoint(encode_checkpoint(model, "{}"));
  ConvNet3D4 fresh(c, DType::f32, rng);
  load_state(fresh, ck);
  const auto a = model.named_buffers();
  const auto b = fresh.named_buffers();
  ASSERT_FALSE(a.empty());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second.to_vector(), b[i].second.to_vector()) << a[i].first;
}

TEST(Checkpoint, CorruptOrMismatchedInputsAreRejected) {
  Rng rng(4);
  nn::Linear lin(3, 2, true, DType::f32, rng);
  const auto good = encode_checkpoint(lin, "{}");
  auto bad_magic = good;
  bad_magic[1] = 'Y';
  EXPECT_THROW((void)decode_checkpoint(bad_magic), DataError);
  auto truncated = good;
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW((void)decode_checkpoint(truncated), DataError);
  EXPECT_THROW((void)decode_checkpoint(std::span<const std::uint8_t>(good.data(), 6)), DataError);
  auto bad_len = good;
  bad_len[15] = 0x7f;
  EXPECT_THROW((void)decode_checkpoint(bad_len), DataError);
  EXPECT_THROW((void)encode_checkpoint(lin, "[1,2]"), Error);

  const auto ck = decode_checkpoint(good);
  nn::Linear wider(4, 2, true, DType::f32, rng);
  EXPECT_THROW(load_state(wider, ck), Error);
  nn::Linear as_f64(3, 2, true, DType::f64, rng);
  EXPECT_THROW(load_state(as_f64, ck), Error);
  nn::Linear no_bias(3, 2, false, DType::f32, rng);
  EXPECT_THROW(load_state(no_bias, ck), Error);
}

TEST(Checkpoint, FileWritesReplaceAtomically) {
  ScratchDir dir("atomic");
  const std::vector<std::uint8_t> first{1, 2, 3}, second{9};
  write_file_bytes(dir / "f.bin", first);
  write_file_bytes(dir / "f.bin", second);
  EXPECT_EQ(read_file_bytes(dir / "f.bin"), second);
  std::size_t entries = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++entries;
  EXPECT_EQ(entries, 1u);
  EXPECT_THROW((void)read_file_bytes(dir / "missing.bin"), DataError);
}

}  // namespace
}  // namespace voxformer
