// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support/testing.hpp"
#include "voxformer/error.hpp"
#include "voxformer/gradcheck.hpp"
#include "voxformer/models.hpp"
#include "voxformer/nn/functional.hpp"
#include "voxformer/ops.hpp"

namespace voxformer {
namespace {

using testing::pick;
using testing::random_tensor;

std::vector<ShapeStep> executed_trace(Model& model, const Tensor& x) {
  Rng rng(0);
  ShapeTrace trace;
  model.eval();
  (void)model.forward(x, rng, &trace);
  return trace;
}

Tensor input_of(const Extents3& e, Rng& rng, DType dtype = DType::f32) {
  return random_tensor(Shape{1, 1, e[0], e[1], e[2]}, rng, -1.0, 1.0, dtype);
}

ViTSizeConfig small_vit(std::int64_t embed, std::int64_t heads, std::int64_t depth) {
  ViTSizeConfig s;
  s.embed_dim = embed;
  s.num_heads = heads;
  s.depth = depth;
  s.mlp_ratio = 2;
  return s;
}

ConvNet3D4Config narrow_convnet(const Extents3& input, std::int64_t width = 4) {
  ConvNet3D4Config c;
  c.channels = {1, width, width, width, width};
  c.embed_dim = 8;
  c.input = input;
  return c;
}

CVVTConfig small_cvvt(const Extents3& input) {
  CVVTConfig c;
  c.size = small_vit(8, 2, 1);
  c.embed_stack = {{4}, {6}};
  c.grid = {3, 3, 3};
  c.input = input;
  return c;
}

// --- shape inference -------------------------------------------------------

std::int64_t pooled(std::int64_t l) { return (l - 3) / 3 + 1; }

TEST(ShapeInfer, ConvNetAtFullSizeMatchesChainedPoolFormula) {
  ConvNet3D4Config cfg;
  const auto trace = shape_infer(cfg);
  Extents3 e{169, 208, 179};
  const std::array<std::int64_t, 5> ch{1, 128, 192, 256, 512};
  ASSERT_EQ(trace.size(), 12u);
  EXPECT_EQ(trace[0], (ShapeStep{"input", {1, 1, 169, 208, 179}}));
  for (int b = 1; b <= 4; ++b) {
    const std::string name = "block" + std::to_string(b);
    EXPECT_EQ(trace[2 * b - 1], (ShapeStep{name + ".conv", {1, ch[b], e[0], e[1], e[2]}}));
    for (auto& l : e) l = pooled(l);
    EXPECT_EQ(trace[2 * b], (ShapeStep{name + ".pool", {1, ch[b], e[0], e[1], e[2]}}));
  }
  EXPECT_EQ(trace[8].shape, (std::vector<std::int64_t>{1, 512, 2, 2, 2}));
  EXPECT_EQ(trace[9], (ShapeStep{"flatten", {1, 4096}}));
  EXPECT_EQ(trace[10], (ShapeStep{"embedding", {1, 512}}));
  EXPECT_EQ(trace[11], (ShapeStep{"head", {1, 2}}));
}

TEST(ShapeInfer, ConvNetHeadLinearIs4096To512AtFullSize) {
  ConvNet3D4Config cfg;
  cfg.channels = {1, 1, 1, 1, 512};
  Rng rng(1);
  ConvNet3D4 model(cfg, DType::f32, rng);
  EXPECT_EQ(model.embedding.weight.shape(), Shape({512, 4096}));
  EXPECT_EQ(model.head.weight.shape(), Shape({2, 512}));
}

TEST(ShapeInfer, EightCubedConvNetUnderflowsAtBlockTwo) {
  ConvNet3D4Config cfg;
  cfg.input = {8, 8, 8};
  try {
    (void)shape_infer(cfg);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("block2"), std::string::npos) << e.what();
  }
}

TEST(ShapeInfer, ThirtyTwoCubedConvNetUnderflowsAndEightyOneIsTheSmallestCube) {
  ConvNet3D4Config cfg;
  cfg.input = {32, 32, 32};
  EXPECT_THROW((void)shape_infer(cfg), ShapeError);
  cfg.input = {80, 80, 80};
  EXPECT_THROW((void)shape_infer(cfg), ShapeError);
  cfg.input = {81, 81, 81};
  EXPECT_EQ(shape_infer(cfg)[9].shape, (std::vector<std::int64_t>{1, 512}));
}

TEST(ShapeInfer, VViTAtFullSizeYieldsEightyTokensPlusClass) {
  VViTConfig cfg;
  const auto trace = shape_infer(cfg);
  auto find = [&](const std::string& layer) {
    return *std::find_if(trace.begin(), trace.end(), [&](const ShapeStep& s) { return s.layer == layer; });
  };
  EXPECT_EQ(find("pad").shape, (std::vector<std::int64_t>{1, 1, 200, 250, 200}));
  EXPECT_EQ(find("patchify").shape, (std::vector<std::int64_t>{1, 80, 125000}));
  EXPECT_EQ(find("tokens").shape, (std::vector<std::int64_t>{1, 81, 192}));
  EXPECT_EQ(trace.back().shape, (std::vector<std::int64_t>{1, 2}));
}

TEST(ShapeInfer, CVVTGridIsTenCubedByEightyChannels) {
  for (auto e : {Extents3{32, 32, 32}, Extents3{169, 208, 179}, Extents3{40, 24, 33}}) {
    CVVTConfig cfg;
    cfg.input = e;
    const auto trace = shape_infer(cfg);
    auto find = [&](const std::string& layer) {
      return std::find_if(trace.begin(), trace.end(), [&](const ShapeStep& s) { return s.layer == layer; })->shape;
    };
    EXPECT_EQ(find("grid"), (std::vector<std::int64_t>{1, 80, 10, 10, 10}));
    EXPECT_EQ(find("tokens_flat"), (std::vector<std::int64_t>{1, 80, 1000}));
    EXPECT_EQ(find("tokens"), (std::vector<std::int64_t>{1, 81, 192}));
  }
}

TEST(ShapeInfer, ConvNetTraceEqualsExecutedForwardAtReducedSizes) {
  Rng rng(2);
  for (auto e : {Extents3{81, 81, 81}, Extents3{90, 84, 100}, Extents3{81, 95, 87}}) {
    auto cfg = narrow_convnet(e);
    ConvNet3D4 model(cfg, DType::f32, rng);
    EXPECT_EQ(executed_trace(model, input_of(e, rng)), shape_infer(cfg));
  }
}

TEST(ShapeInfer, FullWidthConvNetTraceEqualsExecutedForwardAt81) {
  Rng rng(3);
  ConvNet3D4Config cfg;
  cfg.input = {81, 81, 81};
  ConvNet3D4 model(cfg, DType::f32, rng);
  EXPECT_EQ(executed_trace(model, input_of(cfg.input, rng)), shape_infer(cfg));
}

TEST(ShapeInfer, CVVTTinyTraceEqualsExecutedForwardAt32) {
  Rng rng(4);
  CVVTConfig cfg;
  CVVT model(cfg, DType::f32, rng);
  EXPECT_EQ(executed_trace(model, input_of(cfg.input, rng)), shape_infer(cfg));
}

TEST(ShapeInferProperty, RandomTransformerConfigsMatchExecutedForward) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const Extents3 e{pick(rng, 4, 13), pick(rng, 4, 13), pick(rng, 4, 13)};
    VViTConfig v;
    v.size = small_vit(6, pick(rng, 0, 1) ? 2 : 3, pick(rng, 0, 2));
    v.patch_edge = pick(rng, 2, 6);
    v.input = e;
    VViT vvit(v, DType::f32, rng);
    EXPECT_EQ(executed_trace(vvit, input_of(e, rng)), shape_infer(v)) << "vvit trial " << trial;

    auto c = small_cvvt(e);
    c.grid = {pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)};
    CVVT cvvt(c, DType::f32, rng);
    EXPECT_EQ(executed_trace(cvvt, input_of(e, rng)), shape_infer(c)) << "cvvt trial " << trial;
  }
}

// --- patch geometry --------------------------------------------------------

TEST(Patchify, AdniExtentsGiveEightyPatches) {
  EXPECT_EQ(vvit_padded_extents({169, 208, 179}, 50), (Extents3{200, 250, 200}));
  Tensor x = Tensor::zeros(Shape{1, 1, 169, 208, 179});
  const Tensor p = vvit_patchify(x, 50);
  EXPECT_EQ(p.shape(), Shape({1, 80, 125000}));
}

TEST(Patchify, SinglePatchEqualsFlattenedInput) {
  Rng rng(6);
  Tensor x = input_of({50, 50, 50}, rng);
  const Tensor p = vvit_patchify(x, 50);
  EXPECT_EQ(p.shape(), Shape({1, 1, 125000}));
  EXPECT_EQ(p.to_vector(), x.to_vector());
}

TEST(Patchify, OrderIsDepthMajorWithinAndAcrossPatches) {
  std::vector<double> v(4 * 2 * 2);
  std::iota(v.begin(), v.end(), 0.0);
  Tensor x = Tensor::from_values(Shape{1, 1, 4, 2, 2}, v);
  const Tensor p = vvit_patchify(x, 2);
  ASSERT_EQ(p.shape(), Shape({1, 2, 8}));
  EXPECT_EQ(p.to_vector(), (std::vector<double>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15}));

  Tensor y = Tensor::from_values(Shape{1, 1, 1, 1, 3}, {1, 2, 3});
  EXPECT_EQ(vvit_patchify(y, 2).to_vector(), (std::vector<double>{1, 2, 0, 0, 0, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0}));
}

TEST(PatchifyProperty, AssembleThenCropReconstructsInput) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const Extents3 e{pick(rng, 1, 11), pick(rng, 1, 11), pick(rng, 1, 11)};
    const std::int64_t edge = pick(rng, 1, 6);
    const std::int64_t n = pick(rng, 1, 2);
    Tensor x = random_tensor(Shape{n, 1, e[0], e[1], e[2]}, rng);
    const Extents3 padded = vvit_padded_extents(e, edge);
    for (int a = 0; a < 3; ++a) {
      EXPECT_EQ(padded[a] % edge, 0);
      EXPECT_LT(padded[a] - e[a], edge);
    }
    const Tensor p = vvit_patchify(x, edge);
    EXPECT_EQ(p.shape()[1], padded[0] * padded[1] * padded[2] / (edge * edge * edge));
    const Tensor full = vvit_assemble(p, padded, edge);
    const Tensor back =
        crop3d(full, Pad3d{{{0, padded[0] - e[0]}, {0, padded[1] - e[1]}, {0, padded[2] - e[2]}}});
    ASSERT_EQ(back.to_vector(), x.to_vector()) << "trial " << trial;
  }
}

// --- parameter accounting --------------------------------------------------

TEST(ParamCount, ViTTinyPatchEmbeddingAndEncoder) {
  Rng rng(8);
  VViT vvit(VViTConfig{}, DType::f32, rng);
  const auto pc = param_count(vvit);
  EXPECT_EQ(pc.group("embedding"), 50 * 50 * 50 * 192 + 192);
  EXPECT_EQ(pc.group("embedding"), 24'000'192);
  EXPECT_NEAR(static_cast<double>(pc.group("encoder")), 5.3e6, 0.53e6);
  EXPECT_GT(static_cast<double>(pc.group("embedding")) / static_cast<double>(pc.group("encoder")), 4.0);
  std::int64_t sum = 0;
  for (const auto& [_, n] : pc.groups) sum += n;
  EXPECT_EQ(sum, pc.total);
  EXPECT_EQ(pc.total, vvit.parameter_count());
}

TEST(ParamCount, CVVTTinyEmbeddingIsSmallAndBelowEncoder) {
  Rng rng(9);
  CVVT cvvt(CVVTConfig{}, DType::f32, rng);
  const auto pc = param_count(cvvt);
  const auto embed = pc.group("embedding");
  EXPECT_GE(embed, 500'000);
  EXPECT_LE(embed, 3'000'000);
  EXPECT_LT(static_cast<double>(embed) / static_cast<double>(pc.group("encoder")), 1.0);
  // conv stages k3 with bias then the shared 1000 -> 192 projection
  const std::int64_t stack = (27 * 1 + 1) * 32 + (27 * 32 + 1) * 64 + (27 * 64 + 1) * 96 + (27 * 96 + 1) * 128 +
                             (27 * 128 + 1) * 80;
  EXPECT_EQ(embed, stack + 1000 * 192 + 192);
  EXPECT_EQ(pc.group("pos_embed"), 81 * 192);
  EXPECT_EQ(pc.group("head"), 192 * 2 + 2);
}

TEST(ParamCount, ConvNetBlocksHaveNoConvBias) {
  Rng rng(10);
  ConvNet3D4Config cfg;
  ConvNet3D4 model(cfg, DType::f32, rng);
  const auto pc = param_count(model);
  const std::int64_t convs = 27 * (1 * 128 + 128 * 192 + 192 * 256 + 256 * 512);
  const std::int64_t norms = 2 * (128 + 192 + 256 + 512);
  EXPECT_EQ(pc.group("blocks"), convs + norms);
  EXPECT_EQ(pc.group("embedding"), 4096 * 512 + 512);
  EXPECT_EQ(pc.group("head"), 512 * 2 + 2);
}

TEST(ParamCount, EmptyModuleIsZero) {
  nn::Module empty;
  const auto pc = param_count(empty);
  EXPECT_EQ(pc.total, 0);
  EXPECT_TRUE(pc.groups.empty());
}

TEST(ParamCount, AbsentGroupCountsZero) {
  nn::Module empty;
  EXPECT_EQ(param_count(empty).group("encoder"), 0);
}

TEST(ModelSizes, RowsMatchTheThreeSizes) {
  const auto t = ViTSizeConfig::of(ModelSize::tiny);
  const auto s = ViTSizeConfig::of(ModelSize::small);
  const auto b = ViTSizeConfig::of(ModelSize::base);
  EXPECT_EQ(t.embed_dim, 192);
  EXPECT_EQ(t.num_heads, 3);
  EXPECT_EQ(s.embed_dim, 384);
  EXPECT_EQ(s.num_heads, 6);
  EXPECT_EQ(b.embed_dim, 768);
  EXPECT_EQ(b.num_heads, 12);
  for (const auto& c : {t, s, b}) {
    EXPECT_EQ(c.depth, 12);
    EXPECT_EQ(c.mlp_ratio, 4);
    EXPECT_EQ(c.embed_dim % c.num_heads, 0);
  }
}

TEST(ModelSizes, CVVTInstantiatesWithHeadCountsThreeSixTwelve) {
  Rng rng(11);
  const std::array<std::pair<ModelSize, std::int64_t>, 3> rows{
      {{ModelSize::tiny, 3}, {ModelSize::small, 6}, {ModelSize::base, 12}}};
  for (const auto& [size, heads] : rows) {
    CVVTConfig cfg;
    cfg.size = ViTSizeConfig::of(size);
    CVVT model(cfg, DType::f32, rng);
    EXPECT_EQ(model.classifier.encoder.blocks[0].attn.num_heads(), heads);
    Tensor x = input_of(cfg.input, rng);
    model.eval();
    EXPECT_EQ(model.forward(x, rng).shape(), Shape({1, 2}));
  }
}

// --- forward contracts -----------------------------------------------------

TEST(Forward, OutputShapeIsOneByTwo) {
  Rng rng(12);
  VViTConfig v;
  v.size = small_vit(6, 2, 1);
  v.patch_edge = 5;
  v.input = {11, 9, 10};
  VViT vvit(v, DType::f32, rng);
  EXPECT_EQ(vvit.forward(input_of(v.input, rng), rng).shape(), Shape({1, 2}));
  EXPECT_EQ(vvit.num_patches(), 3 * 2 * 2);

  auto c = narrow_convnet({81, 81, 81});
  ConvNet3D4 conv(c, DType::f32, rng);
  EXPECT_EQ(conv.forward(input_of(c.input, rng), rng).shape(), Shape({1, 2}));
  EXPECT_EQ(conv.embed(input_of(c.input, rng), rng).shape(), Shape({1, 8}));
}

TEST(Forward, WrongInputExtentsAreRejected) {
  Rng rng(13);
  auto c = narrow_convnet({81, 81, 81});
  ConvNet3D4 conv(c, DType::f32, rng);
  EXPECT_THROW((void)conv.forward(input_of({82, 81, 81}, rng), rng), ShapeError);
  CVVT cvvt(small_cvvt({8, 8, 8}), DType::f32, rng);
  EXPECT_THROW((void)cvvt.forward(input_of({9, 8, 8}, rng), rng), ShapeError);
}

TEST(Forward, EvalModeIsBitwiseDeterministic) {
  Rng rng(14);
  auto c = narrow_convnet({81, 81, 81});
  for (auto norm : {NormKind::instance3d, NormKind::batch3d}) {
    c.norm = norm;
    ConvNet3D4 model(c, DType::f32, rng);
    model.eval();
    Tensor x = input_of(c.input, rng);
    Rng a(1), b(2);
    EXPECT_EQ(model.forward(x, a).to_vector(), model.forward(x, b).to_vector());
  }
  CVVT cvvt(CVVTConfig{}, DType::f32, rng);
  cvvt.eval();
  Tensor x = input_of({32, 32, 32}, rng);
  Rng a(1), b(2);
  EXPECT_EQ(cvvt.forward(x, a).to_vector(), cvvt.forward(x, b).to_vector());
}

TEST(Forward, TrainingModeDropoutDependsOnRng) {
  Rng rng(15);
  auto c = narrow_convnet({81, 81, 81}, 8);
  ConvNet3D4 model(c, DType::f32, rng);
  model.train();
  Tensor x = input_of(c.input, rng);
  Rng a(1), b(1), d(2);
  const auto first = model.forward(x, a).to_vector();
  EXPECT_EQ(first, model.forward(x, b).to_vector());
  EXPECT_NE(first, model.forward(x, d).to_vector());
}

TEST(Forward, InstanceNormConvNetIgnoresGlobalIntensityScale) {
  Rng rng(16);
  auto c = narrow_convnet({81, 81, 81}, 6);
  ConvNet3D4 model(c, DType::f32, rng);
  model.eval();
  for (int trial = 0; trial < 3; ++trial) {
    Tensor x = input_of(c.input, rng);
    const auto base = model.forward(x, rng).to_vector();
    for (double scale : {0.5, 3.0, 10.0}) {
      const auto scaled = model.forward(mul(x, scale), rng).to_vector();
      EXPECT_LE(testing::max_abs_diff(base, scaled), 1e-4) << "scale " << scale;
    }
  }
}

TEST(ForwardProperty, OutputsStayFiniteForWideInputsAcrossSeeds) {
  Rng data(17);
  VViTConfig v;
  v.size = small_vit(12, 3, 2);
  v.patch_edge = 4;
  v.input = {8, 9, 7};
  auto c = small_cvvt({12, 12, 12});
  auto k = narrow_convnet({81, 81, 81}, 2);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng init(seed);
    VViT vvit(v, DType::f32, init);
    CVVT cvvt(c, DType::f32, init);
    vvit.eval();
    cvvt.eval();
    const Tensor xv = random_tensor(Shape{1, 1, 8, 9, 7}, data, -10.0, 10.0, DType::f32);
    const Tensor xc = random_tensor(Shape{1, 1, 12, 12, 12}, data, -10.0, 10.0, DType::f32);
    ASSERT_TRUE(testing::all_finite(vvit.forward(xv, init).to_vector())) << "vvit seed " << seed;
    ASSERT_TRUE(testing::all_finite(cvvt.forward(xc, init).to_vector())) << "cvvt seed " << seed;
    if (seed % 10 == 0) {
      ConvNet3D4 conv(k, DType::f32, init);
      conv.eval();
      const Tensor xk = random_tensor(Shape{1, 1, 81, 81, 81}, data, -10.0, 10.0, DType::f32);
      ASSERT_TRUE(testing::all_finite(conv.forward(xk, init).to_vector())) << "convnet seed " << seed;
    }
  }
}

TEST(ForwardProperty, VViTWithZeroPositionsIsInvariantToPatchPermutation) {
  Rng rng(18);
  VViTConfig v;
  v.size = small_vit(8, 2, 2);
  v.patch_edge = 3;
  v.input = {6, 6, 6};
  VViT model(v, DType::f64, rng);
  model.eval();
  std::fill(model.classifier.pos_embed.mutable_data<double>().begin(),
            model.classifier.pos_embed.mutable_data<double>().end(), 0.0);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(Shape{1, 1, 6, 6, 6}, rng);
    std::vector<std::int64_t> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    const Tensor patches = vvit_patchify(x, 3);
    std::vector<Tensor> moved;
    for (auto p : perm) moved.push_back(slice(patches, 1, p, 1));
    const Tensor y = vvit_assemble(concat(moved, 1), {6, 6, 6}, 3);
    const auto a = model.forward(x, rng).to_vector();
    const auto b = model.forward(y, rng).to_vector();
    EXPECT_LE(testing::max_abs_diff(a, b), 1e-12) << "trial " << trial;
  }
}

TEST(ForwardProperty, CVVTWithZeroPositionsIsInvariantToTokenChannelPermutation) {
  Rng rng(19);
  auto c = small_cvvt({8, 8, 8});
  CVVT model(c, DType::f64, rng);
  model.eval();
  std::fill(model.classifier.pos_embed.mutable_data<double>().begin(),
            model.classifier.pos_embed.mutable_data<double>().end(), 0.0);
  const Tensor x = random_tensor(Shape{1, 1, 8, 8, 8}, rng);
  const auto before = model.forward(x, rng).to_vector();

  auto& last = model.embedding.stack[model.embedding.stack.size() - 1];
  const std::int64_t out = last.weight.shape()[0];
  const std::int64_t per = last.weight.numel() / out;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::int64_t> perm(static_cast<std::size_t>(out));
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    const auto w = last.weight.to_vector();
    const auto bias = last.bias.to_vector();
    auto wd = last.weight.mutable_data<double>();
    auto bd = last.bias.mutable_data<double>();
    for (std::int64_t o = 0; o < out; ++o) {
      const auto src = perm[static_cast<std::size_t>(o)];
      std::copy_n(w.begin() + src * per, per, wd.begin() + o * per);
      bd[static_cast<std::size_t>(o)] = bias[static_cast<std::size_t>(src)];
    }
    EXPECT_LE(testing::max_abs_diff(before, model.forward(x, rng).to_vector()), 1e-12) << "trial " << trial;
  }
}

// --- gradients through whole models ----------------------------------------

GradcheckReport model_gradcheck(Model& model, const Tensor& x, std::size_t coords, std::uint64_t seed) {
  Rng unused(0);
  const std::vector<std::int64_t> y{1};
  std::vector<Tensor> params;
  for (auto& [_, p] : model.named_parameters()) params.push_back(p);
  GradcheckOptions opt;
  opt.tol = 1e-4;
  opt.coords_per_input = coords;
  opt.seed = seed;
  model.eval();
  return gradcheck([&](std::span<const Tensor>) { return nn::cross_entropy(model.forward(x, unused), y); }, params,
                   opt);
}

TEST(ModelGradcheck, SmallVViT) {
  Rng rng(20);
  VViTConfig v;
  v.size = small_vit(6, 2, 1);
  v.patch_edge = 2;
  v.input = {3, 4, 3};
  VViT model(v, DType::f64, rng);
  const auto rep = model_gradcheck(model, random_tensor(Shape{1, 1, 3, 4, 3}, rng), 6, 1);
  EXPECT_TRUE(rep.passed) << rep.summary();
}

TEST(ModelGradcheck, SmallCVVT) {
  Rng rng(21);
  CVVT model(small_cvvt({6, 6, 6}), DType::f64, rng);
  const auto rep = model_gradcheck(model, random_tensor(Shape{1, 1, 6, 6, 6}, rng), 6, 2);
  EXPECT_TRUE(rep.passed) << rep.summary();
}

TEST(ModelGradcheck, NarrowConvNetBothNorms) {
  Rng rng(22);
  for (auto norm : {NormKind::instance3d, NormKind::batch3d}) {
    auto c = narrow_convnet({81, 81, 81}, 2);
    c.norm = norm;
    ConvNet3D4 model(c, DType::f64, rng);
    const auto rep = model_gradcheck(model, random_tensor(Shape{1, 1, 81, 81, 81}, rng), 3, 3);
    EXPECT_TRUE(rep.passed) << norm_kind_name(norm) << ": " << rep.summary();
  }
}

// --- configuration plumbing ------------------------------------------------

TEST(ModelConfig, JsonRoundTripAndLabel) {
  ModelConfig cfg;
  cfg.kind = ModelKind::cvvt;
  cfg.size = ModelSize::small;
  cfg.norm = NormKind::batch3d;
  cfg.input = {40, 32, 36};
  cfg.dtype = DType::f64;
  const auto back = model_config_from_json(model_config_to_json(cfg));
  EXPECT_EQ(back.kind, cfg.kind);
  EXPECT_EQ(back.size, cfg.size);
  EXPECT_EQ(back.norm, cfg.norm);
  EXPECT_EQ(back.input, cfg.input);
  EXPECT_EQ(back.dtype, cfg.dtype);
  EXPECT_FALSE(cfg.label().empty());
}

TEST(ModelConfig, NamesParseBothWaysAndRejectUnknown) {
  for (auto k : {ModelKind::vvit, ModelKind::cvvt, ModelKind::convnet3d4}) {
    EXPECT_EQ(parse_model_kind(model_kind_name(k)), k);
  }
  for (auto s : {ModelSize::tiny, ModelSize::small, ModelSize::base}) {
    EXPECT_EQ(parse_model_size(model_size_name(s)), s);
  }
  EXPECT_THROW((void)parse_model_kind("resnet"), ConfigError);
  EXPECT_THROW((void)parse_model_size("huge"), ConfigError);
}

TEST(ModelConfig, BuildModelDispatchesOnKind) {
  Rng rng(23);
  ModelConfig cfg;
  cfg.kind = ModelKind::cvvt;
  auto m = build_model(cfg, rng);
  ASSERT_NE(dynamic_cast<CVVT*>(m.get()), nullptr);
  EXPECT_EQ(m->input_extents(), (Extents3{32, 32, 32}));
  cfg.kind = ModelKind::convnet3d4;
  cfg.input = {81, 81, 81};
  EXPECT_NE(dynamic_cast<ConvNet3D4*>(build_model(cfg, rng).get()), nullptr);
  cfg.input = {32, 32, 32};
  EXPECT_THROW((void)build_model(cfg, rng), ShapeError);
}

}  // namespace
}  // namespace voxformer
