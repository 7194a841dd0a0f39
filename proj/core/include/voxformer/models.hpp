// SPDX-License-Identifier: Apache-2.0
//
// The three volumetric classifiers, their configurations, parameter
// accounting and shape-only inference.

#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "voxformer/nn/layers.hpp"

namespace voxformer {

using nn::Extents3;
using nn::NormKind;

enum class ModelKind { vvit, cvvt, convnet3d4 };
enum class ModelSize { tiny, small, base };

std::string_view model_kind_name(ModelKind kind);
ModelKind parse_model_kind(std::string_view text);
std::string_view model_size_name(ModelSize size);
ModelSize parse_model_size(std::string_view text);

struct ViTSizeConfig {
  std::int64_t embed_dim = 192;
  std::int64_t num_heads = 3;
  std::int64_t depth = 12;
  std::int64_t mlp_ratio = 4;

  static ViTSizeConfig of(ModelSize size);
};

struct VViTConfig {
  ViTSizeConfig size;
  std::int64_t patch_edge = 50;
  Extents3 input{169, 208, 179};
  std::int64_t num_classes = 2;
};

struct ConvStage {
  std::int64_t out_channels = 0;
  std::int64_t kernel = 3;
  std::int64_t stride = 2;
  std::int64_t padding = 1;
};

struct CVVTConfig {
  ViTSizeConfig size;
  /// Each stage is conv3d(with bias) followed by leaky ReLU; the last stage's
  /// channel count is the token count.
  std::vector<ConvStage> embed_stack{{32}, {64}, {96}, {128}, {80}};
  double stack_slope = 0.2;
  Extents3 grid{10, 10, 10};
  Extents3 input{32, 32, 32};
  std::int64_t num_classes = 2;
};

struct ConvNet3D4Config {
  std::array<std::int64_t, 5> channels{1, 128, 192, 256, 512};
  std::int64_t conv_kernel = 3;
  std::int64_t conv_stride = 1;
  std::int64_t conv_padding = 1;
  bool conv_bias = false;
  nn::Pool3dGeometry pool;
  double leaky_slope = 0.2;
  double dropout = 0.4;
  NormKind norm = NormKind::instance3d;
  std::int64_t embed_dim = 512;
  std::int64_t num_classes = 2;
  Extents3 input{169, 208, 179};
};

/// The CLI-level selector: variant x size x normalization at some input size.
struct ModelConfig {
  ModelKind kind = ModelKind::convnet3d4;
  ModelSize size = ModelSize::tiny;
  NormKind norm = NormKind::instance3d;
  Extents3 input{32, 32, 32};
  DType dtype = DType::f32;

  [[nodiscard]] std::string label() const;
};

VViTConfig to_vvit(const ModelConfig& cfg);
CVVTConfig to_cvvt(const ModelConfig& cfg);
ConvNet3D4Config to_convnet(const ModelConfig& cfg);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(std::string_view json);

struct ShapeStep {
  std::string layer;
  std::vector<std::int64_t> shape;

  bool operator==(const ShapeStep&) const = default;
};
using ShapeTrace = std::vector<ShapeStep>;

std::string format_trace(const ShapeTrace& trace);

/// Symbolic forward for batch size 1. Throws ShapeError naming the layer
/// whose extents underflow.
ShapeTrace shape_infer(const VViTConfig& cfg);
ShapeTrace shape_infer(const CVVTConfig& cfg);
ShapeTrace shape_infer(const ConvNet3D4Config& cfg);
ShapeTrace shape_infer(const ModelConfig& cfg);

struct ParamCount {
  /// Top-level submodules and parameters in registration order.
  std::vector<std::pair<std::string, std::int64_t>> groups;
  std::int64_t total = 0;

  [[nodiscard]] std::int64_t group(std::string_view name) const;
};

ParamCount param_count(const nn::Module& model);

class Model : public nn::Module {
 public:
  /// x is [N, 1, D, H, W]; returns logits [N, num_classes]. `rng` feeds
  /// stochastic layers in training mode. When `trace` is given, the shapes
  /// of sample 0 are appended in shape_infer's vocabulary.
  virtual Tensor forward(const Tensor& x, Rng& rng, ShapeTrace* trace = nullptr) = 0;
  [[nodiscard]] virtual Extents3 input_extents() const = 0;
};

/// Splits [N, 1, D, H, W] into zero-padded, non-overlapping edge^3 blocks,
/// D-major, each flattened to edge^3 values: [N, P, edge^3].
Tensor vvit_patchify(const Tensor& x, std::int64_t patch_edge);
/// Inverse of vvit_patchify onto the padded grid [N, 1, pD, pH, pW].
Tensor vvit_assemble(const Tensor& patches, const Extents3& padded, std::int64_t patch_edge);
Extents3 vvit_padded_extents(const Extents3& input, std::int64_t patch_edge);

/// Class token, positional table, encoder and linear head shared by both
/// transformer variants. Owners register the members under their own names.
class TokenClassifier {
 public:
  TokenClassifier(std::int64_t num_tokens, const ViTSizeConfig& size, std::int64_t num_classes, DType dtype,
                  Rng& rng);
  /// tokens [N, P, E] -> logits [N, num_classes].
  Tensor forward(const Tensor& tokens, ShapeTrace* trace) const;

  Tensor cls_token;
  Tensor pos_embed;
  nn::TransformerEncoder encoder;
  nn::Linear head;
};

class VViT : public Model {
 public:
  VViT(const VViTConfig& cfg, DType dtype, Rng& rng);
  Tensor forward(const Tensor& x, Rng& rng, ShapeTrace* trace = nullptr) override;
  [[nodiscard]] Extents3 input_extents() const override { return cfg_.input; }
  [[nodiscard]] const VViTConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] std::int64_t num_patches() const noexcept { return patches_; }

 private:
  VViTConfig cfg_;
  std::int64_t patches_;

 public:
  nn::Linear embedding;
  TokenClassifier classifier;
};

class CVVTEmbedding : public nn::Module {
 public:
  CVVTEmbedding(const CVVTConfig& cfg, DType dtype, Rng& rng);
  /// x [N,1,D,H,W] -> tokens [N, C_last, E].
  Tensor forward(const Tensor& x, ShapeTrace* trace) const;

  nn::ModuleList<nn::Conv3d> stack;
  nn::Linear project;

 private:
  CVVTConfig cfg_;
};

class CVVT : public Model {
 public:
  CVVT(const CVVTConfig& cfg, DType dtype, Rng& rng);
  Tensor forward(const Tensor& x, Rng& rng, ShapeTrace* trace = nullptr) override;
  [[nodiscard]] Extents3 input_extents() const override { return cfg_.input; }
  [[nodiscard]] const CVVTConfig& config() const noexcept { return cfg_; }

 private:
  CVVTConfig cfg_;

 public:
  CVVTEmbedding embedding;
  TokenClassifier classifier;
};

class ConvBlock : public nn::Module {
 public:
  ConvBlock(std::int64_t in_channels, std::int64_t out_channels, const ConvNet3D4Config& cfg, DType dtype, Rng& rng);
  Tensor forward(const Tensor& x, Rng& rng, ShapeTrace* trace = nullptr, const std::string& name = "block");

  nn::Conv3d conv;
  nn::Norm3d norm;

 private:
  nn::Pool3dGeometry pool_;
  double slope_;
  double dropout_;
};

class ConvNet3D4 : public Model {
 public:
  ConvNet3D4(const ConvNet3D4Config& cfg, DType dtype, Rng& rng);
  Tensor forward(const Tensor& x, Rng& rng, ShapeTrace* trace = nullptr) override;
  /// The embedding vector before the classifier, [N, embed_dim].
  Tensor embed(const Tensor& x, Rng& rng, ShapeTrace* trace = nullptr);
  [[nodiscard]] Extents3 input_extents() const override { return cfg_.input; }
  [[nodiscard]] const ConvNet3D4Config& config() const noexcept { return cfg_; }

 private:
  ConvNet3D4Config cfg_;
  std::int64_t flat_features_;

 public:
  nn::ModuleList<ConvBlock> blocks;
  nn::Linear embedding;
  nn::Linear head;
};

std::unique_ptr<Model> build_model(const ModelConfig& cfg, Rng& rng);

}  // namespace voxformer
