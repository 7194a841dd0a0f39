// SPDX-License-Identifier: Apache-2.0
//
// Parameter-owning layers. Modules are neither copyable nor movable so that
// the registry can hold stable pointers into derived members; build them in
// place or behind unique_ptr.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "voxformer/nn/functional.hpp"
#include "voxformer/rng.hpp"
#include "voxformer/tensor.hpp"

namespace voxformer::nn {

using NamedTensor = std::pair<std::string, Tensor>;

class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  /// Dotted names ("encoder.blocks.0.attn.q.weight") in registration order.
  [[nodiscard]] std::vector<NamedTensor> named_parameters() const;
  /// Non-trainable state such as running statistics.
  [[nodiscard]] std::vector<NamedTensor> named_buffers() const;
  /// Parameters followed by buffers; the checkpoint payload.
  [[nodiscard]] std::vector<NamedTensor> named_state() const;
  [[nodiscard]] std::vector<Tensor> parameters() const;
  [[nodiscard]] std::int64_t parameter_count() const;
  [[nodiscard]] std::vector<std::pair<std::string, const Module*>> named_children() const;

  void train(bool training = true);
  void eval() { train(false); }
  [[nodiscard]] bool training() const noexcept { return training_; }
  void zero_grad();

 protected:
  void register_parameter(std::string name, Tensor& slot);
  void register_buffer(std::string name, Tensor& slot);
  void register_module(std::string name, Module& child);

 private:
  void collect(std::vector<NamedTensor>& out, const std::string& prefix, bool buffers) const;

  std::vector<std::pair<std::string, Tensor*>> params_;
  std::vector<std::pair<std::string, Tensor*>> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
  bool training_ = true;
};

/// Owning list of homogeneous children named "0", "1", ...
template <class M>
class ModuleList : public Module {
 public:
  M& push_back(std::unique_ptr<M> m) {
    items_.push_back(std::move(m));
    register_module(std::to_string(items_.size() - 1), *items_.back());
    return *items_.back();
  }
  [[nodiscard]] std::size_t size() const { return items_.size(); }
  [[nodiscard]] M& operator[](std::size_t i) { return *items_[i]; }
  [[nodiscard]] const M& operator[](std::size_t i) const { return *items_[i]; }

 private:
  std::vector<std::unique_ptr<M>> items_;
};

/// Fills `t` from N(0, stddev) truncated to two standard deviations.
void init_truncated_normal(Tensor& t, double stddev, Rng& rng);
/// He-normal fan-in initialization for a conv weight feeding a leaky ReLU.
void init_kaiming_normal(Tensor& t, double negative_slope, Rng& rng);

class Linear : public Module {
 public:
  Linear(std::int64_t in_features, std::int64_t out_features, bool bias, DType dtype, Rng& rng);
  Tensor forward(const Tensor& x) const;

  Tensor weight;
  Tensor bias;
};

struct Conv3dParams {
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  Extents3 kernel{3, 3, 3};
  Extents3 stride{1, 1, 1};
  Extents3 padding{0, 0, 0};
  bool bias = true;
};

class Conv3d : public Module {
 public:
  Conv3d(const Conv3dParams& params, DType dtype, Rng& rng, double init_slope = 0.2);
  Tensor forward(const Tensor& x) const;
  [[nodiscard]] const Conv3dParams& params() const noexcept { return params_; }
  [[nodiscard]] Extents3 output_extents(const Extents3& input) const;

  Tensor weight;
  Tensor bias;

 private:
  Conv3dParams params_;
};

enum class NormKind { batch3d, instance3d };

std::string_view norm_kind_name(NormKind kind);
NormKind parse_norm_kind(std::string_view text);

struct NormParams {
  NormKind kind = NormKind::instance3d;
  std::int64_t num_features = 1;
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Batch or instance normalization over a volume with per-channel affine.
class Norm3d : public Module {
 public:
  Norm3d(const NormParams& params, DType dtype);
  Tensor forward(const Tensor& x);
  [[nodiscard]] const NormParams& params() const noexcept { return params_; }

  Tensor gamma;
  Tensor beta;
  RunningStats stats;

 private:
  NormParams params_;
};

class LayerNorm : public Module {
 public:
  LayerNorm(std::int64_t dim, DType dtype, double eps = 1e-5);
  Tensor forward(const Tensor& x) const;

  Tensor gamma;
  Tensor beta;

 private:
  double eps_;
};

class MultiHeadAttention : public Module {
 public:
  MultiHeadAttention(std::int64_t embed_dim, std::int64_t num_heads, DType dtype, Rng& rng);
  Tensor forward(const Tensor& tokens) const;
  [[nodiscard]] std::int64_t num_heads() const noexcept { return heads_; }

  Linear query;
  Linear key;
  Linear value;
  Linear out;

 private:
  std::int64_t heads_;
};

class Mlp : public Module {
 public:
  Mlp(std::int64_t embed_dim, std::int64_t hidden_dim, DType dtype, Rng& rng);
  Tensor forward(const Tensor& x) const;

  Linear fc1;
  Linear fc2;
};

/// Pre-norm block: x + attn(norm1(x)), then x + mlp(norm2(x)).
class EncoderBlock : public Module {
 public:
  EncoderBlock(std::int64_t embed_dim, std::int64_t num_heads, std::int64_t mlp_ratio, DType dtype, Rng& rng);
  Tensor forward(const Tensor& x) const;

  LayerNorm norm1;
  MultiHeadAttention attn;
  LayerNorm norm2;
  Mlp mlp;
};

struct EncoderParams {
  std::int64_t embed_dim = 192;
  std::int64_t num_heads = 3;
  std::int64_t depth = 12;
  std::int64_t mlp_ratio = 4;
};

/// `depth` blocks followed by a final layer norm.
class TransformerEncoder : public Module {
 public:
  TransformerEncoder(const EncoderParams& params, DType dtype, Rng& rng);
  Tensor forward(const Tensor& tokens) const;
  [[nodiscard]] const EncoderParams& params() const noexcept { return params_; }

  ModuleList<EncoderBlock> blocks;
  LayerNorm norm;

 private:
  EncoderParams params_;
};

}  // namespace voxformer::nn
