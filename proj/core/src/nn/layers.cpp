// SPDX-License-Identifier: Apache-2.0
#include "voxformer/nn/layers.hpp"

#include <cmath>

#include "voxformer/ops.hpp"

namespace voxformer::nn {

void Module::register_parameter(std::string name, Tensor& slot) {
  slot.set_requires_grad(true);
  params_.emplace_back(std::move(name), &slot);
}

void Module::register_buffer(std::string name, Tensor& slot) { buffers_.emplace_back(std::move(name), &slot); }

void Module::register_module(std::string name, Module& child) { children_.emplace_back(std::move(name), &child); }

void Module::collect(std::vector<NamedTensor>& out, const std::string& prefix, bool buffers) const {
  for (const auto& [name, slot] : buffers ? buffers_ : params_) out.emplace_back(prefix + name, *slot);
  for (const auto& [name, child] : children_) child->collect(out, prefix + name + ".", buffers);
}

std::vector<NamedTensor> Module::named_parameters() const {
  std::vector<NamedTensor> out;
  collect(out, "", false);
  return out;
}

std::vector<NamedTensor> Module::named_buffers() const {
  std::vector<NamedTensor> out;
  collect(out, "", true);
  return out;
}

std::vector<NamedTensor> Module::named_state() const {
  auto out = named_parameters();
  collect(out, "", true);
  return out;
}

std::vector<Tensor> Module::parameters() const {
  std::vector<Tensor> out;
  for (auto& [_, t] : named_parameters()) out.push_back(t);
  return out;
}

std::int64_t Module::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : named_parameters()) n += t.numel();
  return n;
}

std::vector<std::pair<std::string, const Module*>> Module::named_children() const {
  std::vector<std::pair<std::string, const Module*>> out;
  for (const auto& [name, child] : children_) out.emplace_back(name, child);
  return out;
}

void Module::train(bool training) {
  training_ = training;
  for (auto& [_, child] : children_) child->train(training);
}

void Module::zero_grad() {
  for (auto& [_, slot] : params_) slot->zero_grad();
  for (auto& [_, child] : children_) child->zero_grad();
}

void init_truncated_normal(Tensor& t, double stddev, Rng& rng) {
  dispatch(t.dtype(), [&]<typename T>() {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(rng.truncated_normal(stddev));
  });
}

void init_kaiming_normal(Tensor& t, double negative_slope, Rng& rng) {
  if (t.rank() < 2) throw ShapeError("kaiming init needs a weight of rank >= 2, got " + t.shape().to_string());
  const double fan_in = static_cast<double>(t.numel() / t.shape()[0]);
  const double gain = std::sqrt(2.0 / (1.0 + negative_slope * negative_slope));
  const double stddev = gain / std::sqrt(fan_in);
  dispatch(t.dtype(), [&]<typename T>() {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(rng.normal(0.0, stddev));
  });
}

Linear::Linear(std::int64_t in_features, std::int64_t out_features, bool with_bias, DType dtype, Rng& rng) {
  weight = Tensor::zeros(Shape{out_features, in_features}, dtype);
  init_truncated_normal(weight, 0.02, rng);
  register_parameter("weight", weight);
  if (with_bias) {
    bias = Tensor::zeros(Shape{out_features}, dtype);
    register_parameter("bias", bias);
  }
}

Tensor Linear::forward(const Tensor& x) const { return linear(x, weight, bias); }

Conv3d::Conv3d(const Conv3dParams& params, DType dtype, Rng& rng, double init_slope) : params_(params) {
  if (params.in_channels < 1 || params.out_channels < 1) throw ConfigError("conv3d channel counts must be >= 1");
  weight = Tensor::zeros(Shape{params.out_channels, params.in_channels, params.kernel[0], params.kernel[1],
                               params.kernel[2]},
                         dtype);
  init_kaiming_normal(weight, init_slope, rng);
  register_parameter("weight", weight);
  if (params.bias) {
    bias = Tensor::zeros(Shape{params.out_channels}, dtype);
    register_parameter("bias", bias);
  }
}

Tensor Conv3d::forward(const Tensor& x) const {
  return conv3d(x, weight, bias, Conv3dGeometry{params_.stride, params_.padding});
}

Extents3 Conv3d::output_extents(const Extents3& input) const {
  return conv_output_extents(input, params_.kernel, params_.stride, params_.padding);
}

std::string_view norm_kind_name(NormKind kind) { return kind == NormKind::batch3d ? "bn" : "in"; }

NormKind parse_norm_kind(std::string_view text) {
  if (text == "bn" || text == "batch" || text == "batch3d") return NormKind::batch3d;
  if (text == "in" || text == "instance" || text == "instance3d") return NormKind::instance3d;
  throw ConfigError("unknown normalization '" + std::string(text) + "' (expected bn or in)");
}

Norm3d::Norm3d(const NormParams& params, DType dtype) : params_(params) {
  if (!(params.eps > 0.0)) throw ConfigError("normalization eps must be positive");
  if (params.num_features < 1) throw ConfigError("normalization needs at least one feature");
  gamma = Tensor::ones(Shape{params.num_features}, dtype);
  beta = Tensor::zeros(Shape{params.num_features}, dtype);
  register_parameter("gamma", gamma);
  register_parameter("beta", beta);
  if (params.kind == NormKind::batch3d) {
    stats.mean = Tensor::zeros(Shape{params.num_features}, dtype);
    stats.var = Tensor::ones(Shape{params.num_features}, dtype);
    stats.momentum = params.momentum;
    register_buffer("running_mean", stats.mean);
    register_buffer("running_var", stats.var);
  }
}

Tensor Norm3d::forward(const Tensor& x) {
  if (params_.kind == NormKind::batch3d) return batchnorm3d(x, gamma, beta, stats, training(), params_.eps);
  return instancenorm3d(x, gamma, beta, params_.eps);
}

LayerNorm::LayerNorm(std::int64_t dim, DType dtype, double eps) : eps_(eps) {
  if (!(eps > 0.0)) throw ConfigError("layer norm eps must be positive");
  gamma = Tensor::ones(Shape{dim}, dtype);
  beta = Tensor::zeros(Shape{dim}, dtype);
  register_parameter("gamma", gamma);
  register_parameter("beta", beta);
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps_); }

namespace {

std::int64_t checked_heads(std::int64_t embed_dim, std::int64_t num_heads) {
  if (num_heads < 1 || embed_dim < 1 || embed_dim % num_heads != 0) {
    throw ConfigError("embedding " + std::to_string(embed_dim) + " is not divisible by " + std::to_string(num_heads) +
                      " heads");
  }
  return num_heads;
}

}  // namespace

MultiHeadAttention::MultiHeadAttention(std::int64_t embed_dim, std::int64_t num_heads, DType dtype, Rng& rng)
    : query(embed_dim, embed_dim, true, dtype, rng),
      key(embed_dim, embed_dim, true, dtype, rng),
      value(embed_dim, embed_dim, true, dtype, rng),
      out(embed_dim, embed_dim, true, dtype, rng),
      heads_(checked_heads(embed_dim, num_heads)) {
  register_module("query", query);
  register_module("key", key);
  register_module("value", value);
  register_module("out", out);
}

Tensor MultiHeadAttention::forward(const Tensor& tokens) const {
  Tensor mixed = scaled_dot_product_attention(query.forward(tokens), key.forward(tokens), value.forward(tokens), heads_);
  return out.forward(mixed);
}

Mlp::Mlp(std::int64_t embed_dim, std::int64_t hidden_dim, DType dtype, Rng& rng)
    : fc1(embed_dim, hidden_dim, true, dtype, rng), fc2(hidden_dim, embed_dim, true, dtype, rng) {
  register_module("fc1", fc1);
  register_module("fc2", fc2);
}

Tensor Mlp::forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

EncoderBlock::EncoderBlock(std::int64_t embed_dim, std::int64_t num_heads, std::int64_t mlp_ratio, DType dtype,
                           Rng& rng)
    : norm1(embed_dim, dtype),
      attn(embed_dim, num_heads, dtype, rng),
      norm2(embed_dim, dtype),
      mlp(embed_dim, embed_dim * mlp_ratio, dtype, rng) {
  register_module("norm1", norm1);
  register_module("attn", attn);
  register_module("norm2", norm2);
  register_module("mlp", mlp);
}

Tensor EncoderBlock::forward(const Tensor& x) const {
  Tensor h = add(x, attn.forward(norm1.forward(x)));
  return add(h, mlp.forward(norm2.forward(h)));
}

TransformerEncoder::TransformerEncoder(const EncoderParams& params, DType dtype, Rng& rng)
    : norm(params.embed_dim, dtype), params_(params) {
  if (params.depth < 0) throw ConfigError("encoder depth must be >= 0");
  if (params.mlp_ratio < 1) throw ConfigError("mlp ratio must be >= 1");
  checked_heads(params.embed_dim, params.num_heads);
  for (std::int64_t i = 0; i < params.depth; ++i) {
    blocks.push_back(std::make_unique<EncoderBlock>(params.embed_dim, params.num_heads, params.mlp_ratio, dtype, rng));
  }
  register_module("blocks", blocks);
  register_module("norm", norm);
}

Tensor TransformerEncoder::forward(const Tensor& tokens) const {
  if (tokens.rank() != 3 || tokens.shape()[2] != params_.embed_dim) {
    throw ShapeError("encoder expects [N,T," + std::to_string(params_.embed_dim) + "], got " +
                     tokens.shape().to_string());
  }
  Tensor h = tokens;
  for (std::size_t i = 0; i < blocks.size(); ++i) h = blocks[i].forward(h);
  return norm.forward(h);
}

}  // namespace voxformer::nn
