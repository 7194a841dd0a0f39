// SPDX-License-Identifier: Apache-2.0
#include "voxformer/models.hpp"

#include <algorithm>
#include <json.hpp>
#include <sstream>

#include "voxformer/ops.hpp"

namespace voxformer {

using nlohmann::json;
using std::int64_t;

std::string_view model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::vvit: return "vvit";
    case ModelKind::cvvt: return "cvvt";
    case ModelKind::convnet3d4: return "convnet3d4";
  }
  return "?";
}

ModelKind parse_model_kind(std::string_view text) {
  if (text == "vvit") return ModelKind::vvit;
  if (text == "cvvt") return ModelKind::cvvt;
  if (text == "convnet3d4" || text == "convnet") return ModelKind::convnet3d4;
  throw ConfigError("unknown model '" + std::string(text) + "' (expected vvit, cvvt or convnet3d4)");
}

std::string_view model_size_name(ModelSize size) {
  switch (size) {
    case ModelSize::tiny: return "tiny";
    case ModelSize::small: return "small";
    case ModelSize::base: return "base";
  }
  return "?";
}

ModelSize parse_model_size(std::string_view text) {
  if (text == "tiny") return ModelSize::tiny;
  if (text == "small") return ModelSize::small;
  if (text == "base") return ModelSize::base;
  throw ConfigError("unknown size '" + std::string(text) + "' (expected tiny, small or base)");
}

ViTSizeConfig ViTSizeConfig::of(ModelSize size) {
  switch (size) {
    case ModelSize::tiny: return {192, 3, 12, 4};
    case ModelSize::small: return {384, 6, 12, 4};
    case ModelSize::base: return {768, 12, 12, 4};
  }
  throw ConfigError("invalid model size");
}

std::string ModelConfig::label() const {
  std::string out(model_kind_name(kind));
  if (kind == ModelKind::convnet3d4) return out + "-" + std::string(nn::norm_kind_name(norm));
  return out + "-" + std::string(model_size_name(size));
}

VViTConfig to_vvit(const ModelConfig& cfg) {
  VViTConfig out;
  out.size = ViTSizeConfig::of(cfg.size);
  out.input = cfg.input;
  return out;
}

CVVTConfig to_cvvt(const ModelConfig& cfg) {
  CVVTConfig out;
  out.size = ViTSizeConfig::of(cfg.size);
  out.input = cfg.input;
  return out;
}

ConvNet3D4Config to_convnet(const ModelConfig& cfg) {
  ConvNet3D4Config out;
  out.norm = cfg.norm;
  out.input = cfg.input;
  return out;
}

std::string model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["kind"] = model_kind_name(cfg.kind);
  j["size"] = model_size_name(cfg.size);
  j["norm"] = nn::norm_kind_name(cfg.norm);
  j["input"] = cfg.input;
  j["dtype"] = dtype_name(cfg.dtype);
  return j.dump();
}

ModelConfig model_config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  try {
    ModelConfig cfg;
    cfg.kind = parse_model_kind(j.at("kind").get<std::string>());
    cfg.size = parse_model_size(j.at("size").get<std::string>());
    cfg.norm = nn::parse_norm_kind(j.at("norm").get<std::string>());
    cfg.input = j.at("input").get<Extents3>();
    cfg.dtype = parse_dtype(j.at("dtype").get<std::string>());
    return cfg;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

std::string format_trace(const ShapeTrace& trace) {
  std::ostringstream os;
  for (const auto& step : trace) {
    os << step.layer << " [";
    for (std::size_t i = 0; i < step.shape.size(); ++i) os << (i ? "," : "") << step.shape[i];
    os << "]\n";
  }
  return os.str();
}

namespace {

void check_input(const Extents3& input) {
  for (auto e : input) {
    if (e < 1) throw ShapeError("input extents must be >= 1");
  }
}

std::vector<int64_t> volume_shape(int64_t channels, const Extents3& e) { return {1, channels, e[0], e[1], e[2]}; }

void note(ShapeTrace* trace, std::string layer, const Tensor& t) {
  if (trace == nullptr) return;
  auto dims = t.shape().to_vector();
  dims[0] = 1;
  trace->push_back({std::move(layer), std::move(dims)});
}

void check_vit(const ViTSizeConfig& s, int64_t num_classes) {
  if (s.embed_dim < 1 || s.num_heads < 1 || s.embed_dim % s.num_heads != 0) {
    throw ConfigError("embedding " + std::to_string(s.embed_dim) + " is not divisible by " +
                      std::to_string(s.num_heads) + " heads");
  }
  if (s.depth < 0) throw ConfigError("encoder depth must be >= 0");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
}

void append_token_trace(ShapeTrace& t, int64_t tokens, const ViTSizeConfig& s, int64_t num_classes) {
  t.push_back({"embedding", {1, tokens, s.embed_dim}});
  t.push_back({"tokens", {1, tokens + 1, s.embed_dim}});
  t.push_back({"encoder", {1, tokens + 1, s.embed_dim}});
  t.push_back({"head", {1, num_classes}});
}

}  // namespace

Extents3 vvit_padded_extents(const Extents3& input, int64_t patch_edge) {
  if (patch_edge < 1) throw ConfigError("patch edge must be >= 1");
  check_input(input);
  Extents3 out{};
  for (int a = 0; a < 3; ++a) out[a] = (input[a] + patch_edge - 1) / patch_edge * patch_edge;
  return out;
}

ShapeTrace shape_infer(const VViTConfig& cfg) {
  check_vit(cfg.size, cfg.num_classes);
  const Extents3 padded = vvit_padded_extents(cfg.input, cfg.patch_edge);
  const int64_t e = cfg.patch_edge;
  const int64_t patches = (padded[0] / e) * (padded[1] / e) * (padded[2] / e);
  ShapeTrace t;
  t.push_back({"input", volume_shape(1, cfg.input)});
  t.push_back({"pad", volume_shape(1, padded)});
  t.push_back({"patchify", {1, patches, e * e * e}});
  append_token_trace(t, patches, cfg.size, cfg.num_classes);
  return t;
}

ShapeTrace shape_infer(const CVVTConfig& cfg) {
  check_vit(cfg.size, cfg.num_classes);
  check_input(cfg.input);
  if (cfg.embed_stack.empty()) throw ConfigError("CVVT embedding stack must have at least one stage");
  ShapeTrace t;
  t.push_back({"input", volume_shape(1, cfg.input)});
  Extents3 e = cfg.input;
  for (std::size_t i = 0; i < cfg.embed_stack.size(); ++i) {
    const auto& st = cfg.embed_stack[i];
    const std::string name = "stack" + std::to_string(i);
    e = nn::conv_output_extents(e, {st.kernel, st.kernel, st.kernel}, {st.stride, st.stride, st.stride},
                                {st.padding, st.padding, st.padding}, name.c_str());
    t.push_back({name, volume_shape(st.out_channels, e)});
  }
  const int64_t tokens = cfg.embed_stack.back().out_channels;
  const int64_t cells = cfg.grid[0] * cfg.grid[1] * cfg.grid[2];
  t.push_back({"grid", volume_shape(tokens, cfg.grid)});
  t.push_back({"tokens_flat", {1, tokens, cells}});
  append_token_trace(t, tokens, cfg.size, cfg.num_classes);
  return t;
}

ShapeTrace shape_infer(const ConvNet3D4Config& cfg) {
  check_input(cfg.input);
  if (cfg.channels[0] != 1) throw ConfigError("ConvNet3D-4 expects a single input channel");
  ShapeTrace t;
  t.push_back({"input", volume_shape(1, cfg.input)});
  Extents3 e = cfg.input;
  const int64_t k = cfg.conv_kernel, s = cfg.conv_stride, p = cfg.conv_padding;
  for (int b = 1; b <= 4; ++b) {
    const std::string name = "block" + std::to_string(b);
    e = nn::conv_output_extents(e, {k, k, k}, {s, s, s}, {p, p, p}, (name + ".conv").c_str());
    t.push_back({name + ".conv", volume_shape(cfg.channels[b], e)});
    e = nn::conv_output_extents(e, cfg.pool.kernel, cfg.pool.stride, cfg.pool.padding, (name + ".pool").c_str());
    t.push_back({name + ".pool", volume_shape(cfg.channels[b], e)});
  }
  t.push_back({"flatten", {1, cfg.channels[4] * e[0] * e[1] * e[2]}});
  t.push_back({"embedding", {1, cfg.embed_dim}});
  t.push_back({"head", {1, cfg.num_classes}});
  return t;
}

ShapeTrace shape_infer(const ModelConfig& cfg) {
  switch (cfg.kind) {
    case ModelKind::vvit: return shape_infer(to_vvit(cfg));
    case ModelKind::cvvt: return shape_infer(to_cvvt(cfg));
    case ModelKind::convnet3d4: return shape_infer(to_convnet(cfg));
  }
  throw ConfigError("invalid model kind");
}

int64_t ParamCount::group(std::string_view name) const {
  for (const auto& [g, n] : groups) {
    if (g == name) return n;
  }
  return 0;
}

ParamCount param_count(const nn::Module& model) {
  ParamCount out;
  for (const auto& [name, t] : model.named_parameters()) {
    const std::string top = name.substr(0, name.find('.'));
    auto it = std::find_if(out.groups.begin(), out.groups.end(), [&](const auto& g) { return g.first == top; });
    if (it == out.groups.end()) {
      out.groups.emplace_back(top, t.numel());
    } else {
      it->second += t.numel();
    }
    out.total += t.numel();
  }
  return out;
}

namespace {

const CVVTConfig& validated(const CVVTConfig& cfg) {
  shape_infer(cfg);
  return cfg;
}

}  // namespace

// --- patch shuffling -------------------------------------------------------

namespace {

template <class T>
void shuffle_patches(const T* src, T* dst, int64_t N, const Extents3& padded, int64_t e, bool to_patches) {
  const int64_t nd = padded[0] / e, nh = padded[1] / e, nw = padded[2] / e;
  const int64_t vol = padded[0] * padded[1] * padded[2];
  const int64_t pvol = e * e * e;
  for (int64_t n = 0; n < N; ++n) {
    const T* s = src + n * vol;
    T* d = dst + n * vol;
    int64_t p = 0;
    for (int64_t bd = 0; bd < nd; ++bd) {
      for (int64_t bh = 0; bh < nh; ++bh) {
        for (int64_t bw = 0; bw < nw; ++bw, ++p) {
          int64_t q = p * pvol;
          for (int64_t z = 0; z < e; ++z) {
            for (int64_t y = 0; y < e; ++y) {
              const int64_t g = ((bd * e + z) * padded[1] + (bh * e + y)) * padded[2] + bw * e;
              if (to_patches) {
                std::copy(s + g, s + g + e, d + q);
              } else {
                std::copy(s + q, s + q + e, d + g);
              }
              q += e;
            }
          }
        }
      }
    }
  }
}

Tensor shuffle_op(const Tensor& x, const Shape& out_shape, int64_t N, const Extents3& padded, int64_t e,
                  bool to_patches) {
  auto run = [=]<typename T>(const Tensor& src, const Shape& shape, bool forward_dir) {
    std::vector<T> out(static_cast<std::size_t>(src.numel()));
    shuffle_patches(src.data<T>().data(), out.data(), N, padded, e, forward_dir);
    return detail::make<T>(shape, std::move(out));
  };
  Tensor out = dispatch(x.dtype(), [&]<typename T>() { return run.template operator()<T>(x, out_shape, to_patches); });
  return detail::record(out, to_patches ? "patchify" : "assemble", {x},
                        [run, in_shape = x.shape(), to_patches](const Tensor& g) -> std::vector<Tensor> {
                          return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
                            return {run.template operator()<T>(g, in_shape, !to_patches)};
                          });
                        });
}

}  // namespace

Tensor vvit_patchify(const Tensor& x, int64_t patch_edge) {
  if (x.rank() != 5 || x.shape()[1] != 1) {
    throw ShapeError("vvit_patchify expects [N,1,D,H,W], got " + x.shape().to_string());
  }
  const Extents3 in{x.shape()[2], x.shape()[3], x.shape()[4]};
  const Extents3 padded = vvit_padded_extents(in, patch_edge);
  Tensor p = x;
  if (padded != in) {
    p = pad3d(x, {{{0, padded[0] - in[0]}, {0, padded[1] - in[1]}, {0, padded[2] - in[2]}}});
  }
  const int64_t N = x.shape()[0];
  const int64_t e = patch_edge;
  const int64_t P = (padded[0] / e) * (padded[1] / e) * (padded[2] / e);
  return shuffle_op(p, Shape{N, P, e * e * e}, N, padded, e, true);
}

Tensor vvit_assemble(const Tensor& patches, const Extents3& padded, int64_t patch_edge) {
  const int64_t e = patch_edge;
  for (auto v : padded) {
    if (e < 1 || v < 1 || v % e != 0) throw ShapeError("vvit_assemble: padded extents must be multiples of the patch edge");
  }
  const int64_t P = (padded[0] / e) * (padded[1] / e) * (padded[2] / e);
  if (patches.rank() != 3 || patches.shape()[1] != P || patches.shape()[2] != e * e * e) {
    throw ShapeError("vvit_assemble: expected [N," + std::to_string(P) + "," + std::to_string(e * e * e) + "], got " +
                     patches.shape().to_string());
  }
  const int64_t N = patches.shape()[0];
  return shuffle_op(patches, Shape{N, 1, padded[0], padded[1], padded[2]}, N, padded, e, false);
}

// --- transformer variants --------------------------------------------------

TokenClassifier::TokenClassifier(int64_t num_tokens, const ViTSizeConfig& size, int64_t num_classes, DType dtype,
                                 Rng& rng)
    : cls_token(Tensor::zeros(Shape{1, 1, size.embed_dim}, dtype)),
      pos_embed(Tensor::zeros(Shape{num_tokens + 1, size.embed_dim}, dtype)),
      encoder({size.embed_dim, size.num_heads, size.depth, size.mlp_ratio}, dtype, rng),
      head(size.embed_dim, num_classes, true, dtype, rng) {
  nn::init_truncated_normal(cls_token, 0.02, rng);
  nn::init_truncated_normal(pos_embed, 0.02, rng);
}

Tensor TokenClassifier::forward(const Tensor& tokens, ShapeTrace* trace) const {
  const int64_t N = tokens.shape()[0];
  const int64_t E = tokens.shape()[2];
  Tensor h = concat({repeat_leading(cls_token, N), tokens}, 1);
  h = add_broadcast(h, pos_embed);
  note(trace, "tokens", h);
  h = encoder.forward(h);
  note(trace, "encoder", h);
  Tensor cls = reshape(slice(h, 1, 0, 1), Shape{N, E});
  Tensor logits = head.forward(cls);
  note(trace, "head", logits);
  return logits;
}

VViT::VViT(const VViTConfig& cfg, DType dtype, Rng& rng)
    : cfg_(cfg),
      patches_(shape_infer(cfg)[2].shape[1]),
      embedding(cfg.patch_edge * cfg.patch_edge * cfg.patch_edge, cfg.size.embed_dim, true, dtype, rng),
      classifier(patches_, cfg.size, cfg.num_classes, dtype, rng) {
  register_module("embedding", embedding);
  register_parameter("cls_token", classifier.cls_token);
  register_parameter("pos_embed", classifier.pos_embed);
  register_module("encoder", classifier.encoder);
  register_module("head", classifier.head);
}

Tensor VViT::forward(const Tensor& x, Rng&, ShapeTrace* trace) {
  if (x.rank() != 5 || x.shape()[1] != 1) throw ShapeError("VViT expects [N,1,D,H,W], got " + x.shape().to_string());
  const Extents3 in{x.shape()[2], x.shape()[3], x.shape()[4]};
  if (in != cfg_.input) throw ShapeError("VViT configured for a different input size, got " + x.shape().to_string());
  note(trace, "input", x);
  const Extents3 padded = vvit_padded_extents(in, cfg_.patch_edge);
  if (trace != nullptr) trace->push_back({"pad", volume_shape(1, padded)});
  Tensor patches = vvit_patchify(x, cfg_.patch_edge);
  note(trace, "patchify", patches);
  Tensor tokens = embedding.forward(patches);
  note(trace, "embedding", tokens);
  return classifier.forward(tokens, trace);
}

CVVTEmbedding::CVVTEmbedding(const CVVTConfig& cfg, DType dtype, Rng& rng)
    : project(cfg.grid[0] * cfg.grid[1] * cfg.grid[2], cfg.size.embed_dim, true, dtype, rng), cfg_(cfg) {
  int64_t in = 1;
  for (const auto& st : cfg.embed_stack) {
    nn::Conv3dParams p;
    p.in_channels = in;
    p.out_channels = st.out_channels;
    p.kernel = {st.kernel, st.kernel, st.kernel};
    p.stride = {st.stride, st.stride, st.stride};
    p.padding = {st.padding, st.padding, st.padding};
    p.bias = true;
    stack.push_back(std::make_unique<nn::Conv3d>(p, dtype, rng, cfg.stack_slope));
    in = st.out_channels;
  }
  register_module("stack", stack);
  register_module("project", project);
}

Tensor CVVTEmbedding::forward(const Tensor& x, ShapeTrace* trace) const {
  Tensor h = x;
  for (std::size_t i = 0; i < stack.size(); ++i) {
    h = leaky_relu(stack[i].forward(h), cfg_.stack_slope);
    note(trace, "stack" + std::to_string(i), h);
  }
  h = nn::adaptive_avg_pool3d(h, cfg_.grid);
  note(trace, "grid", h);
  const int64_t N = h.shape()[0], C = h.shape()[1];
  h = reshape(h, Shape{N, C, cfg_.grid[0] * cfg_.grid[1] * cfg_.grid[2]});
  note(trace, "tokens_flat", h);
  return project.forward(h);
}

CVVT::CVVT(const CVVTConfig& cfg, DType dtype, Rng& rng)
    : cfg_(validated(cfg)),
      embedding(cfg, dtype, rng),
      classifier(cfg.embed_stack.back().out_channels, cfg.size, cfg.num_classes, dtype, rng) {
  register_module("embedding", embedding);
  register_parameter("cls_token", classifier.cls_token);
  register_parameter("pos_embed", classifier.pos_embed);
  register_module("encoder", classifier.encoder);
  register_module("head", classifier.head);
}

Tensor CVVT::forward(const Tensor& x, Rng&, ShapeTrace* trace) {
  if (x.rank() != 5 || x.shape()[1] != 1) throw ShapeError("CVVT expects [N,1,D,H,W], got " + x.shape().to_string());
  const Extents3 in{x.shape()[2], x.shape()[3], x.shape()[4]};
  if (in != cfg_.input) throw ShapeError("CVVT configured for a different input size, got " + x.shape().to_string());
  note(trace, "input", x);
  Tensor tokens = embedding.forward(x, trace);
  note(trace, "embedding", tokens);
  return classifier.forward(tokens, trace);
}

// --- ConvNet3D-4 -----------------------------------------------------------

ConvBlock::ConvBlock(int64_t in_channels, int64_t out_channels, const ConvNet3D4Config& cfg, DType dtype, Rng& rng)
    : conv(nn::Conv3dParams{in_channels,
                            out_channels,
                            {cfg.conv_kernel, cfg.conv_kernel, cfg.conv_kernel},
                            {cfg.conv_stride, cfg.conv_stride, cfg.conv_stride},
                            {cfg.conv_padding, cfg.conv_padding, cfg.conv_padding},
                            cfg.conv_bias},
           dtype, rng, cfg.leaky_slope),
      norm(nn::NormParams{cfg.norm, out_channels}, dtype),
      pool_(cfg.pool),
      slope_(cfg.leaky_slope),
      dropout_(cfg.dropout) {
  register_module("conv", conv);
  register_module("norm", norm);
}

Tensor ConvBlock::forward(const Tensor& x, Rng& rng, ShapeTrace* trace, const std::string& name) {
  Tensor h = conv.forward(x);
  note(trace, name + ".conv", h);
  h = nn::maxpool3d(norm.forward(h), pool_);
  note(trace, name + ".pool", h);
  h = leaky_relu(h, slope_);
  return nn::dropout3d(h, dropout_, training(), rng);
}

ConvNet3D4::ConvNet3D4(const ConvNet3D4Config& cfg, DType dtype, Rng& rng)
    : cfg_(cfg),
      flat_features_(shape_infer(cfg)[9].shape[1]),
      embedding(flat_features_, cfg.embed_dim, true, dtype, rng),
      head(cfg.embed_dim, cfg.num_classes, true, dtype, rng) {
  for (int b = 1; b <= 4; ++b) {
    blocks.push_back(std::make_unique<ConvBlock>(cfg.channels[b - 1], cfg.channels[b], cfg, dtype, rng));
  }
  register_module("blocks", blocks);
  register_module("embedding", embedding);
  register_module("head", head);
}

Tensor ConvNet3D4::embed(const Tensor& x, Rng& rng, ShapeTrace* trace) {
  if (x.rank() != 5 || x.shape()[1] != 1) {
    throw ShapeError("ConvNet3D-4 expects [N,1,D,H,W], got " + x.shape().to_string());
  }
  const Extents3 in{x.shape()[2], x.shape()[3], x.shape()[4]};
  if (in != cfg_.input) {
    throw ShapeError("ConvNet3D-4 configured for a different input size, got " + x.shape().to_string());
  }
  note(trace, "input", x);
  Tensor h = x;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    h = blocks[b].forward(h, rng, trace, "block" + std::to_string(b + 1));
  }
  h = flatten(h, 1);
  note(trace, "flatten", h);
  h = embedding.forward(h);
  note(trace, "embedding", h);
  return h;
}

Tensor ConvNet3D4::forward(const Tensor& x, Rng& rng, ShapeTrace* trace) {
  Tensor logits = head.forward(embed(x, rng, trace));
  note(trace, "head", logits);
  return logits;
}

std::unique_ptr<Model> build_model(const ModelConfig& cfg, Rng& rng) {
  switch (cfg.kind) {
    case ModelKind::vvit: return std::make_unique<VViT>(to_vvit(cfg), cfg.dtype, rng);
    case ModelKind::cvvt: return std::make_unique<CVVT>(to_cvvt(cfg), cfg.dtype, rng);
    case ModelKind::convnet3d4: return std::make_unique<ConvNet3D4>(to_convnet(cfg), cfg.dtype, rng);
  }
  throw ConfigError("invalid model kind");
}

}  // namespace voxformer
