// SPDX-License-Identifier: Apache-2.0
#include "voxformer_app/verify.hpp"

#include <cmath>
#include <functional>
#include <json.hpp>
#include <sstream>

#include "voxformer/error.hpp"
#include "voxformer/gradcheck.hpp"
#include "voxformer/models.hpp"
#include "voxformer/nn/functional.hpp"
#include "voxformer/ops.hpp"

namespace voxformer::verify {

using std::int64_t;

namespace {

Tensor uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_values(shape, v, DType::f64);
}

/// Values with magnitude in [0.1, 1] and random sign; keeps piecewise
/// operators away from their kinks.
Tensor away_from_zero(const Shape& shape, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return Tensor::from_values(shape, v, DType::f64);
}

struct OpCase {
  std::string name;
  double tol;
  std::function<std::vector<Tensor>(Rng&)> inputs;
  TensorFunction f;
};

std::vector<OpCase> operator_cases() {
  using nn::Extents3;
  std::vector<OpCase> c;
  auto two = [](Shape s) {
    return [s](Rng& r) { return std::vector<Tensor>{uniform(s, r), uniform(s, r)}; };
  };
  c.push_back({"add", 1e-4, two(Shape{3, 4}), [](auto in) { return add(in[0], in[1]); }});
  c.push_back({"sub", 1e-4, two(Shape{3, 4}), [](auto in) { return sub(in[0], in[1]); }});
  c.push_back({"mul", 1e-4, two(Shape{3, 4}), [](auto in) { return mul(in[0], in[1]); }});
  c.push_back({"mul_scalar_tensor", 1e-4,
               [](Rng& r) { return std::vector<Tensor>{uniform(Shape{2, 3}, r), uniform(Shape{1}, r)}; },
               [](auto in) { return mul(in[0], in[1]); }});
  c.push_back({"leaky_relu", 1e-6, [](Rng& r) { return std::vector<Tensor>{away_from_zero(Shape{4, 5}, r)}; },
               [](auto in) { return leaky_relu(in[0], 0.2); }});
  c.push_back({"gelu", 1e-4, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{4, 5}, r, -3, 3)}; },
               [](auto in) { return gelu(in[0]); }});
  c.push_back({"sum", 1e-4, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{2, 3, 4}, r)}; },
               [](auto in) { return sum(in[0]); }});
  c.push_back({"mean", 1e-4, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{2, 3, 4}, r)}; },
               [](auto in) { return mean(in[0]); }});
  c.push_back({"matmul", 1e-5,
               [](Rng& r) { return std::vector<Tensor>{uniform(Shape{4, 5}, r), uniform(Shape{5, 3}, r)}; },
               [](auto in) { return sum(matmul(in[0], in[1])); }});
  c.push_back({"matmul_batched", 1e-4,
               [](Rng& r) { return std::vector<Tensor>{uniform(Shape{2, 4, 5}, r), uniform(Shape{5, 3}, r)}; },
               [](auto in) { return matmul(in[0], in[1]); }});
  c.push_back({"reshape", 1e-4, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{2, 6}, r)}; },
               [](auto in) { return mul(reshape(in[0], Shape{3, 4}), reshape(in[0], Shape{3, 4})); }});
  c.push_back({"flatten", 1e-4, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{2, 3, 2}, r)}; },
               [](auto in) { return flatten(in[0], 1); }});
  c.push_back({"concat", 1e-4,
               [](Rng& r) { return std::vector<Tensor>{uniform(Shape{2, 3}, r), uniform(Shape{2, 2}, r)}; },
               [](auto in) { return concat({in[0], in[1]}, 1); }});
  c.push_back({"slice", 1e-4, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{3, 5}, r)}; },
               [](auto in) { return slice(in[0], 1, 1, 3); }});
  c.push_back({"pad3d", 1e-4, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{1, 2, 2, 3, 2}, r)}; },
               [](auto in) { return pad3d(in[0], {{{1, 0}, {0, 2}, {1, 1}}}); }});
  c.push_back({"crop3d", 1e-4, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{1, 2, 4, 4, 3}, r)}; },
               [](auto in) { return crop3d(in[0], {{{1, 0}, {0, 2}, {1, 1}}}); }});
  c.push_back({"add_broadcast", 1e-4,
               [](Rng& r) { return std::vector<Tensor>{uniform(Shape{2, 3, 4}, r), uniform(Shape{3, 4}, r)}; },
               [](auto in) { return add_broadcast(in[0], in[1]); }});
  c.push_back({"repeat_leading", 1e-4, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{1, 2, 3}, r)}; },
               [](auto in) { return repeat_leading(in[0], 3); }});
  c.push_back({"conv3d", 1e-4,
               [](Rng& r) {
                 return std::vector<Tensor>{uniform(Shape{1, 2, 5, 5, 5}, r), uniform(Shape{3, 2, 3, 3, 3}, r),
                                            uniform(Shape{3}, r)};
               },
               [](auto in) { return nn::conv3d(in[0], in[1], in[2], {{1, 1, 1}, {1, 1, 1}}); }});
  c.push_back({"conv3d_strided", 1e-4,
               [](Rng& r) {
                 return std::vector<Tensor>{uniform(Shape{2, 2, 6, 5, 7}, r), uniform(Shape{2, 2, 3, 3, 3}, r),
                                            uniform(Shape{2}, r)};
               },
               [](auto in) { return nn::conv3d(in[0], in[1], in[2], {{2, 2, 2}, {1, 1, 1}}); }});
  c.push_back({"maxpool3d", 1e-4, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{1, 2, 6, 7, 6}, r)}; },
               [](auto in) { return nn::maxpool3d(in[0], {}); }});
  c.push_back({"adaptive_avg_pool3d", 1e-4,
               [](Rng& r) { return std::vector<Tensor>{uniform(Shape{1, 2, 5, 4, 7}, r)}; },
               [](auto in) { return nn::adaptive_avg_pool3d(in[0], Extents3{3, 6, 2}); }});
  c.push_back({"batchnorm3d_train", 1e-4,
               [](Rng& r) {
                 return std::vector<Tensor>{uniform(Shape{2, 3, 3, 3, 3}, r), uniform(Shape{3}, r, 0.5, 1.5),
                                            uniform(Shape{3}, r)};
               },
               [](auto in) {
                 nn::RunningStats stats{Tensor::zeros(Shape{3}, DType::f64), Tensor::ones(Shape{3}, DType::f64)};
                 return nn::batchnorm3d(in[0], in[1], in[2], stats, true);
               }});
  c.push_back({"batchnorm3d_eval", 1e-4,
               [](Rng& r) {
                 return std::vector<Tensor>{uniform(Shape{2, 3, 3, 3, 3}, r), uniform(Shape{3}, r, 0.5, 1.5),
                                            uniform(Shape{3}, r)};
               },
               [](auto in) {
                 nn::RunningStats stats{Tensor::from_values(Shape{3}, {0.1, -0.2, 0.3}, DType::f64),
                                        Tensor::from_values(Shape{3}, {0.5, 1.5, 2.0}, DType::f64)};
                 return nn::batchnorm3d(in[0], in[1], in[2], stats, false);
               }});
  c.push_back({"instancenorm3d", 1e-4,
               [](Rng& r) {
                 return std::vector<Tensor>{uniform(Shape{1, 3, 4, 4, 4}, r), uniform(Shape{3}, r, 0.5, 1.5),
                                            uniform(Shape{3}, r)};
               },
               [](auto in) { return nn::instancenorm3d(in[0], in[1], in[2]); }});
  c.push_back({"dropout3d", 1e-4, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{2, 6, 2, 2, 2}, r)}; },
               [](auto in) {
                 Rng mask(7);
                 return nn::dropout3d(in[0], 0.4, true, mask);
               }});
  c.push_back({"linear", 1e-5,
               [](Rng& r) {
                 return std::vector<Tensor>{uniform(Shape{5, 8}, r), uniform(Shape{4, 8}, r), uniform(Shape{4}, r)};
               },
               [](auto in) { return nn::linear(in[0], in[1], in[2]); }});
  c.push_back({"linear_6to3", 1e-6,
               [](Rng& r) {
                 return std::vector<Tensor>{uniform(Shape{2, 6}, r), uniform(Shape{3, 6}, r), uniform(Shape{3}, r)};
               },
               [](auto in) { return sum(nn::linear(in[0], in[1], in[2])); }});
  c.push_back({"layer_norm", 1e-5,
               [](Rng& r) {
                 return std::vector<Tensor>{uniform(Shape{4, 8}, r), uniform(Shape{8}, r, 0.5, 1.5),
                                            uniform(Shape{8}, r)};
               },
               [](auto in) { return nn::layer_norm(in[0], in[1], in[2]); }});
  c.push_back({"softmax", 1e-4, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{3, 5}, r, -2, 2)}; },
               [](auto in) { return nn::softmax(in[0]); }});
  c.push_back({"attention", 1e-4,
               [](Rng& r) {
                 return std::vector<Tensor>{uniform(Shape{1, 3, 4}, r), uniform(Shape{1, 3, 4}, r),
                                            uniform(Shape{1, 3, 4}, r)};
               },
               [](auto in) { return nn::scaled_dot_product_attention(in[0], in[1], in[2], 2); }});
  c.push_back({"cross_entropy", 1e-6, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{3, 2}, r, -2, 2)}; },
               [](auto in) {
                 const std::vector<int64_t> y{0, 1, 1};
                 return nn::cross_entropy(in[0], y);
               }});
  c.push_back({"vvit_patchify", 1e-4, [](Rng& r) { return std::vector<Tensor>{uniform(Shape{1, 1, 5, 7, 6}, r)}; },
               [](auto in) { return vvit_patchify(in[0], 4); }});
  return c;
}

CheckResult from_report(std::string suite, std::string name, const GradcheckReport& rep) {
  return {std::move(suite), std::move(name), rep.passed, rep.max_rel_error, rep.summary()};
}

/// Module-level gradcheck: perturbs the module's parameters and the input.
CheckResult module_check(const std::string& name, const nn::Module& m, const Tensor& x,
                         const std::function<Tensor(const Tensor&)>& f, double tol,
                         std::optional<std::size_t> coords, std::uint64_t seed) {
  std::vector<Tensor> inputs{x};
  for (auto& [_, p] : m.named_parameters()) inputs.push_back(p);
  GradcheckOptions opt;
  opt.tol = tol;
  opt.coords_per_input = coords;
  opt.seed = seed;
  auto rep = gradcheck([&](std::span<const Tensor> in) { return f(in[0]); }, inputs, opt);
  return from_report("gradcheck", name, rep);
}

}  // namespace

std::vector<std::string_view> suite_names() { return {"gradcheck", "params", "shapes", "norms"}; }

std::vector<CheckResult> gradcheck_suite(std::uint64_t seed, std::size_t model_coords) {
  std::vector<CheckResult> out;
  Rng rng(seed);
  const auto cases = operator_cases();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& c = cases[i];
    Rng local = rng.fork(i + 1);
    GradcheckOptions opt;
    opt.tol = c.tol;
    opt.seed = mix_seed(seed, i);
    try {
      out.push_back(from_report("gradcheck", c.name, gradcheck(c.f, c.inputs(local), opt)));
    } catch (const Error& e) {
      out.push_back({"gradcheck", c.name, false, 0.0, e.what()});
    }
  }

  Rng init = rng.fork(101);
  {
    nn::MultiHeadAttention mha(4, 2, DType::f64, init);
    Tensor x = uniform(Shape{1, 3, 4}, init);
    out.push_back(module_check("multi_head_attention", mha, x, [&](const Tensor& t) { return mha.forward(t); }, 1e-4,
                               std::nullopt, seed));
  }
  {
    nn::EncoderBlock block(8, 2, 4, DType::f64, init);
    Tensor x = uniform(Shape{2, 3, 8}, init);
    out.push_back(module_check("encoder_block", block, x, [&](const Tensor& t) { return block.forward(t); }, 1e-4,
                               std::nullopt, seed));
  }
  {
    nn::Mlp mlp(6, 12, DType::f64, init);
    Tensor x = uniform(Shape{3, 6}, init);
    out.push_back(
        module_check("mlp", mlp, x, [&](const Tensor& t) { return mlp.forward(t); }, 1e-4, std::nullopt, seed));
  }
  if (model_coords > 0) {
    CVVTConfig cfg;
    cfg.input = {32, 32, 32};
    CVVT model(cfg, DType::f64, init);
    Tensor x = uniform(Shape{1, 1, 32, 32, 32}, init);
    const std::vector<int64_t> y{1};
    Rng unused(0);
    std::vector<Tensor> params;
    for (auto& [_, p] : model.named_parameters()) params.push_back(p);
    GradcheckOptions opt;
    opt.eps = 1e-6;
    opt.tol = 1e-3;
    opt.coords_per_input = model_coords;
    opt.seed = seed;
    auto rep = gradcheck(
        [&](std::span<const Tensor>) { return nn::cross_entropy(model.forward(x, unused), y); }, params, opt);
    out.push_back(from_report("gradcheck", "cvvt_tiny_32", rep));
  }
  return out;
}

std::vector<CheckResult> params_suite() {
  std::vector<CheckResult> out;
  auto check = [&](std::string name, bool ok, double value, std::string detail) {
    out.push_back({"params", std::move(name), ok, value, std::move(detail)});
  };
  Rng rng(0);
  VViTConfig vcfg;
  VViT vvit(vcfg, DType::f32, rng);
  const auto vp = param_count(vvit);
  const auto v_embed = vp.group("embedding");
  const auto v_enc = vp.group("encoder");
  check("vvit_tiny_patch_embedding", v_embed == 24'000'192, static_cast<double>(v_embed), "expected 24000192");
  check("vit_tiny_encoder", std::abs(static_cast<double>(v_enc) - 5.3e6) <= 0.53e6, static_cast<double>(v_enc),
        "expected within 10% of 5.3M");

  CVVT cvvt(CVVTConfig{}, DType::f32, rng);
  const auto cp = param_count(cvvt);
  const auto c_embed = cp.group("embedding");
  const auto c_enc = cp.group("encoder");
  check("cvvt_tiny_embedding_band", c_embed >= 500'000 && c_embed <= 3'000'000, static_cast<double>(c_embed),
        "expected in [0.5M, 3M]");
  check("cvvt_tiny_embedding_below_encoder", c_embed < c_enc, static_cast<double>(c_embed) / c_enc,
        "embedding / encoder");
  const double v_ratio = static_cast<double>(v_embed) / static_cast<double>(v_enc);
  check("vvit_embedding_dominates", v_ratio > 4.0, v_ratio, "embedding / encoder > 4");

  for (auto size : {ModelSize::tiny, ModelSize::small, ModelSize::base}) {
    const auto s = ViTSizeConfig::of(size);
    check(std::string("heads_") + std::string(model_size_name(size)),
          s.embed_dim % s.num_heads == 0 && s.embed_dim / s.num_heads == 64, static_cast<double>(s.num_heads),
          "embed " + std::to_string(s.embed_dim));
  }
  return out;
}

std::vector<CheckResult> shapes_suite() {
  std::vector<CheckResult> out;
  auto check = [&](std::string name, bool ok, double value, std::string detail) {
    out.push_back({"shapes", std::move(name), ok, value, std::move(detail)});
  };
  const Extents3 adni{169, 208, 179};

  ConvNet3D4Config ccfg;
  ccfg.input = adni;
  const auto trace = shape_infer(ccfg);
  const auto find = [&](const ShapeTrace& t, std::string_view layer) -> std::vector<int64_t> {
    for (const auto& s : t) {
      if (s.layer == layer) return s.shape;
    }
    return {};
  };
  check("convnet_full_block4", find(trace, "block4.pool") == std::vector<int64_t>{1, 512, 2, 2, 2}, 0,
        format_trace(trace));
  check("convnet_full_flatten", find(trace, "flatten") == std::vector<int64_t>{1, 4096}, 4096, "");
  check("convnet_full_embedding", find(trace, "embedding") == std::vector<int64_t>{1, 512}, 512, "");

  VViTConfig vcfg;
  vcfg.input = adni;
  const auto vt = shape_infer(vcfg);
  const auto patches = find(vt, "patchify");
  check("vvit_full_patches", patches.size() == 3 && patches[1] == 80, patches.size() == 3 ? patches[1] : 0,
        "expected 4*5*4");

  CVVTConfig cv;
  const auto ct = shape_infer(cv);
  check("cvvt_grid", find(ct, "grid") == std::vector<int64_t>{1, 80, 10, 10, 10}, 80, "");
  check("cvvt_tokens", find(ct, "embedding") == std::vector<int64_t>{1, 80, 192}, 80, "");

  auto rejects = [&](Extents3 e, std::string_view layer) {
    ConvNet3D4Config c;
    c.input = e;
    try {
      shape_infer(c);
    } catch (const ShapeError& err) {
      return std::string(err.what()).find(layer) != std::string::npos;
    }
    return false;
  };
  check("convnet_8_underflows_block2", rejects({8, 8, 8}, "block2"), 8, "");
  check("convnet_32_underflows_block4", rejects({32, 32, 32}, "block4"), 32, "");

  // Executed forwards at reduced sizes must match the symbolic trace.
  Rng rng(0);
  NoGradGuard no_grad;
  auto executed = [&](Model& m, const Extents3& e) {
    ShapeTrace t;
    m.eval();
    Tensor x = Tensor::zeros(Shape{1, 1, e[0], e[1], e[2]});
    m.forward(x, rng, &t);
    return t;
  };
  {
    ConvNet3D4Config c;
    c.input = {81, 83, 82};
    ConvNet3D4 m(c, DType::f32, rng);
    check("convnet_trace_matches_81", executed(m, c.input) == shape_infer(c), 0, "");
  }
  {
    CVVTConfig c;
    c.input = {32, 32, 32};
    CVVT m(c, DType::f32, rng);
    check("cvvt_trace_matches_32", executed(m, c.input) == shape_infer(c), 0, "");
  }
  {
    VViTConfig c;
    c.size.depth = 1;
    c.input = {60, 45, 51};
    VViT m(c, DType::f32, rng);
    check("vvit_trace_matches_60x45x51", executed(m, c.input) == shape_infer(c), 0, "");
  }
  return out;
}

std::vector<CheckResult> norms_suite(std::uint64_t seed, int trials) {
  std::vector<CheckResult> out;
  Rng rng(seed);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int64_t C = 1 + static_cast<int64_t>(rng.below(4));
    const Shape s{1, C, 2 + static_cast<int64_t>(rng.below(5)), 2 + static_cast<int64_t>(rng.below(5)),
                  2 + static_cast<int64_t>(rng.below(5))};
    std::vector<double> xv(static_cast<std::size_t>(s.numel()));
    const double scale = rng.uniform(0.1, 10.0), shift = rng.uniform(-5.0, 5.0);
    for (auto& v : xv) v = shift + scale * rng.normal();
    Tensor x = Tensor::from_values(s, xv);
    std::vector<double> gv(static_cast<std::size_t>(C)), bv(static_cast<std::size_t>(C));
    for (auto& v : gv) v = rng.uniform(0.5, 2.0);
    for (auto& v : bv) v = rng.uniform(-1.0, 1.0);
    Tensor gamma = Tensor::from_values(Shape{C}, gv), beta = Tensor::from_values(Shape{C}, bv);
    nn::RunningStats stats{Tensor::zeros(Shape{C}), Tensor::ones(Shape{C})};
    const auto a = nn::batchnorm3d(x, gamma, beta, stats, true).to_vector();
    const auto b = nn::instancenorm3d(x, gamma, beta).to_vector();
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  out.push_back({"norms", "batchnorm_n1_equals_instancenorm", worst < 1e-5, worst,
                 std::to_string(trials) + " random inputs, max abs diff"});

  Tensor x = Tensor::zeros(Shape{1, 2, 4, 4, 4}, DType::f64);
  for (auto& v : x.mutable_data<double>()) v = rng.normal();
  Tensor g = Tensor::ones(Shape{2}, DType::f64), b = Tensor::zeros(Shape{2}, DType::f64);
  const auto y1 = nn::instancenorm3d(x, g, b, 1e-12).to_vector();
  const auto y2 = nn::instancenorm3d(mul(x, 10.0), g, b, 1e-12).to_vector();
  double d = 0.0;
  for (std::size_t i = 0; i < y1.size(); ++i) d = std::max(d, std::abs(y1[i] - y2[i]));
  out.push_back({"norms", "instancenorm_scale_invariant", d < 1e-9, d, "x vs 10x, f64, eps 1e-12"});
  return out;
}

std::vector<CheckResult> run_suite(std::string_view suite, std::uint64_t seed) {
  if (suite == "gradcheck") return gradcheck_suite(seed);
  if (suite == "params") return params_suite();
  if (suite == "shapes") return shapes_suite();
  if (suite == "norms") return norms_suite(seed);
  throw ConfigError("unknown verify suite '" + std::string(suite) + "' (expected gradcheck, params, shapes or norms)");
}

std::string to_json(const CheckResult& r) {
  nlohmann::ordered_json j{{"suite", r.suite},
                           {"check", r.name},
                           {"passed", r.passed},
                           {"value", std::isfinite(r.value) ? nlohmann::ordered_json(r.value) : nullptr},
                           {"detail", r.detail}};
  return j.dump();
}

}  // namespace voxformer::verify
