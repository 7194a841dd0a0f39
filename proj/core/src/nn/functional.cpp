// SPDX-License-Identifier: Apache-2.0
#include "voxformer/nn/functional.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "../gemm.hpp"

namespace voxformer::nn {

namespace {
using std::int64_t;
}

Tensor dropout3d(const Tensor& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout3d probability must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  if (x.rank() != 5) throw ShapeError("dropout3d expects [N,C,D,H,W], got " + x.shape().to_string());
  const int64_t slices = x.shape()[0] * x.shape()[1];
  const int64_t V = x.numel() / slices;
  auto keep = std::make_shared<std::vector<unsigned char>>(static_cast<std::size_t>(slices));
  for (auto& k : *keep) k = rng.uniform() < p ? 0 : 1;
  const double scale = 1.0 / (1.0 - p);

  auto apply = [keep, V, scale]<typename T>(std::span<const T> in, const Shape& shape) {
    std::vector<T> out(in.size());
    const T s = static_cast<T>(scale);
    for (std::size_t sl = 0; sl < keep->size(); ++sl) {
      const T* a = in.data() + sl * V;
      T* b = out.data() + sl * V;
      if ((*keep)[sl]) {
        for (int64_t i = 0; i < V; ++i) b[i] = a[i] * s;
      } else {
        std::fill(b, b + V, T(0));
      }
    }
    return detail::make<T>(shape, std::move(out));
  };
  Tensor out = dispatch(x.dtype(), [&]<typename T>() { return apply.template operator()<T>(x.data<T>(), x.shape()); });
  return detail::record(out, "dropout3d", {x}, [apply, shape = x.shape()](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      return {apply.template operator()<T>(g.data<T>(), shape)};
    });
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) throw ShapeError("linear weight must be [out,in], got " + weight.shape().to_string());
  if (x.rank() == 0) throw ShapeError("linear input must have at least one axis");
  if (x.dtype() != weight.dtype()) throw Error("linear: dtype mismatch between input and weight");
  const int64_t in = weight.shape()[1];
  const int64_t out_f = weight.shape()[0];
  if (x.shape().axis(-1) != in) {
    throw ShapeError("linear expects trailing extent " + std::to_string(in) + ", got input " + x.shape().to_string());
  }
  if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != out_f)) {
    throw ShapeError("linear bias must be [" + std::to_string(out_f) + "], got " + bias.shape().to_string());
  }
  const int64_t M = x.numel() / in;
  auto dims = x.shape().to_vector();
  dims.back() = out_f;
  const Shape out_shape(dims);

  Tensor out = dispatch(x.dtype(), [&]<typename T>() {
    std::vector<T> y(static_cast<std::size_t>(M * out_f));
    detail::gemm<T>(false, true, M, out_f, in, T(1), x.data<T>().data(), in, weight.data<T>().data(), in, T(0),
                    y.data(), out_f);
    if (bias.defined()) {
      auto bd = bias.data<T>();
      for (int64_t r = 0; r < M; ++r) {
        for (int64_t j = 0; j < out_f; ++j) y[r * out_f + j] += bd[j];
      }
    }
    return detail::make<T>(out_shape, std::move(y));
  });

  return detail::record(out, "linear", {x, weight, bias}, [=](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      Tensor tx, tw, tb;
      if (x.requires_grad()) {
        std::vector<T> v(static_cast<std::size_t>(M * in));
        detail::gemm<T>(false, false, M, in, out_f, T(1), gd.data(), out_f, weight.data<T>().data(), in, T(0),
                        v.data(), in);
        tx = detail::make<T>(x.shape(), std::move(v));
      }
      if (weight.requires_grad()) {
        std::vector<T> v(static_cast<std::size_t>(out_f * in));
        detail::gemm<T>(true, false, out_f, in, M, T(1), gd.data(), out_f, x.data<T>().data(), in, T(0), v.data(),
                        in);
        tw = detail::make<T>(weight.shape(), std::move(v));
      }
      if (bias.defined() && bias.requires_grad()) {
        std::vector<T> v(static_cast<std::size_t>(out_f), T(0));
        for (int64_t r = 0; r < M; ++r) {
          for (int64_t j = 0; j < out_f; ++j) v[j] += gd[r * out_f + j];
        }
        tb = detail::make<T>(bias.shape(), std::move(v));
      }
      return {tx, tw, tb};
    });
  });
}

namespace {

template <class T>
void softmax_rows(const T* in, T* out, int64_t rows, int64_t n) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* a = in + r * n;
    T* b = out + r * n;
    T mx = *std::max_element(a, a + n);
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      b[i] = static_cast<T>(std::exp(static_cast<double>(a[i] - mx)));
      s += b[i];
    }
    const T invs = static_cast<T>(1.0 / s);
    for (int64_t i = 0; i < n; ++i) b[i] *= invs;
  }
}

}  // namespace

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("softmax needs at least one axis");
  const int64_t n = x.shape().axis(-1);
  const int64_t rows = x.numel() / n;
  Tensor out = dispatch(x.dtype(), [&]<typename T>() {
    auto xd = x.data<T>();
    std::vector<T> y(xd.size());
    softmax_rows(xd.data(), y.data(), rows, n);
    return detail::make<T>(x.shape(), std::move(y));
  });
  return detail::record(out, "softmax", {x}, [y = out.impl()->data, shape = x.shape(), n, rows](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      const auto& yd = std::get<std::vector<T>>(*y);
      std::vector<T> gx(gd.size());
      for (int64_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (int64_t i = 0; i < n; ++i) dot += gd[r * n + i] * yd[r * n + i];
        for (int64_t i = 0; i < n; ++i) gx[r * n + i] = static_cast<T>(yd[r * n + i] * (gd[r * n + i] - dot));
      }
      return {detail::make<T>(shape, std::move(gx))};
    });
  });
}

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t num_heads) {
  if (q.rank() != 3 || !(q.shape() == k.shape()) || !(q.shape() == v.shape())) {
    throw ShapeError("attention expects q, k, v of identical shape [N,T,E], got " + q.shape().to_string() + ", " +
                     k.shape().to_string() + ", " + v.shape().to_string());
  }
  if (q.dtype() != k.dtype() || q.dtype() != v.dtype()) throw Error("attention: dtype mismatch");
  const int64_t N = q.shape()[0], T_ = q.shape()[1], E = q.shape()[2];
  if (num_heads < 1 || E % num_heads != 0) {
    throw ShapeError("attention: embedding " + std::to_string(E) + " is not divisible by " + std::to_string(num_heads) +
                     " heads");
  }
  const int64_t H = num_heads, dh = E / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<Buffer>();

  Tensor out = dispatch(q.dtype(), [&]<typename T>() {
    auto qd = q.data<T>();
    auto kd = k.data<T>();
    auto vd = v.data<T>();
    std::vector<T> P(static_cast<std::size_t>(N * H * T_ * T_));
    std::vector<T> S(static_cast<std::size_t>(T_ * T_));
    std::vector<T> o(static_cast<std::size_t>(N * T_ * E));
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t h = 0; h < H; ++h) {
        const int64_t off = n * T_ * E + h * dh;
        T* Ph = P.data() + (n * H + h) * T_ * T_;
        detail::gemm<T>(false, true, T_, T_, dh, static_cast<T>(scale), qd.data() + off, E, kd.data() + off, E, T(0),
                        S.data(), T_);
        softmax_rows(S.data(), Ph, T_, T_);
        detail::gemm<T>(false, false, T_, dh, T_, T(1), Ph, T_, vd.data() + off, E, T(0), o.data() + off, E);
      }
    }
    *probs = std::move(P);
    return detail::make<T>(q.shape(), std::move(o));
  });

  return detail::record(out, "attention", {q, k, v}, [=](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      auto qd = q.data<T>();
      auto kd = k.data<T>();
      auto vd = v.data<T>();
      const auto& P = std::get<std::vector<T>>(*probs);
      const auto total = static_cast<std::size_t>(N * T_ * E);
      std::vector<T> gq(total), gk(total), gv(total);
      std::vector<T> dP(static_cast<std::size_t>(T_ * T_));
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t h = 0; h < H; ++h) {
          const int64_t off = n * T_ * E + h * dh;
          const T* Ph = P.data() + (n * H + h) * T_ * T_;
          detail::gemm<T>(false, true, T_, T_, dh, T(1), gd.data() + off, E, vd.data() + off, E, T(0), dP.data(), T_);
          detail::gemm<T>(true, false, T_, dh, T_, T(1), Ph, T_, gd.data() + off, E, T(0), gv.data() + off, E);
          // dS = P * (dP - rowsum(dP * P)), overwriting dP.
          for (int64_t r = 0; r < T_; ++r) {
            double dot = 0.0;
            for (int64_t c = 0; c < T_; ++c) dot += dP[r * T_ + c] * Ph[r * T_ + c];
            for (int64_t c = 0; c < T_; ++c) dP[r * T_ + c] = static_cast<T>(Ph[r * T_ + c] * (dP[r * T_ + c] - dot));
          }
          detail::gemm<T>(false, false, T_, dh, T_, static_cast<T>(scale), dP.data(), T_, kd.data() + off, E, T(0),
                          gq.data() + off, E);
          detail::gemm<T>(true, false, T_, dh, T_, static_cast<T>(scale), dP.data(), T_, qd.data() + off, E, T(0),
                          gk.data() + off, E);
        }
      }
      return {detail::make<T>(q.shape(), std::move(gq)), detail::make<T>(k.shape(), std::move(gk)),
              detail::make<T>(v.shape(), std::move(gv))};
    });
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int64_t> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects logits [K,N], got " + logits.shape().to_string());
  const int64_t K = logits.shape()[0], C = logits.shape()[1];
  if (static_cast<int64_t>(labels.size()) != K) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(K) + " rows");
  }
  for (auto y : labels) {
    if (y < 0 || y >= C) {
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(C) + ")");
    }
  }
  std::vector<int64_t> ys(labels.begin(), labels.end());
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(K * C));
  Tensor out = dispatch(logits.dtype(), [&]<typename T>() {
    auto z = logits.data<T>();
    double total = 0.0;
    for (int64_t i = 0; i < K; ++i) {
      const T* row = z.data() + i * C;
      const double mx = *std::max_element(row, row + C);
      double s = 0.0;
      for (int64_t j = 0; j < C; ++j) s += std::exp(row[j] - mx);
      const double lse = mx + std::log(s);
      total += lse - row[ys[i]];
      for (int64_t j = 0; j < C; ++j) (*probs)[i * C + j] = std::exp(row[j] - lse);
    }
    return detail::make<T>(Shape{}, std::vector<T>{static_cast<T>(total / static_cast<double>(K))});
  });
  return detail::record(out, "cross_entropy", {logits}, [=, shape = logits.shape()](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      const double scale = g.item() / static_cast<double>(K);
      std::vector<T> gz(static_cast<std::size_t>(K * C));
      for (int64_t i = 0; i < K; ++i) {
        for (int64_t j = 0; j < C; ++j) {
          gz[i * C + j] = static_cast<T>(((*probs)[i * C + j] - (j == ys[i] ? 1.0 : 0.0)) * scale);
        }
      }
      return {detail::make<T>(shape, std::move(gz))};
    });
  });
}

}  // namespace voxformer::nn
