// SPDX-License-Identifier: Apache-2.0
//
// Batch, instance and layer normalization. Reductions accumulate in double.

#include <cmath>
#include <string>

#include "voxformer/nn/functional.hpp"
#include "voxformer/parallel.hpp"

namespace voxformer::nn {

namespace {

using std::int64_t;

void check_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta, int64_t features, const char* op) {
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.shape()[0] != features || beta.shape()[0] != features) {
    throw ShapeError(std::string(op) + ": affine parameters must be [" + std::to_string(features) + "], got " +
                     gamma.shape().to_string() + " and " + beta.shape().to_string());
  }
  if (gamma.dtype() != x.dtype() || beta.dtype() != x.dtype()) {
    throw Error(std::string(op) + ": dtype mismatch between input and affine parameters");
  }
}

void check_eps(double eps, const char* op) {
  if (!(eps > 0.0)) throw ConfigError(std::string(op) + ": eps must be positive");
}

void require_volume(const Tensor& x, const char* op) {
  if (x.rank() != 5) throw ShapeError(std::string(op) + " expects [N,C,D,H,W], got " + x.shape().to_string());
}

}  // namespace

Tensor batchnorm3d(const Tensor& x, const Tensor& gamma, const Tensor& beta, RunningStats& stats, bool training,
                   double eps) {
  require_volume(x, "batchnorm3d");
  check_eps(eps, "batchnorm3d");
  const int64_t N = x.shape()[0], C = x.shape()[1];
  const int64_t V = x.shape()[2] * x.shape()[3] * x.shape()[4];
  check_affine(x, gamma, beta, C, "batchnorm3d");
  if (!stats.mean.defined() || !stats.var.defined() || stats.mean.numel() != C || stats.var.numel() != C) {
    throw ShapeError("batchnorm3d: running statistics must hold " + std::to_string(C) + " channels");
  }
  const int64_t M = N * V;

  // Per-channel shift and inverse std used to normalize.
  std::vector<double> mu(static_cast<std::size_t>(C)), inv(static_cast<std::size_t>(C));
  Tensor out = dispatch(x.dtype(), [&]<typename T>() {
    auto xd = x.data<T>();
    auto gd = gamma.data<T>();
    auto bd = beta.data<T>();
    auto rm = stats.mean.mutable_data<T>();
    auto rv = stats.var.mutable_data<T>();
    for (int64_t c = 0; c < C; ++c) {
      if (training) {
        double s = 0.0;
        for (int64_t n = 0; n < N; ++n) {
          const T* p = xd.data() + (n * C + c) * V;
          for (int64_t i = 0; i < V; ++i) s += p[i];
        }
        const double m = s / static_cast<double>(M);
        double ss = 0.0;
        for (int64_t n = 0; n < N; ++n) {
          const T* p = xd.data() + (n * C + c) * V;
          for (int64_t i = 0; i < V; ++i) {
            const double d = p[i] - m;
            ss += d * d;
          }
        }
        const double var = ss / static_cast<double>(M);
        mu[c] = m;
        inv[c] = 1.0 / std::sqrt(var + eps);
        const double unbiased = M > 1 ? ss / static_cast<double>(M - 1) : var;
        rm[c] = static_cast<T>((1.0 - stats.momentum) * rm[c] + stats.momentum * m);
        rv[c] = static_cast<T>((1.0 - stats.momentum) * rv[c] + stats.momentum * unbiased);
      } else {
        mu[c] = rm[c];
        inv[c] = 1.0 / std::sqrt(static_cast<double>(rv[c]) + eps);
      }
    }
    std::vector<T> y(xd.size());
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t c = 0; c < C; ++c) {
        const T* p = xd.data() + (n * C + c) * V;
        T* q = y.data() + (n * C + c) * V;
        const T scale = static_cast<T>(gd[c] * inv[c]);
        const T shift = static_cast<T>(bd[c] - gd[c] * mu[c] * inv[c]);
        for (int64_t i = 0; i < V; ++i) q[i] = p[i] * scale + shift;
      }
    }
    return detail::make<T>(x.shape(), std::move(y));
  });

  return detail::record(out, "batchnorm3d", {x, gamma, beta},
                        [=](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      auto xd = x.data<T>();
      auto gam = gamma.data<T>();
      std::vector<T> gx(x.requires_grad() ? xd.size() : 0);
      std::vector<T> ggamma(static_cast<std::size_t>(C)), gbeta(static_cast<std::size_t>(C));
      for (int64_t c = 0; c < C; ++c) {
        double sg = 0.0, sgx = 0.0;
        for (int64_t n = 0; n < N; ++n) {
          const T* p = xd.data() + (n * C + c) * V;
          const T* q = gd.data() + (n * C + c) * V;
          for (int64_t i = 0; i < V; ++i) {
            sg += q[i];
            sgx += q[i] * (p[i] - mu[c]) * inv[c];
          }
        }
        ggamma[c] = static_cast<T>(sgx);
        gbeta[c] = static_cast<T>(sg);
        if (gx.empty()) continue;
        for (int64_t n = 0; n < N; ++n) {
          const T* p = xd.data() + (n * C + c) * V;
          const T* q = gd.data() + (n * C + c) * V;
          T* r = gx.data() + (n * C + c) * V;
          if (training) {
            const double k = gam[c] * inv[c] / static_cast<double>(M);
            for (int64_t i = 0; i < V; ++i) {
              const double xhat = (p[i] - mu[c]) * inv[c];
              r[i] = static_cast<T>(k * (static_cast<double>(M) * q[i] - sg - xhat * sgx));
            }
          } else {
            const double k = gam[c] * inv[c];
            for (int64_t i = 0; i < V; ++i) r[i] = static_cast<T>(k * q[i]);
          }
        }
      }
      Tensor tx;
      if (!gx.empty()) tx = detail::make<T>(x.shape(), std::move(gx));
      return {tx, detail::make<T>(gamma.shape(), std::move(ggamma)), detail::make<T>(beta.shape(), std::move(gbeta))};
    });
  });
}

Tensor instancenorm3d(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_volume(x, "instancenorm3d");
  check_eps(eps, "instancenorm3d");
  const int64_t N = x.shape()[0], C = x.shape()[1];
  const int64_t V = x.shape()[2] * x.shape()[3] * x.shape()[4];
  check_affine(x, gamma, beta, C, "instancenorm3d");

  // One (mean, inv_std) pair per (sample, channel) slice.
  std::vector<double> mu(static_cast<std::size_t>(N * C)), inv(static_cast<std::size_t>(N * C));
  Tensor out = dispatch(x.dtype(), [&]<typename T>() {
    auto xd = x.data<T>();
    auto gd = gamma.data<T>();
    auto bd = beta.data<T>();
    std::vector<T> y(xd.size());
    parallel_for(N * C, [&](int64_t s0, int64_t s1) {
      for (int64_t s = s0; s < s1; ++s) {
        const int64_t c = s % C;
        const T* p = xd.data() + s * V;
        double acc = 0.0;
        for (int64_t i = 0; i < V; ++i) acc += p[i];
        const double m = acc / static_cast<double>(V);
        double ss = 0.0;
        for (int64_t i = 0; i < V; ++i) {
          const double d = p[i] - m;
          ss += d * d;
        }
        mu[s] = m;
        inv[s] = 1.0 / std::sqrt(ss / static_cast<double>(V) + eps);
        const T scale = static_cast<T>(gd[c] * inv[s]);
        const T shift = static_cast<T>(bd[c] - gd[c] * m * inv[s]);
        T* q = y.data() + s * V;
        for (int64_t i = 0; i < V; ++i) q[i] = p[i] * scale + shift;
      }
    });
    return detail::make<T>(x.shape(), std::move(y));
  });

  return detail::record(out, "instancenorm3d", {x, gamma, beta}, [=](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      auto xd = x.data<T>();
      auto gam = gamma.data<T>();
      std::vector<T> gx(x.requires_grad() ? xd.size() : 0);
      std::vector<double> ggamma(static_cast<std::size_t>(C), 0.0), gbeta(static_cast<std::size_t>(C), 0.0);
      for (int64_t s = 0; s < N * C; ++s) {
        const int64_t c = s % C;
        const T* p = xd.data() + s * V;
        const T* q = gd.data() + s * V;
        double sg = 0.0, sgx = 0.0;
        for (int64_t i = 0; i < V; ++i) {
          sg += q[i];
          sgx += q[i] * (p[i] - mu[s]) * inv[s];
        }
        ggamma[c] += sgx;
        gbeta[c] += sg;
        if (gx.empty()) continue;
        const double k = gam[c] * inv[s] / static_cast<double>(V);
        T* r = gx.data() + s * V;
        for (int64_t i = 0; i < V; ++i) {
          const double xhat = (p[i] - mu[s]) * inv[s];
          r[i] = static_cast<T>(k * (static_cast<double>(V) * q[i] - sg - xhat * sgx));
        }
      }
      Tensor tx;
      if (!gx.empty()) tx = detail::make<T>(x.shape(), std::move(gx));
      return {tx, detail::make<T>(gamma.shape(), std::vector<T>(ggamma.begin(), ggamma.end())),
              detail::make<T>(beta.shape(), std::vector<T>(gbeta.begin(), gbeta.end()))};
    });
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_eps(eps, "layer_norm");
  if (x.rank() == 0) throw ShapeError("layer_norm needs at least one axis");
  const int64_t E = x.shape().axis(-1);
  const int64_t R = x.numel() / E;
  check_affine(x, gamma, beta, E, "layer_norm");

  std::vector<double> mu(static_cast<std::size_t>(R)), inv(static_cast<std::size_t>(R));
  Tensor out = dispatch(x.dtype(), [&]<typename T>() {
    auto xd = x.data<T>();
    auto gd = gamma.data<T>();
    auto bd = beta.data<T>();
    std::vector<T> y(xd.size());
    for (int64_t r = 0; r < R; ++r) {
      const T* p = xd.data() + r * E;
      double acc = 0.0;
      for (int64_t i = 0; i < E; ++i) acc += p[i];
      const double m = acc / static_cast<double>(E);
      double ss = 0.0;
      for (int64_t i = 0; i < E; ++i) ss += (p[i] - m) * (p[i] - m);
      mu[r] = m;
      inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(E) + eps);
      T* q = y.data() + r * E;
      for (int64_t i = 0; i < E; ++i) q[i] = static_cast<T>((p[i] - m) * inv[r] * gd[i] + bd[i]);
    }
    return detail::make<T>(x.shape(), std::move(y));
  });

  return detail::record(out, "layer_norm", {x, gamma, beta}, [=](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      auto xd = x.data<T>();
      auto gam = gamma.data<T>();
      std::vector<T> gx(x.requires_grad() ? xd.size() : 0);
      std::vector<double> ggamma(static_cast<std::size_t>(E), 0.0), gbeta(static_cast<std::size_t>(E), 0.0);
      std::vector<double> dxhat(static_cast<std::size_t>(E));
      for (int64_t r = 0; r < R; ++r) {
        const T* p = xd.data() + r * E;
        const T* q = gd.data() + r * E;
        double s1 = 0.0, s2 = 0.0;
        for (int64_t i = 0; i < E; ++i) {
          const double xhat = (p[i] - mu[r]) * inv[r];
          ggamma[i] += q[i] * xhat;
          gbeta[i] += q[i];
          dxhat[i] = q[i] * gam[i];
          s1 += dxhat[i];
          s2 += dxhat[i] * xhat;
        }
        if (gx.empty()) continue;
        T* o = gx.data() + r * E;
        for (int64_t i = 0; i < E; ++i) {
          const double xhat = (p[i] - mu[r]) * inv[r];
          o[i] = static_cast<T>(inv[r] / static_cast<double>(E) *
                                (static_cast<double>(E) * dxhat[i] - s1 - xhat * s2));
        }
      }
      Tensor tx;
      if (!gx.empty()) tx = detail::make<T>(x.shape(), std::move(gx));
      return {tx, detail::make<T>(gamma.shape(), std::vector<T>(ggamma.begin(), ggamma.end())),
              detail::make<T>(beta.shape(), std::vector<T>(gbeta.begin(), gbeta.end()))};
    });
  });
}

}  // namespace voxformer::nn
