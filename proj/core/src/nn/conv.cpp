// SPDX-License-Identifier: Apache-2.0
//
// 3D convolution (im2col + GEMM) and 3D pooling kernels.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "../gemm.hpp"
#include "voxformer/nn/functional.hpp"
#include "voxformer/parallel.hpp"

namespace voxformer::nn {

namespace {

using std::int64_t;

std::string ext_str(const Extents3& e) {
  return "(" + std::to_string(e[0]) + "," + std::to_string(e[1]) + "," + std::to_string(e[2]) + ")";
}

void require_volume(const Tensor& x, const char* op) {
  if (x.rank() != 5) {
    throw ShapeError(std::string(op) + " expects [N,C,D,H,W], got " + x.shape().to_string());
  }
}

Extents3 spatial(const Tensor& x) { return {x.shape()[2], x.shape()[3], x.shape()[4]}; }

struct ConvPlan {
  int64_t channels;  // input channels
  Extents3 in;
  Extents3 kernel;
  Extents3 stride;
  Extents3 pad;
  Extents3 out;
  [[nodiscard]] int64_t rows() const { return channels * kernel[0] * kernel[1] * kernel[2]; }
  [[nodiscard]] int64_t cols() const { return out[0] * out[1] * out[2]; }
  [[nodiscard]] int64_t in_volume() const { return in[0] * in[1] * in[2]; }
};

// Range of output indices o with 0 <= o*s - p + k < L.
inline std::pair<int64_t, int64_t> valid_range(int64_t L, int64_t out, int64_t s, int64_t p, int64_t k) {
  int64_t lo = p - k > 0 ? (p - k + s - 1) / s : 0;
  int64_t hi = L - 1 + p - k >= 0 ? (L - 1 + p - k) / s + 1 : 0;
  return {std::min(lo, out), std::clamp(hi, int64_t{0}, out)};
}

template <class T>
void im2col(const ConvPlan& pl, const T* x, T* col) {
  const int64_t kvol = pl.kernel[0] * pl.kernel[1] * pl.kernel[2];
  const int64_t P = pl.cols();
  parallel_for(pl.channels, [&](int64_t c0, int64_t c1) {
    for (int64_t c = c0; c < c1; ++c) {
      const T* xc = x + c * pl.in_volume();
      for (int64_t kz = 0; kz < pl.kernel[0]; ++kz) {
        const auto [z0, z1] = valid_range(pl.in[0], pl.out[0], pl.stride[0], pl.pad[0], kz);
        for (int64_t ky = 0; ky < pl.kernel[1]; ++ky) {
          const auto [y0, y1] = valid_range(pl.in[1], pl.out[1], pl.stride[1], pl.pad[1], ky);
          for (int64_t kx = 0; kx < pl.kernel[2]; ++kx) {
            const auto [x0, x1] = valid_range(pl.in[2], pl.out[2], pl.stride[2], pl.pad[2], kx);
            const int64_t row = c * kvol + (kz * pl.kernel[1] + ky) * pl.kernel[2] + kx;
            T* dst = col + row * P;
            std::fill(dst, dst + P, T(0));
            for (int64_t oz = z0; oz < z1; ++oz) {
              const int64_t iz = oz * pl.stride[0] - pl.pad[0] + kz;
              for (int64_t oy = y0; oy < y1; ++oy) {
                const int64_t iy = oy * pl.stride[1] - pl.pad[1] + ky;
                const T* src = xc + (iz * pl.in[1] + iy) * pl.in[2];
                T* d = dst + (oz * pl.out[1] + oy) * pl.out[2];
                if (x1 <= x0) continue;
                if (pl.stride[2] == 1) {
                  const int64_t ix0 = x0 - pl.pad[2] + kx;
                  std::copy(src + ix0, src + ix0 + (x1 - x0), d + x0);
                } else {
                  for (int64_t ox = x0; ox < x1; ++ox) d[ox] = src[ox * pl.stride[2] - pl.pad[2] + kx];
                }
              }
            }
          }
        }
      }
    }
  });
}

template <class T>
void col2im(const ConvPlan& pl, const T* col, T* x) {
  const int64_t kvol = pl.kernel[0] * pl.kernel[1] * pl.kernel[2];
  const int64_t P = pl.cols();
  parallel_for(pl.channels, [&](int64_t c0, int64_t c1) {
    for (int64_t c = c0; c < c1; ++c) {
      T* xc = x + c * pl.in_volume();
      for (int64_t kz = 0; kz < pl.kernel[0]; ++kz) {
        const auto [z0, z1] = valid_range(pl.in[0], pl.out[0], pl.stride[0], pl.pad[0], kz);
        for (int64_t ky = 0; ky < pl.kernel[1]; ++ky) {
          const auto [y0, y1] = valid_range(pl.in[1], pl.out[1], pl.stride[1], pl.pad[1], ky);
          for (int64_t kx = 0; kx < pl.kernel[2]; ++kx) {
            const auto [x0, x1] = valid_range(pl.in[2], pl.out[2], pl.stride[2], pl.pad[2], kx);
            const int64_t row = c * kvol + (kz * pl.kernel[1] + ky) * pl.kernel[2] + kx;
            const T* src = col + row * P;
            for (int64_t oz = z0; oz < z1; ++oz) {
              const int64_t iz = oz * pl.stride[0] - pl.pad[0] + kz;
              for (int64_t oy = y0; oy < y1; ++oy) {
                const int64_t iy = oy * pl.stride[1] - pl.pad[1] + ky;
                T* d = xc + (iz * pl.in[1] + iy) * pl.in[2];
                const T* s = src + (oz * pl.out[1] + oy) * pl.out[2];
                for (int64_t ox = x0; ox < x1; ++ox) d[ox * pl.stride[2] - pl.pad[2] + kx] += s[ox];
              }
            }
          }
        }
      }
    }
  });
}

bool is_pointwise(const ConvPlan& pl) {
  return pl.kernel == Extents3{1, 1, 1} && pl.stride == Extents3{1, 1, 1} && pl.pad == Extents3{0, 0, 0};
}

}  // namespace

Extents3 conv_output_extents(const Extents3& input, const Extents3& kernel, const Extents3& stride,
                             const Extents3& padding, const char* what) {
  Extents3 out{};
  for (int i = 0; i < 3; ++i) {
    if (kernel[i] < 1 || stride[i] < 1 || padding[i] < 0) {
      throw ShapeError(std::string(what) + ": kernel and stride must be >= 1 and padding >= 0");
    }
    const int64_t span = input[i] + 2 * padding[i] - kernel[i];
    if (span < 0) {
      throw ShapeError(std::string(what) + ": window " + ext_str(kernel) + " larger than padded input " +
                       ext_str(input) + " with padding " + ext_str(padding));
    }
    out[i] = span / stride[i] + 1;
  }
  return out;
}

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv3dGeometry& geometry) {
  require_volume(x, "conv3d");
  if (weight.rank() != 5) throw ShapeError("conv3d weight must be [Cout,Cin,kd,kh,kw], got " + weight.shape().to_string());
  if (weight.dtype() != x.dtype()) throw Error("conv3d: dtype mismatch between input and weight");
  const int64_t N = x.shape()[0];
  const int64_t cin = x.shape()[1];
  const int64_t cout = weight.shape()[0];
  if (weight.shape()[1] != cin) {
    throw ShapeError("conv3d channel mismatch: input has " + std::to_string(cin) + " channels, weight expects " +
                     std::to_string(weight.shape()[1]));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != cout)) {
    throw ShapeError("conv3d bias must be [" + std::to_string(cout) + "], got " + bias.shape().to_string());
  }
  ConvPlan pl{cin, spatial(x), {weight.shape()[2], weight.shape()[3], weight.shape()[4]},
              geometry.stride, geometry.padding, {}};
  pl.out = conv_output_extents(pl.in, pl.kernel, pl.stride, pl.pad);
  const int64_t K = pl.rows();
  const int64_t P = pl.cols();
  const Shape out_shape{N, cout, pl.out[0], pl.out[1], pl.out[2]};
  const bool pointwise = is_pointwise(pl);

  Tensor out = dispatch(x.dtype(), [&]<typename T>() {
    auto xd = x.data<T>();
    auto wd = weight.data<T>();
    std::vector<T> y(static_cast<std::size_t>(out_shape.numel()));
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(K * P));
    for (int64_t n = 0; n < N; ++n) {
      const T* xn = xd.data() + n * cin * pl.in_volume();
      const T* cp = xn;
      if (!pointwise) {
        im2col(pl, xn, col.data());
        cp = col.data();
      }
      T* yn = y.data() + n * cout * P;
      detail::gemm<T>(false, false, cout, P, K, T(1), wd.data(), K, cp, P, T(0), yn, P);
      if (bias.defined()) {
        auto bd = bias.data<T>();
        for (int64_t c = 0; c < cout; ++c) {
          T* row = yn + c * P;
          for (int64_t p = 0; p < P; ++p) row[p] += bd[c];
        }
      }
    }
    return detail::make<T>(out_shape, std::move(y));
  });

  return detail::record(out, "conv3d", {x, weight, bias}, [=](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      auto xd = x.data<T>();
      auto wd = weight.data<T>();
      const bool need_x = x.requires_grad();
      const bool need_w = weight.requires_grad();
      std::vector<T> gx(need_x ? static_cast<std::size_t>(x.numel()) : 0, T(0));
      std::vector<T> gw(need_w ? static_cast<std::size_t>(weight.numel()) : 0, T(0));
      std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(K * P));
      std::vector<T> gcol(pointwise || !need_x ? 0 : static_cast<std::size_t>(K * P));
      for (int64_t n = 0; n < N; ++n) {
        const T* gn = gd.data() + n * cout * P;
        const T* xn = xd.data() + n * cin * pl.in_volume();
        if (need_w) {
          const T* cp = xn;
          if (!pointwise) {
            im2col(pl, xn, col.data());
            cp = col.data();
          }
          detail::gemm<T>(false, true, cout, K, P, T(1), gn, P, cp, P, T(1), gw.data(), K);
        }
        if (need_x) {
          T* gxn = gx.data() + n * cin * pl.in_volume();
          if (pointwise) {
            detail::gemm<T>(true, false, K, P, cout, T(1), wd.data(), K, gn, P, T(0), gxn, P);
          } else {
            detail::gemm<T>(true, false, K, P, cout, T(1), wd.data(), K, gn, P, T(0), gcol.data(), P);
            col2im(pl, gcol.data(), gxn);
          }
        }
      }
      Tensor tx, tw, tb;
      if (need_x) tx = detail::make<T>(x.shape(), std::move(gx));
      if (need_w) tw = detail::make<T>(weight.shape(), std::move(gw));
      if (bias.defined() && bias.requires_grad()) {
        std::vector<T> gb(static_cast<std::size_t>(cout), T(0));
        for (int64_t n = 0; n < N; ++n) {
          for (int64_t c = 0; c < cout; ++c) {
            const T* row = gd.data() + (n * cout + c) * P;
            T s = 0;
            for (int64_t p = 0; p < P; ++p) s += row[p];
            gb[static_cast<std::size_t>(c)] += s;
          }
        }
        tb = detail::make<T>(bias.shape(), std::move(gb));
      }
      return {tx, tw, tb};
    });
  });
}

MaxPoolResult maxpool3d_with_indices(const Tensor& x, const Pool3dGeometry& geo) {
  require_volume(x, "maxpool3d");
  for (int i = 0; i < 3; ++i) {
    if (geo.padding[i] * 2 > geo.kernel[i]) {
      throw ShapeError("maxpool3d: padding must be at most half the kernel");
    }
  }
  const Extents3 in = spatial(x);
  const Extents3 out = conv_output_extents(in, geo.kernel, geo.stride, geo.padding, "maxpool3d");
  const int64_t N = x.shape()[0], C = x.shape()[1];
  const Shape out_shape{N, C, out[0], out[1], out[2]};
  const int64_t in_vol = in[0] * in[1] * in[2];
  const int64_t out_vol = out[0] * out[1] * out[2];
  std::vector<int64_t> indices(static_cast<std::size_t>(out_shape.numel()));

  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto xd = x.data<T>();
    std::vector<T> v(static_cast<std::size_t>(out_shape.numel()));
    parallel_for(N * C, [&](int64_t s0, int64_t s1) {
      for (int64_t s = s0; s < s1; ++s) {
        const int64_t base = s * in_vol;
        for (int64_t oz = 0; oz < out[0]; ++oz) {
          for (int64_t oy = 0; oy < out[1]; ++oy) {
            for (int64_t ox = 0; ox < out[2]; ++ox) {
              T best = -std::numeric_limits<T>::infinity();
              int64_t arg = -1;
              for (int64_t kz = 0; kz < geo.kernel[0]; ++kz) {
                const int64_t iz = oz * geo.stride[0] - geo.padding[0] + kz;
                if (iz < 0 || iz >= in[0]) continue;
                for (int64_t ky = 0; ky < geo.kernel[1]; ++ky) {
                  const int64_t iy = oy * geo.stride[1] - geo.padding[1] + ky;
                  if (iy < 0 || iy >= in[1]) continue;
                  for (int64_t kx = 0; kx < geo.kernel[2]; ++kx) {
                    const int64_t ix = ox * geo.stride[2] - geo.padding[2] + kx;
                    if (ix < 0 || ix >= in[2]) continue;
                    const int64_t idx = base + (iz * in[1] + iy) * in[2] + ix;
                    if (arg < 0 || xd[static_cast<std::size_t>(idx)] > best) {
                      best = xd[static_cast<std::size_t>(idx)];
                      arg = idx;
                    }
                  }
                }
              }
              const int64_t o = s * out_vol + (oz * out[1] + oy) * out[2] + ox;
              v[static_cast<std::size_t>(o)] = best;
              indices[static_cast<std::size_t>(o)] = arg;
            }
          }
        }
      }
    });
    return detail::make<T>(out_shape, std::move(v));
  });

  auto saved = std::make_shared<std::vector<int64_t>>(indices);
  y = detail::record(y, "maxpool3d", {x}, [saved, in_shape = x.shape()](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      std::vector<T> gx(static_cast<std::size_t>(in_shape.numel()), T(0));
      for (std::size_t o = 0; o < gd.size(); ++o) gx[static_cast<std::size_t>((*saved)[o])] += gd[o];
      return {detail::make<T>(in_shape, std::move(gx))};
    });
  });
  return {y, std::move(indices)};
}

Tensor maxpool3d(const Tensor& x, const Pool3dGeometry& geometry) {
  return maxpool3d_with_indices(x, geometry).output;
}

Tensor adaptive_avg_pool3d(const Tensor& x, const Extents3& output) {
  require_volume(x, "adaptive_avg_pool3d");
  for (auto o : output) {
    if (o < 1) throw ShapeError("adaptive_avg_pool3d output extents must be >= 1");
  }
  const Extents3 in = spatial(x);
  const int64_t N = x.shape()[0], C = x.shape()[1];
  const Shape out_shape{N, C, output[0], output[1], output[2]};
  // Bin boundaries per axis.
  std::array<std::vector<std::pair<int64_t, int64_t>>, 3> bins;
  for (int a = 0; a < 3; ++a) {
    for (int64_t i = 0; i < output[a]; ++i) {
      const int64_t lo = (i * in[a]) / output[a];
      const int64_t hi = ((i + 1) * in[a] + output[a] - 1) / output[a];
      bins[a].emplace_back(lo, hi);
    }
  }
  const int64_t in_vol = in[0] * in[1] * in[2];
  const int64_t out_vol = output[0] * output[1] * output[2];

  auto sweep = [bins, in, output, N, C, in_vol, out_vol]<typename T>(auto&& visit) {
    for (int64_t s = 0; s < N * C; ++s) {
      for (int64_t oz = 0; oz < output[0]; ++oz) {
        for (int64_t oy = 0; oy < output[1]; ++oy) {
          for (int64_t ox = 0; ox < output[2]; ++ox) {
            const auto [z0, z1] = bins[0][oz];
            const auto [y0, y1] = bins[1][oy];
            const auto [x0, x1] = bins[2][ox];
            const T inv = T(1) / static_cast<T>((z1 - z0) * (y1 - y0) * (x1 - x0));
            const int64_t o = s * out_vol + (oz * output[1] + oy) * output[2] + ox;
            for (int64_t z = z0; z < z1; ++z) {
              for (int64_t y = y0; y < y1; ++y) {
                for (int64_t xx = x0; xx < x1; ++xx) visit(o, s * in_vol + (z * in[1] + y) * in[2] + xx, inv);
              }
            }
          }
        }
      }
    }
  };

  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    auto xd = x.data<T>();
    std::vector<T> v(static_cast<std::size_t>(out_shape.numel()), T(0));
    sweep.template operator()<T>([&](int64_t o, int64_t i, T inv) { v[o] += xd[i] * inv; });
    return detail::make<T>(out_shape, std::move(v));
  });
  return detail::record(y, "adaptive_avg_pool3d", {x}, [=, in_shape = x.shape()](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      std::vector<T> gx(static_cast<std::size_t>(in_shape.numel()), T(0));
      sweep.template operator()<T>([&](int64_t o, int64_t i, T inv) { gx[i] += gd[o] * inv; });
      return {detail::make<T>(in_shape, std::move(gx))};
    });
  });
}

}  // namespace voxformer::nn
