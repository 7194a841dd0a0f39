// SPDX-License-Identifier: Apache-2.0
#include "voxformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "gemm.hpp"

namespace voxformer {

namespace {

using std::int64_t;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw Error(std::string(op) + ": dtype mismatch (" + std::string(dtype_name(a.dtype())) +
                " vs " + std::string(dtype_name(b.dtype())) + ")");
  }
}

bool is_scalar_operand(const Tensor& a, const Tensor& b) {
  return !(a.shape() == b.shape()) && b.numel() == 1;
}

void check_elementwise(const Tensor& a, const Tensor& b, const char* op) {
  require_same_dtype(a, b, op);
  if (!(a.shape() == b.shape()) && b.numel() != 1) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().to_string() + " vs " +
                     b.shape().to_string());
  }
}

enum class Binary { add, sub, mul };

template <class T>
std::vector<T> binary_kernel(Binary op, std::span<const T> a, std::span<const T> b) {
  std::vector<T> out(a.size());
  const bool scalar = b.size() == 1 && a.size() != 1;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T bv = scalar ? b[0] : b[i];
    switch (op) {
      case Binary::add: out[i] = a[i] + bv; break;
      case Binary::sub: out[i] = a[i] - bv; break;
      case Binary::mul: out[i] = a[i] * bv; break;
    }
  }
  return out;
}

Tensor binary(Binary op, const Tensor& a, const Tensor& b, const char* name) {
  check_elementwise(a, b, name);
  const bool scalar = is_scalar_operand(a, b);
  Tensor out = dispatch(a.dtype(), [&]<typename T>() {
    return detail::make<T>(a.shape(), binary_kernel<T>(op, a.data<T>(), b.data<T>()));
  });
  const bool need_a = a.requires_grad();
  const bool need_b = b.requires_grad();
  const Shape b_shape = b.shape();
  return detail::record(out, name, {a, b}, [=](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      Tensor ga, gb;
      if (need_a) {
        if (op == Binary::mul) {
          auto bd = b.data<T>();
          std::vector<T> v(gd.size());
          for (std::size_t i = 0; i < gd.size(); ++i) v[i] = gd[i] * (scalar ? bd[0] : bd[i]);
          ga = detail::make<T>(a.shape(), std::move(v));
        } else {
          ga = detail::make<T>(a.shape(), std::vector<T>(gd.begin(), gd.end()));
        }
      }
      if (need_b) {
        const T sign = op == Binary::sub ? T(-1) : T(1);
        std::vector<T> v;
        if (op == Binary::mul) {
          auto ad = a.data<T>();
          v.resize(gd.size());
          for (std::size_t i = 0; i < gd.size(); ++i) v[i] = gd[i] * ad[i];
        } else {
          v.assign(gd.begin(), gd.end());
          for (auto& x : v) x *= sign;
        }
        if (scalar) {
          T s = 0;
          for (auto x : v) s += x;
          v.assign(1, s);
        }
        gb = detail::make<T>(b_shape, std::move(v));
      }
      return {ga, gb};
    });
  });
}

template <class F>
Tensor unary(const Tensor& x, const char* name, F&& fwd_and_deriv) {
  // fwd_and_deriv(value) -> pair<output, derivative>
  Tensor out;
  std::shared_ptr<Buffer> deriv;
  dispatch(x.dtype(), [&]<typename T>() {
    auto xd = x.data<T>();
    std::vector<T> y(xd.size()), d(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) {
      auto [yi, di] = fwd_and_deriv(static_cast<double>(xd[i]));
      y[i] = static_cast<T>(yi);
      d[i] = static_cast<T>(di);
    }
    out = detail::make<T>(x.shape(), std::move(y));
    if (x.requires_grad() && grad_mode_enabled()) deriv = std::make_shared<Buffer>(std::move(d));
  });
  return detail::record(out, name, {x}, [deriv, shape = x.shape()](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      const auto& d = std::get<std::vector<T>>(*deriv);
      std::vector<T> v(gd.size());
      for (std::size_t i = 0; i < gd.size(); ++i) v[i] = gd[i] * d[i];
      return {detail::make<T>(shape, std::move(v))};
    });
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::add, a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::sub, a, b, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::mul, a, b, "mul"); }
Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b, a.dtype())); }
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b, a.dtype())); }

Tensor leaky_relu(const Tensor& x, double k) {
  if (!(k > 0.0 && k < 1.0)) {
    throw ConfigError("leaky_relu slope must lie in (0, 1), got " + std::to_string(k));
  }
  return unary(x, "leaky_relu", [k](double v) {
    return v >= 0.0 ? std::pair{v, 1.0} : std::pair{k * v, k};
  });
}

Tensor gelu(const Tensor& x) {
  return unary(x, "gelu", [](double v) {
    const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
    return std::pair{v * cdf, cdf + v * pdf};
  });
}

Tensor sum(const Tensor& x) {
  Tensor out = dispatch(x.dtype(), [&]<typename T>() {
    T s = 0;
    for (auto v : x.data<T>()) s += v;
    return detail::make<T>(Shape{}, std::vector<T>{s});
  });
  return detail::record(out, "sum", {x}, [shape = x.shape()](const Tensor& g) -> std::vector<Tensor> {
    return {Tensor::full(shape, g.item(), g.dtype())};
  });
}

Tensor mean(const Tensor& x) { return mul(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "matmul");
  if (b.rank() != 2 || (a.rank() != 2 && a.rank() != 3)) {
    throw ShapeError("matmul expects [m,k] or [B,m,k] times [k,n], got " + a.shape().to_string() +
                     " x " + b.shape().to_string());
  }
  const int64_t k = a.shape().axis(-1);
  const int64_t m = a.numel() / k;  // batch folded into rows
  const int64_t n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul inner extents disagree: " + a.shape().to_string() + " x " +
                     b.shape().to_string());
  }
  Shape out_shape = a.rank() == 2 ? Shape{a.shape()[0], n} : Shape{a.shape()[0], a.shape()[1], n};
  Tensor out = dispatch(a.dtype(), [&]<typename T>() {
    std::vector<T> c(static_cast<std::size_t>(m * n));
    detail::gemm<T>(false, false, m, n, k, T(1), a.data<T>().data(), k, b.data<T>().data(), n, T(0),
                    c.data(), n);
    return detail::make<T>(out_shape, std::move(c));
  });
  return detail::record(out, "matmul", {a, b}, [=](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      Tensor ga, gb;
      if (a.requires_grad()) {
        std::vector<T> v(static_cast<std::size_t>(m * k));
        detail::gemm<T>(false, true, m, k, n, T(1), g.data<T>().data(), n, b.data<T>().data(), n,
                        T(0), v.data(), k);
        ga = detail::make<T>(a.shape(), std::move(v));
      }
      if (b.requires_grad()) {
        std::vector<T> v(static_cast<std::size_t>(k * n));
        detail::gemm<T>(true, false, k, n, m, T(1), a.data<T>().data(), k, g.data<T>().data(), n,
                        T(0), v.data(), n);
        gb = detail::make<T>(b.shape(), std::move(v));
      }
      return {ga, gb};
    });
  });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape.numel() != x.numel()) {
    throw ShapeError("reshape from " + x.shape().to_string() + " to " + shape.to_string() +
                     " changes the element count");
  }
  Tensor out = Tensor::wrap(shape, x.dtype(), x.impl()->data);
  return detail::record(out, "reshape", {x}, [in_shape = x.shape()](const Tensor& g) -> std::vector<Tensor> {
    return {Tensor::wrap(in_shape, g.dtype(), g.impl()->data)};
  });
}

Tensor flatten(const Tensor& x, int start_axis) {
  const int r = static_cast<int>(x.rank());
  if (start_axis < 0) start_axis += r;
  if (start_axis < 0 || (r > 0 && start_axis >= r)) {
    throw ShapeError("flatten start axis out of range for shape " + x.shape().to_string());
  }
  std::vector<int64_t> dims(x.shape().dims().begin(), x.shape().dims().begin() + start_axis);
  int64_t tail = 1;
  for (int i = start_axis; i < r; ++i) tail *= x.shape()[static_cast<std::size_t>(i)];
  dims.push_back(tail);
  return reshape(x, Shape(dims));
}

namespace {

struct AxisSplit {
  int64_t outer = 1;
  int64_t extent = 1;
  int64_t inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.extent = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.rank(); ++i) r.inner *= s[i];
  return r;
}

int normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError(std::string(op) + ": axis out of range");
  return a;
}

}  // namespace

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Tensor& first = parts[0];
  const int ax = normalize_axis(axis, first.rank(), "concat");
  int64_t total = 0;
  for (const auto& p : parts) {
    require_same_dtype(first, p, "concat");
    bool ok = p.rank() == first.rank();
    for (std::size_t i = 0; ok && i < p.rank(); ++i) {
      if (static_cast<int>(i) != ax && p.shape()[i] != first.shape()[i]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat along axis " + std::to_string(ax) + ": incompatible shapes " +
                       first.shape().to_string() + " and " + p.shape().to_string());
    }
    total += p.shape()[static_cast<std::size_t>(ax)];
  }
  auto dims = first.shape().to_vector();
  dims[static_cast<std::size_t>(ax)] = total;
  const Shape out_shape(dims);
  const auto base = split_axis(out_shape, ax);
  std::vector<int64_t> extents;
  for (const auto& p : parts) extents.push_back(p.shape()[static_cast<std::size_t>(ax)]);

  Tensor out = dispatch(first.dtype(), [&]<typename T>() {
    std::vector<T> v(static_cast<std::size_t>(out_shape.numel()));
    int64_t offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      auto src = parts[pi].data<T>();
      const int64_t block = extents[pi] * base.inner;
      for (int64_t o = 0; o < base.outer; ++o) {
        std::copy_n(src.data() + o * block, block, v.data() + o * total * base.inner + offset);
      }
      offset += block;
    }
    return detail::make<T>(out_shape, std::move(v));
  });
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  std::vector<Shape> shapes;
  for (const auto& p : parts) shapes.push_back(p.shape());
  return detail::record(out, "concat", inputs, [=](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      std::vector<Tensor> grads;
      int64_t offset = 0;
      for (std::size_t pi = 0; pi < shapes.size(); ++pi) {
        const int64_t block = extents[pi] * base.inner;
        std::vector<T> v(static_cast<std::size_t>(shapes[pi].numel()));
        for (int64_t o = 0; o < base.outer; ++o) {
          std::copy_n(gd.data() + o * total * base.inner + offset, block, v.data() + o * block);
        }
        offset += block;
        grads.push_back(detail::make<T>(shapes[pi], std::move(v)));
      }
      return grads;
    });
  });
}

Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length) {
  const int ax = normalize_axis(axis, x.rank(), "slice");
  const auto sp = split_axis(x.shape(), ax);
  if (start < 0 || length < 1 || start + length > sp.extent) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(ax) + " of " + x.shape().to_string());
  }
  auto dims = x.shape().to_vector();
  dims[static_cast<std::size_t>(ax)] = length;
  const Shape out_shape(dims);
  Tensor out = dispatch(x.dtype(), [&]<typename T>() {
    auto src = x.data<T>();
    std::vector<T> v(static_cast<std::size_t>(out_shape.numel()));
    for (int64_t o = 0; o < sp.outer; ++o) {
      std::copy_n(src.data() + (o * sp.extent + start) * sp.inner, length * sp.inner,
                  v.data() + o * length * sp.inner);
    }
    return detail::make<T>(out_shape, std::move(v));
  });
  return detail::record(out, "slice", {x}, [=, in_shape = x.shape()](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      std::vector<T> v(static_cast<std::size_t>(in_shape.numel()), T(0));
      for (int64_t o = 0; o < sp.outer; ++o) {
        std::copy_n(gd.data() + o * length * sp.inner, length * sp.inner,
                    v.data() + (o * sp.extent + start) * sp.inner);
      }
      return {detail::make<T>(in_shape, std::move(v))};
    });
  });
}

namespace {

// Copies between a [L, d, h, w] volume and a [L, D, H, W] volume where the
// small one sits at `offset` inside the large one.
template <class T>
void copy_window(std::span<const T> src, const int64_t* src_ext, std::span<T> dst,
                 const int64_t* dst_ext, int64_t leading, const int64_t* src_off,
                 const int64_t* dst_off, const int64_t* count) {
  for (int64_t l = 0; l < leading; ++l) {
    for (int64_t z = 0; z < count[0]; ++z) {
      for (int64_t y = 0; y < count[1]; ++y) {
        const int64_t s = ((l * src_ext[0] + z + src_off[0]) * src_ext[1] + y + src_off[1]) * src_ext[2] + src_off[2];
        const int64_t d = ((l * dst_ext[0] + z + dst_off[0]) * dst_ext[1] + y + dst_off[1]) * dst_ext[2] + dst_off[2];
        std::copy_n(src.data() + s, count[2], dst.data() + d);
      }
    }
  }
}

Tensor pad_or_crop(const Tensor& x, const Pad3d& amounts, bool pad, const char* name) {
  if (x.rank() < 3) throw ShapeError(std::string(name) + " needs at least 3 axes, got " + x.shape().to_string());
  const std::size_t r = x.rank();
  int64_t in_ext[3], out_ext[3], lead = 1;
  for (std::size_t i = 0; i + 3 < r; ++i) lead *= x.shape()[i];
  auto dims = x.shape().to_vector();
  for (int i = 0; i < 3; ++i) {
    const auto [before, after] = amounts[static_cast<std::size_t>(i)];
    if (before < 0 || after < 0) throw ShapeError(std::string(name) + " amounts must be non-negative");
    in_ext[i] = x.shape()[r - 3 + static_cast<std::size_t>(i)];
    out_ext[i] = pad ? in_ext[i] + before + after : in_ext[i] - before - after;
    if (out_ext[i] < 1) {
      throw ShapeError(std::string(name) + " removes the whole of axis " + std::to_string(r - 3 + i) +
                       " of " + x.shape().to_string());
    }
    dims[r - 3 + static_cast<std::size_t>(i)] = out_ext[i];
  }
  const Shape out_shape(dims);
  int64_t big_off[3], zero_off[3] = {0, 0, 0}, count[3];
  for (int i = 0; i < 3; ++i) {
    big_off[i] = amounts[static_cast<std::size_t>(i)].first;
    count[i] = pad ? in_ext[i] : out_ext[i];
  }
  auto run = [&]<typename T>(std::span<const T> src, const int64_t* s_ext, const int64_t* d_ext,
                             const Shape& d_shape, bool src_is_small) {
    std::vector<T> v(static_cast<std::size_t>(d_shape.numel()), T(0));
    copy_window<T>(src, s_ext, std::span<T>(v), d_ext, lead, src_is_small ? zero_off : big_off,
                   src_is_small ? big_off : zero_off, count);
    return detail::make<T>(d_shape, std::move(v));
  };
  Tensor out = dispatch(x.dtype(), [&]<typename T>() {
    return run.template operator()<T>(x.data<T>(), in_ext, out_ext, out_shape, pad);
  });
  std::array<int64_t, 3> ie{in_ext[0], in_ext[1], in_ext[2]}, oe{out_ext[0], out_ext[1], out_ext[2]};
  std::array<int64_t, 3> bo{big_off[0], big_off[1], big_off[2]}, cn{count[0], count[1], count[2]};
  return detail::record(out, name, {x}, [=, in_shape = x.shape()](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      std::vector<T> v(static_cast<std::size_t>(in_shape.numel()), T(0));
      const int64_t zo[3] = {0, 0, 0};
      // Reverse direction: gradient flows from output layout to input layout.
      copy_window<T>(g.data<T>(), oe.data(), std::span<T>(v), ie.data(), lead,
                     pad ? bo.data() : zo, pad ? zo : bo.data(), cn.data());
      return {detail::make<T>(in_shape, std::move(v))};
    });
  });
}

}  // namespace

Tensor pad3d(const Tensor& x, const Pad3d& pads) { return pad_or_crop(x, pads, true, "pad3d"); }
Tensor crop3d(const Tensor& x, const Pad3d& amounts) { return pad_or_crop(x, amounts, false, "crop3d"); }

Tensor add_broadcast(const Tensor& x, const Tensor& b) {
  require_same_dtype(x, b, "add_broadcast");
  bool ok = b.rank() <= x.rank();
  for (std::size_t i = 0; ok && i < b.rank(); ++i) {
    if (b.shape()[b.rank() - 1 - i] != x.shape()[x.rank() - 1 - i]) ok = false;
  }
  if (!ok) {
    throw ShapeError("add_broadcast: " + b.shape().to_string() + " is not a trailing sub-shape of " +
                     x.shape().to_string());
  }
  const int64_t inner = b.numel();
  const int64_t outer = x.numel() / inner;
  Tensor out = dispatch(x.dtype(), [&]<typename T>() {
    auto xd = x.data<T>();
    auto bd = b.data<T>();
    std::vector<T> v(xd.size());
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t i = 0; i < inner; ++i) v[o * inner + i] = xd[o * inner + i] + bd[i];
    }
    return detail::make<T>(x.shape(), std::move(v));
  });
  return detail::record(out, "add_broadcast", {x, b},
                        [=, xs = x.shape(), bs = b.shape()](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      std::vector<T> gb(static_cast<std::size_t>(inner), T(0));
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) gb[i] += gd[o * inner + i];
      }
      return {detail::make<T>(xs, std::vector<T>(gd.begin(), gd.end())), detail::make<T>(bs, std::move(gb))};
    });
  });
}

Tensor repeat_leading(const Tensor& x, int64_t n) {
  if (x.rank() == 0 || x.shape()[0] != 1 || n < 1) {
    throw ShapeError("repeat_leading needs a leading extent of 1 and n >= 1, got " + x.shape().to_string());
  }
  auto dims = x.shape().to_vector();
  dims[0] = n;
  const Shape out_shape(dims);
  const int64_t block = x.numel();
  Tensor out = dispatch(x.dtype(), [&]<typename T>() {
    auto xd = x.data<T>();
    std::vector<T> v(static_cast<std::size_t>(block * n));
    for (int64_t i = 0; i < n; ++i) std::copy(xd.begin(), xd.end(), v.begin() + i * block);
    return detail::make<T>(out_shape, std::move(v));
  });
  return detail::record(out, "repeat_leading", {x}, [=, xs = x.shape()](const Tensor& g) -> std::vector<Tensor> {
    return dispatch(g.dtype(), [&]<typename T>() -> std::vector<Tensor> {
      auto gd = g.data<T>();
      std::vector<T> v(static_cast<std::size_t>(block), T(0));
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < block; ++j) v[j] += gd[i * block + j];
      }
      return {detail::make<T>(xs, std::move(v))};
    });
  });
}

}  // namespace voxformer
