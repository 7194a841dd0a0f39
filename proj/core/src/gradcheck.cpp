// SPDX-License-Identifier: Apache-2.0
#include "voxformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "voxformer/ops.hpp"
#include "voxformer/rng.hpp"

namespace voxformer {

std::string GradcheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "pass" : "FAIL") << " max_rel_error=" << max_rel_error << " coords=" << coords.size();
  return os.str();
}

namespace {

double scalarize(const Tensor& y, const Tensor& projection) {
  if (!std::isfinite(y.numel() == 1 ? y.item() : 0.0)) {
    throw NumericError("gradcheck: function produced a non-finite value");
  }
  if (y.numel() == 1) return y.item();
  double s = 0.0;
  auto yd = y.data<double>();
  auto pd = projection.data<double>();
  for (std::size_t i = 0; i < yd.size(); ++i) {
    if (!std::isfinite(yd[i])) throw NumericError("gradcheck: function produced a non-finite value");
    s += yd[i] * pd[i];
  }
  return s;
}

}  // namespace

GradcheckReport gradcheck(const TensorFunction& f, std::vector<Tensor> inputs,
                          const GradcheckOptions& options) {
  if (!(options.eps > 0.0)) throw ConfigError("gradcheck: eps must be positive");
  for (auto& in : inputs) {
    if (in.dtype() != DType::f64) throw ConfigError("gradcheck requires f64 inputs");
    if (!in.is_leaf()) throw ConfigError("gradcheck inputs must be leaf tensors");
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Rng rng(options.seed);

  // Analytic pass.
  Tensor y = f(inputs);
  Tensor projection;
  Tensor loss = y;
  if (y.numel() != 1) {
    std::vector<double> w(static_cast<std::size_t>(y.numel()));
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    projection = Tensor::from_values(y.shape(), w, DType::f64);
    loss = sum(mul(y, projection));
  }
  if (!std::isfinite(loss.item())) throw NumericError("gradcheck: function produced a non-finite value");
  if (loss.requires_grad()) loss.backward();

  GradcheckReport report;
  report.passed = true;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor& in = inputs[i];
    const auto n = static_cast<std::size_t>(in.numel());
    std::vector<std::int64_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (options.coords_per_input && *options.coords_per_input < n) {
      for (std::size_t j = 0; j < *options.coords_per_input; ++j) {
        std::swap(coords[j], coords[j + rng.below(n - j)]);
      }
      coords.resize(*options.coords_per_input);
    }
    std::vector<double> analytic(n, 0.0);
    if (in.has_grad()) analytic = in.grad().to_vector();

    for (auto idx : coords) {
      auto data = in.mutable_data<double>();
      const double saved = data[static_cast<std::size_t>(idx)];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard no_grad;
        data[static_cast<std::size_t>(idx)] = saved + options.eps;
        plus = scalarize(f(inputs), projection);
        data[static_cast<std::size_t>(idx)] = saved - options.eps;
        minus = scalarize(f(inputs), projection);
      }
      data[static_cast<std::size_t>(idx)] = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = analytic[static_cast<std::size_t>(idx)];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.denom_floor});
      const double err = std::abs(a - numeric) / denom;
      report.coords.push_back({i, idx, a, numeric, err});
      report.max_rel_error = std::max(report.max_rel_error, err);
      if (!(err < options.tol)) report.passed = false;
    }
  }
  return report;
}

}  // namespace voxformer
